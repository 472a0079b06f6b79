//! Proposal samplers: the random sampler, its doubled-quota variant, the
//! class-biased pair CBS(T)/CBS(H) and the class-exclusive ablation.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::assign::{LabeledProposal, ProposalPartition};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub num_samples: usize,
    pub pos_fraction: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_samples: 512,
            pos_fraction: 0.25,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::Config("sampler num_samples must be >= 1".into()));
        }
        if !(self.pos_fraction > 0.0 && self.pos_fraction < 1.0) {
            return Err(Error::Config(format!(
                "sampler pos_fraction {} outside (0, 1)",
                self.pos_fraction
            )));
        }
        Ok(())
    }

    /// Positive quota `round(N_s * alpha)`.
    pub fn num_pos(&self) -> usize {
        (self.num_samples as f64 * self.pos_fraction).round() as usize
    }

    pub fn num_neg(&self) -> usize {
        self.num_samples - self.num_pos()
    }

    pub fn doubled(&self) -> Self {
        Self {
            num_samples: 2 * self.num_samples,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bias {
    TailBiased,
    HeadBiased,
    Unbiased,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub positives: Vec<LabeledProposal>,
    pub negatives: Vec<LabeledProposal>,
    pub bias: Bias,
}

impl SampleSet {
    pub fn empty(bias: Bias) -> Self {
        Self {
            positives: Vec::new(),
            negatives: Vec::new(),
            bias,
        }
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &LabeledProposal> {
        self.positives.iter().chain(&self.negatives)
    }

    /// Concatenation of two sets, keeping duplicates.
    pub fn merged(mut self, other: SampleSet) -> SampleSet {
        self.positives.extend(other.positives);
        self.negatives.extend(other.negatives);
        self.bias = Bias::Unbiased;
        self
    }
}

/// Uniform sample of `num` elements without replacement, or the whole pool
/// when `num >= pool.len()`.
pub fn sub_sample<T: Clone>(pool: &[T], num: usize, rng: &mut Rng) -> Vec<T> {
    if num >= pool.len() {
        return pool.to_vec();
    }
    index::sample(rng, pool.len(), num)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect()
}

pub fn random_sampler(partition: &ProposalPartition, cfg: &SamplerConfig, rng: &mut Rng) -> SampleSet {
    let pool: Vec<LabeledProposal> = partition
        .s_t
        .iter()
        .chain(&partition.s_h)
        .cloned()
        .collect();
    let negatives = sub_sample(&partition.s_b, cfg.num_neg(), rng);
    let positives = sub_sample(&pool, cfg.num_pos(), rng);
    SampleSet {
        positives,
        negatives,
        bias: Bias::Unbiased,
    }
}

/// Random sampler with the sample budget doubled.
pub fn rs_dbl(partition: &ProposalPartition, cfg: &SamplerConfig, rng: &mut Rng) -> SampleSet {
    random_sampler(partition, &cfg.doubled(), rng)
}

/// One biased pass: background, then the preferred pool, then (optionally)
/// top up from the other pool when the preferred one is short.
fn biased_pass(
    preferred: &[LabeledProposal],
    other: &[LabeledProposal],
    background: &[LabeledProposal],
    cfg: &SamplerConfig,
    top_up: bool,
    bias: Bias,
    rng: &mut Rng,
) -> SampleSet {
    let n_pos = cfg.num_pos();
    let negatives = sub_sample(background, cfg.num_neg(), rng);
    let mut positives = sub_sample(preferred, n_pos, rng);
    if top_up && preferred.len() < n_pos {
        positives.extend(sub_sample(other, n_pos - preferred.len(), rng));
    }
    SampleSet {
        positives,
        negatives,
        bias,
    }
}

/// Class-biased samplers. Returns `(R_t, R_h)`; the two sets are independent
/// draws from the same pools and may share proposals.
pub fn cbs(partition: &ProposalPartition, cfg: &SamplerConfig, rng: &mut Rng) -> (SampleSet, SampleSet) {
    biased_pair(partition, cfg, true, rng)
}

/// Class-exclusive sampler: [`cbs`] without the top-up from the other group.
pub fn ces(partition: &ProposalPartition, cfg: &SamplerConfig, rng: &mut Rng) -> (SampleSet, SampleSet) {
    biased_pair(partition, cfg, false, rng)
}

fn biased_pair(
    p: &ProposalPartition,
    cfg: &SamplerConfig,
    top_up: bool,
    rng: &mut Rng,
) -> (SampleSet, SampleSet) {
    let r_t = biased_pass(&p.s_t, &p.s_h, &p.s_b, cfg, top_up, Bias::TailBiased, rng);
    let r_h = biased_pass(&p.s_h, &p.s_t, &p.s_b, cfg, top_up, Bias::HeadBiased, rng);
    (r_t, r_h)
}
