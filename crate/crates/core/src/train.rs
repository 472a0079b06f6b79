//! Training loop for every detector variant: per scene, generate proposals,
//! assign them, sample according to the mode, take one SGD step.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::assign::{assign, AssignThresholds, LabeledProposal, ProposalPartition};
use crate::error::{Error, Result};
use crate::fusion::{refine_boxes, HeadPair, CASCADE_STAGES};
use crate::heads::{
    batch_loss, bbh_loss, head_loss, HeadParams, HeadRecord, HeadShape, TrainingBatch, DEFAULT_HIDDEN,
};
use crate::rng::{self, Rng};
use crate::samplers::{cbs, ces, random_sampler, rs_dbl, SampleSet, SamplerConfig};
use crate::scenes::{generate_proposals, ClassPartition, Group, Proposal, ProposalConfig, Scene, SceneConfig};

/// Every detector variant the harness can train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "&'static str", try_from = "String")]
pub enum Mode {
    /// Random sampler, single head.
    Rs,
    /// Random sampler with doubled budget, single head.
    RsDbl,
    /// Two independent random draws feeding the bilateral heads.
    RsDblBbh,
    /// CBS(T) and CBS(H) merged into one batch for a single head.
    Cbs,
    CbsBbh,
    CesBbh,
    /// Trained like `CbsBbh`; both heads predict all classes at inference.
    CbsBbhAll,
    /// Three stage pairs of bilateral heads.
    Cascade,
    /// Single head over all proposals, loss masked to the CBS selection.
    OneStageMask,
    /// Two independent single-head models, one per class group.
    Mmf,
}

impl Mode {
    pub const ALL: [Mode; 10] = [
        Mode::Rs,
        Mode::RsDbl,
        Mode::RsDblBbh,
        Mode::Cbs,
        Mode::CbsBbh,
        Mode::CesBbh,
        Mode::CbsBbhAll,
        Mode::Cascade,
        Mode::OneStageMask,
        Mode::Mmf,
    ];

    /// Row set of the ablation table.
    pub const ABLATION: [Mode; 8] = [
        Mode::Rs,
        Mode::RsDbl,
        Mode::RsDblBbh,
        Mode::CesBbh,
        Mode::Cbs,
        Mode::CbsBbhAll,
        Mode::CbsBbh,
        Mode::Mmf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Rs => "rs",
            Mode::RsDbl => "rs-dbl",
            Mode::RsDblBbh => "rs-dbl+bbh",
            Mode::Cbs => "cbs",
            Mode::CbsBbh => "cbs+bbh",
            Mode::CesBbh => "ces+bbh",
            Mode::CbsBbhAll => "cbs+bbh-all",
            Mode::Cascade => "cascade",
            Mode::OneStageMask => "one-stage-mask",
            Mode::Mmf => "mmf",
        }
    }

    /// Number of heads a trained model of this mode carries.
    pub fn head_count(self) -> usize {
        match self {
            Mode::Rs | Mode::RsDbl | Mode::Cbs | Mode::OneStageMask => 1,
            Mode::Cascade => 2 * CASCADE_STAGES,
            _ => 2,
        }
    }

    /// File-name friendly form of [`Mode::name`].
    pub fn slug(self) -> String {
        self.name().replace('+', "_")
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<Mode> for &'static str {
    fn from(m: Mode) -> Self {
        m.name()
    }
}

impl TryFrom<String> for Mode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMode(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub hidden: usize,
    /// Set from the experiment's top-level `lambda`.
    #[serde(skip)]
    pub lambda: f64,
    /// Set from the experiment's top-level `sampler`.
    #[serde(skip)]
    pub sampler: SamplerConfig,
    pub proposals: ProposalConfig,
    pub assign: AssignThresholds,
    pub cascade_iou: [f64; CASCADE_STAGES],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            base_lr: 0.01,
            hidden: DEFAULT_HIDDEN,
            lambda: 2.0,
            sampler: SamplerConfig::default(),
            proposals: ProposalConfig::default(),
            assign: AssignThresholds::default(),
            cascade_iou: [0.5, 0.6, 0.7],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.assign.validate()?;
        if !(self.base_lr > 0.0) || self.hidden == 0 {
            return Err(Error::Config("base_lr must be > 0 and hidden >= 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.proposals.jitter_sigma >= 0.0) || !(self.proposals.feature_jitter_sigma >= 0.0) {
            return Err(Error::Config("proposal noise must be >= 0".into()));
        }
        for t in self.cascade_iou {
            AssignThresholds::uniform(t).validate()?;
        }
        Ok(())
    }

    /// Step size for `epoch`: the base rate, cut by 10x at 2/3 and again at
    /// 5/6 of the schedule.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let mut lr = self.base_lr;
        if epoch * 3 >= 2 * self.epochs {
            lr *= 0.1;
        }
        if epoch * 6 >= 5 * self.epochs {
            lr *= 0.1;
        }
        lr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Single(HeadParams),
    Dual(HeadPair),
    Cascade(Vec<HeadPair>),
}

impl TrainedModel {
    fn init(mode: Mode, shape: HeadShape, seed: u64) -> Self {
        let head = |k: u64| HeadParams::init(shape, &mut rng::stream(seed, &[rng::INIT, k]));
        let pair = |k: u64| HeadPair {
            head: head(2 * k),
            tail: head(2 * k + 1),
        };
        match mode.head_count() {
            1 => TrainedModel::Single(head(0)),
            2 => TrainedModel::Dual(pair(0)),
            _ => TrainedModel::Cascade((0..CASCADE_STAGES as u64).map(pair).collect()),
        }
    }

    /// Heads with role names, in a fixed order.
    pub fn named_heads(&self) -> Vec<(String, &HeadParams)> {
        match self {
            TrainedModel::Single(p) => vec![("single".into(), p)],
            TrainedModel::Dual(p) => vec![("head".into(), &p.head), ("tail".into(), &p.tail)],
            TrainedModel::Cascade(stages) => stages
                .iter()
                .enumerate()
                .flat_map(|(k, p)| {
                    [
                        (format!("stage{}-head", k + 1), &p.head),
                        (format!("stage{}-tail", k + 1), &p.tail),
                    ]
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    /// Mean per-step loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

fn sgd(p: &mut HeadParams, grads: &HeadParams, lr: f64) {
    p.add_scaled(-lr, grads);
}

fn single_step(p: &mut HeadParams, set: &SampleSet, lr: f64) -> Result<Option<f64>> {
    if set.is_empty() {
        return Ok(None);
    }
    let l = head_loss(p, set)?;
    sgd(p, &l.grads, lr);
    Ok(Some(l.total))
}

/// One step on `L_H + lambda * L_T`. A side with an empty sample set
/// contributes nothing.
fn bbh_step(pair: &mut HeadPair, r_h: &SampleSet, r_t: &SampleSet, lambda: f64, lr: f64) -> Result<Option<f64>> {
    if !r_h.is_empty() && !r_t.is_empty() {
        let l = bbh_loss(&pair.head, &pair.tail, r_h, r_t, lambda)?;
        sgd(&mut pair.head, &l.grads_h, lr);
        sgd(&mut pair.tail, &l.grads_t, lr);
        return Ok(Some(l.breakdown.total));
    }
    let h = single_step(&mut pair.head, r_h, lr)?;
    let t = single_step(&mut pair.tail, r_t, lambda * lr)?;
    Ok(match (h, t) {
        (None, None) => None,
        (h, t) => Some(h.unwrap_or(0.0) + lambda * t.unwrap_or(0.0)),
    })
}

/// Single head on every assigned proposal, weight 1 for those selected by
/// either CBS pass and 0 for the rest.
fn masked_step(p: &mut HeadParams, pools: &ProposalPartition, cfg: &SamplerConfig, lr: f64, rng: &mut Rng) -> Result<Option<f64>> {
    let (r_t, r_h) = cbs(pools, cfg, rng);
    let selected: std::collections::HashSet<usize> = r_t.iter().chain(r_h.iter()).map(|q| q.index).collect();
    if selected.is_empty() {
        return Ok(None);
    }
    let all: Vec<&LabeledProposal> = pools.s_t.iter().chain(&pools.s_h).chain(&pools.s_b).collect();
    let batch = TrainingBatch::from_proposals(
        p.shape(),
        all.iter().map(|q| (*q, if selected.contains(&q.index) { 1.0 } else { 0.0 })),
    )?;
    let l = batch_loss(p, &batch)?;
    sgd(p, &l.grads, lr);
    Ok(Some(l.total))
}

struct StepContext<'a> {
    scene: &'a Scene,
    proposals: &'a [Proposal],
    partition: &'a ClassPartition,
    cfg: &'a TrainConfig,
    lr: f64,
}

impl StepContext<'_> {
    fn pools(&self, thr: AssignThresholds) -> Result<ProposalPartition> {
        assign(self.proposals, self.scene, self.partition, thr)
    }
}

fn train_step(model: &mut TrainedModel, mode: Mode, ctx: &StepContext, rng: &mut Rng) -> Result<Option<f64>> {
    let cfg = ctx.cfg;
    let lr = ctx.lr;
    match (mode, model) {
        (Mode::Cascade, TrainedModel::Cascade(stages)) => {
            let mut boxes: Vec<_> = ctx.proposals.iter().map(|p| p.bbox).collect();
            let mut total = None;
            for (k, pair) in stages.iter_mut().enumerate() {
                let staged: Vec<Proposal> = ctx
                    .proposals
                    .iter()
                    .zip(&boxes)
                    .map(|(p, b)| Proposal {
                        bbox: *b,
                        feature: p.feature.clone(),
                    })
                    .collect();
                let pools = assign(&staged, ctx.scene, ctx.partition, AssignThresholds::uniform(cfg.cascade_iou[k]))?;
                let (r_t, r_h) = cbs(&pools, &cfg.sampler, rng);
                if let Some(l) = bbh_step(pair, &r_h, &r_t, cfg.lambda, lr)? {
                    *total.get_or_insert(0.0) += l;
                }
                if k + 1 < CASCADE_STAGES {
                    boxes = refine_boxes(pair, &staged, &boxes, ctx.partition)?;
                }
            }
            Ok(total)
        }
        (Mode::Mmf, TrainedModel::Dual(pair)) => {
            let pools = ctx.pools(cfg.assign)?;
            let head_view = pools.clone().relabel_out_of_group(Group::Head);
            let tail_view = pools.relabel_out_of_group(Group::Tail);
            let h = single_step(&mut pair.head, &random_sampler(&head_view, &cfg.sampler, rng), lr)?;
            let t = single_step(&mut pair.tail, &random_sampler(&tail_view, &cfg.sampler, rng), lr)?;
            Ok(match (h, t) {
                (None, None) => None,
                (h, t) => Some(h.unwrap_or(0.0) + t.unwrap_or(0.0)),
            })
        }
        (_, TrainedModel::Dual(pair)) => {
            let pools = ctx.pools(cfg.assign)?;
            let (r_t, r_h) = match mode {
                Mode::CesBbh => ces(&pools, &cfg.sampler, rng),
                Mode::RsDblBbh => {
                    let r_t = random_sampler(&pools, &cfg.sampler, rng);
                    let r_h = random_sampler(&pools, &cfg.sampler, rng);
                    (r_t, r_h)
                }
                _ => cbs(&pools, &cfg.sampler, rng),
            };
            bbh_step(pair, &r_h, &r_t, cfg.lambda, lr)
        }
        (_, TrainedModel::Single(p)) => {
            let pools = ctx.pools(cfg.assign)?;
            match mode {
                Mode::OneStageMask => masked_step(p, &pools, &cfg.sampler, lr, rng),
                Mode::RsDbl => single_step(p, &rs_dbl(&pools, &cfg.sampler, rng), lr),
                Mode::Cbs => {
                    let (r_t, r_h) = cbs(&pools, &cfg.sampler, rng);
                    single_step(p, &r_t.merged(r_h), lr)
                }
                _ => single_step(p, &random_sampler(&pools, &cfg.sampler, rng), lr),
            }
        }
        (mode, _) => Err(Error::Config(format!("model layout does not fit mode {mode}"))),
    }
}

/// Train `mode` on `scenes`. Deterministic in `(scenes, config, seed)`:
/// scene order, proposals and sampler draws come from streams keyed by the
/// seed, epoch and scene id, so all modes see the same proposals.
pub fn train(
    scenes: &[Scene],
    scene_cfg: &SceneConfig,
    partition: &ClassPartition,
    mode: Mode,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let shape = HeadShape {
        feature_dim: scene_cfg.feature_dim,
        hidden: cfg.hidden,
        num_classes: partition.num_classes(),
    };
    let mut model = TrainedModel::init(mode, shape, seed);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(seed, &[rng::SHUFFLE, epoch as u64]));
        let lr = cfg.learning_rate(epoch);
        let (mut sum, mut steps) = (0.0, 0usize);
        for &i in &order {
            let scene = &scenes[i];
            let mut r = rng::stream(seed, &[rng::TRAIN_STEP, epoch as u64, scene.scene_id]);
            let proposals = generate_proposals(scene, scene_cfg, &cfg.proposals, &mut r);
            let ctx = StepContext {
                scene,
                proposals: &proposals,
                partition,
                cfg,
                lr,
            };
            if let Some(l) = train_step(&mut model, mode, &ctx, &mut r)? {
                sum += l;
                steps += 1;
            }
        }
        epoch_losses.push(if steps == 0 { 0.0 } else { sum / steps as f64 });
    }
    Ok(TrainOutcome { model, epoch_losses })
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedHead {
    pub name: String,
    #[serde(flatten)]
    pub params: HeadRecord,
}

/// On-disk form of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub mode: Mode,
    pub seed: u64,
    pub config_hash: String,
    pub heads: Vec<NamedHead>,
}

impl Checkpoint {
    pub fn new(model: &TrainedModel, mode: Mode, seed: u64, config_hash: &str) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            mode,
            seed,
            config_hash: config_hash.to_string(),
            heads: model
                .named_heads()
                .into_iter()
                .map(|(name, p)| NamedHead {
                    name,
                    params: HeadRecord::from(p),
                })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<TrainedModel> {
        let mut heads = self
            .heads
            .into_iter()
            .map(|h| HeadParams::try_from(h.params))
            .collect::<Result<Vec<_>>>()?;
        let bad = |n: usize| Error::Parse(format!("checkpoint for {} has {n} heads", self.mode));
        let pairs = |heads: Vec<HeadParams>| -> Vec<HeadPair> {
            heads
                .chunks(2)
                .map(|c| HeadPair {
                    head: c[0].clone(),
                    tail: c[1].clone(),
                })
                .collect()
        };
        let n = heads.len();
        match (self.mode.head_count(), n) {
            (1, 1) => Ok(TrainedModel::Single(heads.remove(0))),
            (2, 2) => Ok(TrainedModel::Dual(pairs(heads).remove(0))),
            (k, n) if k == n && n == 2 * CASCADE_STAGES => Ok(TrainedModel::Cascade(pairs(heads))),
            _ => Err(bad(n)),
        }
    }
}
