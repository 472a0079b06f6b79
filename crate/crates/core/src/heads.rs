//! Box heads: a two-layer shared trunk followed by a classification layer
//! over `C + 1` logits (background last) and a class-specific regression
//! layer with `4 * C` outputs. Forward and backward passes are hand-written.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::assign::{Label, LabeledProposal};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::samplers::SampleSet;

pub const DEFAULT_HIDDEN: usize = 64;

/// Transition point of the smooth-L1 regression loss.
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadShape {
    pub feature_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
}

impl HeadShape {
    pub fn num_logits(&self) -> usize {
        self.num_classes + 1
    }

    pub fn background_index(&self) -> usize {
        self.num_classes
    }
}

/// Weights of one box head. Every matrix is `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w_cls: Array2<f64>,
    pub b_cls: Array1<f64>,
    pub w_reg: Array2<f64>,
    pub b_reg: Array1<f64>,
}

impl HeadParams {
    pub fn zeros(shape: HeadShape) -> Self {
        let HeadShape {
            feature_dim: d,
            hidden: h,
            num_classes: c,
        } = shape;
        Self {
            w1: Array2::zeros((d, h)),
            b1: Array1::zeros(h),
            w2: Array2::zeros((h, h)),
            b2: Array1::zeros(h),
            w_cls: Array2::zeros((h, c + 1)),
            b_cls: Array1::zeros(c + 1),
            w_reg: Array2::zeros((h, 4 * c)),
            b_reg: Array1::zeros(4 * c),
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init(shape: HeadShape, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(shape);
        let mut fill = |w: &mut Array2<f64>, b: &mut Array1<f64>| {
            let bound = 1.0 / (w.nrows() as f64).sqrt();
            w.iter_mut()
                .chain(b.iter_mut())
                .for_each(|v| *v = rng.random_range(-bound..=bound));
        };
        fill(&mut p.w1, &mut p.b1);
        fill(&mut p.w2, &mut p.b2);
        fill(&mut p.w_cls, &mut p.b_cls);
        fill(&mut p.w_reg, &mut p.b_reg);
        p
    }

    pub fn shape(&self) -> HeadShape {
        HeadShape {
            feature_dim: self.w1.nrows(),
            hidden: self.w1.ncols(),
            num_classes: self.b_cls.len() - 1,
        }
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn slices(&self) -> [&[f64]; 8] {
        fn a(x: Option<&[f64]>) -> &[f64] {
            x.expect("parameters are contiguous")
        }
        [
            a(self.w1.as_slice()),
            a(self.b1.as_slice()),
            a(self.w2.as_slice()),
            a(self.b2.as_slice()),
            a(self.w_cls.as_slice()),
            a(self.b_cls.as_slice()),
            a(self.w_reg.as_slice()),
            a(self.b_reg.as_slice()),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 8] {
        fn a(x: Option<&mut [f64]>) -> &mut [f64] {
            x.expect("parameters are contiguous")
        }
        [
            a(self.w1.as_slice_mut()),
            a(self.b1.as_slice_mut()),
            a(self.w2.as_slice_mut()),
            a(self.b2.as_slice_mut()),
            a(self.w_cls.as_slice_mut()),
            a(self.b_cls.as_slice_mut()),
            a(self.w_reg.as_slice_mut()),
            a(self.b_reg.as_slice_mut()),
        ]
    }

    /// Parameter `i` in the flattened order of [`HeadParams::slices`].
    pub fn get(&self, mut i: usize) -> f64 {
        for s in self.slices() {
            if i < s.len() {
                return s[i];
            }
            i -= s.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set(&mut self, mut i: usize, v: f64) {
        for s in self.slices_mut() {
            if i < s.len() {
                s[i] = v;
                return;
            }
            i -= s.len();
        }
        panic!("parameter index out of range")
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &HeadParams) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += alpha * s);
        }
    }

    pub fn scaled(mut self, alpha: f64) -> Self {
        self.slices_mut()
            .into_iter()
            .for_each(|s| s.iter_mut().for_each(|v| *v *= alpha));
        self
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Softmax over `C` foreground classes followed by background.
    pub class_scores: Vec<f64>,
    pub box_deltas: Vec<[f64; 4]>,
}

/// Batched head outputs: softmax scores `n x (C+1)` and regression `n x 4C`.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub scores: Array2<f64>,
    pub deltas: Array2<f64>,
}

impl BatchOutput {
    pub fn deltas_for(&self, row: usize, class_id: usize) -> [f64; 4] {
        let d = self.deltas.slice(s![row, 4 * class_id..4 * class_id + 4]);
        [d[0], d[1], d[2], d[3]]
    }
}

struct Activations {
    z1: Array2<f64>,
    h1: Array2<f64>,
    z2: Array2<f64>,
    h2: Array2<f64>,
    logits: Array2<f64>,
    reg: Array2<f64>,
}

fn relu(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|v| v.max(0.0))
}

fn activations(p: &HeadParams, x: ArrayView2<f64>) -> Activations {
    let z1 = x.dot(&p.w1) + &p.b1;
    let h1 = relu(&z1);
    let z2 = h1.dot(&p.w2) + &p.b2;
    let h2 = relu(&z2);
    let logits = h2.dot(&p.w_cls) + &p.b_cls;
    let reg = h2.dot(&p.w_reg) + &p.b_reg;
    Activations {
        z1,
        h1,
        z2,
        h2,
        logits,
        reg,
    }
}

/// Row-wise log-softmax.
fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn check_dim(p: &HeadParams, d: usize) -> Result<()> {
    let expected = p.w1.nrows();
    if d != expected {
        return Err(Error::DimensionMismatch {
            expected,
            actual: d,
        });
    }
    Ok(())
}

pub fn forward_batch(p: &HeadParams, features: ArrayView2<f64>) -> Result<BatchOutput> {
    check_dim(p, features.ncols())?;
    let a = activations(p, features);
    Ok(BatchOutput {
        scores: log_softmax(&a.logits).mapv(f64::exp),
        deltas: a.reg,
    })
}

pub fn forward(p: &HeadParams, feature: &[f64]) -> Result<Prediction> {
    let x = ArrayView2::from_shape((1, feature.len()), feature).expect("row vector");
    let out = forward_batch(p, x)?;
    let c = p.shape().num_classes;
    Ok(Prediction {
        class_scores: out.scores.row(0).to_vec(),
        box_deltas: (0..c).map(|k| out.deltas_for(0, k)).collect(),
    })
}

/// Stack proposal features into an `n x D` matrix.
pub fn feature_matrix<'a>(
    feature_dim: usize,
    items: impl IntoIterator<Item = &'a [f64]>,
) -> Result<Array2<f64>> {
    let mut data = Vec::new();
    let mut n = 0;
    for f in items {
        if f.len() != feature_dim {
            return Err(Error::DimensionMismatch {
                expected: feature_dim,
                actual: f.len(),
            });
        }
        data.extend_from_slice(f);
        n += 1;
    }
    Ok(Array2::from_shape_vec((n, feature_dim), data).expect("n * D elements"))
}

/// A weighted training batch.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub features: Array2<f64>,
    /// Classification index: foreground class id, or `C` for background.
    pub targets: Vec<usize>,
    pub regression: Vec<Option<[f64; 4]>>,
    pub weights: Vec<f64>,
}

impl TrainingBatch {
    pub fn from_proposals<'a>(
        shape: HeadShape,
        items: impl IntoIterator<Item = (&'a LabeledProposal, f64)>,
    ) -> Result<Self> {
        let mut feats: Vec<&[f64]> = Vec::new();
        let mut targets = Vec::new();
        let mut regression = Vec::new();
        let mut weights = Vec::new();
        for (p, w) in items {
            feats.push(&p.feature);
            let t = match p.label {
                Label::Class(c) if c < shape.num_classes => c,
                Label::Class(c) => {
                    return Err(Error::DimensionMismatch {
                        expected: shape.num_classes,
                        actual: c + 1,
                    })
                }
                Label::Background => shape.background_index(),
            };
            targets.push(t);
            regression.push(p.regression_target);
            weights.push(w);
        }
        let features = feature_matrix(shape.feature_dim, feats)?;
        Ok(Self {
            features,
            targets,
            regression,
            weights,
        })
    }

    pub fn from_sample_set(shape: HeadShape, set: &SampleSet) -> Result<Self> {
        Self::from_proposals(shape, set.iter().map(|p| (p, 1.0)))
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct HeadLoss {
    pub total: f64,
    pub classification: f64,
    pub regression: f64,
    pub grads: HeadParams,
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < SMOOTH_L1_BETA {
        (0.5 * x * x / SMOOTH_L1_BETA, x / SMOOTH_L1_BETA)
    } else {
        (x.abs() - 0.5 * SMOOTH_L1_BETA, x.signum())
    }
}

/// Weighted cross-entropy (normalized by total weight) plus smooth-L1 on the
/// target class's deltas for foreground samples (normalized by their total
/// weight), with analytic gradients.
pub fn batch_loss(p: &HeadParams, batch: &TrainingBatch) -> Result<HeadLoss> {
    let total_w: f64 = batch.weights.iter().sum();
    if batch.is_empty() || total_w <= 0.0 {
        return Err(Error::EmptySampleSet);
    }
    check_dim(p, batch.features.ncols())?;
    let shape = p.shape();
    let a = activations(p, batch.features.view());
    let logp = log_softmax(&a.logits);

    let n = batch.len();
    let mut d_logits = logp.mapv(f64::exp);
    let mut cls = 0.0;
    for i in 0..n {
        let w = batch.weights[i] / total_w;
        let t = batch.targets[i];
        cls -= w * logp[[i, t]];
        let mut row = d_logits.row_mut(i);
        row[t] -= 1.0;
        row *= w;
    }

    let pos_w: f64 = batch
        .regression
        .iter()
        .zip(&batch.weights)
        .filter(|(r, _)| r.is_some())
        .map(|(_, w)| w)
        .sum();
    let mut d_reg = Array2::<f64>::zeros(a.reg.raw_dim());
    let mut reg = 0.0;
    if pos_w > 0.0 {
        for i in 0..n {
            let Some(target) = batch.regression[i] else {
                continue;
            };
            let c = batch.targets[i];
            debug_assert!(c < shape.num_classes);
            let w = batch.weights[i] / pos_w;
            for k in 0..4 {
                let (l, g) = smooth_l1(a.reg[[i, 4 * c + k]] - target[k]);
                reg += w * l;
                d_reg[[i, 4 * c + k]] = w * g;
            }
        }
    }

    let mut grads = HeadParams::zeros(shape);
    grads.w_cls = a.h2.t().dot(&d_logits);
    grads.b_cls = d_logits.sum_axis(Axis(0));
    grads.w_reg = a.h2.t().dot(&d_reg);
    grads.b_reg = d_reg.sum_axis(Axis(0));

    let mut d_z2 = d_logits.dot(&p.w_cls.t()) + d_reg.dot(&p.w_reg.t());
    Zip::from(&mut d_z2).and(&a.z2).for_each(|d, &z| {
        if z <= 0.0 {
            *d = 0.0;
        }
    });
    grads.w2 = a.h1.t().dot(&d_z2);
    grads.b2 = d_z2.sum_axis(Axis(0));

    let mut d_z1 = d_z2.dot(&p.w2.t());
    Zip::from(&mut d_z1).and(&a.z1).for_each(|d, &z| {
        if z <= 0.0 {
            *d = 0.0;
        }
    });
    grads.w1 = batch.features.t().dot(&d_z1);
    grads.b1 = d_z1.sum_axis(Axis(0));

    Ok(HeadLoss {
        total: cls + reg,
        classification: cls,
        regression: reg,
        grads,
    })
}

/// Loss of one head on a sample set, averaged over all samples.
pub fn head_loss(p: &HeadParams, set: &SampleSet) -> Result<HeadLoss> {
    if set.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    batch_loss(p, &TrainingBatch::from_sample_set(p.shape(), set)?)
}

/// Components of the bilateral loss `L_H + lambda * L_T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_h: f64,
    pub l_t: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_h: f64, l_t: f64, lambda: f64) -> Self {
        Self {
            l_h,
            l_t,
            lambda,
            total: l_h + lambda * l_t,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BbhLoss {
    pub breakdown: LossBreakdown,
    pub grads_h: HeadParams,
    pub grads_t: HeadParams,
}

pub fn bbh_loss(
    params_h: &HeadParams,
    params_t: &HeadParams,
    r_h: &SampleSet,
    r_t: &SampleSet,
    lambda: f64,
) -> Result<BbhLoss> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let h = head_loss(params_h, r_h)?;
    let t = head_loss(params_t, r_t)?;
    Ok(BbhLoss {
        breakdown: LossBreakdown::new(h.total, t.total, lambda),
        grads_h: h.grads,
        grads_t: t.grads.scaled(lambda),
    })
}

/// Serializable form of [`HeadParams`], weights flattened row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRecord {
    pub shape: HeadShape,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w_cls: Vec<f64>,
    pub b_cls: Vec<f64>,
    pub w_reg: Vec<f64>,
    pub b_reg: Vec<f64>,
}

impl From<&HeadParams> for HeadRecord {
    fn from(p: &HeadParams) -> Self {
        let [w1, b1, w2, b2, w_cls, b_cls, w_reg, b_reg] = p.slices().map(<[f64]>::to_vec);
        Self {
            shape: p.shape(),
            w1,
            b1,
            w2,
            b2,
            w_cls,
            b_cls,
            w_reg,
            b_reg,
        }
    }
}

impl TryFrom<HeadRecord> for HeadParams {
    type Error = Error;

    fn try_from(r: HeadRecord) -> Result<Self> {
        let mut p = HeadParams::zeros(r.shape);
        let src = [r.w1, r.b1, r.w2, r.b2, r.w_cls, r.b_cls, r.w_reg, r.b_reg];
        for (dst, src) in p.slices_mut().into_iter().zip(src) {
            if dst.len() != src.len() {
                return Err(Error::DimensionMismatch {
                    expected: dst.len(),
                    actual: src.len(),
                });
            }
            dst.copy_from_slice(&src);
        }
        if !p.is_finite() {
            return Err(Error::Parse("non-finite weight in checkpoint".into()));
        }
        Ok(p)
    }
}
