//! IoU-based proposal labeling and the three-pool split consumed by the
//! samplers: tail positives, head positives and background.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::scenes::{ClassPartition, Group, Proposal, Scene};

/// Largest log-scale delta accepted by [`decode_deltas`]; keeps `exp` finite.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Background,
}

impl Label {
    pub fn class_id(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Background => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledProposal {
    /// Position of the proposal in the list handed to [`assign`].
    pub index: usize,
    pub bbox: BBox,
    pub feature: Vec<f64>,
    pub label: Label,
    pub max_iou: f64,
    pub matched_gt: Option<usize>,
    pub regression_target: Option<[f64; 4]>,
}

impl LabeledProposal {
    fn background(index: usize, p: &Proposal, max_iou: f64) -> Self {
        Self {
            index,
            bbox: p.bbox,
            feature: p.feature.clone(),
            label: Label::Background,
            max_iou,
            matched_gt: None,
            regression_target: None,
        }
    }

    pub fn is_background(&self) -> bool {
        self.label == Label::Background
    }
}

/// `s_t`, `s_h` and `s_b`: tail-class positives, head-class positives and
/// background.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProposalPartition {
    pub s_t: Vec<LabeledProposal>,
    pub s_h: Vec<LabeledProposal>,
    pub s_b: Vec<LabeledProposal>,
}

impl ProposalPartition {
    pub fn len(&self) -> usize {
        self.s_t.len() + self.s_h.len() + self.s_b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn positives(&self, group: Group) -> &[LabeledProposal] {
        match group {
            Group::Head => &self.s_h,
            Group::Tail => &self.s_t,
        }
    }

    /// Turn every positive of the other group into background, as seen by a
    /// model whose ground truth only contains `keep`.
    pub fn relabel_out_of_group(mut self, keep: Group) -> Self {
        let dropped = match keep {
            Group::Head => std::mem::take(&mut self.s_t),
            Group::Tail => std::mem::take(&mut self.s_h),
        };
        self.s_b.extend(dropped.into_iter().map(|mut p| {
            p.label = Label::Background;
            p.matched_gt = None;
            p.regression_target = None;
            p
        }));
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignThresholds {
    pub pos: f64,
    pub neg: f64,
}

impl Default for AssignThresholds {
    fn default() -> Self {
        Self { pos: 0.5, neg: 0.5 }
    }
}

impl AssignThresholds {
    pub fn uniform(thr: f64) -> Self {
        Self { pos: thr, neg: thr }
    }

    pub fn validate(&self) -> Result<()> {
        if 0.0 <= self.neg && self.neg <= self.pos && self.pos <= 1.0 {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "assignment thresholds need 0 <= neg ({}) <= pos ({}) <= 1",
                self.neg, self.pos
            )))
        }
    }
}

/// Match every proposal to its highest-IoU ground-truth object (ties go to
/// the lower object index) and route it to a pool. Proposals whose best IoU
/// falls in `[neg, pos)` are dropped, as are foreground matches whose box is
/// degenerate and therefore has no regression target.
pub fn assign(
    proposals: &[Proposal],
    scene: &Scene,
    partition: &ClassPartition,
    thr: AssignThresholds,
) -> Result<ProposalPartition> {
    thr.validate()?;
    let mut out = ProposalPartition::default();
    for (index, p) in proposals.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, obj) in scene.objects.iter().enumerate() {
            let v = iou(&p.bbox, &obj.bbox);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        let max_iou = best.map_or(0.0, |b| b.1);
        match best {
            Some((g, v)) if v >= thr.pos => {
                let obj = &scene.objects[g];
                let Ok(target) = encode_deltas(&p.bbox, &obj.bbox) else {
                    continue;
                };
                let lp = LabeledProposal {
                    index,
                    bbox: p.bbox,
                    feature: p.feature.clone(),
                    label: Label::Class(obj.class_id),
                    max_iou,
                    matched_gt: Some(g),
                    regression_target: Some(target),
                };
                match partition.group_of(obj.class_id) {
                    Group::Tail => out.s_t.push(lp),
                    Group::Head => out.s_h.push(lp),
                }
            }
            _ if max_iou < thr.neg => out.s_b.push(LabeledProposal::background(index, p, max_iou)),
            _ => {}
        }
    }
    Ok(out)
}

/// Center-offset / log-size deltas taking `proposal` to `gt`.
pub fn encode_deltas(proposal: &BBox, gt: &BBox) -> Result<[f64; 4]> {
    let (pw, ph) = (proposal.width(), proposal.height());
    if pw <= 0.0 || ph <= 0.0 {
        return Err(Error::DegenerateProposal);
    }
    let (px, py) = proposal.center();
    let (gx, gy) = gt.center();
    Ok([
        (gx - px) / pw,
        (gy - py) / ph,
        (gt.width() / pw).ln(),
        (gt.height() / ph).ln(),
    ])
}

/// Inverse of [`encode_deltas`]. Log-size deltas are clamped to
/// [`MAX_LOG_SCALE`] from above.
pub fn decode_deltas(proposal: &BBox, deltas: &[f64; 4]) -> BBox {
    let (pw, ph) = (proposal.width(), proposal.height());
    let (px, py) = proposal.center();
    let cx = px + deltas[0] * pw;
    let cy = py + deltas[1] * ph;
    let w = pw * deltas[2].min(MAX_LOG_SCALE).exp();
    let h = ph * deltas[3].min(MAX_LOG_SCALE).exp();
    let (x1, x2) = (cx - 0.5 * w, cx + 0.5 * w);
    let (y1, y2) = (cy - 0.5 * h, cy + 0.5 * h);
    BBox::new(x1, y1, x2.max(x1), y2.max(y1)).unwrap_or(*proposal)
}
