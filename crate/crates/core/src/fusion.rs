//! Inference: turning head outputs on proposals into capped, NMS-filtered
//! detections for the single-head, bilateral, BBH-ALL and cascade variants.

use serde::{Deserialize, Serialize};

use crate::assign::decode_deltas;
use crate::error::{Error, Result};
use crate::geometry::{nms, nms_class_agnostic, BBox, ScoredDetection, SourceHead};
use crate::heads::{feature_matrix, forward_batch, BatchOutput, HeadParams};
use crate::scenes::{ClassPartition, Group, Proposal};

pub const CASCADE_STAGES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections_per_scene: usize,
    /// BBH-ALL only: suppress across classes when fusing the two heads.
    pub all_nms_class_agnostic: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections_per_scene: 500,
            all_nms_class_agnostic: false,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config(
                "score_threshold and nms_iou must lie in [0, 1]".into(),
            ));
        }
        if self.max_detections_per_scene == 0 {
            return Err(Error::Config("max_detections_per_scene must be >= 1".into()));
        }
        Ok(())
    }
}

fn run_head(params: &HeadParams, proposals: &[Proposal]) -> Result<BatchOutput> {
    let x = feature_matrix(
        params.shape().feature_dim,
        proposals.iter().map(|p| p.feature.as_slice()),
    )?;
    forward_batch(params, x.view())
}

fn finalize(mut cands: Vec<ScoredDetection>, cfg: &InferenceConfig, class_wise: bool) -> Vec<ScoredDetection> {
    cands = if class_wise {
        nms(&cands, cfg.nms_iou)
    } else {
        nms_class_agnostic(&cands, cfg.nms_iou)
    };
    cands.truncate(cfg.max_detections_per_scene);
    cands
}

/// Per-class candidates from one head, restricted to `keep` classes.
fn emit(
    out: &BatchOutput,
    proposals: &[Proposal],
    row: usize,
    class_id: usize,
    tag: SourceHead,
    cfg: &InferenceConfig,
    sink: &mut Vec<ScoredDetection>,
) {
    let score = out.scores[[row, class_id]];
    if score >= cfg.score_threshold {
        let bbox = decode_deltas(&proposals[row].bbox, &out.deltas_for(row, class_id));
        sink.push(ScoredDetection::new(bbox, class_id, score, tag));
    }
}

pub fn predict_single(
    params: &HeadParams,
    proposals: &[Proposal],
    cfg: &InferenceConfig,
) -> Result<Vec<ScoredDetection>> {
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let out = run_head(params, proposals)?;
    let c = params.shape().num_classes;
    let mut cands = Vec::new();
    for row in 0..proposals.len() {
        for class_id in 0..c {
            emit(&out, proposals, row, class_id, SourceHead::Single, cfg, &mut cands);
        }
    }
    Ok(finalize(cands, cfg, true))
}

/// Bilateral inference: head classes come only from `params_h`, tail classes
/// only from `params_t`.
pub fn predict_dual(
    params_h: &HeadParams,
    params_t: &HeadParams,
    proposals: &[Proposal],
    partition: &ClassPartition,
    cfg: &InferenceConfig,
) -> Result<Vec<ScoredDetection>> {
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let out_h = run_head(params_h, proposals)?;
    let out_t = run_head(params_t, proposals)?;
    let mut cands = Vec::new();
    for row in 0..proposals.len() {
        for class_id in 0..partition.num_classes() {
            match partition.group_of(class_id) {
                Group::Head => emit(&out_h, proposals, row, class_id, SourceHead::Head, cfg, &mut cands),
                Group::Tail => emit(&out_t, proposals, row, class_id, SourceHead::Tail, cfg, &mut cands),
            }
        }
    }
    Ok(finalize(cands, cfg, true))
}

/// BBH-ALL: both heads predict every class; the streams are fused by NMS.
pub fn predict_all_nms(
    params_h: &HeadParams,
    params_t: &HeadParams,
    proposals: &[Proposal],
    cfg: &InferenceConfig,
) -> Result<Vec<ScoredDetection>> {
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let mut cands = Vec::new();
    for (params, tag) in [(params_h, SourceHead::Head), (params_t, SourceHead::Tail)] {
        let out = run_head(params, proposals)?;
        for row in 0..proposals.len() {
            for class_id in 0..params.shape().num_classes {
                emit(&out, proposals, row, class_id, tag, cfg, &mut cands);
            }
        }
    }
    Ok(finalize(cands, cfg, !cfg.all_nms_class_agnostic))
}

/// A (head-group, tail-group) pair of heads.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadPair {
    pub head: HeadParams,
    pub tail: HeadParams,
}

struct PairOutput {
    head: BatchOutput,
    tail: BatchOutput,
}

impl PairOutput {
    fn compute(pair: &HeadPair, proposals: &[Proposal]) -> Result<Self> {
        Ok(Self {
            head: run_head(&pair.head, proposals)?,
            tail: run_head(&pair.tail, proposals)?,
        })
    }

    fn for_class(&self, partition: &ClassPartition, class_id: usize) -> &BatchOutput {
        match partition.group_of(class_id) {
            Group::Head => &self.head,
            Group::Tail => &self.tail,
        }
    }

    /// Group-masked foreground scores of one proposal.
    fn masked_scores(&self, partition: &ClassPartition, row: usize) -> Vec<f64> {
        (0..partition.num_classes())
            .map(|c| self.for_class(partition, c).scores[[row, c]])
            .collect()
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Move every box by its pair's regression for the proposal's best masked
/// class. Feature vectors are unchanged.
pub fn refine_boxes(
    pair: &HeadPair,
    proposals: &[Proposal],
    boxes: &[BBox],
    partition: &ClassPartition,
) -> Result<Vec<BBox>> {
    let out = PairOutput::compute(pair, proposals)?;
    Ok(refine_with(&out, boxes, partition))
}

fn refine_with(out: &PairOutput, boxes: &[BBox], partition: &ClassPartition) -> Vec<BBox> {
    boxes
        .iter()
        .enumerate()
        .map(|(row, b)| {
            let c = argmax(&out.masked_scores(partition, row));
            decode_deltas(b, &out.for_class(partition, c).deltas_for(row, c))
        })
        .collect()
}

/// Cascade inference over three stage pairs: class scores are the mean of
/// the stages' group-masked scores, boxes come from the last stage's
/// regression applied to the box refined by the first two.
pub fn predict_cascade(
    stages: &[HeadPair],
    proposals: &[Proposal],
    partition: &ClassPartition,
    cfg: &InferenceConfig,
) -> Result<Vec<ScoredDetection>> {
    if stages.len() != CASCADE_STAGES {
        return Err(Error::StageCount(stages.len()));
    }
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let outs = stages
        .iter()
        .map(|s| PairOutput::compute(s, proposals))
        .collect::<Result<Vec<_>>>()?;
    let mut boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
    for out in &outs[..CASCADE_STAGES - 1] {
        boxes = refine_with(out, &boxes, partition);
    }
    let last = &outs[CASCADE_STAGES - 1];
    let tag = SourceHead::CascadeStage(CASCADE_STAGES as u8);
    let mut cands = Vec::new();
    for (row, b) in boxes.iter().enumerate() {
        let per_stage: Vec<Vec<f64>> = outs.iter().map(|o| o.masked_scores(partition, row)).collect();
        for c in 0..partition.num_classes() {
            let score = per_stage.iter().map(|s| s[c]).sum::<f64>() / CASCADE_STAGES as f64;
            if score >= cfg.score_threshold {
                let bbox = decode_deltas(b, &last.for_class(partition, c).deltas_for(row, c));
                cands.push(ScoredDetection::new(bbox, c, score.min(1.0), tag));
            }
        }
    }
    Ok(finalize(cands, cfg, true))
}
