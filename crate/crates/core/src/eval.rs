//! COCO-style box evaluation: greedy matching, 101-point interpolated AP,
//! AP over IoU 0.50:0.05:0.95, AP50, AP75 and head/tail group means.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, score_order, ScoredDetection};
use crate::scenes::{ClassPartition, Group, Scene};

pub const RECALL_POINTS: usize = 101;

/// `0.50, 0.55, ..., 0.95`.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Flag each detection true/false positive. `dets` must already be sorted
/// by score descending. A detection takes the unmatched same-class object of
/// highest IoU `>= iou_thr` (ties to the lower object index).
pub fn match_detections(dets: &[ScoredDetection], scene: &Scene, iou_thr: f64) -> Vec<(ScoredDetection, bool)> {
    let mut taken = vec![false; scene.objects.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, obj) in scene.objects.iter().enumerate() {
                if taken[g] || obj.class_id != d.class_id {
                    continue;
                }
                let v = iou(&d.bbox, &obj.bbox);
                if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            (*d, best.is_some())
        })
        .collect()
}

/// 101-point interpolated AP of score-ordered TP flags against `num_gt`
/// ground-truth objects. Zero when `num_gt == 0`.
pub fn average_precision(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || flags.is_empty() {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &f in flags {
        if f {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let sum: f64 = (0..RECALL_POINTS)
        .map(|k| {
            let r = k as f64 / (RECALL_POINTS - 1) as f64;
            let idx = recall.partition_point(|&x| x < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    sum / RECALL_POINTS as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    /// `[class][threshold]`.
    pub ap_per_class_per_iou: Vec<Vec<f64>>,
    pub num_gt: Vec<usize>,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Per-class AP averaged over thresholds.
    pub class_ap: Vec<f64>,
    pub head_group_ap: f64,
    pub tail_group_ap: f64,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl EvalReport {
    pub fn has_gt(&self, class_id: usize) -> bool {
        self.num_gt[class_id] > 0
    }

    /// Mean AP at threshold index `t` over classes with ground truth.
    pub fn mean_at(&self, t: usize) -> f64 {
        mean((0..self.num_gt.len()).filter(|&c| self.has_gt(c)).map(|c| self.ap_per_class_per_iou[c][t]))
    }

    pub fn csv_header(class_names: &[String]) -> String {
        let mut cols = vec!["AP", "AP50", "AP75", "head_AP", "tail_AP"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        cols.extend(class_names.iter().cloned());
        cols.join(",")
    }

    /// Values in the order of [`EvalReport::csv_header`], as fractions.
    pub fn csv_values(&self) -> Vec<f64> {
        let mut v = vec![self.ap, self.ap50, self.ap75, self.head_group_ap, self.tail_group_ap];
        v.extend(&self.class_ap);
        v
    }
}

/// Evaluate per-scene detections against `scenes`. Scenes without an entry
/// count as having no detections; entries for scenes not in `scenes` are an
/// error.
pub fn evaluate(
    dets_by_scene: &BTreeMap<u64, Vec<ScoredDetection>>,
    scenes: &[Scene],
    partition: &ClassPartition,
) -> Result<EvalReport> {
    let index: HashMap<u64, usize> = scenes.iter().enumerate().map(|(i, s)| (s.scene_id, i)).collect();
    if let Some(id) = dets_by_scene.keys().find(|id| !index.contains_key(id)) {
        return Err(Error::UnknownScene(*id));
    }
    let num_classes = partition.num_classes();
    let thresholds = coco_iou_thresholds();
    let mut num_gt = vec![0usize; num_classes];
    for s in scenes {
        for o in &s.objects {
            if o.class_id < num_classes {
                num_gt[o.class_id] += 1;
            }
        }
    }

    // Per scene, detections sorted by score (stable).
    let sorted: Vec<(usize, Vec<ScoredDetection>)> = dets_by_scene
        .iter()
        .map(|(id, dets)| {
            let order = score_order(dets);
            (index[id], order.into_iter().map(|i| dets[i]).collect())
        })
        .collect();

    let mut ap = vec![vec![0.0; thresholds.len()]; num_classes];
    for (t, &thr) in thresholds.iter().enumerate() {
        // class -> (score, tp) in scene order, then stable-sorted by score
        let mut per_class: Vec<Vec<(f64, bool)>> = vec![Vec::new(); num_classes];
        for (scene_idx, dets) in &sorted {
            for (d, tp) in match_detections(dets, &scenes[*scene_idx], thr) {
                if d.class_id < num_classes {
                    per_class[d.class_id].push((d.score, tp));
                }
            }
        }
        for (c, mut entries) in per_class.into_iter().enumerate() {
            entries.sort_by(|a, b| b.0.total_cmp(&a.0));
            let flags: Vec<bool> = entries.iter().map(|e| e.1).collect();
            ap[c][t] = average_precision(&flags, num_gt[c]);
        }
    }

    let with_gt: Vec<usize> = (0..num_classes).filter(|&c| num_gt[c] > 0).collect();
    let class_ap: Vec<f64> = ap.iter().map(|row| mean(row.iter().copied())).collect();
    let group = |g: Group| mean(with_gt.iter().filter(|&&c| partition.group_of(c) == g).map(|&c| class_ap[c]));
    let at = |t: usize| mean(with_gt.iter().map(|&c| ap[c][t]));
    Ok(EvalReport {
        ap: mean(with_gt.iter().map(|&c| class_ap[c])),
        ap50: at(0),
        ap75: at(5),
        head_group_ap: group(Group::Head),
        tail_group_ap: group(Group::Tail),
        iou_thresholds: thresholds,
        ap_per_class_per_iou: ap,
        num_gt,
        class_ap,
    })
}
