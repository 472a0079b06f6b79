//! Axis-aligned boxes, IoU and greedy non-maximum suppression.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle `[x1, y1, x2, y2]` with `x1 <= x2` and `y1 <= y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x1 > x2 || y1 > y2 {
            return Err(Error::InvalidBox([x1, y1, x2, y2]));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Clamp into `[0, width] x [0, height]`. Coordinates that cross after
    /// clamping collapse onto each other, so the result is always valid.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        let x1 = self.x1.clamp(0.0, width);
        let x2 = self.x2.clamp(0.0, width);
        let y1 = self.y1.clamp(0.0, height);
        let y2 = self.y2.clamp(0.0, height);
        BBox {
            x1: x1.min(x2),
            y1: y1.min(y2),
            x2: x1.max(x2),
            y2: y1.max(y2),
        }
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Which head produced a detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SourceHead {
    Tail,
    Head,
    Single,
    CascadeStage(u8),
}

impl fmt::Display for SourceHead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceHead::Tail => f.write_str("tail"),
            SourceHead::Head => f.write_str("head"),
            SourceHead::Single => f.write_str("single"),
            SourceHead::CascadeStage(k) => write!(f, "cascade-{k}"),
        }
    }
}

impl std::str::FromStr for SourceHead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tail" => Ok(SourceHead::Tail),
            "head" => Ok(SourceHead::Head),
            "single" => Ok(SourceHead::Single),
            _ => s
                .strip_prefix("cascade-")
                .and_then(|k| k.parse().ok())
                .map(SourceHead::CascadeStage)
                .ok_or_else(|| Error::Parse(format!("unknown source head tag `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredDetection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
    pub source_head: SourceHead,
}

impl ScoredDetection {
    pub fn new(bbox: BBox, class_id: usize, score: f64, source_head: SourceHead) -> Self {
        debug_assert!((0.0..=1.0).contains(&score), "score {score} out of [0,1]");
        Self {
            bbox,
            class_id,
            score,
            source_head,
        }
    }
}

/// Intersection over union. Zero when the union has zero area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Indices of `dets` ordered by score descending; ties keep input order.
pub fn score_order(dets: &[ScoredDetection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .partial_cmp(&dets[i].score)
            .unwrap_or(Ordering::Equal)
    });
    order
}

/// Greedy class-wise NMS. A detection is kept iff its IoU with every already
/// kept detection of the same class is `<= iou_threshold`. Output is sorted by
/// score descending.
pub fn nms(dets: &[ScoredDetection], iou_threshold: f64) -> Vec<ScoredDetection> {
    nms_with(dets, iou_threshold, true)
}

/// Like [`nms`], but suppression crosses class boundaries.
pub fn nms_class_agnostic(dets: &[ScoredDetection], iou_threshold: f64) -> Vec<ScoredDetection> {
    nms_with(dets, iou_threshold, false)
}

fn nms_with(dets: &[ScoredDetection], iou_threshold: f64, class_wise: bool) -> Vec<ScoredDetection> {
    let mut kept: Vec<ScoredDetection> = Vec::with_capacity(dets.len());
    for i in score_order(dets) {
        let cand = &dets[i];
        let suppressed = kept.iter().any(|k| {
            (!class_wise || k.class_id == cand.class_id) && iou(&k.bbox, &cand.bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(*cand);
        }
    }
    kept
}
