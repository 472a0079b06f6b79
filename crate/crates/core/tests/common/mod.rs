//! Reference implementations and generators shared by the integration tests.
//! The oracles are written from the definitions, without calling the code
//! under test.

#![allow(dead_code)]

use std::collections::BTreeMap;

use longtail_det::assign::{Label, LabeledProposal, ProposalPartition};
use longtail_det::geometry::{BBox, ScoredDetection, SourceHead};
use longtail_det::heads::{HeadParams, HeadShape};
use longtail_det::rng::{self, Rng};
use longtail_det::scenes::{ObjectInstance, Scene};
use rand::Rng as _;

pub fn rng(seed: u64) -> Rng {
    rng::stream(seed, &[0xACCE])
}

pub fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

/// Box with corners on a coarse grid so exact ties and shared edges occur.
pub fn grid_box(r: &mut Rng, extent: f64) -> BBox {
    let step = extent / 8.0;
    let x = (r.random_range(0..8) as f64) * step;
    let y = (r.random_range(0..8) as f64) * step;
    let w = (r.random_range(0..4) as f64) * step;
    let h = (r.random_range(0..4) as f64) * step;
    bx(x, y, x + w, y + h)
}

pub fn random_box(r: &mut Rng, extent: f64) -> BBox {
    let x1 = r.random_range(0.0..extent);
    let y1 = r.random_range(0.0..extent);
    let w = r.random_range(0.5..extent / 2.0);
    let h = r.random_range(0.5..extent / 2.0);
    bx(x1, y1, x1 + w, y1 + h)
}

/// Area-based IoU written directly from the definition.
pub fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let (a, b) = (a.to_array(), b.to_array());
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

// ---------------------------------------------------------------- sampler

/// Positive counts by source that the biased sampler must produce:
/// `(tail, head)` for the tail-biased set and the head-biased set.
pub fn cbs_law(n_t: usize, n_h: usize, n_p: usize) -> ((usize, usize), (usize, usize)) {
    let r_t = (n_t.min(n_p), n_h.min(n_p.saturating_sub(n_t)));
    let r_h = (n_t.min(n_p.saturating_sub(n_h)), n_h.min(n_p));
    (r_t, r_h)
}

/// Straight-line transcription of the biased sampler on index pools. Returns
/// the chosen (tail, head, background) indices of one pass.
pub fn cbs_pass_ref(
    preferred: &[usize],
    other: &[usize],
    background: &[usize],
    n_p: usize,
    n_n: usize,
    r: &mut Rng,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    fn draw(pool: &[usize], k: usize, r: &mut Rng) -> Vec<usize> {
        // partial Fisher-Yates
        let mut v = pool.to_vec();
        let k = k.min(v.len());
        for i in 0..k {
            let j = r.random_range(i..v.len());
            v.swap(i, j);
        }
        v.truncate(k);
        v
    }
    let neg = draw(background, n_n, r);
    let mut pref = draw(preferred, n_p, r);
    let mut oth = Vec::new();
    if preferred.len() < n_p {
        oth = draw(other, n_p - preferred.len(), r);
    }
    pref.sort_unstable();
    oth.sort_unstable();
    (pref, oth, neg)
}

pub fn labeled(index: usize, label: Label, feature: Vec<f64>) -> LabeledProposal {
    let b = bx(0.0, 0.0, 10.0, 10.0);
    LabeledProposal {
        index,
        bbox: b,
        feature,
        label,
        max_iou: if label == Label::Background { 0.0 } else { 0.8 },
        matched_gt: None,
        regression_target: match label {
            Label::Background => None,
            Label::Class(_) => Some([0.0; 4]),
        },
    }
}

/// Pools of the given sizes. Tail positives take classes from `tail`, head
/// positives from `head`; indices are unique across pools.
pub fn pools(n_t: usize, n_h: usize, n_b: usize, tail: usize, head: usize) -> ProposalPartition {
    let mut idx = 0;
    let mut mk = |n: usize, l: Label| {
        (0..n)
            .map(|_| {
                idx += 1;
                labeled(idx - 1, l, vec![0.0])
            })
            .collect::<Vec<_>>()
    };
    ProposalPartition {
        s_t: mk(n_t, Label::Class(tail)),
        s_h: mk(n_h, Label::Class(head)),
        s_b: mk(n_b, Label::Background),
    }
}

// ---------------------------------------------------------------- NMS

/// Exhaustive oracle: greedy NMS output is the unique subset `K` such that a
/// detection is in `K` iff no higher-ranked member of `K` of the same class
/// overlaps it above the threshold. Rank is score descending, then index.
pub fn nms_oracle(dets: &[ScoredDetection], thr: f64, class_wise: bool) -> Vec<ScoredDetection> {
    let n = dets.len();
    assert!(n <= 16);
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score).then(i.cmp(&j)));
    let mut pos = vec![0; n];
    for (p, &i) in rank.iter().enumerate() {
        pos[i] = p;
    }
    let conflicts = |i: usize, j: usize| {
        (!class_wise || dets[i].class_id == dets[j].class_id) && iou_ref(&dets[i].bbox, &dets[j].bbox) > thr
    };
    let mut found = Vec::new();
    for mask in 0u32..(1 << n) {
        let ok = (0..n).all(|i| {
            let blocked = (0..n).any(|j| mask & (1 << j) != 0 && pos[j] < pos[i] && conflicts(i, j));
            (mask & (1 << i) != 0) == !blocked
        });
        if ok {
            found.push(mask);
        }
    }
    assert_eq!(found.len(), 1, "fixed point must be unique");
    rank.into_iter()
        .filter(|&i| found[0] & (1 << i) != 0)
        .map(|i| dets[i])
        .collect()
}

// ---------------------------------------------------------------- evaluator

pub struct RefReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_class: Vec<Vec<f64>>,
}

/// Interpolated precision at each recall point as the maximum precision over
/// every operating point whose recall reaches it.
pub fn ap_ref(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut pts = Vec::new();
    let mut tp = 0.0;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1.0;
        }
        pts.push((tp / num_gt as f64, tp / (i + 1) as f64));
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let best = pts
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        total += best;
    }
    total / 101.0
}

/// Reference COCO-style evaluator for tiny instances.
pub fn evaluate_ref(
    dets: &BTreeMap<u64, Vec<ScoredDetection>>,
    scenes: &[Scene],
    num_classes: usize,
) -> RefReport {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mut per_class = vec![vec![0.0; 10]; num_classes];
    let mut gt_count = vec![0; num_classes];
    for s in scenes {
        for o in &s.objects {
            gt_count[o.class_id] += 1;
        }
    }
    for c in 0..num_classes {
        for (t, &thr) in thresholds.iter().enumerate() {
            let thr = (thr * 100.0).round() / 100.0;
            let mut scored: Vec<(f64, usize, bool)> = Vec::new(); // score, order, tp
            let mut order = 0;
            for s in scenes {
                let mut mine: Vec<(usize, &ScoredDetection)> = dets
                    .get(&s.scene_id)
                    .map(|v| v.iter().enumerate().filter(|(_, d)| d.class_id == c).collect())
                    .unwrap_or_default();
                mine.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
                let gts: Vec<(usize, &ObjectInstance)> =
                    s.objects.iter().enumerate().filter(|(_, o)| o.class_id == c).collect();
                let mut used = vec![false; gts.len()];
                for (_, d) in mine {
                    let mut best: Option<(usize, f64)> = None;
                    for (k, (_, g)) in gts.iter().enumerate() {
                        if used[k] {
                            continue;
                        }
                        let v = iou_ref(&d.bbox, &g.bbox);
                        if v >= thr && best.map_or(true, |(_, b)| v > b) {
                            best = Some((k, v));
                        }
                    }
                    if let Some((k, _)) = best {
                        used[k] = true;
                    }
                    scored.push((d.score, order, best.is_some()));
                    order += 1;
                }
            }
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let flags: Vec<bool> = scored.iter().map(|x| x.2).collect();
            per_class[c][t] = ap_ref(&flags, gt_count[c]);
        }
    }
    let valid: Vec<usize> = (0..num_classes).filter(|&c| gt_count[c] > 0).collect();
    let avg = |f: &dyn Fn(usize) -> f64| {
        if valid.is_empty() {
            0.0
        } else {
            valid.iter().map(|&c| f(c)).sum::<f64>() / valid.len() as f64
        }
    };
    RefReport {
        ap: avg(&|c| per_class[c].iter().sum::<f64>() / 10.0),
        ap50: avg(&|c| per_class[c][0]),
        ap75: avg(&|c| per_class[c][5]),
        per_class,
    }
}

/// Random tiny evaluation instance: up to 3 scenes, `num_classes` classes,
/// up to 20 detections in total. Detections are perturbed copies of ground
/// truth or random boxes; scores are quantized so ties occur.
pub fn tiny_instance(r: &mut Rng, num_classes: usize) -> (Vec<Scene>, BTreeMap<u64, Vec<ScoredDetection>>) {
    let n_scenes = r.random_range(1..=3);
    let mut scenes = Vec::new();
    for id in 0..n_scenes as u64 {
        let objects = (0..r.random_range(0..5))
            .map(|_| ObjectInstance {
                bbox: random_box(r, 50.0),
                class_id: r.random_range(0..num_classes),
                feature: vec![],
            })
            .collect();
        scenes.push(Scene { scene_id: id, objects });
    }
    let mut dets: BTreeMap<u64, Vec<ScoredDetection>> = BTreeMap::new();
    for _ in 0..r.random_range(0..=20) {
        let s = &scenes[r.random_range(0..scenes.len())];
        let (bbox, class_id) = if !s.objects.is_empty() && r.random_bool(0.6) {
            let o = &s.objects[r.random_range(0..s.objects.len())];
            let a = o.bbox.to_array();
            let j = |r: &mut Rng| r.random_range(-3.0..3.0);
            let x1 = a[0] + j(r);
            let y1 = a[1] + j(r);
            let b = bx(x1, y1, (a[2] + j(r)).max(x1 + 0.5), (a[3] + j(r)).max(y1 + 0.5));
            let c = if r.random_bool(0.8) { o.class_id } else { r.random_range(0..num_classes) };
            (b, c)
        } else {
            (random_box(r, 50.0), r.random_range(0..num_classes))
        };
        let score = (r.random_range(1..=20) as f64) / 20.0;
        dets.entry(s.scene_id)
            .or_default()
            .push(ScoredDetection::new(bbox, class_id, score, SourceHead::Single));
    }
    (scenes, dets)
}

// ---------------------------------------------------------------- gradients

/// Central differences of `f` with respect to every parameter of `p`.
pub fn numeric_grad(p: &HeadParams, h: f64, f: impl Fn(&HeadParams) -> f64) -> Vec<f64> {
    let mut q = p.clone();
    (0..p.num_params())
        .map(|i| {
            let v = p.get(i);
            q.set(i, v + h);
            let up = f(&q);
            q.set(i, v - h);
            let down = f(&q);
            q.set(i, v);
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn flatten(p: &HeadParams) -> Vec<f64> {
    (0..p.num_params()).map(|i| p.get(i)).collect()
}

/// Largest `|a - n| / max(|a|, |n|, floor)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub const SMALL_SHAPE: HeadShape = HeadShape {
    feature_dim: 5,
    hidden: 7,
    num_classes: 3,
};

/// Random labeled proposals for a head of `shape`, with random regression
/// targets on positives.
pub fn random_labeled(r: &mut Rng, shape: HeadShape, n: usize) -> Vec<LabeledProposal> {
    (0..n)
        .map(|i| {
            let label = if r.random_bool(0.4) {
                Label::Class(r.random_range(0..shape.num_classes))
            } else {
                Label::Background
            };
            let feature = (0..shape.feature_dim).map(|_| r.random_range(-1.5..1.5)).collect();
            let mut p = labeled(i, label, feature);
            if p.regression_target.is_some() {
                p.regression_target = Some(std::array::from_fn(|_| r.random_range(-2.0..2.0)));
            }
            p
        })
        .collect()
}

/// Smallest `|z|` over both hidden pre-activations of `p` on `features`.
/// Central differences are meaningless within a step of a ReLU kink.
pub fn kink_distance<'a>(p: &HeadParams, features: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    let mut m = f64::INFINITY;
    for x in features {
        let (d, h) = (p.w1.nrows(), p.w1.ncols());
        let mut h1 = vec![0.0; h];
        for j in 0..h {
            let z = p.b1[j] + (0..d).map(|i| x[i] * p.w1[[i, j]]).sum::<f64>();
            m = m.min(z.abs());
            h1[j] = z.max(0.0);
        }
        for k in 0..p.w2.ncols() {
            let z = p.b2[k] + (0..h).map(|j| h1[j] * p.w2[[j, k]]).sum::<f64>();
            m = m.min(z.abs());
        }
    }
    m
}
