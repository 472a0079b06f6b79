//! Acceptance suite. Criteria run sequentially so that the runtime budgets
//! measure one criterion at a time; each prints one PASS/FAIL line and the
//! process exits non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::time::{Duration, Instant};

use common::*;
use longtail_det::assign::Label;
use longtail_det::eval::{average_precision, evaluate};
use longtail_det::experiment::{cmd_run, run_many, ExperimentConfig, RunResult};
use longtail_det::fusion::{predict_dual, InferenceConfig};
use longtail_det::geometry::{nms, nms_class_agnostic, ScoredDetection, SourceHead};
use longtail_det::heads::{batch_loss, bbh_loss, head_loss, HeadParams, HeadShape, TrainingBatch};
use longtail_det::rng;
use longtail_det::samplers::{cbs, SampleSet, SamplerConfig};
use longtail_det::scenes::{generate_proposals, ClassPartition, Group, ObjectInstance, Scene};
use longtail_det::train::{train, Mode, TrainConfig, TrainedModel};
use rand::Rng as _;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(t: Duration, limit_s: f64) -> bool {
    t.as_secs_f64() < limit_s
}

// 1 -----------------------------------------------------------------------

fn sampler_law() -> Outcome {
    let start = Instant::now();
    let cfg = SamplerConfig::default();
    let (n_p, n_n) = (cfg.num_pos(), cfg.num_neg());
    let mut r = rng(1);
    let mut violations = 0;
    for trial in 0..1000u64 {
        let (n_t, n_h, n_b) = (r.random_range(0..=600), r.random_range(0..=600), r.random_range(0..=600));
        // small pools are where the top-up branch matters; oversample them
        let (n_t, n_h) = if trial % 3 == 0 { (n_t % 140, n_h % 140) } else { (n_t, n_h) };
        let p = pools(n_t, n_h, n_b, 1, 0);
        let (r_t, r_h) = cbs(&p, &cfg, &mut rng::stream(trial, &[7]));
        let counts = |s: &SampleSet| {
            let t = s.positives.iter().filter(|x| x.label == Label::Class(1)).count();
            let h = s.positives.iter().filter(|x| x.label == Label::Class(0)).count();
            (t, h, s.negatives.len())
        };

        let idx = |v: &[longtail_det::assign::LabeledProposal]| v.iter().map(|x| x.index).collect::<Vec<_>>();
        let (st, sh, sb) = (idx(&p.s_t), idx(&p.s_h), idx(&p.s_b));
        let mut o = rng::stream(trial, &[8]);
        let (ot_pref, ot_other, ot_neg) = cbs_pass_ref(&st, &sh, &sb, n_p, n_n, &mut o);
        let (oh_pref, oh_other, oh_neg) = cbs_pass_ref(&sh, &st, &sb, n_p, n_n, &mut o);
        let oracle_t = (ot_pref.len(), ot_other.len(), ot_neg.len());
        let oracle_h = (oh_other.len(), oh_pref.len(), oh_neg.len());

        let (law_t, law_h) = cbs_law(n_t, n_h, n_p);
        let ct = counts(&r_t);
        let ch = counts(&r_h);
        let ok = ct == oracle_t
            && ch == oracle_h
            && (ct.0, ct.1) == law_t
            && (ch.0, ch.1) == law_h
            && r_t.iter().chain(r_h.iter()).all(|x| match x.label {
                Label::Class(1) => x.index < n_t,
                Label::Class(0) => (n_t..n_t + n_h).contains(&x.index),
                _ => x.index >= n_t + n_h,
            });
        if !ok {
            violations += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        violations == 0 && within(t, 5.0),
        format!("1000 partitions, {violations} violations, {:.2}s (limit 5s)", t.as_secs_f64()),
    )
}

// 2 -----------------------------------------------------------------------

fn nms_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2);
    let mut mismatches = 0;
    for i in 0..10_000 {
        let n = r.random_range(0..=10);
        let dets: Vec<ScoredDetection> = (0..n)
            .map(|_| {
                let b = if r.random_bool(0.5) { grid_box(&mut r, 40.0) } else { random_box(&mut r, 40.0) };
                let score = r.random_range(0..8) as f64 / 8.0;
                ScoredDetection::new(b, r.random_range(0..3), score, SourceHead::Single)
            })
            .collect();
        let thr = [0.0, 0.3, 0.5, 0.7, 1.0][i % 5];
        if nms(&dets, thr) != nms_oracle(&dets, thr, true) {
            mismatches += 1;
        }
        if nms_class_agnostic(&dets, thr) != nms_oracle(&dets, thr, false) {
            mismatches += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        mismatches == 0 && within(t, 10.0),
        format!("10000 instances, {mismatches} mismatches, {:.2}s (limit 10s)", t.as_secs_f64()),
    )
}

// 3 -----------------------------------------------------------------------

fn ap_oracle_equivalence() -> Outcome {
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let num_classes = r.random_range(1..=3);
        let (scenes, dets) = tiny_instance(&mut r, num_classes);
        // head/tail split needs two groups; a single class gets a phantom partner
        let partition = if num_classes == 1 {
            ClassPartition::new([0], [1]).unwrap()
        } else {
            ClassPartition::new(0..num_classes - 1, [num_classes - 1]).unwrap()
        };
        let got = evaluate(&dets, &scenes, &partition).unwrap();
        let want = evaluate_ref(&dets, &scenes, partition.num_classes());
        worst = worst
            .max((got.ap - want.ap).abs())
            .max((got.ap50 - want.ap50).abs())
            .max((got.ap75 - want.ap75).abs());
        for (g, w) in got.ap_per_class_per_iou.iter().zip(&want.per_class) {
            for (a, b) in g.iter().zip(w) {
                worst = worst.max((a - b).abs());
            }
        }
    }

    // hand case, directly and through the full evaluator
    let exact = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
    let direct = average_precision(&[true, false, true], 2);
    let g1 = bx(0.0, 0.0, 10.0, 10.0);
    let g2 = bx(20.0, 0.0, 30.0, 10.0);
    let scene = Scene {
        scene_id: 0,
        objects: vec![
            ObjectInstance { bbox: g1, class_id: 0, feature: vec![] },
            ObjectInstance { bbox: g2, class_id: 0, feature: vec![] },
        ],
    };
    let dets: BTreeMap<u64, Vec<ScoredDetection>> = [(
        0,
        vec![
            ScoredDetection::new(g1, 0, 0.9, SourceHead::Single),
            ScoredDetection::new(bx(60.0, 60.0, 70.0, 70.0), 0, 0.8, SourceHead::Single),
            ScoredDetection::new(g2, 0, 0.7, SourceHead::Single),
        ],
    )]
    .into();
    let p = ClassPartition::new([0], [1]).unwrap();
    let full = evaluate(&dets, &[scene], &p).unwrap().ap;
    let hand_ok = (direct - exact).abs() < 1e-9 && (full - exact).abs() < 1e-9 && (direct - 0.8350).abs() < 5e-5;
    outcome(
        worst < 1e-9 && hand_ok,
        format!("200 instances, max |diff| {worst:.1e}; hand case {direct:.10} (exact {exact:.10})"),
    )
}

// 4 -----------------------------------------------------------------------

const FD_STEP: f64 = 1e-5;
// relative-error denominator floor; exact zeros come back as ~1e-10 noise
const FD_FLOOR: f64 = 1e-5;

fn random_set(r: &mut rng::Rng, shape: HeadShape) -> SampleSet {
    let n = r.random_range(4..24);
    let items = random_labeled(r, shape, n);
    let (positives, negatives) = items.into_iter().partition(|p| !p.is_background());
    SampleSet {
        positives,
        negatives,
        bias: longtail_det::samplers::Bias::Unbiased,
    }
}

/// Draws whose inputs put a hidden pre-activation this close to zero are
/// redrawn: the loss is not differentiable within a step of the kink.
const KINK_MARGIN: f64 = 1e-3;

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let shape = SMALL_SHAPE;
    let mut r = rng(4);
    let mut worst: f64 = 0.0;
    let (mut accepted, mut redrawn) = (0, 0);
    let mut attempt = 0u64;
    while accepted < 100 {
        attempt += 1;
        let ph = HeadParams::init(shape, &mut rng::stream(attempt, &[41]));
        let pt = HeadParams::init(shape, &mut rng::stream(attempt, &[42]));
        let r_h = random_set(&mut r, shape);
        let r_t = random_set(&mut r, shape);
        let items = random_labeled(&mut r, shape, 12);
        let feats = |s: &SampleSet| s.iter().map(|p| p.feature.clone()).collect::<Vec<_>>();
        let (fh, ft) = (feats(&r_h), feats(&r_t));
        let margin = kink_distance(&ph, fh.iter().map(Vec::as_slice))
            .min(kink_distance(&pt, ft.iter().map(Vec::as_slice)))
            .min(kink_distance(&ph, items.iter().map(|p| p.feature.as_slice())));
        if margin < KINK_MARGIN {
            redrawn += 1;
            continue;
        }
        accepted += 1;

        // single head
        let analytic = flatten(&head_loss(&ph, &r_h).unwrap().grads);
        let numeric = numeric_grad(&ph, FD_STEP, |q| head_loss(q, &r_h).unwrap().total);
        worst = worst.max(max_rel_err(&analytic, &numeric, FD_FLOOR));

        // weighted batch, as used by the masked single-head mode
        let weights: Vec<f64> = (0..12).map(|i| (i % 2) as f64 + 0.5 * (i % 3) as f64).collect();
        let batch = TrainingBatch::from_proposals(shape, items.iter().zip(weights.iter().copied())).unwrap();
        let analytic = flatten(&batch_loss(&ph, &batch).unwrap().grads);
        let numeric = numeric_grad(&ph, FD_STEP, |q| batch_loss(q, &batch).unwrap().total);
        worst = worst.max(max_rel_err(&analytic, &numeric, FD_FLOOR));

        // bilateral loss, both heads
        let lambda = [0.5, 1.0, 2.0, 5.0][accepted % 4];
        let l = bbh_loss(&ph, &pt, &r_h, &r_t, lambda).unwrap();
        let num_h = numeric_grad(&ph, FD_STEP, |q| bbh_loss(q, &pt, &r_h, &r_t, lambda).unwrap().breakdown.total);
        let num_t = numeric_grad(&pt, FD_STEP, |q| bbh_loss(&ph, q, &r_h, &r_t, lambda).unwrap().breakdown.total);
        worst = worst
            .max(max_rel_err(&flatten(&l.grads_h), &num_h, FD_FLOOR))
            .max(max_rel_err(&flatten(&l.grads_t), &num_t, FD_FLOOR));
    }
    let t = start.elapsed();
    outcome(
        worst <= 1e-4 && within(t, 30.0),
        format!(
            "100 draws ({redrawn} redrawn within {KINK_MARGIN:e} of a ReLU kink), max rel err {worst:.2e} (limit 1e-4), {:.2}s (limit 30s)",
            t.as_secs_f64()
        ),
    )
}

// 5 -----------------------------------------------------------------------

fn combined_loss_structure() -> Outcome {
    let shape = SMALL_SHAPE;
    let mut r = rng(5);
    let mut ok = true;
    for draw in 0..20u64 {
        let ph = HeadParams::init(shape, &mut rng::stream(draw, &[51]));
        let pt = HeadParams::init(shape, &mut rng::stream(draw, &[52]));
        let r_h = random_set(&mut r, shape);
        let r_t = random_set(&mut r, shape);
        let lh = head_loss(&ph, &r_h).unwrap();
        let lt = head_loss(&pt, &r_t).unwrap();
        for lambda in [0.0, 1.0, 2.0, 5.0] {
            let l = bbh_loss(&ph, &pt, &r_h, &r_t, lambda).unwrap();
            ok &= l.breakdown.total == lh.total + lambda * lt.total;
            ok &= l.breakdown.l_h == lh.total && l.breakdown.l_t == lt.total;
            ok &= flatten(&l.grads_h) == flatten(&lh.grads);
            ok &= flatten(&l.grads_t) == flatten(&lt.grads).iter().map(|g| g * lambda).collect::<Vec<_>>();
            if lambda == 0.0 {
                ok &= flatten(&l.grads_t).iter().all(|&g| g == 0.0);
            }
        }
    }

    // default wiring, and a zero weight freezes the tail head during training
    let cfg = ExperimentConfig::default();
    ok &= cfg.lambda == 2.0 && cfg.train_config().lambda == 2.0;
    let mut small = ExperimentConfig::default();
    small.dataset.num_scenes = 8;
    let data = small.generate_dataset().unwrap();
    let p = data.partition().unwrap();
    let frozen = TrainConfig {
        epochs: 2,
        lambda: 0.0,
        ..small.train_config()
    };
    let init = train(&data.scenes, &data.config, &p, Mode::CbsBbh, &TrainConfig { epochs: 0, ..frozen.clone() }, 9)
        .unwrap()
        .model;
    let trained = train(&data.scenes, &data.config, &p, Mode::CbsBbh, &frozen, 9).unwrap().model;
    match (init, trained) {
        (TrainedModel::Dual(a), TrainedModel::Dual(b)) => {
            ok &= a.tail == b.tail && a.head != b.head;
        }
        _ => ok = false,
    }
    outcome(ok, "lambda in {0, 1, 2, 5}: exact totals and gradients; default 2.0; zero weight freezes tail head")
}

// 6 -----------------------------------------------------------------------

fn impure(dets: &[ScoredDetection], p: &ClassPartition) -> usize {
    dets.iter()
        .filter(|d| match (p.group_of(d.class_id), d.source_head) {
            (Group::Head, SourceHead::Head) | (Group::Tail, SourceHead::Tail) => false,
            _ => true,
        })
        .count()
}

fn group_purity(runs: &[RunResult], partition: &ClassPartition) -> Outcome {
    let mut violations = 0;
    let mut checked = 0;

    // random heads, permissive thresholds, several partitions
    let cfg = ExperimentConfig::default();
    let data = {
        let mut c = cfg.clone();
        c.dataset.num_scenes = 6;
        c.generate_dataset().unwrap()
    };
    let shape = HeadShape {
        feature_dim: data.config.feature_dim,
        hidden: 16,
        num_classes: 10,
    };
    let partitions = [
        partition.clone(),
        ClassPartition::new([3], (0..10).filter(|&c| c != 3)).unwrap(),
        ClassPartition::new((0..10).filter(|&c| c != 8), [8]).unwrap(),
    ];
    let inf = InferenceConfig {
        score_threshold: 0.0,
        ..InferenceConfig::default()
    };
    for (k, scene) in data.scenes.iter().enumerate() {
        let ph = HeadParams::init(shape, &mut rng::stream(k as u64, &[61]));
        let pt = HeadParams::init(shape, &mut rng::stream(k as u64, &[62]));
        let props = generate_proposals(scene, &data.config, &cfg.train.proposals, &mut rng::stream(k as u64, &[63]));
        for p in &partitions {
            let dets = predict_dual(&ph, &pt, &props, p, &inf).unwrap();
            checked += dets.len();
            violations += impure(&dets, p);
        }
    }

    // every bilateral run of the ablation
    for run in runs.iter().filter(|r| {
        matches!(r.mode, Mode::RsDblBbh | Mode::CesBbh | Mode::CbsBbh | Mode::Mmf)
    }) {
        for dets in run.detections.values() {
            checked += dets.len();
            violations += impure(dets, partition);
        }
    }
    outcome(
        violations == 0 && checked > 0,
        format!("{checked} detections from bilateral inference, {violations} from the wrong head"),
    )
}

// 7 -----------------------------------------------------------------------

fn detection_cap(runs: &[RunResult]) -> Outcome {
    let cap = ExperimentConfig::default().inference.max_detections_per_scene;
    let max = runs
        .iter()
        .flat_map(|r| r.detections.values().map(Vec::len))
        .max()
        .unwrap_or(0);
    let scenes: usize = runs.iter().map(|r| r.detections.len()).sum();

    // and where the cap binds
    let shape = HeadShape {
        feature_dim: 11,
        hidden: 8,
        num_classes: 10,
    };
    let params = HeadParams::zeros(shape);
    let props: Vec<_> = (0..400)
        .map(|i| longtail_det::scenes::Proposal {
            bbox: bx(i as f64 * 3.0, 0.0, i as f64 * 3.0 + 2.0, 2.0),
            feature: vec![0.0; 11],
        })
        .collect();
    let dense = longtail_det::fusion::predict_single(
        &params,
        &props,
        &InferenceConfig {
            score_threshold: 0.0,
            ..InferenceConfig::default()
        },
    )
    .unwrap();
    outcome(
        max <= cap && dense.len() == cap,
        format!("{} runs, {scenes} scene evaluations, max {max} per scene (cap {cap}); saturated case {}", runs.len(), dense.len()),
    )
}

// 8, 9 --------------------------------------------------------------------

fn by_mode<'a>(runs: &'a [RunResult], mode: Mode) -> Vec<&'a RunResult> {
    let mut v: Vec<&RunResult> = runs.iter().filter(|r| r.mode == mode).collect();
    v.sort_by_key(|r| r.seed);
    v
}

fn directional(runs: &[RunResult], elapsed: Duration) -> Outcome {
    let rs = by_mode(runs, Mode::Rs);
    let cb = by_mode(runs, Mode::CbsBbh);
    let tail_wins = rs.iter().zip(&cb).filter(|(a, b)| b.report.tail_group_ap > a.report.tail_group_ap).count();
    let ap_holds = rs.iter().zip(&cb).filter(|(a, b)| b.report.ap >= a.report.ap).count();
    let tails: Vec<String> = rs
        .iter()
        .zip(&cb)
        .map(|(a, b)| format!("{:.3}->{:.3}", a.report.tail_group_ap, b.report.tail_group_ap))
        .collect();
    outcome(
        rs.len() == 5 && tail_wins >= 4 && ap_holds >= 4 && within(elapsed, 600.0),
        format!(
            "tail AP higher in {tail_wins}/5 seeds [{}], AP not lower in {ap_holds}/5, {:.0}s (limit 600s)",
            tails.join(" "),
            elapsed.as_secs_f64()
        ),
    )
}

fn ablation_ordering(runs: &[RunResult]) -> Outcome {
    let dbl = by_mode(runs, Mode::RsDbl);
    let cb = by_mode(runs, Mode::CbsBbh);
    let ces = by_mode(runs, Mode::CesBbh);
    let not_beaten = dbl.iter().zip(&cb).filter(|(d, c)| d.report.ap <= c.report.ap).count();
    let mean = |v: &[&RunResult]| v.iter().map(|r| r.report.tail_group_ap).sum::<f64>() / v.len() as f64;
    let (m_ces, m_cbs) = (mean(&ces), mean(&cb));
    outcome(
        not_beaten >= 4 && m_ces <= m_cbs,
        format!(
            "rs-dbl AP <= cbs+bbh in {not_beaten}/5 seeds; mean tail AP ces+bbh {m_ces:.4} vs cbs+bbh {m_cbs:.4}"
        ),
    )
}

// 10 ----------------------------------------------------------------------

fn determinism() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.seeds = vec![1];
    let data = cfg.generate_dataset().unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut listings = Vec::new();
    for d in &dirs {
        cmd_run(&cfg, &data, d.path(), 1).unwrap();
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(d.path())
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        listings.push(files);
    }
    let same = listings[0] == listings[1] && !listings[0].is_empty();
    outcome(same, format!("{} files compared byte for byte", listings[0].len()))
}

fn main() {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!("[{}] {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };

    report(1, "biased sampler count law", sampler_law());
    report(2, "NMS oracle equivalence", nms_oracle_equivalence());
    report(3, "AP oracle equivalence", ap_oracle_equivalence());
    report(4, "analytic gradients", gradient_check());
    report(5, "combined loss structure", combined_loss_structure());

    let cfg = ExperimentConfig::default();
    let data = cfg.generate_dataset().unwrap();
    let partition = cfg.class_partition(&data.specs).unwrap();
    let jobs = |modes: &[Mode]| -> Vec<(ExperimentConfig, u64)> {
        let mut v = Vec::new();
        for &m in modes {
            v.extend(cfg.seeds.iter().map(|&s| (cfg.with_mode(m), s)));
        }
        v
    };
    let start = Instant::now();
    let mut runs = run_many(&data, &jobs(&[Mode::Rs, Mode::CbsBbh]), threads).unwrap();
    let headline = start.elapsed();
    let rest: Vec<Mode> = Mode::ABLATION
        .into_iter()
        .filter(|m| !matches!(m, Mode::Rs | Mode::CbsBbh))
        .collect();
    runs.extend(run_many(&data, &jobs(&rest), threads).unwrap());

    report(6, "group purity", group_purity(&runs, &partition));
    report(7, "detection cap", detection_cap(&runs));
    report(8, "cbs+bbh vs rs direction", directional(&runs, headline));
    report(9, "ablation ordering", ablation_ordering(&runs));
    report(10, "run determinism", determinism());

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!(", failed {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
