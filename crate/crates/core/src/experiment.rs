//! Experiment harness: configuration, the train/eval split, single runs,
//! seed aggregation, the ablation table and the lambda sweep. All report
//! files are written atomically and are byte-identical for identical inputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::fusion::{predict_all_nms, predict_cascade, predict_dual, predict_single, InferenceConfig};
use crate::geometry::{BBox, ScoredDetection, SourceHead};
use crate::rng;
use crate::samplers::SamplerConfig;
use crate::scenes::{
    default_visdrone_spec, generate_proposals, validate_specs, ClassPartition, ClassSpec, Dataset, Proposal, Scene,
    SceneConfig,
};
use crate::train::{train, Checkpoint, Mode, TrainConfig, TrainedModel};

/// One in `EVAL_BUCKETS` scenes (by hashed id) is held out for evaluation.
pub const EVAL_BUCKETS: u64 = 5;
const SPLIT_SALT: u64 = 0x7E57_5EED_0000_0001;

/// Deterministic 80/20 split keyed only by the scene id.
pub fn is_eval_scene(scene_id: u64) -> bool {
    rng::splitmix64(scene_id ^ SPLIT_SALT) % EVAL_BUCKETS == 0
}

pub fn split_scenes(scenes: &[Scene]) -> (Vec<Scene>, Vec<Scene>) {
    scenes.iter().cloned().partition(|s| !is_eval_scene(s.scene_id))
}

pub fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: SceneConfig,
    /// Class list; the VisDrone defaults when absent.
    pub classes: Option<Vec<ClassSpec>>,
    /// Head/tail split; taken from the class groups when absent.
    pub partition: Option<ClassPartition>,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub inference: InferenceConfig,
    pub mode: Mode,
    pub lambda: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: SceneConfig::default(),
            classes: None,
            partition: None,
            sampler: SamplerConfig::default(),
            train: TrainConfig::default(),
            seeds: default_seeds(),
            inference: InferenceConfig::default(),
            mode: Mode::CbsBbh,
            lambda: 2.0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable in TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds list is empty".into()));
        }
        self.dataset.validate()?;
        validate_specs(&self.class_specs())?;
        self.inference.validate()?;
        self.train_config().validate()
    }

    pub fn class_specs(&self) -> Vec<ClassSpec> {
        self.classes.clone().unwrap_or_else(default_visdrone_spec)
    }

    pub fn class_partition(&self, specs: &[ClassSpec]) -> Result<ClassPartition> {
        match &self.partition {
            Some(p) => ClassPartition::new(p.head_classes.iter().copied(), p.tail_classes.iter().copied()),
            None => ClassPartition::from_specs(specs),
        }
    }

    /// Training settings with the top-level sampler and lambda folded in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            sampler: self.sampler,
            lambda: self.lambda,
            ..self.train.clone()
        }
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self {
            lambda,
            ..self.clone()
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn generate_dataset(&self) -> Result<Dataset> {
        Dataset::generate(self.class_specs(), self.dataset.clone())
    }
}

/// Everything produced by training and evaluating one (mode, seed) pair.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub mode: Mode,
    pub seed: u64,
    pub lambda: f64,
    pub config_hash: String,
    pub report: EvalReport,
    pub detections: BTreeMap<u64, Vec<ScoredDetection>>,
    pub model: TrainedModel,
    pub epoch_losses: Vec<f64>,
    pub num_train_scenes: usize,
}

/// Detections for one scene's proposals under `mode`'s inference rule.
pub fn infer(
    model: &TrainedModel,
    mode: Mode,
    proposals: &[Proposal],
    partition: &ClassPartition,
    cfg: &InferenceConfig,
) -> Result<Vec<ScoredDetection>> {
    match model {
        TrainedModel::Single(p) => predict_single(p, proposals, cfg),
        TrainedModel::Dual(pair) if mode == Mode::CbsBbhAll => predict_all_nms(&pair.head, &pair.tail, proposals, cfg),
        TrainedModel::Dual(pair) => predict_dual(&pair.head, &pair.tail, proposals, partition, cfg),
        TrainedModel::Cascade(stages) => predict_cascade(stages, proposals, partition, cfg),
    }
}

/// Proposals for held-out scenes depend on the seed and scene only, never on
/// the mode.
pub fn eval_proposals(scene: &Scene, dataset: &Dataset, cfg: &ExperimentConfig, seed: u64) -> Vec<Proposal> {
    let mut r = rng::stream(seed, &[rng::EVAL_PROPOSALS, scene.scene_id]);
    generate_proposals(scene, &dataset.config, &cfg.train.proposals, &mut r)
}

/// Train `cfg.mode` with `seed` on the training split and evaluate it on the
/// held-out split.
pub fn run_one(dataset: &Dataset, cfg: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    cfg.validate()?;
    let partition = cfg.class_partition(&dataset.specs)?;
    if partition.num_classes() != dataset.num_classes() {
        return Err(Error::Config(format!(
            "partition covers {} classes, dataset has {}",
            partition.num_classes(),
            dataset.num_classes()
        )));
    }
    let (train_scenes, eval_scenes) = split_scenes(&dataset.scenes);
    let outcome = train(&train_scenes, &dataset.config, &partition, cfg.mode, &cfg.train_config(), seed)?;
    let mut detections = BTreeMap::new();
    for scene in &eval_scenes {
        let proposals = eval_proposals(scene, dataset, cfg, seed);
        let dets = infer(&outcome.model, cfg.mode, &proposals, &partition, &cfg.inference)?;
        detections.insert(scene.scene_id, dets);
    }
    let report = evaluate(&detections, &eval_scenes, &partition)?;
    Ok(RunResult {
        mode: cfg.mode,
        seed,
        lambda: cfg.lambda,
        config_hash: cfg.hash(),
        report,
        detections,
        model: outcome.model,
        epoch_losses: outcome.epoch_losses,
        num_train_scenes: train_scenes.len(),
    })
}

/// Run every `(config, seed)` job on a pool of `jobs` threads. Output order
/// follows input order.
pub fn run_many(dataset: &Dataset, jobs: &[(ExperimentConfig, u64)], threads: usize) -> Result<Vec<RunResult>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|(cfg, seed)| run_one(dataset, cfg, *seed))
            .collect()
    })
}

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

/// Write via a temporary sibling and rename into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// One line per detection: `scene_id class_id score x1 y1 x2 y2 source`.
pub fn format_detections(dets: &BTreeMap<u64, Vec<ScoredDetection>>) -> String {
    let mut out = String::new();
    for (scene, list) in dets {
        for d in list {
            let b = d.bbox;
            let _ = writeln!(
                out,
                "{scene} {} {:.6} {:.6} {:.6} {:.6} {:.6} {}",
                d.class_id,
                d.score,
                b.x1(),
                b.y1(),
                b.x2(),
                b.y2(),
                d.source_head
            );
        }
    }
    out
}

pub fn parse_detections(r: impl BufRead, path: &Path) -> Result<BTreeMap<u64, Vec<ScoredDetection>>> {
    let mut out: BTreeMap<u64, Vec<ScoredDetection>> = BTreeMap::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Data {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("`{s}`: {e}")));
        let scene: u64 = f[0].parse().map_err(|e| err(format!("scene id: {e}")))?;
        let class_id: usize = f[1].parse().map_err(|e| err(format!("class id: {e}")))?;
        let score = num(f[2])?;
        if !(0.0..=1.0).contains(&score) {
            return Err(err(format!("score {score} outside [0, 1]")));
        }
        let bbox = BBox::new(num(f[3])?, num(f[4])?, num(f[5])?, num(f[6])?).map_err(|e| err(e.to_string()))?;
        let source: SourceHead = f[7].parse().map_err(|e: Error| err(e.to_string()))?;
        out.entry(scene)
            .or_default()
            .push(ScoredDetection::new(bbox, class_id, score, source));
    }
    Ok(out)
}

/// Re-score a detection file against the held-out split of `dataset`.
pub fn evaluate_detection_file(dataset: &Dataset, partition: &ClassPartition, path: &Path) -> Result<EvalReport> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let dets = parse_detections(BufReader::new(file), path)?;
    let (_, eval_scenes) = split_scenes(&dataset.scenes);
    evaluate(&dets, &eval_scenes, partition)
}

pub fn class_names(specs: &[ClassSpec]) -> Vec<String> {
    specs.iter().map(|s| s.name.clone()).collect()
}

/// Structured dump of one run's evaluation.
#[derive(Debug, Serialize)]
struct ReportFile<'a> {
    mode: Mode,
    seed: u64,
    lambda: f64,
    config_hash: &'a str,
    num_train_scenes: usize,
    class_names: &'a [String],
    epoch_losses: &'a [f64],
    report: &'a EvalReport,
}

pub fn run_csv_header(names: &[String]) -> String {
    format!("mode,seed,lambda,config_hash,{}", EvalReport::csv_header(names))
}

pub fn run_csv_row(r: &RunResult) -> String {
    let vals: Vec<String> = r.report.csv_values().into_iter().map(fmt6).collect();
    format!("{},{},{},{},{}", r.mode, r.seed, fmt6(r.lambda), r.config_hash, vals.join(","))
}

fn run_stem(r: &RunResult) -> String {
    format!("{}_seed{}", r.mode.slug(), r.seed)
}

/// Per-run report (JSON and one-row CSV), detections and checkpoint.
pub fn write_run_files(out_dir: &Path, r: &RunResult, names: &[String]) -> Result<Vec<PathBuf>> {
    let stem = run_stem(r);
    let json = serde_json::to_string_pretty(&ReportFile {
        mode: r.mode,
        seed: r.seed,
        lambda: r.lambda,
        config_hash: &r.config_hash,
        num_train_scenes: r.num_train_scenes,
        class_names: names,
        epoch_losses: &r.epoch_losses,
        report: &r.report,
    })
    .expect("report serializes");
    let csv = format!("{}\n{}\n", run_csv_header(names), run_csv_row(r));
    let ck = serde_json::to_string(&Checkpoint::new(&r.model, r.mode, r.seed, &r.config_hash)).expect("checkpoint serializes");
    let files = [
        (format!("report_{stem}.json"), json),
        (format!("report_{stem}.csv"), csv),
        (format!("detections_{stem}.txt"), format_detections(&r.detections)),
        (format!("checkpoint_{stem}.json"), ck),
    ];
    files
        .into_iter()
        .map(|(name, body)| {
            let p = out_dir.join(name);
            write_atomic(&p, body.as_bytes()).map(|_| p)
        })
        .collect()
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Column-wise mean and std of the runs' CSV metrics.
pub fn aggregate_metrics(runs: &[&RunResult]) -> Vec<(f64, f64)> {
    let cols: Vec<Vec<f64>> = runs.iter().map(|r| r.report.csv_values()).collect();
    let width = cols.first().map_or(0, Vec::len);
    (0..width)
        .map(|j| mean_std(&cols.iter().map(|c| c[j]).collect::<Vec<_>>()))
        .collect()
}

fn metric_columns(names: &[String]) -> String {
    EvalReport::csv_header(names)
        .split(',')
        .flat_map(|m| [format!("{m}_mean"), format!("{m}_std")])
        .collect::<Vec<_>>()
        .join(",")
}

fn metric_values(agg: &[(f64, f64)]) -> String {
    agg.iter()
        .flat_map(|&(m, s)| [fmt6(m), fmt6(s)])
        .collect::<Vec<_>>()
        .join(",")
}

pub fn aggregate_csv(runs: &[&RunResult], names: &[String]) -> String {
    let first = runs.first().expect("at least one run");
    let seeds: Vec<String> = runs.iter().map(|r| r.seed.to_string()).collect();
    format!(
        "mode,lambda,config_hash,seeds,{}\n{},{},{},{},{}\n",
        metric_columns(names),
        first.mode,
        fmt6(first.lambda),
        first.config_hash,
        seeds.join(";"),
        metric_values(&aggregate_metrics(runs))
    )
}

/// Summary of a finished `run` command.
#[derive(Debug)]
pub struct RunSummary {
    pub runs: Vec<RunResult>,
    pub files: Vec<PathBuf>,
}

/// Train and evaluate `cfg.mode` for every seed; write per-seed reports and
/// a seed-aggregated CSV.
pub fn cmd_run(cfg: &ExperimentConfig, dataset: &Dataset, out_dir: &Path, threads: usize) -> Result<RunSummary> {
    cfg.validate()?;
    let jobs: Vec<_> = cfg.seeds.iter().map(|&s| (cfg.clone(), s)).collect();
    let runs = run_many(dataset, &jobs, threads)?;
    let names = class_names(&dataset.specs);
    let mut files = Vec::new();
    for r in &runs {
        files.extend(write_run_files(out_dir, r, &names)?);
    }
    let refs: Vec<&RunResult> = runs.iter().collect();
    let agg = out_dir.join(format!("aggregate_{}.csv", cfg.mode.slug()));
    write_atomic(&agg, aggregate_csv(&refs, &names).as_bytes())?;
    files.push(agg);
    Ok(RunSummary { runs, files })
}

/// Configuration columns echoed into each ablation row.
pub fn config_echo(cfg: &ExperimentConfig, mode: Mode) -> Vec<(&'static str, String)> {
    let sampler = if mode == Mode::RsDbl { cfg.sampler.doubled() } else { cfg.sampler };
    vec![
        ("num_samples", sampler.num_samples.to_string()),
        ("pos_fraction", fmt6(sampler.pos_fraction)),
        ("lambda", fmt6(cfg.lambda)),
        ("epochs", cfg.train.epochs.to_string()),
        ("base_lr", fmt6(cfg.train.base_lr)),
        ("hidden", cfg.train.hidden.to_string()),
    ]
}

/// Run the fixed ablation mode list over all seeds; write per-run files and
/// `ablation.csv` with one row per mode.
pub fn cmd_ablate(cfg: &ExperimentConfig, dataset: &Dataset, out_dir: &Path, threads: usize) -> Result<RunSummary> {
    cfg.validate()?;
    let jobs: Vec<_> = Mode::ABLATION
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (cfg.with_mode(m), s)))
        .collect();
    let runs = run_many(dataset, &jobs, threads)?;
    let names = class_names(&dataset.specs);
    let mut files = Vec::new();
    for r in &runs {
        files.extend(write_run_files(out_dir, r, &names)?);
    }
    let echo_cols: Vec<&str> = config_echo(cfg, Mode::Rs).into_iter().map(|e| e.0).collect();
    let mut table = format!("mode,config_hash,{},{}\n", echo_cols.join(","), metric_columns(&names));
    for mode in Mode::ABLATION {
        let rows: Vec<&RunResult> = runs.iter().filter(|r| r.mode == mode).collect();
        let echo: Vec<String> = config_echo(cfg, mode).into_iter().map(|e| e.1).collect();
        let _ = writeln!(
            table,
            "{},{},{},{}",
            mode,
            rows[0].config_hash,
            echo.join(","),
            metric_values(&aggregate_metrics(&rows))
        );
    }
    let path = out_dir.join("ablation.csv");
    write_atomic(&path, table.as_bytes())?;
    files.push(path);
    Ok(RunSummary { runs, files })
}

/// One row of the lambda sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub config_hash: String,
    pub mean_ap: f64,
    pub mean_tail_ap: f64,
    pub mean_head_ap: f64,
}

/// Train `cbs+bbh` for every lambda and seed; write `lambda_sweep.csv`.
pub fn cmd_sweep_lambda(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    lambdas: &[f64],
    out_dir: &Path,
    threads: usize,
) -> Result<(Vec<SweepRow>, Vec<RunResult>)> {
    if lambdas.is_empty() {
        return Err(Error::Config("lambda list is empty".into()));
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l >= 0.0)) {
        return Err(Error::Config(format!("lambda {l} is negative")));
    }
    let base = cfg.with_mode(Mode::CbsBbh);
    base.validate()?;
    let jobs: Vec<_> = lambdas
        .iter()
        .flat_map(|&l| {
            let c = base.with_lambda(l);
            cfg.seeds.iter().map(move |&s| (c.clone(), s))
        })
        .collect();
    let runs = run_many(dataset, &jobs, threads)?;
    let mut rows = Vec::new();
    let mut csv = String::from("lambda,config_hash,AP_mean,tail_AP_mean,head_AP_mean\n");
    for (i, &l) in lambdas.iter().enumerate() {
        let group = &runs[i * cfg.seeds.len()..(i + 1) * cfg.seeds.len()];
        let mean = |f: fn(&EvalReport) -> f64| mean_std(&group.iter().map(|r| f(&r.report)).collect::<Vec<_>>()).0;
        let row = SweepRow {
            lambda: l,
            config_hash: group[0].config_hash.clone(),
            mean_ap: mean(|r| r.ap),
            mean_tail_ap: mean(|r| r.tail_group_ap),
            mean_head_ap: mean(|r| r.head_group_ap),
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            fmt6(row.lambda),
            row.config_hash,
            fmt6(row.mean_ap),
            fmt6(row.mean_tail_ap),
            fmt6(row.mean_head_ap)
        );
        rows.push(row);
    }
    write_atomic(&out_dir.join("lambda_sweep.csv"), csv.as_bytes())?;
    Ok((rows, runs))
}
