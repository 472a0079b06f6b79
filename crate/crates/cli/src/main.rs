use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use longtail_det::experiment::{
    self, class_names, cmd_ablate, cmd_run, cmd_sweep_lambda, evaluate_detection_file, run_csv_header, ExperimentConfig,
};
use longtail_det::scenes::Dataset;
use longtail_det::train::Mode;
use longtail_det::Error;

/// Long-tail detection head lab: synthetic scenes, class-biased sampling,
/// bilateral box heads and the baselines they are compared against.
#[derive(Parser)]
#[command(name = "ltdet", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "LTDET_OUT_DIR", default_value = "ltdet-out")]
    out: PathBuf,
    /// Comma-separated seeds, overriding the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Tail-head loss weight, overriding the config.
    #[arg(long)]
    lambda: Option<f64>,
    /// Parallel (mode, seed) runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct WithDataset {
    #[command(flatten)]
    common: Common,
    /// Dataset file from `generate`; generated from the config when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset file.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Destination file.
        #[arg(long, default_value = "dataset.jsonl")]
        dataset: PathBuf,
    },
    /// Train and evaluate one mode for every seed.
    Run {
        #[command(flatten)]
        args: WithDataset,
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Run the fixed ablation mode list and write ablation.csv.
    Ablate {
        #[command(flatten)]
        args: WithDataset,
    },
    /// Train cbs+bbh over a list of lambdas.
    SweepLambda {
        #[command(flatten)]
        args: WithDataset,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,2,3,4,5,6")]
        lambdas: Vec<f64>,
    },
    /// Re-score a detection file against the held-out split.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Detection file written by `run`.
        #[arg(long)]
        detections: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> longtail_det::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn apply_overrides(cfg: &mut ExperimentConfig, common: &Common) -> longtail_det::Result<()> {
    if let Some(s) = &common.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(l) = common.lambda {
        cfg.lambda = l;
    }
    cfg.validate()
}

fn load_dataset(cfg: &ExperimentConfig, path: Option<&Path>) -> longtail_det::Result<Dataset> {
    match path {
        Some(p) => Dataset::load(p),
        None => cfg.generate_dataset(),
    }
}

fn setup(args: &WithDataset) -> longtail_det::Result<(ExperimentConfig, Dataset)> {
    let mut cfg = load_config(args.common.config.as_deref())?;
    apply_overrides(&mut cfg, &args.common)?;
    let data = load_dataset(&cfg, args.dataset.as_deref())?;
    Ok((cfg, data))
}

fn print_runs(runs: &[experiment::RunResult], names: &[String]) {
    println!("{}", run_csv_header(names));
    for r in runs {
        println!("{}", experiment::run_csv_row(r));
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Command::Generate { config, dataset } => {
            let cfg = load_config(config.as_deref())?;
            let data = cfg.generate_dataset()?;
            data.save(&dataset)?;
            println!("wrote {} scenes to {}", data.scenes.len(), dataset.display());
        }
        Command::Run { args, mode } => {
            let (mut cfg, data) = setup(&args)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            let out = cmd_run(&cfg, &data, &args.common.out, args.common.jobs)?;
            print_runs(&out.runs, &class_names(&data.specs));
        }
        Command::Ablate { args } => {
            let (cfg, data) = setup(&args)?;
            cmd_ablate(&cfg, &data, &args.common.out, args.common.jobs)?;
            let table = args.common.out.join("ablation.csv");
            print!("{}", std::fs::read_to_string(&table).with_context(|| table.display().to_string())?);
        }
        Command::SweepLambda { args, lambdas } => {
            let (cfg, data) = setup(&args)?;
            let (rows, _) = cmd_sweep_lambda(&cfg, &data, &lambdas, &args.common.out, args.common.jobs)?;
            println!("lambda,AP,tail_AP,head_AP");
            for r in rows {
                println!("{:.3},{:.6},{:.6},{:.6}", r.lambda, r.mean_ap, r.mean_tail_ap, r.mean_head_ap);
            }
        }
        Command::Evaluate { config, dataset, detections } => {
            let cfg = load_config(config.as_deref())?;
            let data = load_dataset(&cfg, dataset.as_deref())?;
            let partition = cfg.class_partition(&data.specs)?;
            let report = evaluate_detection_file(&data, &partition, &detections)?;
            let names = class_names(&data.specs);
            println!("{}", longtail_det::eval::EvalReport::csv_header(&names));
            let vals: Vec<String> = report.csv_values().iter().map(|v| format!("{v:.6}")).collect();
            println!("{}", vals.join(","));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(err) if err.is_config_error() => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
