use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pnp::ablation::{self, Mode};
use pnp::checkpoint::Checkpoint;
use pnp::data::{generate_dataset, load_split};
use pnp::eval::{evaluate_cases, export_embeddings, label_volume, report_csv, summarize, write_reports, CaseReport};
use pnp::inspect::audit;
use pnp::manifest::Split;
use pnp::train::{build_model, train, TrainOptions};
use pnp::volume::read_volume;
use pnp::{config, PnpError, Result, RunConfig};

#[derive(Parser)]
#[command(name = "pnpnet", version, about = "Pull-push boundary segmentation on volumetric data")]
struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Single-threaded execution for bit-exact reruns.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenArgs),
    /// Train a model on the dataset's train split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train and test baseline, +sdm, +ccm and +both.
    Ablation(AblationArgs),
    /// Dump and verify the EID kernels of a checkpoint.
    InspectKernel { checkpoint: PathBuf },
    /// Compare two label volumes.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    regime: Option<String>,
    /// Data seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Model and shuffling seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Report directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-case centers and mask embeddings to this directory.
    #[arg(long)]
    export: Option<PathBuf>,
}

#[derive(Args)]
struct AblationArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MetricsArgs {
    pred: PathBuf,
    gt: PathBuf,
    /// Class count; defaults to the largest label present plus one.
    #[arg(long)]
    classes: Option<usize>,
}

/// Config file, then `--set` overrides, then command flags.
fn resolve(cli: &Cli, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, fallback) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) if p.exists() => RunConfig::load(p)?,
        _ => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| PnpError::config(kv.clone(), "expected KEY=VALUE"))?;
        cfg.set(k.trim(), v)?;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => {
            let mut cfg = resolve(cli, None)?;
            if let Some(r) = &a.regime {
                cfg.gen.regime = config::parse_regime(r)?;
            }
            if let Some(s) = a.seed {
                cfg.gen.seed = s;
            }
            if let Some(n) = a.samples {
                cfg.samples = n;
            }
            if let Some(o) = &a.out {
                cfg.data_dir = o.clone();
            }
            let sum = generate_dataset(&cfg)?;
            println!("wrote {} volumes to {}", cfg.samples, cfg.data_dir.display());
            println!("checksum {sum}");
        }
        Command::Train(a) => {
            let fallback = a.resume.as_ref().and_then(|r| run_config_near(r));
            let mut cfg = resolve(cli, fallback.as_deref())?;
            if let Some(d) = &a.data {
                cfg.data_dir = d.clone();
            }
            if let Some(o) = &a.out {
                cfg.out_dir = o.clone();
            }
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let opts = TrainOptions {
                resume: a.resume.clone(),
                stop_after: None,
            };
            let outcome = train(&cfg, &opts)?;
            for r in &outcome.rows {
                println!(
                    "epoch {:>3}  total {:.5}  dice {:.5}  ce {:.5}  lcc {:.5}  lr {:.2e}",
                    r.epoch, r.total, r.dice, r.ce, r.lcc, r.lr
                );
            }
            println!("checkpoint {}", outcome.final_checkpoint.display());
        }
        Command::Eval(a) => {
            let fallback = run_config_near(&a.checkpoint);
            let mut cfg = resolve(cli, fallback.as_deref())?;
            if let Some(d) = &a.data {
                cfg.data_dir = d.clone();
            }
            cfg.validate()?;
            let split: Split = a.split.parse()?;
            let (model, mut store) = build_model(&cfg)?;
            Checkpoint::load(&a.checkpoint)?.restore(&mut store, None)?;
            let cases = load_split(&cfg, split)?;
            let reports = evaluate_cases(&model, &store, &cases, cfg.deterministic)?;
            let dir = a
                .out
                .clone()
                .unwrap_or_else(|| a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
            write_reports(&dir, &reports, cfg.model.classes)?;
            cfg.write(&dir)?;
            if let Some(e) = &a.export {
                export_embeddings(&model, &store, &cases, e)?;
                println!("embeddings in {}", e.display());
            }
            let s = summarize(&reports);
            println!(
                "{} cases  dice {:.3}  hd95 {:.3}  assd {:.3}  sentinels {}",
                reports.len(),
                s.dice,
                s.hd95,
                s.assd,
                s.sentinels
            );
            println!("reports in {}", dir.display());
        }
        Command::Ablation(a) => {
            let mut cfg = resolve(cli, None)?;
            if let Some(d) = &a.data {
                cfg.data_dir = d.clone();
            }
            if let Some(o) = &a.out {
                cfg.out_dir = o.clone();
            }
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let results = ablation::run(&cfg, &Mode::ALL)?;
            print!("{}", ablation::table(&results));
        }
        Command::InspectKernel { checkpoint } => {
            let a = audit(&Checkpoint::load(checkpoint)?)?;
            print!("{}", a.text);
            if !a.violations.is_empty() {
                return Err(PnpError::Constraint(format!(
                    "{} of {} kernels violate the EID layout; first: {}",
                    a.violations.len(),
                    a.kernels,
                    a.violations[0]
                )));
            }
            println!("{} kernels ok", a.kernels);
        }
        Command::Metrics(a) => {
            let pred = read_volume(&a.pred)?;
            let gt = read_volume(&a.gt)?;
            if pred.dims != gt.dims {
                return Err(PnpError::Shape {
                    name: a.pred.display().to_string(),
                    detail: format!("dims {:?} vs ground truth {:?}", pred.dims, gt.dims),
                });
            }
            let top = pred.labels.iter().chain(&gt.labels).copied().max().unwrap_or(0) as usize;
            let classes = a.classes.unwrap_or(top + 1).max(2);
            let report = pnp_core::metrics::evaluate(
                &label_volume(&pred, pred.labels.clone())?,
                &label_volume(&gt, gt.labels.clone())?,
                classes,
            )?;
            let name = a.pred.file_name().unwrap_or_default().to_string_lossy().into_owned();
            print!("{}", report_csv(&[CaseReport { name, report }]));
        }
    }
    Ok(())
}

/// `config.txt` beside a checkpoint or one directory up.
fn run_config_near(checkpoint: &Path) -> Option<PathBuf> {
    checkpoint
        .ancestors()
        .skip(1)
        .take(2)
        .map(|d| d.join(config::FILE_NAME))
        .find(|p| p.exists())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
