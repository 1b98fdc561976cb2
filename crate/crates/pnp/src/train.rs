//! Training loop: per-epoch shuffling and augmentation, a CSV loss log,
//! periodic and final checkpoints, and resume.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use pnp_core::model::PnPModel;
use pnp_core::optim::{train_step, AdamW, Sample, StepStats, WarmupCosine};
use pnp_core::synth::VolumeSample;
use pnp_core::{ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{load_split, Case};
use crate::error::{PnpError, Result};
use crate::manifest::Split;

pub const LOSS_LOG: &str = "loss.csv";
pub const LOSS_HEADER: &str = "epoch,total,dice,ce,lcc,lr";
pub const FINAL_CHECKPOINT: &str = "final.pnpc";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const DIVERGED_DUMP: &str = "diverged.txt";

/// Epoch means of the step losses. `lcc` is unweighted, so
/// `total = dice + ce + λ_cc · lcc`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub total: f64,
    pub dice: f64,
    pub ce: f64,
    pub lcc: f64,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
}

impl EpochRow {
    /// Shortest round-trip formatting, so parsing a row gives the same values.
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.total, self.dice, self.ce, self.lcc, self.lr
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return None;
        }
        let n = |i: usize| f[i].trim().parse::<f64>().ok();
        Some(Self {
            epoch: f[0].trim().parse().ok()?,
            total: n(1)?,
            dice: n(2)?,
            ce: n(3)?,
            lcc: n(4)?,
            lr: n(5)?,
        })
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<EpochRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| PnpError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let row = EpochRow::parse(line).ok_or_else(|| PnpError::Format {
            path: path.to_path_buf(),
            offset: i as u64,
            detail: format!("line {} is not a loss row", i + 1),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

fn write_loss_log(path: &Path, rows: &[EpochRow]) -> Result<()> {
    let mut s = String::from(LOSS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| PnpError::io(path, e))
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Checkpoint with optimizer state to continue from.
    pub resume: Option<PathBuf>,
    /// Stop after this epoch (1-based) without changing the schedule.
    pub stop_after: Option<usize>,
}

pub struct TrainOutcome {
    pub rows: Vec<EpochRow>,
    pub model: PnPModel,
    pub store: ParamStore<f32>,
    pub final_checkpoint: PathBuf,
}

/// Image tensor plus labels after augmentation.
struct Prepared {
    image: Tensor<f32>,
    labels: Vec<u8>,
}

fn flip(dims: [usize; 3], axis: usize, image: &mut [f32], labels: &mut [u8]) {
    let [d, h, w] = dims;
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (z2, y2, x2) = match axis {
                    0 => (d - 1 - z, y, x),
                    1 => (z, h - 1 - y, x),
                    _ => (z, y, w - 1 - x),
                };
                let (a, b) = (idx(z, y, x), idx(z2, y2, x2));
                if a < b {
                    image.swap(a, b);
                    labels.swap(a, b);
                }
            }
        }
    }
}

fn prepare(sample: &VolumeSample, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Prepared {
    let mut image = sample.image.clone();
    let mut labels = sample.labels.clone();
    if cfg.augment {
        for axis in 0..3 {
            if rng.random_bool(0.5) {
                flip(sample.dims, axis, &mut image, &mut labels);
            }
        }
        if cfg.intensity_shift > 0.0 {
            let s = rng.random_range(-cfg.intensity_shift..=cfg.intensity_shift) as f32;
            image.iter_mut().for_each(|v| *v += s);
        }
    }
    let [d, h, w] = sample.dims;
    Prepared {
        image: Tensor::new(&[1, d, h, w], image).expect("dims match the volume"),
        labels,
    }
}

/// Shuffling and augmentation draw from stream `epoch` of the run seed, so
/// an epoch replays identically after a resume.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

pub fn build_model(cfg: &RunConfig) -> Result<(PnPModel, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let model = PnPModel::new(&cfg.model, &mut store, cfg.seed)?;
    Ok((model, store))
}

pub fn schedule(cfg: &RunConfig, steps_per_epoch: usize) -> WarmupCosine {
    WarmupCosine {
        base_lr: cfg.optim.lr,
        min_lr: cfg.min_lr,
        warmup_steps: (cfg.warmup_epochs * steps_per_epoch) as u64,
        total_steps: (cfg.epochs * steps_per_epoch) as u64,
    }
}

fn dump_divergence(out: &Path, epoch: usize, err: &pnp_core::Error, store: &ParamStore<f32>) -> String {
    let mut s = format!("epoch {epoch}: {err}\nparameter norms:\n");
    for (_, p) in store.iter() {
        let norm = p.value.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        let _ = writeln!(s, "  {} {norm:.6e}", p.name);
    }
    let path = out.join(DIVERGED_DUMP);
    match std::fs::write(&path, &s) {
        Ok(()) => format!("{err}; diagnostics in {}", path.display()),
        Err(_) => format!("{err}"),
    }
}

pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let cases = load_split(cfg, Split::Train)?;
    train_on(cfg, &cases, opts)
}

pub fn train_on(cfg: &RunConfig, cases: &[Case], opts: &TrainOptions) -> Result<TrainOutcome> {
    if cases.is_empty() {
        return Err(PnpError::config("split", "training split is empty"));
    }
    let out = &cfg.out_dir;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| PnpError::io(&ckpt_dir, e))?;
    cfg.write(out)?;

    let (model, mut store) = build_model(cfg)?;
    let mut opt = AdamW::new(cfg.optim, &store);
    let steps_per_epoch = cases.len().div_ceil(cfg.batch_size);
    let sched = schedule(cfg, steps_per_epoch);
    let log_path = out.join(LOSS_LOG);

    let mut rows = Vec::new();
    let mut start = 0;
    if let Some(path) = &opts.resume {
        Checkpoint::load(path)?.restore(&mut store, Some(&mut opt))?;
        if opt.step % steps_per_epoch as u64 != 0 {
            return Err(PnpError::config(
                "resume",
                format!("step {} is not on an epoch boundary of {steps_per_epoch} steps", opt.step),
            ));
        }
        start = (opt.step / steps_per_epoch as u64) as usize;
        if log_path.exists() {
            rows = read_loss_log(&log_path)?;
            rows.retain(|r| r.epoch <= start);
        }
    }

    let last = opts.stop_after.unwrap_or(cfg.epochs).min(cfg.epochs);
    for epoch in start + 1..=last {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..cases.len()).collect();
        order.shuffle(&mut rng);
        let mut acc = StepStats::default();
        let mut first_lr = None;
        for chunk in order.chunks(cfg.batch_size) {
            let prepared: Vec<Prepared> = chunk.iter().map(|&i| prepare(&cases[i].sample, cfg, &mut rng)).collect();
            let batch: Vec<Sample<'_, f32>> = prepared
                .iter()
                .map(|p| Sample {
                    image: &p.image,
                    labels: &p.labels,
                })
                .collect();
            let s = match train_step(&model, &mut store, &mut opt, &sched, &batch) {
                Ok(s) => s,
                Err(e @ (pnp_core::Error::Diverged { .. } | pnp_core::Error::NonFinite { .. })) => {
                    return Err(PnpError::Numeric(dump_divergence(out, epoch, &e, &store)));
                }
                Err(e) => return Err(e.into()),
            };
            first_lr.get_or_insert(s.lr);
            acc.total += s.total;
            acc.dice += s.dice;
            acc.ce += s.ce;
            acc.center += s.center;
        }
        let n = steps_per_epoch as f64;
        rows.push(EpochRow {
            epoch,
            total: acc.total / n,
            dice: acc.dice / n,
            ce: acc.ce / n,
            lcc: acc.center / n,
            lr: first_lr.unwrap_or(0.0),
        });
        write_loss_log(&log_path, &rows)?;
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            Checkpoint::from_store(&store, Some(&opt)).save(&ckpt_dir.join(format!("epoch_{epoch:04}.pnpc")))?;
        }
    }
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    Checkpoint::from_store(&store, Some(&opt)).save(&final_checkpoint)?;
    Ok(TrainOutcome {
        rows,
        model,
        store,
        final_checkpoint,
    })
}
