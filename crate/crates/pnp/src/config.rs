//! Plain `key = value` run configuration. Unknown keys are rejected and
//! every run archives the fully resolved text next to its outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pnp_core::ccm::CenterUpdate;
use pnp_core::model::{PnPConfig, PullTokens};
use pnp_core::nn::{EncoderSpec, NormKind};
use pnp_core::optim::AdamWConfig;
use pnp_core::synth::{GenSpec, Regime};

use crate::error::{PnpError, Result};

pub const FILE_NAME: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub gen: GenSpec,
    pub samples: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub model: PnPConfig,
    pub optim: AdamWConfig,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Random flips along every axis plus a global intensity shift.
    pub augment: bool,
    pub intensity_shift: f64,
    /// Model initialization, shuffling and augmentation.
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Checkpoint period in epochs; the final epoch is always saved.
    pub checkpoint_every: usize,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = PnPConfig::desk(3);
        model.encoder = EncoderSpec::desk([4, 8, 16, 32]);
        model.center_dim = 16;
        model.center_update = CenterUpdate::VoxelMean;
        Self {
            gen: GenSpec::new(Regime::BlurredNoisy, 7),
            samples: 50,
            split: [0.8, 0.0, 0.2],
            model,
            optim: AdamWConfig {
                lr: 2e-3,
                ..AdamWConfig::default()
            },
            min_lr: 0.0,
            warmup_epochs: 1,
            epochs: 60,
            batch_size: 1,
            augment: false,
            intensity_shift: 0.05,
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            checkpoint_every: 10,
            deterministic: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| PnpError::config(key, format!("cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(PnpError::config(key, format!("`{value}` is not a boolean"))),
    }
}

fn parse_array<T: FromStr + Copy + Default, const N: usize>(key: &str, value: &str) -> Result<[T; N]> {
    let v: Vec<T> = parse_list(key, value)?;
    if v.len() == 1 {
        return Ok([v[0]; N]);
    }
    v.try_into()
        .map_err(|v: Vec<T>| PnpError::config(key, format!("expected {N} values, got {}", v.len())))
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn parse_regime(value: &str) -> Result<Regime> {
    match value {
        "A" | "a" | "blurred_noisy" => Ok(Regime::BlurredNoisy),
        "B" | "b" | "annotation_variance" => Ok(Regime::AnnotationVariance),
        "C" | "c" | "similar_instances" => Ok(Regime::SimilarInstances),
        _ => Err(PnpError::config("regime", format!("`{value}` is not one of A, B, C"))),
    }
}

fn regime_name(r: Regime) -> &'static str {
    match r {
        Regime::BlurredNoisy => "A",
        Regime::AnnotationVariance => "B",
        Regime::SimilarInstances => "C",
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "regime" => {
                self.gen.regime = parse_regime(v)?;
            }
            "samples" => self.samples = parse(key, v)?,
            "dims" => self.gen.dims = parse_array(key, v)?,
            "spacing" => self.gen.spacing = parse_array(key, v)?,
            "classes" => {
                let n = parse(key, v)?;
                self.gen.classes = n;
                self.model.classes = n;
            }
            "blur_sigma" => self.gen.blur_sigma = parse(key, v)?,
            "patch_count" => self.gen.patch_count = parse(key, v)?,
            "patch_intensity" => self.gen.patch_intensity = parse(key, v)?,
            "noise" => self.gen.noise = parse(key, v)?,
            "lobe_contrast" => self.gen.lobe_contrast = parse(key, v)?,
            "fissure_depth" => self.gen.fissure_depth = parse(key, v)?,
            "jitter" => self.gen.jitter = parse(key, v)?,
            "data_seed" => self.gen.seed = parse(key, v)?,
            "split" => self.split = parse_array(key, v)?,
            "channels" => self.model.encoder.channels = parse_list(key, v)?,
            "blocks" => self.model.encoder.blocks_per_scale = parse_list(key, v)?,
            "norm" => {
                self.model.encoder.norm = match v {
                    "batch" => NormKind::Batch,
                    g => match g.strip_prefix("group").map(str::parse::<usize>) {
                        Some(Ok(n)) if n > 0 => NormKind::Group(n),
                        _ => return Err(PnpError::config(key, format!("`{v}` is not `batch` or `group<N>`"))),
                    },
                }
            }
            "center_dim" => self.model.center_dim = parse(key, v)?,
            "atlas_size" => self.model.atlas_size = parse(key, v)?,
            "heads" => self.model.heads = parse(key, v)?,
            "sdm_iterations" => self.model.sdm_iterations = parse(key, v)?,
            "lambda_cc" => self.model.lambda_cc = parse(key, v)?,
            "enable_sdm" => self.model.enable_sdm = parse_bool(key, v)?,
            "enable_ccm" => self.model.enable_ccm = parse_bool(key, v)?,
            "center_update" => {
                self.model.center_update = match v {
                    "sum" => CenterUpdate::Sum,
                    "voxel_mean" => CenterUpdate::VoxelMean,
                    _ => return Err(PnpError::config(key, format!("`{v}` is not `sum` or `voxel_mean`"))),
                }
            }
            "pull_tokens" => {
                self.model.pull_tokens = match v {
                    "similarity" => PullTokens::Similarity,
                    "assignment" => PullTokens::Assignment,
                    _ => return Err(PnpError::config(key, format!("`{v}` is not `similarity` or `assignment`"))),
                }
            }
            "mean_pseudo_centers" => self.model.mean_pseudo_centers = parse_bool(key, v)?,
            "lr" => self.optim.lr = parse(key, v)?,
            "min_lr" => self.min_lr = parse(key, v)?,
            "beta1" => self.optim.beta1 = parse(key, v)?,
            "beta2" => self.optim.beta2 = parse(key, v)?,
            "adam_eps" => self.optim.eps = parse(key, v)?,
            "weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "intensity_shift" => self.intensity_shift = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            _ => return Err(PnpError::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(PnpError::config(format!("line {}", i + 1), format!("expected `key = value`, got `{line}`")));
            };
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PnpError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.model.validate()?;
        if self.gen.classes != self.model.classes {
            return Err(PnpError::config("classes", "data and model class counts differ"));
        }
        if self.samples == 0 {
            return Err(PnpError::config("samples", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(PnpError::config("batch_size", "must be positive"));
        }
        if !(self.optim.lr >= 0.0 && self.min_lr >= 0.0) {
            return Err(PnpError::config("lr", "learning rates must be ≥ 0"));
        }
        if !(self.intensity_shift >= 0.0) {
            return Err(PnpError::config("intensity_shift", "must be ≥ 0"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let g = &self.gen;
        let m = &self.model;
        let o = &self.optim;
        let norm = match m.encoder.norm {
            NormKind::Batch => "batch".to_string(),
            NormKind::Group(n) => format!("group{n}"),
        };
        let entries: Vec<(&str, String)> = vec![
            ("regime", regime_name(g.regime).into()),
            ("samples", self.samples.to_string()),
            ("dims", join(&g.dims)),
            ("spacing", join(&g.spacing)),
            ("classes", g.classes.to_string()),
            ("blur_sigma", g.blur_sigma.to_string()),
            ("patch_count", g.patch_count.to_string()),
            ("patch_intensity", g.patch_intensity.to_string()),
            ("noise", g.noise.to_string()),
            ("lobe_contrast", g.lobe_contrast.to_string()),
            ("fissure_depth", g.fissure_depth.to_string()),
            ("jitter", g.jitter.to_string()),
            ("data_seed", g.seed.to_string()),
            ("split", join(&self.split)),
            ("channels", join(&m.encoder.channels)),
            ("blocks", join(&m.encoder.blocks_per_scale)),
            ("norm", norm),
            ("center_dim", m.center_dim.to_string()),
            ("atlas_size", m.atlas_size.to_string()),
            ("heads", m.heads.to_string()),
            ("sdm_iterations", m.sdm_iterations.to_string()),
            ("lambda_cc", m.lambda_cc.to_string()),
            ("enable_sdm", m.enable_sdm.to_string()),
            ("enable_ccm", m.enable_ccm.to_string()),
            (
                "center_update",
                match m.center_update {
                    CenterUpdate::Sum => "sum",
                    CenterUpdate::VoxelMean => "voxel_mean",
                }
                .into(),
            ),
            (
                "pull_tokens",
                match m.pull_tokens {
                    PullTokens::Similarity => "similarity",
                    PullTokens::Assignment => "assignment",
                }
                .into(),
            ),
            ("mean_pseudo_centers", m.mean_pseudo_centers.to_string()),
            ("lr", o.lr.to_string()),
            ("min_lr", self.min_lr.to_string()),
            ("beta1", o.beta1.to_string()),
            ("beta2", o.beta2.to_string()),
            ("adam_eps", o.eps.to_string()),
            ("weight_decay", o.weight_decay.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("augment", self.augment.to_string()),
            ("intensity_shift", self.intensity_shift.to_string()),
            ("seed", self.seed.to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("deterministic", self.deterministic.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| PnpError::io(dir, e))?;
        let path = dir.join(FILE_NAME);
        std::fs::write(&path, self.to_text()).map_err(|e| PnpError::io(path, e))
    }
}
