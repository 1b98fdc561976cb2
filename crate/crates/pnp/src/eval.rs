//! Inference and metric reports.

use std::fmt::Write as _;
use std::path::Path;

use pnp_core::metrics::{evaluate, LabelVolume, MetricsReport};
use pnp_core::model::PnPModel;
use pnp_core::synth::VolumeSample;
use pnp_core::{Ctx, ParamStore, Tensor};
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::data::{with_pool, Case};
use crate::error::{PnpError, Result};

pub const REPORT: &str = "report.csv";
pub const CONFUSION: &str = "confusion.csv";

/// Arg-max labels of one volume.
pub fn predict(model: &PnPModel, store: &ParamStore<f32>, sample: &VolumeSample) -> Result<Vec<u8>> {
    let [d, h, w] = sample.dims;
    let mut ctx = Ctx::new(store);
    let x = ctx.input(Tensor::new(&[1, d, h, w], sample.image.clone())?);
    let out = model.forward(&mut ctx, x, None)?;
    let logits = ctx.g.value(out.logits).data();
    let n = model.config.classes;
    let v = logits.len() / n;
    Ok((0..v)
        .map(|i| {
            (0..n)
                .max_by(|&a, &b| logits[a * v + i].total_cmp(&logits[b * v + i]))
                .unwrap_or(0) as u8
        })
        .collect())
}

/// Writes the final centers `Ĉ` (`N×D`) and the class-softmaxed embeddings
/// `M̂` of every scale to `<dir>/<case>.pnpc`, one tensor container per case.
/// Tensor names are `c_hat` and `m_hat.1_8`, `m_hat.1_4`, `m_hat.1_2`.
pub fn export_embeddings(model: &PnPModel, store: &ParamStore<f32>, cases: &[Case], dir: &Path) -> Result<()> {
    if !model.config.enable_ccm {
        return Err(PnpError::config("enable_ccm", "embedding export needs the pulling branch"));
    }
    std::fs::create_dir_all(dir).map_err(|e| PnpError::io(dir, e))?;
    for c in cases {
        let [d, h, w] = c.sample.dims;
        let mut ctx = Ctx::new(store);
        let x = ctx.input(Tensor::new(&[1, d, h, w], c.sample.image.clone())?);
        let out = model.forward(&mut ctx, x, None)?;
        let mut tensors = Vec::new();
        if let Some(c_hat) = out.c_hat {
            tensors.push(("c_hat".to_string(), ctx.g.value(c_hat).clone()));
        }
        for (m, scale) in out.m_hat.iter().zip(["1_8", "1_4", "1_2"]) {
            tensors.push((format!("m_hat.{scale}"), ctx.g.value(*m).clone()));
        }
        let stem = Path::new(&c.name).file_stem().unwrap_or_default().to_string_lossy();
        Checkpoint { tensors }.save(&dir.join(format!("{stem}.pnpc")))?;
    }
    Ok(())
}

pub fn label_volume(sample: &VolumeSample, labels: Vec<u8>) -> Result<LabelVolume> {
    let spacing = sample.spacing.map(f64::from);
    Ok(LabelVolume::new(sample.dims, spacing, labels)?)
}

pub struct CaseReport {
    pub name: String,
    pub report: MetricsReport,
}

/// Predicts and scores every case; parallel across cases unless
/// `deterministic`.
pub fn evaluate_cases(
    model: &PnPModel,
    store: &ParamStore<f32>,
    cases: &[Case],
    deterministic: bool,
) -> Result<Vec<CaseReport>> {
    let classes = model.config.classes;
    with_pool(deterministic, || {
        cases
            .par_iter()
            .map(|c| {
                let pred = label_volume(&c.sample, predict(model, store, &c.sample)?)?;
                let gt = label_volume(&c.sample, c.sample.labels.clone())?;
                Ok(CaseReport {
                    name: c.name.clone(),
                    report: evaluate(&pred, &gt, classes)?,
                })
            })
            .collect()
    })
}

/// Case-averaged summary.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Summary {
    pub dice: f64,
    pub hd95: f64,
    pub assd: f64,
    pub sentinels: usize,
}

pub fn summarize(cases: &[CaseReport]) -> Summary {
    let n = cases.len().max(1) as f64;
    Summary {
        dice: cases.iter().map(|c| c.report.mean_dice).sum::<f64>() / n,
        hd95: cases.iter().map(|c| c.report.mean_hd95).sum::<f64>() / n,
        assd: cases.iter().map(|c| c.report.mean_assd).sum::<f64>() / n,
        sentinels: cases
            .iter()
            .flat_map(|c| &c.report.per_class)
            .filter(|m| m.hd95.sentinel || m.assd.sentinel)
            .count(),
    }
}

/// One row per case and foreground class, then a `mean` row.
pub fn report_csv(cases: &[CaseReport]) -> String {
    let mut s = String::new();
    s.push_str("# dice in percent; hd95 and assd in spacing units\n");
    s.push_str("# sentinel=1: one surface empty, distance set to the volume diagonal\n");
    s.push_str("# classes are foreground labels 1..N-1; `mean` averages cases then classes\n");
    s.push_str("case,class,dice,hd95,assd,sentinel\n");
    for c in cases {
        for m in &c.report.per_class {
            let sentinel = u8::from(m.hd95.sentinel || m.assd.sentinel);
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{sentinel}",
                c.name, m.class, m.dice, m.hd95.mm, m.assd.mm
            );
        }
    }
    let sum = summarize(cases);
    let _ = writeln!(s, "mean,all,{:.6},{:.6},{:.6},{}", sum.dice, sum.hd95, sum.assd, sum.sentinels);
    s
}

/// Voxel counts summed over cases; rows are ground truth, columns prediction.
pub fn confusion_csv(cases: &[CaseReport], classes: usize) -> String {
    let mut total = vec![vec![0u64; classes]; classes];
    for c in cases {
        for (r, row) in c.report.confusion.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                total[r][k] += v;
            }
        }
    }
    let mut s = String::from("# rows: ground truth, columns: prediction, voxel counts over all cases\ngt");
    for k in 0..classes {
        let _ = write!(s, ",pred{k}");
    }
    s.push('\n');
    for (r, row) in total.iter().enumerate() {
        let _ = write!(s, "{r}");
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn write_reports(dir: &Path, cases: &[CaseReport], classes: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PnpError::io(dir, e))?;
    for (name, text) in [(REPORT, report_csv(cases)), (CONFUSION, confusion_csv(cases, classes))] {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| PnpError::io(path, e))?;
    }
    Ok(())
}
