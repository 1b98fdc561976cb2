//! Baseline, +SDM, +CCM and +Both trained and tested on one dataset.

use std::fmt::Write as _;

use crate::config::RunConfig;
use crate::data::load_split;
use crate::error::{PnpError, Result};
use crate::eval::{evaluate_cases, summarize, write_reports, Summary};
use crate::manifest::Split;
use crate::train::{train_on, EpochRow, TrainOptions};

pub const TABLE: &str = "ablation.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    Sdm,
    Ccm,
    Both,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::Sdm, Mode::Ccm, Mode::Both];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Sdm => "+sdm",
            Mode::Ccm => "+ccm",
            Mode::Both => "+both",
        }
    }

    pub fn flags(self) -> (bool, bool) {
        match self {
            Mode::Baseline => (false, false),
            Mode::Sdm => (true, false),
            Mode::Ccm => (false, true),
            Mode::Both => (true, true),
        }
    }

    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        (c.model.enable_sdm, c.model.enable_ccm) = self.flags();
        c.out_dir = cfg.out_dir.join(self.name().trim_start_matches('+'));
        c
    }
}

pub struct ModeResult {
    pub mode: Mode,
    pub test: Summary,
    pub rows: Vec<EpochRow>,
    pub seconds: f64,
}

pub fn run(cfg: &RunConfig, modes: &[Mode]) -> Result<Vec<ModeResult>> {
    cfg.validate()?;
    let train = load_split(cfg, Split::Train)?;
    let test = load_split(cfg, Split::Test)?;
    if test.is_empty() {
        return Err(PnpError::config("split", "test split is empty"));
    }
    let mut results = Vec::new();
    for &mode in modes {
        let c = mode.apply(cfg);
        let t = std::time::Instant::now();
        let outcome = train_on(&c, &train, &TrainOptions::default())?;
        let reports = evaluate_cases(&outcome.model, &outcome.store, &test, c.deterministic)?;
        write_reports(&c.out_dir, &reports, c.model.classes)?;
        results.push(ModeResult {
            mode,
            test: summarize(&reports),
            rows: outcome.rows,
            seconds: t.elapsed().as_secs_f64(),
        });
    }
    let path = cfg.out_dir.join(TABLE);
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| PnpError::io(&cfg.out_dir, e))?;
    std::fs::write(&path, table(&results)).map_err(|e| PnpError::io(path, e))?;
    Ok(results)
}

pub fn table(results: &[ModeResult]) -> String {
    let mut s = String::from("mode,dice,hd95,assd,sentinels,lcc_first,lcc_last,seconds\n");
    for r in results {
        let first = r.rows.first().map_or(0.0, |e| e.lcc);
        let last = r.rows.last().map_or(0.0, |e| e.lcc);
        let _ = writeln!(
            s,
            "{},{:.4},{:.4},{:.4},{},{first:.6},{last:.6},{:.1}",
            r.mode.name(),
            r.test.dice,
            r.test.hd95,
            r.test.assd,
            r.test.sentinels,
            r.seconds
        );
    }
    s
}
