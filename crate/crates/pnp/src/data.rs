//! Dataset directories: PNPV volumes, a manifest and the generating config.

use std::path::{Path, PathBuf};

use pnp_core::synth::{generate_one, VolumeSample};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{PnpError, Result};
use crate::manifest::{Manifest, Split};
use crate::volume::{read_volume, write_volume};

pub fn sample_name(index: usize) -> String {
    format!("case_{index:04}.pnpv")
}

/// Runs `f` on a pool with one thread in deterministic mode and the
/// default width otherwise.
pub fn with_pool<T: Send>(deterministic: bool, f: impl FnOnce() -> T + Send) -> T {
    let threads = if deterministic { 1 } else { 0 };
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Generates `cfg.samples` volumes into `cfg.data_dir` and returns the
/// directory checksum.
pub fn generate_dataset(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let dir = &cfg.data_dir;
    std::fs::create_dir_all(dir).map_err(|e| PnpError::io(dir, e))?;
    let names: Vec<String> = (0..cfg.samples).map(sample_name).collect();
    let manifest = Manifest::split(&names, cfg.split, cfg.gen.seed)?;
    with_pool(cfg.deterministic, || {
        (0..cfg.samples).into_par_iter().try_for_each(|i| -> Result<()> {
            let sample = generate_one(&cfg.gen, i as u64)?;
            write_volume(&dir.join(&names[i]), &sample)
        })
    })?;
    manifest.write(dir)?;
    cfg.write(dir)?;
    dir_checksum(dir)
}

/// SHA-256 over the sorted file names and contents of a directory.
pub fn dir_checksum(dir: &Path) -> Result<String> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| PnpError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let name = f.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let bytes = std::fs::read(&f).map_err(|e| PnpError::io(&f, e))?;
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub struct Case {
    pub name: String,
    pub sample: VolumeSample,
}

/// Reads one split listed in the dataset manifest; every volume must match
/// the configured dims and class count.
pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<Case>> {
    let manifest = Manifest::read(&cfg.data_dir)?;
    let names = manifest.get(split);
    let cases = with_pool(cfg.deterministic, || {
        names
            .par_iter()
            .map(|name| {
                let path = cfg.data_dir.join(name);
                let sample = read_volume(&path)?;
                check_case(cfg, &path, &sample)?;
                Ok(Case {
                    name: name.clone(),
                    sample,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(cases)
}

fn check_case(cfg: &RunConfig, path: &Path, s: &VolumeSample) -> Result<()> {
    if s.dims != cfg.gen.dims {
        return Err(PnpError::Shape {
            name: path.display().to_string(),
            detail: format!("volume dims {:?}, configured {:?}", s.dims, cfg.gen.dims),
        });
    }
    if let Some(&l) = s.labels.iter().find(|&&l| l as usize >= cfg.model.classes) {
        return Err(PnpError::config(
            "classes",
            format!("{} has label {l} but only {} classes are configured", path.display(), cfg.model.classes),
        ));
    }
    Ok(())
}
