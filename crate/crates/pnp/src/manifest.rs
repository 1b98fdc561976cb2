//! Dataset manifest: relative volume paths under `[train]`, `[val]` and
//! `[test]` headers.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{PnpError, Result};

pub const FILE_NAME: &str = "manifest.txt";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = PnpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(PnpError::config("split", format!("`{s}` is not one of train, val, test"))),
        }
    }
}

impl Manifest {
    /// Shuffles `names` with `seed` and cuts them by `ratios`
    /// (train, val, test). A split with a positive ratio must not be empty.
    pub fn split(names: &[String], ratios: [f64; 3], seed: u64) -> Result<Self> {
        if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(PnpError::config("split", format!("ratios {ratios:?} must be ≥ 0 and sum to 1")));
        }
        let n = names.len();
        let n_train = (ratios[0] * n as f64).round() as usize;
        let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train.min(n));
        let n_train = n_train.min(n);
        let counts = [n_train, n_val, n - n_train - n_val];
        for (k, (&c, &r)) in counts.iter().zip(&ratios).enumerate() {
            if r > 0.0 && c == 0 {
                let which = ["train", "val", "test"][k];
                return Err(PnpError::config("split", format!("{which} split is empty for {n} samples")));
            }
        }
        let mut order: Vec<String> = names.to_vec();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let test = order.split_off(n_train + n_val);
        let val = order.split_off(n_train);
        Ok(Self { train: order, val, test })
    }

    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (header, names) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            let _ = writeln!(s, "[{header}]");
            for n in names {
                let _ = writeln!(s, "{n}");
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        let mut current: Option<&mut Vec<String>> = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(h) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(match h {
                    "train" => &mut m.train,
                    "val" => &mut m.val,
                    "test" => &mut m.test,
                    _ => return Err(PnpError::config("manifest", format!("line {}: unknown split `{h}`", i + 1))),
                });
                continue;
            }
            match current.as_deref_mut() {
                Some(v) => v.push(line.to_string()),
                None => return Err(PnpError::config("manifest", format!("line {}: entry before any split header", i + 1))),
            }
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(FILE_NAME);
        std::fs::write(&path, self.to_text()).map_err(|e| PnpError::io(path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(FILE_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| PnpError::io(path, e))?;
        Self::parse(&text)
    }
}
