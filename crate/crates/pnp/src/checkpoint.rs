//! PNPC checkpoints: named `f32` tensors followed by a `u64` checksum (the
//! first eight bytes of the SHA-256 digest of everything before it).
//! Optimizer state rides along as extra tensors under `adamw.`.

use std::path::Path;

use pnp_core::optim::AdamW;
use pnp_core::{ParamStore, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{PnpError, Result};
use crate::volume::Cursor;

pub const MAGIC: &[u8; 4] = b"PNPC";
pub const VERSION: u32 = 1;
const STEP: &str = "adamw.step";

fn moment_name(which: char, name: &str) -> String {
    format!("adamw.{which}/{name}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore<f32>, opt: Option<&AdamW<f32>>) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> = store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        if let Some(opt) = opt {
            for (k, (_, p)) in store.iter().enumerate() {
                let shape = p.value.shape();
                for (which, buf) in [('m', &opt.m[k]), ('v', &opt.v[k])] {
                    let t = Tensor::new(shape, buf.clone()).expect("moment matches parameter");
                    tensors.push((moment_name(which, &p.name), t));
                }
            }
            // Exact for any step count below 2^24.
            tensors.push((STEP.into(), Tensor::new(&[1], vec![opt.step as f32]).unwrap()));
        }
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn has_optimizer(&self) -> bool {
        self.get(STEP).is_some()
    }

    /// Copies parameters (and, when asked and present, optimizer state)
    /// into a store built for the same model.
    pub fn restore(&self, store: &mut ParamStore<f32>, opt: Option<&mut AdamW<f32>>) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
        for name in &names {
            let id = store.id(name).expect("own name");
            let t = self.get(name).ok_or_else(|| PnpError::Shape {
                name: name.clone(),
                detail: "missing from checkpoint".into(),
            })?;
            check_shape(name, store.value(id).shape(), t.shape())?;
        }
        let extra = self
            .tensors
            .iter()
            .find(|(n, _)| !n.starts_with("adamw.") && store.id(n).is_none());
        if let Some((n, _)) = extra {
            return Err(PnpError::Shape {
                name: n.clone(),
                detail: "not part of the configured model".into(),
            });
        }
        for name in &names {
            let id = store.id(name).expect("own name");
            store.set_value(id, self.get(name).expect("checked").clone())?;
        }
        if let Some(opt) = opt {
            let Some(step) = self.get(STEP) else {
                return Err(PnpError::config("resume", "checkpoint has no optimizer state"));
            };
            for (k, name) in names.iter().enumerate() {
                for which in ['m', 'v'] {
                    let key = moment_name(which, name);
                    let t = self.get(&key).ok_or_else(|| PnpError::Shape {
                        name: key.clone(),
                        detail: "missing from checkpoint".into(),
                    })?;
                    let buf = if which == 'm' { &mut opt.m[k] } else { &mut opt.v[k] };
                    if t.len() != buf.len() {
                        return Err(PnpError::Shape {
                            name: key,
                            detail: format!("{} values, optimizer expects {}", t.len(), buf.len()),
                        });
                    }
                    buf.copy_from_slice(t.data());
                }
            }
            opt.step = step.data()[0] as u64;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, (u64, String)> {
        if bytes.len() < 8 {
            return Err((0, format!("truncated: {} bytes", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let mut c = Cursor::new(body);
        let magic = c.take(4, "magic")?;
        if magic != MAGIC {
            return Err((0, format!("expected magic \"PNPC\", found {:?}", String::from_utf8_lossy(magic))));
        }
        let version = c.u32("version")?;
        if version != VERSION {
            return Err((4, format!("unsupported version {version} (expected {VERSION})")));
        }
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        let actual = checksum(body);
        if stored != actual {
            return Err((body.len() as u64, format!("checksum {stored:#018x} does not match contents {actual:#018x}")));
        }
        let count = c.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count.min(4096) as usize);
        for _ in 0..count {
            let at = c.pos as u64;
            let len = c.u32("name length")? as usize;
            let name = std::str::from_utf8(c.take(len, "name")?)
                .map_err(|_| (at + 4, "tensor name is not UTF-8".to_string()))?
                .to_string();
            let rank = c.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(c.u32("dims")? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = c.take(n * 4, "tensor data")?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            let t = Tensor::new(&shape, data).map_err(|e| (at, e.to_string()))?;
            tensors.push((name, t));
        }
        if c.pos != body.len() {
            return Err((c.pos as u64, format!("{} unexpected bytes before the checksum", body.len() - c.pos)));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| PnpError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| PnpError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|(offset, detail)| PnpError::Format {
            path: path.to_path_buf(),
            offset,
            detail,
        })
    }
}

fn check_shape(name: &str, expected: &[usize], found: &[usize]) -> Result<()> {
    if expected != found {
        return Err(PnpError::Shape {
            name: name.into(),
            detail: format!("checkpoint {found:?}, model {expected:?}"),
        });
    }
    Ok(())
}
