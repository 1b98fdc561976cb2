//! EID kernel audit: text dump of every constrained kernel with the fixed
//! corners marked, plus corner and edge-sign checks.

use std::fmt::Write as _;

use pnp_core::sdm::{EidTemplate, TAPS};
use pnp_core::Tensor;

use crate::checkpoint::Checkpoint;
use crate::error::{PnpError, Result};

pub struct KernelAudit {
    pub text: String,
    /// One message per violated kernel, naming the tensor.
    pub violations: Vec<String>,
    pub kernels: usize,
}

fn is_eid(name: &str, t: &Tensor<f32>) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    name.starts_with("sdm.") && (leaf == "alpha" || leaf == "beta") && t.shape().len() == 5 && t.shape()[1..] == [1, 3, 3, 3]
}

pub fn audit(ckpt: &Checkpoint) -> Result<KernelAudit> {
    let template = EidTemplate::build();
    let edges = template.edges();
    let mut text = String::new();
    let mut violations = Vec::new();
    let mut kernels = 0;
    for (name, t) in ckpt.tensors.iter().filter(|(n, t)| is_eid(n, t)) {
        for (c, k) in t.data().chunks(TAPS).enumerate() {
            kernels += 1;
            let _ = writeln!(text, "{name}[{c}]  (corners in brackets)");
            for i in 0..3 {
                let _ = writeln!(text, "  slice {i}:");
                for j in 0..3 {
                    text.push_str("   ");
                    for l in 0..3 {
                        let tap = EidTemplate::tap(i, j, l);
                        let v = k[tap];
                        if template.is_fixed(tap) {
                            let _ = write!(text, " [{v:>7.4}]");
                        } else {
                            let _ = write!(text, "  {v:>7.4} ");
                        }
                    }
                    text.push('\n');
                }
            }
            let mut problems = Vec::new();
            for (tap, s) in template.corners() {
                if k[tap] != s as f32 {
                    problems.push(format!("corner ({}, {}, {}) is {} not {s}", tap / 9, (tap / 3) % 3, tap % 3, k[tap]));
                }
            }
            let opposite = edges.iter().filter(|&&(a, b)| k[a] * k[b] < 0.0).count();
            if opposite != edges.len() {
                problems.push(format!("{opposite} of {} edges join opposite signs", edges.len()));
            }
            if problems.is_empty() {
                let _ = writeln!(text, "  ok: corners ±1, {opposite} opposite-signed edges");
            } else {
                let _ = writeln!(text, "  VIOLATION: {}", problems.join("; "));
                violations.push(format!("{name}[{c}]: {}", problems.join("; ")));
            }
        }
    }
    if kernels == 0 {
        return Err(PnpError::config("checkpoint", "no EID kernel tensors (was the model trained with enable_sdm?)"));
    }
    Ok(KernelAudit {
        text,
        violations,
        kernels,
    })
}
