//! AdamW with decoupled weight decay, a warm-up cosine schedule, and the
//! single training step.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::error::{Error, Result};
use crate::model::PnPModel;
use crate::params::{Ctx, ParamStore};
use crate::real::Real;
use crate::sdm::{EidTemplate, TAPS};
use crate::tensor::Tensor;
#[cfg(not(feature = "std"))]
use num_traits::Float;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Moment buffers are laid out like the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<R> {
    pub config: AdamWConfig,
    pub m: Vec<Vec<R>>,
    pub v: Vec<Vec<R>>,
    pub step: u64,
}

impl<R: Real> AdamW<R> {
    pub fn new(config: AdamWConfig, store: &ParamStore<R>) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![R::zero(); p.value.len()]).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One update at learning rate `lr`. Frozen entries are untouched and
    /// `no_decay` parameters skip the decay term.
    pub fn update(&mut self, store: &mut ParamStore<R>, lr: f64) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (R::lit(c.beta1), R::lit(c.beta2));
        let step_size = R::lit(lr / bc1);
        let inv_bc2 = R::lit(1.0 / bc2);
        let eps = R::lit(c.eps);
        for (k, p) in store.iter_mut().enumerate() {
            let decay = if p.no_decay { R::one() } else { R::lit(1.0 - lr * c.weight_decay) };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let data = p.value.data_mut();
            for i in 0..data.len() {
                if p.frozen.as_ref().is_some_and(|f| f[i]) {
                    continue;
                }
                let g = p.grad[i];
                m[i] = b1 * m[i] + (R::one() - b1) * g;
                v[i] = b2 * v[i] + (R::one() - b2) * g * g;
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                data[i] = data[i] * decay - step_size * m[i] / denom;
            }
        }
    }
}

/// Linear warm-up to `base_lr`, then half-cosine decay to `min_lr`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupCosine {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl WarmupCosine {
    /// Learning rate for the 0-based step `s`.
    pub fn lr(&self, s: u64) -> f64 {
        if s < self.warmup_steps {
            return self.base_lr * (s + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((s - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + libm::cos(core::f64::consts::PI * progress))
    }
}

/// One training example: `1×D×H×W` image and voxel labels.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a, R> {
    pub image: &'a Tensor<R>,
    pub labels: &'a [u8],
}

/// Batch-mean loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub total: f64,
    pub dice: f64,
    pub ce: f64,
    /// Weighted into `total` by `λ_cc`; zero when the pulling branch is off.
    pub center: f64,
    pub lr: f64,
}

/// Forward, backward, AdamW update, EID re-assertion and schedule tick.
pub fn train_step<R: Real>(
    model: &PnPModel,
    store: &mut ParamStore<R>,
    opt: &mut AdamW<R>,
    schedule: &WarmupCosine,
    batch: &[Sample<'_, R>],
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let lr = schedule.lr(opt.step);
    store.zero_grads();
    let scale = R::lit(1.0 / batch.len() as f64);
    let mut stats = StepStats {
        lr,
        ..StepStats::default()
    };
    for sample in batch {
        let grads = {
            let mut ctx = Ctx::new(store);
            let image = ctx.input(sample.image.clone());
            let out = model.forward(&mut ctx, image, Some(sample.labels))?;
            let parts = model.loss(&mut ctx, &out, sample.labels)?;
            let scalar = |ctx: &Ctx<'_, R>, v| ctx.g.value(v).data()[0].as_f64();
            let total = scalar(&ctx, parts.total);
            if !total.is_finite() {
                return Err(Error::Diverged {
                    step: opt.step as usize,
                    detail: diagnostics(&ctx, out.logits, total),
                });
            }
            stats.total += total;
            stats.dice += scalar(&ctx, parts.dice);
            stats.ce += scalar(&ctx, parts.ce);
            stats.center += parts.center.map_or(0.0, |c| scalar(&ctx, c));
            ctx.g.backward(parts.total)?;
            ctx.param_grads()
        };
        store.accumulate(&grads, scale);
    }
    if let Some((_, p)) = store.iter().find(|(_, p)| p.grad.iter().any(|g| !g.is_finite())) {
        return Err(Error::Diverged {
            step: opt.step as usize,
            detail: format!("non-finite gradient in `{}`", p.name),
        });
    }
    let n = batch.len() as f64;
    stats.total /= n;
    stats.dice /= n;
    stats.ce /= n;
    stats.center /= n;
    opt.update(store, lr);
    reassert_eid(model, store)?;
    Ok(stats)
}

/// Writes the exact corner values back and verifies every EID stack.
pub fn reassert_eid<R: Real>(model: &PnPModel, store: &mut ParamStore<R>) -> Result<()> {
    let template = EidTemplate::build();
    for id in model.eid_params() {
        let p = store.get_mut(id);
        for kernel in p.value.data_mut().chunks_mut(TAPS) {
            for (t, s) in template.corners() {
                kernel[t] = R::from_f64(s as f64);
            }
        }
        template.check(&p.name, p.value.data())?;
    }
    Ok(())
}

fn diagnostics<R: Real>(ctx: &Ctx<'_, R>, logits: crate::graph::Var, loss: f64) -> String {
    let mut s = format!("loss {loss}");
    let v = ctx.g.value(logits).data();
    let finite: Vec<f64> = v.iter().map(|x| x.as_f64()).filter(|x| x.is_finite()).collect();
    let (lo, hi) = finite.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let mean = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
    let _ = write!(
        s,
        "; logits min {lo:.4e} max {hi:.4e} mean {mean:.4e}, {} of {} non-finite",
        v.len() - finite.len(),
        v.len()
    );
    if let Some((node, op)) = ctx.g.first_non_finite() {
        let _ = write!(s, "; first non-finite node {node} ({op})");
    }
    s
}
