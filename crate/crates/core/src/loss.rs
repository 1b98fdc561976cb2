//! Segmentation losses over `N×D×H×W` logits.

use alloc::format;
use alloc::vec;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::Ctx;
use crate::real::Real;
use crate::tensor::Tensor;

/// Smoothing term of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-5;

/// `N×D×H×W` one-hot encoding of a label volume.
pub fn one_hot<R: Real>(labels: &[u8], classes: usize, dims: [usize; 3]) -> Result<Tensor<R>> {
    let v: usize = dims.iter().product();
    if labels.len() != v {
        return Err(Error::dim("one_hot", format!("{} labels for {dims:?}", labels.len())));
    }
    let mut data = vec![R::zero(); classes * v];
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= classes {
            return Err(Error::Validation(format!(
                "label {l} at voxel {i} is out of range for {classes} classes"
            )));
        }
        data[l * v + i] = R::one();
    }
    Tensor::new(&[classes, dims[0], dims[1], dims[2]], data)
}

fn class_sums<R: Real>(ctx: &mut Ctx<'_, R>, x: Var) -> Result<Var> {
    let s = ctx.g.shape(x).to_vec();
    let v: usize = s[1..].iter().product();
    let flat = ctx.g.reshape(x, &[s[0], v])?;
    let ones = ctx.input(Tensor::full(&[v, 1], R::one()));
    ctx.g.matmul(flat, ones)
}

fn check_target<R: Real>(ctx: &Ctx<'_, R>, logits: Var, target: &Tensor<R>, op: &'static str) -> Result<()> {
    let s = ctx.g.shape(logits);
    if s.len() != 4 || s != target.shape() {
        return Err(Error::dim(op, format!("logits {s:?}, target {:?}", target.shape())));
    }
    Ok(())
}

/// `1 − mean_c (2·Σ p·y + ε) / (Σ p + Σ y + ε)` over softmaxed logits.
pub fn dice_loss<R: Real>(ctx: &mut Ctx<'_, R>, logits: Var, target: &Tensor<R>) -> Result<Var> {
    check_target(ctx, logits, target, "dice_loss")?;
    let n = target.shape()[0];
    let p = ctx.g.softmax(logits, 0)?;
    let y = ctx.input(target.clone());
    let py = ctx.g.mul(p, y)?;
    let inter = class_sums(ctx, py)?;
    let psum = class_sums(ctx, p)?;
    let ysum = class_sums(ctx, y)?;
    let eps = ctx.input(Tensor::scalar(R::lit(DICE_EPS)));
    let num = ctx.g.affine(inter, R::lit(2.0), R::lit(DICE_EPS))?;
    let den = ctx.g.add(psum, ysum)?;
    let den = ctx.g.add(den, eps)?;
    let inv = ctx.g.recip(den)?;
    let ratio = ctx.g.mul(num, inv)?;
    let total = ctx.g.sum(ratio)?;
    ctx.g.affine(total, R::lit(-1.0 / n as f64), R::one())
}

/// Voxel-mean cross-entropy of logits against a one-hot target.
pub fn cross_entropy<R: Real>(ctx: &mut Ctx<'_, R>, logits: Var, target: &Tensor<R>) -> Result<Var> {
    check_target(ctx, logits, target, "cross_entropy")?;
    let v: usize = target.shape()[1..].iter().product();
    let lp = ctx.g.log_softmax(logits, 0)?;
    let y = ctx.input(target.clone());
    let picked = ctx.g.mul(lp, y)?;
    let s = ctx.g.sum(picked)?;
    ctx.g.scale(s, R::lit(-1.0 / v as f64))
}

/// The loss terms of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub dice: Var,
    pub ce: Var,
    /// Absent when the pulling branch is disabled.
    pub center: Option<Var>,
}

/// `L_dice + L_ce + λ_cc·L_cc`.
pub fn total_loss<R: Real>(
    ctx: &mut Ctx<'_, R>,
    logits: Var,
    target: &Tensor<R>,
    center: Option<Var>,
    lambda_cc: f64,
) -> Result<LossParts> {
    if lambda_cc < 0.0 || !lambda_cc.is_finite() {
        return Err(Error::config("lambda_cc", format!("{lambda_cc} must be a finite value ≥ 0")));
    }
    let dice = dice_loss(ctx, logits, target)?;
    let ce = cross_entropy(ctx, logits, target)?;
    let mut total = ctx.g.add(dice, ce)?;
    if let Some(c) = center {
        let w = ctx.g.scale(c, R::lit(lambda_cc))?;
        total = ctx.g.add(total, w)?;
    }
    Ok(LossParts {
        total,
        dice,
        ce,
        center,
    })
}
