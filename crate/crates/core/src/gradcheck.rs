//! Central-difference gradient verification.
//!
//! Graph builders are generic over [`Real`], so the same code that trains in
//! `f32` is re-evaluated here in `f64`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked entries of `|analytic − numeric| / max(1, |numeric|)`
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Checks every entry of `x`. `f` must build a scalar from the input var.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_entries(f, x, h, &all)
}

/// Checks only the listed entries of `x` (spot checks on large tensors).
pub fn grad_check_entries<F>(f: F, x: &Tensor<f64>, h: f64, entries: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |t: &Tensor<f64>, with_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut g = Graph::new();
        let xv = g.leaf(t.clone(), true);
        let y = f(&mut g, xv)?;
        finish(&mut g, y, xv, with_grad)
    };
    central_differences(eval, x, h, entries)
}

/// Spot-checks a stored parameter of a graph built through [`Ctx`].
pub fn grad_check_param<F>(
    f: F,
    store: &ParamStore<f64>,
    id: ParamId,
    h: f64,
    entries: &[usize],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<'_, f64>) -> Result<Var>,
{
    let eval = |t: &Tensor<f64>, with_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut local = store.clone();
        local.set_value(id, t.clone())?;
        let mut ctx = Ctx::new(&local);
        let y = f(&mut ctx)?;
        let xv = ctx.param(id);
        finish(&mut ctx.g, y, xv, with_grad)
    };
    central_differences(eval, store.value(id), h, entries)
}

fn finish(g: &mut Graph<f64>, y: Var, x: Var, with_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    if g.value(y).len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got {:?}",
            g.shape(y)
        )));
    }
    let v = g.value(y).data()[0];
    if !v.is_finite() {
        let (node, op) = g.first_non_finite().unwrap_or((y.index(), g.op_name(y)));
        return Err(Error::NonFinite { op, node });
    }
    if !with_grad {
        return Ok((v, None));
    }
    g.backward(y)?;
    let n = g.value(x).len();
    let grad = g.grad(x).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    if let Some(i) = grad.iter().position(|d| !d.is_finite()) {
        return Err(Error::NonFinite { op: "backward", node: i });
    }
    Ok((v, Some(grad)))
}

fn central_differences<E>(eval: E, x: &Tensor<f64>, h: f64, entries: &[usize]) -> Result<GradCheckReport>
where
    E: Fn(&Tensor<f64>, bool) -> Result<(f64, Option<Vec<f64>>)>,
{
    let (_, analytic) = eval(x, true)?;
    let analytic = analytic.expect("requested gradient");
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for &i in entries {
        let mut probe = x.clone();
        probe.data_mut()[i] += h;
        let (fp, _) = eval(&probe, false)?;
        probe.data_mut()[i] = x.data()[i] - h;
        let (fm, _) = eval(&probe, false)?;
        let numeric = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}
