//! Reverse-mode automatic differentiation over an append-only node list.
//!
//! Every op appends one node whose parents already exist, so append order is
//! a topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Gradient rule: `backward` *accumulates* into the `grad` buffer of every
//! leaf that requires gradients. Calling it twice on the same graph doubles
//! the leaf gradients; [`Graph::zero_grads`] resets them.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, UpsampleTaps};
use crate::real::Real;
use crate::sdm::{self, SdmGeom};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Gelu,
    Square,
    Recip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

/// Layout of a tensor split around one axis.
#[derive(Clone, Copy, Debug)]
struct AxisSplit {
    outer: usize,
    n: usize,
    inner: usize,
}

impl AxisSplit {
    fn of(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            n: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

enum Op<R> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Conv {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
    },
    Affine {
        x: Var,
        scale: R,
    },
    Unary {
        kind: Unary,
        x: Var,
    },
    Broadcast {
        kind: Binary,
        x: Var,
        v: Var,
        split: AxisSplit,
    },
    Softmax {
        x: Var,
        split: AxisSplit,
        log: bool,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<R>,
        rstd: Vec<R>,
        blocks: usize,
        /// extent of one affine parameter's broadcast run
        inner: usize,
        last_axis: bool,
    },
    Upsample {
        x: Var,
        taps: UpsampleTaps,
        channels: usize,
        input: [usize; 3],
    },
    Concat {
        xs: Vec<Var>,
        outer: usize,
        inner: usize,
    },
    Narrow {
        x: Var,
        split: AxisSplit,
        start: usize,
        len: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MaskGrad {
        x: Var,
        frozen: Vec<bool>,
    },
    Sdm {
        f: Var,
        g: Var,
        alpha: Var,
        beta: Var,
        omega: Var,
        h: Var,
        geom: SdmGeom,
    },
}

impl<R> Op<R> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Conv { .. } => "conv3d",
            Op::Binary { kind: Binary::Add, .. } => "add",
            Op::Binary { kind: Binary::Sub, .. } => "sub",
            Op::Binary { kind: Binary::Mul, .. } => "mul",
            Op::Affine { .. } => "scale",
            Op::Unary { kind: Unary::Sigmoid, .. } => "sigmoid",
            Op::Unary { kind: Unary::Gelu, .. } => "gelu",
            Op::Unary { kind: Unary::Square, .. } => "square",
            Op::Unary { kind: Unary::Recip, .. } => "recip",
            Op::Broadcast { .. } => "broadcast",
            Op::Softmax { log: false, .. } => "softmax",
            Op::Softmax { log: true, .. } => "log_softmax",
            Op::Norm { last_axis: true, .. } => "layer_norm",
            Op::Norm { last_axis: false, .. } => "group_norm",
            Op::Upsample { .. } => "trilinear_upsample",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MaskGrad { .. } => "mask_grad",
            Op::Sdm { .. } => "sdm_enhance",
        }
    }
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
    grad: Option<Vec<R>>,
}

/// A recorded computation. Single owner; nodes are never removed.
pub struct Graph<R> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu<R: Real>(x: R) -> R {
    let half = R::lit(0.5);
    half * x * (R::one() + (x * R::lit(core::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<R: Real>(x: R) -> R {
    let half = R::lit(0.5);
    let cdf = half * (R::one() + (x * R::lit(core::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * R::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

fn slot<R: Real>(adj: &mut [Option<Vec<R>>], v: Var, len: usize) -> &mut [R] {
    adj[v.0].get_or_insert_with(|| vec![R::zero(); len])
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Result<Var> {
        let idx = self.nodes.len();
        if cfg!(debug_assertions) && !value.is_finite() && self.op_inputs_finite(&op) {
            return Err(Error::NonFinite {
                op: op.name(),
                node: idx,
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(idx))
    }

    fn op_inputs_finite(&self, op: &Op<R>) -> bool {
        let mut ok = true;
        self.for_parents(op, |p| ok &= self.nodes[p.0].value.is_finite());
        ok
    }

    fn for_parents(&self, op: &Op<R>, mut f: impl FnMut(Var)) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) | Op::Binary { a, b, .. } => {
                f(*a);
                f(*b);
            }
            Op::Transpose(x)
            | Op::Affine { x, .. }
            | Op::Unary { x, .. }
            | Op::Softmax { x, .. }
            | Op::Upsample { x, .. }
            | Op::Narrow { x, .. }
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::MaskGrad { x, .. } => f(*x),
            Op::Conv { x, w, bias, .. } => {
                f(*x);
                f(*w);
                if let Some(b) = bias {
                    f(*b);
                }
            }
            Op::Broadcast { x, v, .. } => {
                f(*x);
                f(*v);
            }
            Op::Norm { x, gamma, beta, .. } => {
                f(*x);
                f(*gamma);
                f(*beta);
            }
            Op::Concat { xs, .. } => xs.iter().for_each(|&x| f(x)),
            Op::Sdm {
                f: a,
                g,
                alpha,
                beta,
                omega,
                h,
                ..
            } => {
                for v in [*a, *g, *alpha, *beta, *omega, *h] {
                    f(v);
                }
            }
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Adds a leaf. Leaves with `requires_grad` collect gradients in `backward`.
    pub fn leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(idx)
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Name of the op that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// First node holding a non-finite value, with the op that produced it.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let mut out = vec![R::zero(); r * c];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, r, k, c);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&[r, c], out)?, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("expected rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(x).data();
        let mut out = vec![R::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[c, r], out)?, Op::Transpose(x), rg)
    }

    /// 3-D cross-correlation of `x: C×D×H×W` with `w: Cout×(C/groups)×k×k×k`,
    /// `k ∈ {1, 3}`. Output extent per axis is `⌊(n + 2·pad − k)/stride⌋ + 1`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 5 {
            return Err(Error::dim("conv3d", format!("x {sx:?}, w {sw:?}")));
        }
        let k = sw[2];
        if !(k == 1 || k == 3) || sw[3] != k || sw[4] != k {
            return Err(Error::dim("conv3d", format!("unsupported kernel {sw:?}")));
        }
        if !(1..=2).contains(&stride) || pad > 1 {
            return Err(Error::dim("conv3d", format!("stride {stride}, pad {pad}")));
        }
        let cin = sx[0];
        let cout = sw[0];
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || sw[1] != cin / groups {
            return Err(Error::dim(
                "conv3d",
                format!("channels: x {sx:?}, w {sw:?}, groups {groups}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::dim("conv3d", format!("bias {:?}", self.shape(b))));
            }
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let span = sx[a + 1] + 2 * pad;
            if span < k {
                return Err(Error::dim(
                    "conv3d",
                    format!("extent {} too small for kernel {k} with pad {pad}", sx[a + 1]),
                ));
            }
            output[a] = (span - k) / stride + 1;
        }
        let geom = ConvGeom {
            cin,
            cout,
            groups,
            k,
            stride,
            pad,
            input: [sx[1], sx[2], sx[3]],
            output,
        };
        let mut out = vec![R::zero(); cout * output.iter().product::<usize>()];
        kernels::conv3d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &mut out,
        );
        let mut parents = vec![x, w];
        parents.extend(bias);
        let rg = self.rg(&parents);
        let t = Tensor::new(&[cout, output[0], output[1], output[2]], out)?;
        self.push(t, Op::Conv { x, w, bias, geom }, rg)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = if va.shape() == vb.shape() || vb.len() == 1 {
            va.shape().to_vec()
        } else if va.len() == 1 {
            vb.shape().to_vec()
        } else {
            return Err(Error::dim(
                "elementwise",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        };
        let n: usize = shape.iter().product();
        let (da, db) = (va.data(), vb.data());
        let ia = |i: usize| da[if da.len() == 1 { 0 } else { i }];
        let ib = |i: usize| db[if db.len() == 1 { 0 } else { i }];
        let out: Vec<R> = (0..n)
            .map(|i| match kind {
                Binary::Add => ia(i) + ib(i),
                Binary::Sub => ia(i) - ib(i),
                Binary::Mul => ia(i) * ib(i),
            })
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&shape, out)?, Op::Binary { kind, a, b }, rg)
    }

    /// Elementwise sum; either side may be a one-element scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: R, shift: R) -> Result<Var> {
        let t = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(&[x]);
        self.push(t, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, s: R) -> Result<Var> {
        self.affine(x, s, R::zero())
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| match kind {
            Unary::Sigmoid => sigmoid(v),
            Unary::Gelu => gelu(v),
            Unary::Square => v * v,
            Unary::Recip => v.recip(),
        });
        let rg = self.rg(&[x]);
        self.push(t, Op::Unary { kind, x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Gelu, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    /// `1/x`; a zero entry yields a non-finite value.
    pub fn recip(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Recip, x)
    }

    fn broadcast(&mut self, kind: Binary, x: Var, v: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x);
        if axis >= sx.len() || self.shape(v) != [sx[axis]] {
            return Err(Error::dim(
                "broadcast",
                format!("x {sx:?}, v {:?}, axis {axis}", self.shape(v)),
            ));
        }
        let split = AxisSplit::of(sx, axis);
        let mut t = self.value(x).clone();
        let vd = self.value(v).data();
        for (i, e) in t.data_mut().iter_mut().enumerate() {
            let c = vd[(i / split.inner) % split.n];
            match kind {
                Binary::Add => *e += c,
                Binary::Sub => *e -= c,
                Binary::Mul => *e *= c,
            }
        }
        let rg = self.rg(&[x, v]);
        self.push(t, Op::Broadcast { kind, x, v, split }, rg)
    }

    /// Adds `v` (length `shape[axis]`) broadcast along every other axis.
    pub fn add_along(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        self.broadcast(Binary::Add, x, v, axis)
    }

    /// Multiplies by `v` (length `shape[axis]`) broadcast along every other axis.
    pub fn mul_along(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        self.broadcast(Binary::Mul, x, v, axis)
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::dim("softmax", format!("axis {axis} for {s:?}")));
        }
        let split = AxisSplit::of(s, axis);
        let mut out = self.value(x).clone();
        kernels::softmax(
            self.value(x).data(),
            out.data_mut(),
            split.outer,
            split.n,
            split.inner,
            log,
        );
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax { x, split, log }, rg)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta` (length `D`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: R) -> Result<Var> {
        let s = self.shape(x);
        let d = *s.last().ok_or_else(|| Error::dim("layer_norm", "rank 0"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm", format!("x {s:?}, gamma/beta must be [{d}]")));
        }
        let rows = self.value(x).len() / d;
        self.norm_impl(x, gamma, beta, eps, rows, 1, true)
    }

    /// Group normalization of a `C×…` feature map with per-channel affine.
    /// `groups == 1` normalizes over the whole map; `groups == C` is
    /// per-channel (instance) normalization.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: R) -> Result<Var> {
        let s = self.shape(x);
        let c = s[0];
        if groups == 0 || c % groups != 0 {
            return Err(Error::dim("group_norm", format!("{c} channels, {groups} groups")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("group_norm", format!("x {s:?}, gamma/beta must be [{c}]")));
        }
        let inner = self.value(x).len() / c;
        self.norm_impl(x, gamma, beta, eps, groups, inner, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_impl(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: R,
        blocks: usize,
        inner: usize,
        last_axis: bool,
    ) -> Result<Var> {
        let xv = self.value(x);
        let block = xv.len() / blocks;
        let (xhat, rstd) = kernels::normalize_blocks(xv.data(), blocks, block, eps);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let d = g.len();
        let out: Vec<R> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let c = if last_axis { i % d } else { i / inner };
                h * g[c] + b[c]
            })
            .collect();
        let t = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            t,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                blocks,
                inner,
                last_axis,
            },
            rg,
        )
    }

    /// Align-corners-false trilinear upsampling of a `C×D×H×W` map.
    pub fn upsample(&mut self, x: Var, factor: [usize; 3]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || factor.contains(&0) {
            return Err(Error::dim("trilinear_upsample", format!("{s:?} by {factor:?}")));
        }
        let (channels, input) = (s[0], [s[1], s[2], s[3]]);
        let taps = UpsampleTaps::new(input, factor);
        let oshape = [channels, input[0] * factor[0], input[1] * factor[1], input[2] * factor[2]];
        let mut out = vec![R::zero(); oshape.iter().product()];
        kernels::upsample_forward(&taps, self.value(x).data(), &mut out, channels, input);
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(&oshape, out)?,
            Op::Upsample {
                x,
                taps,
                channels,
                input,
            },
            rg,
        )
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::dim("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let same_rest = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(Error::dim("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &x in xs {
                let run = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.value(x).data()[o * run..(o + 1) * run]);
            }
        }
        let rg = self.rg(xs);
        self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                outer,
                inner,
            },
            rg,
        )
    }

    /// Channel-axis concatenation of `C×D×H×W` maps.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        self.concat(xs, 0)
    }

    /// Slice `[start, start+len)` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::dim("narrow", format!("{s:?} axis {axis} [{start}, +{len})")));
        }
        let split = AxisSplit::of(s, axis);
        let mut shape = s.to_vec();
        shape[axis] = len;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..split.outer {
            let base = (o * split.n + start) * split.inner;
            out.extend_from_slice(&d[base..base + len * split.inner]);
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(&shape, out)?,
            Op::Narrow {
                x,
                split,
                start,
                len,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.sum() / R::from_f64(v.len() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Identity in the forward pass; zeroes the gradient at `frozen` entries.
    pub fn mask_grad(&mut self, x: Var, frozen: &[bool]) -> Result<Var> {
        if frozen.len() != self.value(x).len() {
            return Err(Error::dim("mask_grad", "mask length differs from tensor"));
        }
        let t = self.value(x).clone();
        let rg = self.rg(&[x]);
        self.push(
            t,
            Op::MaskGrad {
                x,
                frozen: frozen.to_vec(),
            },
            rg,
        )
    }

    /// Fused neighborhood enhancement (see [`crate::sdm::enhance`]).
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn sdm_enhance(
        &mut self,
        f: Var,
        g: Var,
        alpha: Var,
        beta: Var,
        omega: Var,
        h: Var,
        geom: SdmGeom,
    ) -> Result<Var> {
        let out = sdm::enhance_forward(
            &geom,
            self.value(f).data(),
            self.value(g).data(),
            self.value(alpha).data(),
            self.value(beta).data(),
            self.value(omega).data(),
            self.value(h).data(),
        );
        let [d, hh, w] = geom.dims;
        let t = Tensor::new(&[geom.cf, d, hh, w], out)?;
        let rg = self.rg(&[f, g, alpha, beta, omega, h]);
        self.push(
            t,
            Op::Sdm {
                f,
                g,
                alpha,
                beta,
                omega,
                h,
                geom,
            },
            rg,
        )
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(g) => g.iter_mut().zip(&dy).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(dy),
                }
                continue;
            }
            self.backprop_node(i, &dy, &mut adj);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, dy: &[R], adj: &mut [Option<Vec<R>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (r, k, c) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let da = slot(adj, *a, r * k);
                    kernels::matmul_nt_acc(dy, val(*b), da, r, c, k);
                }
                if self.wants(*b) {
                    let db = slot(adj, *b, k * c);
                    kernels::matmul_tn_acc(val(*a), dy, db, k, r, c);
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                let dx = slot(adj, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] += dy[j * r + i];
                    }
                }
            }
            Op::Conv { x, w, bias, geom } => {
                let mut dx = self.wants(*x).then(|| adj[x.0].take().unwrap_or_else(|| vec![R::zero(); len(*x)]));
                let mut dw = self.wants(*w).then(|| adj[w.0].take().unwrap_or_else(|| vec![R::zero(); len(*w)]));
                let mut db = bias
                    .filter(|b| self.wants(*b))
                    .map(|b| adj[b.0].take().unwrap_or_else(|| vec![R::zero(); len(b)]));
                kernels::conv3d_backward(
                    geom,
                    val(*x),
                    val(*w),
                    dy,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    adj[x.0] = Some(d);
                }
                if let Some(d) = dw {
                    adj[w.0] = Some(d);
                }
                if let (Some(d), Some(b)) = (db, bias) {
                    adj[b.0] = Some(d);
                }
            }
            Op::Binary { kind, a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let pick = |d: &[R], i: usize| d[if d.len() == 1 { 0 } else { i }];
                if self.wants(*a) {
                    let n = va.len();
                    let da = slot(adj, *a, n);
                    for (i, &g) in dy.iter().enumerate() {
                        let j = if n == 1 { 0 } else { i };
                        da[j] += match kind {
                            Binary::Add | Binary::Sub => g,
                            Binary::Mul => g * pick(vb, i),
                        };
                    }
                }
                if self.wants(*b) {
                    let n = vb.len();
                    let db = slot(adj, *b, n);
                    for (i, &g) in dy.iter().enumerate() {
                        let j = if n == 1 { 0 } else { i };
                        db[j] += match kind {
                            Binary::Add => g,
                            Binary::Sub => -g,
                            Binary::Mul => g * pick(va, i),
                        };
                    }
                }
            }
            Op::Affine { x, scale } => {
                let dx = slot(adj, *x, dy.len());
                for (d, &g) in dx.iter_mut().zip(dy) {
                    *d += *scale * g;
                }
            }
            Op::Unary { kind, x } => {
                let xv = val(*x);
                let y = node.value.data();
                let dx = slot(adj, *x, dy.len());
                for i in 0..dy.len() {
                    dx[i] += dy[i]
                        * match kind {
                            Unary::Sigmoid => y[i] * (R::one() - y[i]),
                            Unary::Gelu => gelu_grad(xv[i]),
                            Unary::Square => R::lit(2.0) * xv[i],
                            Unary::Recip => -y[i] * y[i],
                        };
                }
            }
            Op::Broadcast { kind, x, v, split } => {
                let vd = val(*v);
                let idx = |i: usize| (i / split.inner) % split.n;
                if self.wants(*x) {
                    let dx = slot(adj, *x, dy.len());
                    for (i, &g) in dy.iter().enumerate() {
                        dx[i] += match kind {
                            Binary::Mul => g * vd[idx(i)],
                            _ => g,
                        };
                    }
                }
                if self.wants(*v) {
                    let xd = val(*x);
                    let dv = slot(adj, *v, vd.len());
                    for (i, &g) in dy.iter().enumerate() {
                        dv[idx(i)] += match kind {
                            Binary::Add => g,
                            Binary::Sub => -g,
                            Binary::Mul => g * xd[i],
                        };
                    }
                }
            }
            Op::Softmax { x, split, log } => {
                let dx = slot(adj, *x, dy.len());
                kernels::softmax_backward(
                    node.value.data(),
                    dy,
                    dx,
                    split.outer,
                    split.n,
                    split.inner,
                    *log,
                );
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                blocks,
                inner,
                last_axis,
            } => {
                let g = val(*gamma);
                let d = g.len();
                let chan = |i: usize| if *last_axis { i % d } else { i / inner };
                if self.wants(*gamma) {
                    let dg = slot(adj, *gamma, d);
                    for (i, (&gy, &h)) in dy.iter().zip(xhat).enumerate() {
                        dg[chan(i)] += gy * h;
                    }
                }
                if self.wants(*beta) {
                    let db = slot(adj, *beta, d);
                    for (i, &gy) in dy.iter().enumerate() {
                        db[chan(i)] += gy;
                    }
                }
                if self.wants(*x) {
                    let dxhat: Vec<R> = dy.iter().enumerate().map(|(i, &gy)| gy * g[chan(i)]).collect();
                    let block = dy.len() / blocks;
                    let dx = slot(adj, *x, dy.len());
                    kernels::normalize_blocks_backward(xhat, rstd, &dxhat, dx, block);
                }
            }
            Op::Upsample {
                x,
                taps,
                channels,
                input,
            } => {
                let dx = slot(adj, *x, len(*x));
                kernels::upsample_backward(taps, dy, dx, *channels, *input);
            }
            Op::Concat { xs, outer, inner } => {
                let total: usize = xs.iter().map(|&x| len(x) / outer).sum();
                let mut off = 0;
                for &x in xs {
                    let run = len(x) / outer;
                    if self.wants(x) {
                        let dx = slot(adj, x, len(x));
                        for o in 0..*outer {
                            let src = &dy[o * total + off..o * total + off + run];
                            for (d, &g) in dx[o * run..(o + 1) * run].iter_mut().zip(src) {
                                *d += g;
                            }
                        }
                    }
                    off += run;
                }
                let _ = inner;
            }
            Op::Narrow {
                x,
                split,
                start,
                len: n,
            } => {
                let dx = slot(adj, *x, split.outer * split.n * split.inner);
                let run = n * split.inner;
                for o in 0..split.outer {
                    let base = (o * split.n + start) * split.inner;
                    for (d, &g) in dx[base..base + run].iter_mut().zip(&dy[o * run..(o + 1) * run]) {
                        *d += g;
                    }
                }
            }
            Op::Reshape(x) => {
                let dx = slot(adj, *x, dy.len());
                for (d, &g) in dx.iter_mut().zip(dy) {
                    *d += g;
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                let n = len(*x);
                let g = if matches!(node.op, Op::Mean(_)) {
                    dy[0] / R::from_f64(n as f64)
                } else {
                    dy[0]
                };
                let dx = slot(adj, *x, n);
                for d in dx.iter_mut() {
                    *d += g;
                }
            }
            Op::MaskGrad { x, frozen } => {
                let dx = slot(adj, *x, dy.len());
                for ((d, &g), &fz) in dx.iter_mut().zip(dy).zip(frozen) {
                    if !fz {
                        *d += g;
                    }
                }
            }
            Op::Sdm {
                f,
                g,
                alpha,
                beta,
                omega,
                h,
                geom,
            } => {
                let parents = [*f, *g, *alpha, *beta, *omega, *h];
                let mut bufs: [Option<Vec<R>>; 6] = Default::default();
                // fresh buffers: the same var may appear in several slots
                for (b, &p) in bufs.iter_mut().zip(&parents) {
                    if self.wants(p) {
                        *b = Some(vec![R::zero(); len(p)]);
                    }
                }
                let [bf, bg, ba, bb, bo, bh] = &mut bufs;
                sdm::enhance_backward(
                    geom,
                    [val(*f), val(*g), val(*alpha), val(*beta), val(*omega), val(*h)],
                    dy,
                    sdm::EnhanceGrads {
                        f: bf.as_deref_mut(),
                        g: bg.as_deref_mut(),
                        alpha: ba.as_deref_mut(),
                        beta: bb.as_deref_mut(),
                        omega: bo.as_deref_mut(),
                        h: bh.as_deref_mut(),
                    },
                );
                for (b, p) in bufs.into_iter().zip(parents) {
                    if let Some(b) = b {
                        let d = slot(adj, p, b.len());
                        d.iter_mut().zip(&b).for_each(|(x, &y)| *x += y);
                    }
                }
            }
        }
    }
}

/// Human-readable dump of a node, for diagnostics.
pub fn describe<R: Real>(g: &Graph<R>, v: Var) -> String {
    let t = g.value(v);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in t.data() {
        lo = lo.min(x.as_f64());
        hi = hi.max(x.as_f64());
    }
    format!("{} {:?} range [{lo:.4e}, {hi:.4e}]", g.op_name(v), t.shape())
}
