//! Pulling branch: center atlas, class clustering and pseudo-center
//! supervision.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::AttentionBlock;
use crate::params::{Ctx, Init, ParamId};
use crate::real::Real;
use crate::tensor::Tensor;

const COUNT_EPS: f64 = 1e-6;

/// `N̂` reference centers mixed down to `N` initial class centers.
#[derive(Clone, Debug)]
pub struct CenterAtlas {
    pub atlas: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
    pub refs: usize,
    pub classes: usize,
    pub dim: usize,
}

impl CenterAtlas {
    pub fn new<R: Real>(init: &mut Init<'_, R>, refs: usize, classes: usize, dim: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config("classes", format!("need at least 2, got {classes}")));
        }
        if refs <= classes {
            return Err(Error::config(
                "atlas_size",
                format!("{refs} reference centers for {classes} classes (must exceed)"),
            ));
        }
        if dim == 0 {
            return Err(Error::config("center_dim", "must be positive"));
        }
        let atlas = init.uniform_fan_in("atlas", &[refs, dim], dim)?;
        let w1 = init.uniform_fan_in("w1", &[refs, refs], refs)?;
        let w2 = init.uniform_fan_in("w2", &[classes, refs], refs)?;
        Ok(Self {
            atlas,
            w1,
            w2,
            refs,
            classes,
            dim,
        })
    }

    /// `C_init = W₂·GELU(W₁·A)`, mixing along the center axis.
    pub fn cluster<R: Real>(&self, ctx: &mut Ctx<'_, R>) -> Result<Var> {
        let a = ctx.param(self.atlas);
        let w1 = ctx.param(self.w1);
        let w2 = ctx.param(self.w2);
        let h = ctx.g.matmul(w1, a)?;
        let h = ctx.g.gelu(h)?;
        ctx.g.matmul(w2, h)
    }
}

/// How the weighted feature mass enters the center update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CenterUpdate {
    /// `Ĉ = Q_c + Σ_x M̂(:,x)·V_f(x)ᵀ`
    #[default]
    Sum,
    /// Same sum divided by the voxel count.
    VoxelMean,
}

/// One clustering module: attention over centers plus pointwise key/value
/// projections of a skip feature.
#[derive(Clone, Debug)]
pub struct Ccm {
    pub attention: AttentionBlock,
    pub key: ParamId,
    pub value: ParamId,
    pub in_channels: usize,
    pub dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct CcmOutput {
    /// Raw similarities `N×h×w×l`.
    pub m: Var,
    /// Class-softmaxed embeddings `N×h×w×l`.
    pub m_hat: Var,
    /// Updated centers `N×D`.
    pub c_hat: Var,
    /// Projected values `D×(h·w·l)`.
    pub v_f: Var,
}

impl Ccm {
    pub fn new<R: Real>(init: &mut Init<'_, R>, in_channels: usize, dim: usize, heads: usize) -> Result<Self> {
        let attention = init.scoped("attn", |i| AttentionBlock::new(i, dim, heads))?;
        let key = init.uniform_fan_in("key", &[dim, in_channels, 1, 1, 1], in_channels)?;
        let value = init.uniform_fan_in("value", &[dim, in_channels, 1, 1, 1], in_channels)?;
        Ok(Self {
            attention,
            key,
            value,
            in_channels,
            dim,
        })
    }

    pub fn forward<R: Real>(&self, ctx: &mut Ctx<'_, R>, centers: Var, feature: Var, mode: CenterUpdate) -> Result<CcmOutput> {
        let fs = ctx.g.shape(feature).to_vec();
        if fs.len() != 4 || fs[0] != self.in_channels {
            return Err(Error::dim(
                "ccm_forward",
                format!("feature {fs:?}, expected {} channels", self.in_channels),
            ));
        }
        let q = self.attention.forward(ctx, centers)?;
        let wk = ctx.param(self.key);
        let wv = ctx.param(self.value);
        let k = ctx.g.conv3d(feature, wk, None, 1, 0, 1)?;
        let v = ctx.g.conv3d(feature, wv, None, 1, 0, 1)?;
        cluster_update(ctx, q, k, v, mode)
    }
}

/// Mask embeddings and center update from already-projected queries
/// (`N×D`), keys and values (`D×h×w×l`).
pub fn cluster_update<R: Real>(ctx: &mut Ctx<'_, R>, q: Var, k: Var, v: Var, mode: CenterUpdate) -> Result<CcmOutput> {
    let ks = ctx.g.shape(k).to_vec();
    let qs = ctx.g.shape(q).to_vec();
    if ks.len() != 4 || qs.len() != 2 || qs[1] != ks[0] || ctx.g.shape(v) != ks.as_slice() {
        return Err(Error::dim(
            "ccm_forward",
            format!("queries {qs:?}, keys {ks:?}, values {:?}", ctx.g.shape(v)),
        ));
    }
    let (d, n) = (ks[0], qs[0]);
    let voxels = ks[1] * ks[2] * ks[3];
    let k2 = ctx.g.reshape(k, &[d, voxels])?;
    let v2 = ctx.g.reshape(v, &[d, voxels])?;
    let m = ctx.g.matmul(q, k2)?;
    let m_hat = ctx.g.softmax(m, 0)?;
    let vt = ctx.g.transpose(v2)?;
    let mut inc = ctx.g.matmul(m_hat, vt)?;
    if mode == CenterUpdate::VoxelMean {
        inc = ctx.g.scale(inc, R::lit(1.0 / voxels as f64))?;
    }
    let c_hat = ctx.g.add(q, inc)?;
    let vol = [n, ks[1], ks[2], ks[3]];
    Ok(CcmOutput {
        m: ctx.g.reshape(m, &vol)?,
        m_hat: ctx.g.reshape(m_hat, &vol)?,
        c_hat,
        v_f: v2,
    })
}

/// Per-class feature centers from a one-hot mask `O` (`N×V`) and features
/// `F` (`D×V`). With `normalize` each row is divided by its voxel count
/// (plus a small guard), so absent classes give zero rows.
pub fn pseudo_centers<R: Real>(onehot: &Tensor<R>, features: &Tensor<R>, normalize: bool) -> Result<Tensor<R>> {
    let (os, fs) = (onehot.shape(), features.shape());
    if os.len() != 2 || fs.len() != 2 || os[1] != fs[1] {
        return Err(Error::dim("pseudo_centers", format!("mask {os:?}, features {fs:?}")));
    }
    let (n, v, d) = (os[0], os[1], fs[0]);
    let o = onehot.data();
    for x in 0..v {
        let mut ones = 0;
        for c in 0..n {
            let e = o[c * v + x];
            if e == R::one() {
                ones += 1;
            } else if e != R::zero() {
                return Err(Error::Validation(format!("mask entry ({c}, {x}) is {e}, not 0 or 1")));
            }
        }
        if ones != 1 {
            return Err(Error::Validation(format!("voxel {x} has {ones} active classes")));
        }
    }
    let f = features.data();
    let mut out = vec![R::zero(); n * d];
    let mut counts = vec![0usize; n];
    for x in 0..v {
        let c = (0..n).find(|&c| o[c * v + x] == R::one()).expect("validated one-hot");
        counts[c] += 1;
        for j in 0..d {
            out[c * d + j] += f[j * v + x];
        }
    }
    if normalize {
        for c in 0..n {
            let s = R::one() / (R::from_f64(counts[c] as f64) + R::lit(COUNT_EPS));
            for e in &mut out[c * d..(c + 1) * d] {
                *e *= s;
            }
        }
    }
    Tensor::new(&[n, d], out)
}

/// `Σ (C_gt − Ĉ)²`, with `C_gt` held constant.
pub fn center_loss<R: Real>(ctx: &mut Ctx<'_, R>, c_gt: &Tensor<R>, c_hat: Var) -> Result<Var> {
    if ctx.g.shape(c_hat) != c_gt.shape() {
        return Err(Error::dim(
            "center_loss",
            format!("target {:?}, centers {:?}", c_gt.shape(), ctx.g.shape(c_hat)),
        ));
    }
    let t = ctx.input(c_gt.clone());
    let diff = ctx.g.sub(c_hat, t)?;
    let sq = ctx.g.square(diff)?;
    ctx.g.sum(sq)
}

/// Nearest-neighbor label downsampling: keeps the voxel at `factor·p`.
pub fn downsample_labels(labels: &[u8], dims: [usize; 3], factor: usize) -> Result<(Vec<u8>, [usize; 3])> {
    if factor == 0 || dims.iter().any(|d| d % factor != 0) || labels.len() != dims.iter().product::<usize>() {
        return Err(Error::dim(
            "downsample_labels",
            format!("{} labels for {dims:?} at factor {factor}", labels.len()),
        ));
    }
    let out_dims = dims.map(|d| d / factor);
    let mut out = Vec::with_capacity(out_dims.iter().product());
    for z in 0..out_dims[0] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[2] {
                let (sz, sy, sx) = (z * factor, y * factor, x * factor);
                out.push(labels[(sz * dims[1] + sy) * dims[2] + sx]);
            }
        }
    }
    Ok((out, out_dims))
}
