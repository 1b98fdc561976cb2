//! Building blocks: residual conv units, the encoder/decoder skeleton and
//! the token self-attention block used on class centers.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Ctx, Init, ParamId};
use crate::real::Real;
#[cfg(not(feature = "std"))]
use num_traits::Float;

const NORM_EPS: f64 = 1e-5;

/// Feature normalization inside conv blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Group norm with the given number of groups (1 group normalizes over
    /// all channels and voxels).
    Group(usize),
    /// Batch statistics. At batch size 1 these are per-channel statistics
    /// over the volume, and no running averages are kept.
    Batch,
}

impl Default for NormKind {
    fn default() -> Self {
        NormKind::Group(1)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub kind: NormKind,
    pub channels: usize,
}

impl Norm {
    pub fn new<R: Real>(init: &mut Init<'_, R>, channels: usize, kind: NormKind) -> Result<Self> {
        if let NormKind::Group(g) = kind {
            if g == 0 || channels % g != 0 {
                return Err(Error::config("norm", format!("{g} groups for {channels} channels")));
            }
        }
        let gamma = init.constant("gamma", &[channels], 1.0)?;
        let beta = init.constant("beta", &[channels], 0.0)?;
        init.store.set_no_decay(gamma);
        init.store.set_no_decay(beta);
        Ok(Self {
            gamma,
            beta,
            kind,
            channels,
        })
    }

    pub fn forward<R: Real>(&self, ctx: &mut Ctx<'_, R>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let groups = match self.kind {
            NormKind::Group(g) => g,
            NormKind::Batch => self.channels,
        };
        ctx.g.group_norm(x, gamma, beta, groups, R::lit(NORM_EPS))
    }
}

fn conv_weight<R: Real>(init: &mut Init<'_, R>, leaf: &str, cout: usize, cin: usize, k: usize) -> Result<ParamId> {
    init.uniform_fan_in(leaf, &[cout, cin, k, k, k], cin * k * k * k)
}

/// `conv → norm → GELU → conv → norm`, added to an identity or 1×1×1
/// projection shortcut. Convs carry no bias since a norm follows each.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: ParamId,
    pub norm1: Norm,
    pub conv2: ParamId,
    pub norm2: Norm,
    pub proj: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl ResidualBlock {
    pub fn new<R: Real>(init: &mut Init<'_, R>, cin: usize, cout: usize, norm: NormKind) -> Result<Self> {
        let conv1 = conv_weight(init, "conv1", cout, cin, 3)?;
        let norm1 = init.scoped("norm1", |i| Norm::new(i, cout, norm))?;
        let conv2 = conv_weight(init, "conv2", cout, cout, 3)?;
        let norm2 = init.scoped("norm2", |i| Norm::new(i, cout, norm))?;
        let proj = if cin == cout {
            None
        } else {
            Some(conv_weight(init, "proj", cout, cin, 1)?)
        };
        Ok(Self {
            conv1,
            norm1,
            conv2,
            norm2,
            proj,
            cin,
            cout,
        })
    }

    pub fn forward<R: Real>(&self, ctx: &mut Ctx<'_, R>, x: Var) -> Result<Var> {
        let w1 = ctx.param(self.conv1);
        let h = ctx.g.conv3d(x, w1, None, 1, 1, 1)?;
        let h = self.norm1.forward(ctx, h)?;
        let h = ctx.g.gelu(h)?;
        let w2 = ctx.param(self.conv2);
        let h = ctx.g.conv3d(h, w2, None, 1, 1, 1)?;
        let h = self.norm2.forward(ctx, h)?;
        let shortcut = match self.proj {
            Some(p) => {
                let w = ctx.param(p);
                ctx.g.conv3d(x, w, None, 1, 0, 1)?
            }
            None => x,
        };
        ctx.g.add(h, shortcut)
    }
}

/// Encoder layout: one entry per scale.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSpec {
    /// Downsample ratio of each stage's output relative to the input.
    pub scales: Vec<usize>,
    pub blocks_per_scale: Vec<usize>,
    pub channels: Vec<usize>,
    pub norm: NormKind,
    pub in_channels: usize,
}

impl EncoderSpec {
    /// Four scales (1/2 … 1/16) with one residual block each.
    pub fn desk(channels: [usize; 4]) -> Self {
        Self {
            scales: alloc::vec![2, 4, 8, 16],
            blocks_per_scale: alloc::vec![1, 1, 1, 1],
            channels: channels.to_vec(),
            norm: NormKind::default(),
            in_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0 || self.scales.len() != n || self.blocks_per_scale.len() != n {
            return Err(Error::config(
                "encoder",
                format!(
                    "scales/blocks/channels lengths {}/{}/{} must match and be non-zero",
                    self.scales.len(),
                    self.blocks_per_scale.len(),
                    n
                ),
            ));
        }
        if self.channels.iter().any(|&c| c == 0) || self.in_channels == 0 {
            return Err(Error::config("encoder.channels", "must be positive"));
        }
        for (i, &s) in self.scales.iter().enumerate() {
            if s != 1 << (i + 1) {
                return Err(Error::config(
                    "encoder.scales",
                    format!("stage {i} has ratio {s}, each stage must halve the previous"),
                ));
            }
        }
        Ok(())
    }

    /// Total downsampling factor; input extents must be divisible by it.
    pub fn stride(&self) -> usize {
        *self.scales.last().unwrap_or(&1)
    }

    pub fn check_input(&self, dims: &[usize]) -> Result<()> {
        let s = self.stride();
        if dims.len() != 3 || dims.iter().any(|d| d % s != 0) {
            return Err(Error::dim(
                "encoder",
                format!("input extents {dims:?} must be divisible by {s}"),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub down: ParamId,
    pub norm: Norm,
    pub blocks: Vec<ResidualBlock>,
}

/// Stride-2 conv at each stage entry, then residual blocks. Emits one skip
/// feature per scale, finest first.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub stages: Vec<EncoderStage>,
}

impl Encoder {
    pub fn new<R: Real>(init: &mut Init<'_, R>, spec: &EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let mut stages = Vec::with_capacity(spec.channels.len());
        let mut cin = spec.in_channels;
        for (i, &c) in spec.channels.iter().enumerate() {
            let stage = init.scoped(format!("stage{i}"), |init| {
                let down = conv_weight(init, "down", c, cin, 3)?;
                let norm = init.scoped("norm", |i| Norm::new(i, c, spec.norm))?;
                let blocks = (0..spec.blocks_per_scale[i])
                    .map(|b| init.scoped(format!("block{b}"), |i| ResidualBlock::new(i, c, c, spec.norm)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(EncoderStage { down, norm, blocks })
            })?;
            stages.push(stage);
            cin = c;
        }
        Ok(Self {
            spec: spec.clone(),
            stages,
        })
    }

    pub fn forward<R: Real>(&self, ctx: &mut Ctx<'_, R>, x: Var) -> Result<Vec<Var>> {
        self.spec.check_input(&ctx.g.shape(x)[1..])?;
        let mut skips = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for st in &self.stages {
            let w = ctx.param(st.down);
            h = ctx.g.conv3d(h, w, None, 2, 1, 1)?;
            h = st.norm.forward(ctx, h)?;
            h = ctx.g.gelu(h)?;
            for b in &st.blocks {
                h = b.forward(ctx, h)?;
            }
            skips.push(h);
        }
        Ok(skips)
    }
}

/// Upsample, concatenate with the skip, residual block.
#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub block: ResidualBlock,
}

impl DecoderStage {
    pub fn new<R: Real>(init: &mut Init<'_, R>, deep_c: usize, skip_c: usize, norm: NormKind) -> Result<Self> {
        Ok(Self {
            block: init.scoped("block", |i| ResidualBlock::new(i, deep_c + skip_c, skip_c, norm))?,
        })
    }

    pub fn forward<R: Real>(&self, ctx: &mut Ctx<'_, R>, deep: Var, skip: Var) -> Result<Var> {
        let ds = ctx.g.shape(deep)[1..].to_vec();
        let ss = ctx.g.shape(skip)[1..].to_vec();
        if ds.len() != 3 || ss.len() != 3 || ds.iter().zip(&ss).any(|(d, s)| 2 * d != *s) {
            return Err(Error::dim(
                "decoder_stage",
                format!("deep {ds:?} is not half of skip {ss:?}"),
            ));
        }
        let up = ctx.g.upsample(deep, [2, 2, 2])?;
        let cat = ctx.g.concat_channels(&[up, skip])?;
        self.block.forward(ctx, cat)
    }
}

/// Pre-LN transformer block over `N×D` tokens.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub ln1: (ParamId, ParamId),
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2: (ParamId, ParamId),
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub dim: usize,
    pub heads: usize,
}

impl AttentionBlock {
    pub fn new<R: Real>(init: &mut Init<'_, R>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config("heads", format!("{dim} is not divisible by {heads} heads")));
        }
        let ln = |init: &mut Init<'_, R>, scope: &str| -> Result<(ParamId, ParamId)> {
            init.scoped(scope, |i| {
                let g = i.constant("gamma", &[dim], 1.0)?;
                let b = i.constant("beta", &[dim], 0.0)?;
                i.store.set_no_decay(g);
                i.store.set_no_decay(b);
                Ok((g, b))
            })
        };
        let ln1 = ln(init, "ln1")?;
        let wq = init.uniform_fan_in("wq", &[dim, dim], dim)?;
        let wk = init.uniform_fan_in("wk", &[dim, dim], dim)?;
        let wv = init.uniform_fan_in("wv", &[dim, dim], dim)?;
        let wo = init.uniform_fan_in("wo", &[dim, dim], dim)?;
        let ln2 = ln(init, "ln2")?;
        let w1 = init.uniform_fan_in("mlp1.weight", &[dim, 4 * dim], dim)?;
        let b1 = init.constant("mlp1.bias", &[4 * dim], 0.0)?;
        let w2 = init.uniform_fan_in("mlp2.weight", &[4 * dim, dim], 4 * dim)?;
        let b2 = init.constant("mlp2.bias", &[dim], 0.0)?;
        init.store.set_no_decay(b1);
        init.store.set_no_decay(b2);
        Ok(Self {
            ln1,
            wq,
            wk,
            wv,
            wo,
            ln2,
            w1,
            b1,
            w2,
            b2,
            dim,
            heads,
        })
    }

    /// `x + Attn(LN(x))`, then `+ MLP(LN(·))`.
    pub fn forward<R: Real>(&self, ctx: &mut Ctx<'_, R>, x: Var) -> Result<Var> {
        let shape = ctx.g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::dim("attention_g", format!("tokens {shape:?}, dim {}", self.dim)));
        }
        let (g1, b1) = (ctx.param(self.ln1.0), ctx.param(self.ln1.1));
        let h = ctx.g.layer_norm(x, g1, b1, R::lit(NORM_EPS))?;
        let [wq, wk, wv, wo] = [self.wq, self.wk, self.wv, self.wo].map(|p| ctx.param(p));
        let q = ctx.g.matmul(h, wq)?;
        let k = ctx.g.matmul(h, wk)?;
        let v = ctx.g.matmul(h, wv)?;
        let dh = self.dim / self.heads;
        let scale = R::lit(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    ctx.g.narrow(q, 1, head * dh, dh)?,
                    ctx.g.narrow(k, 1, head * dh, dh)?,
                    ctx.g.narrow(v, 1, head * dh, dh)?,
                )
            };
            let kt = ctx.g.transpose(kh)?;
            let s = ctx.g.matmul(qh, kt)?;
            let s = ctx.g.scale(s, scale)?;
            let a = ctx.g.softmax(s, 1)?;
            outs.push(ctx.g.matmul(a, vh)?);
        }
        let o = if outs.len() == 1 { outs[0] } else { ctx.g.concat(&outs, 1)? };
        let o = ctx.g.matmul(o, wo)?;
        let x1 = ctx.g.add(x, o)?;

        let (g2, b2) = (ctx.param(self.ln2.0), ctx.param(self.ln2.1));
        let h = ctx.g.layer_norm(x1, g2, b2, R::lit(NORM_EPS))?;
        let w1 = ctx.param(self.w1);
        let bias1 = ctx.param(self.b1);
        let h = ctx.g.matmul(h, w1)?;
        let h = ctx.g.add_along(h, bias1, 1)?;
        let h = ctx.g.gelu(h)?;
        let w2 = ctx.param(self.w2);
        let bias2 = ctx.param(self.b2);
        let h = ctx.g.matmul(h, w2)?;
        let h = ctx.g.add_along(h, bias2, 1)?;
        ctx.g.add(x1, h)
    }
}
