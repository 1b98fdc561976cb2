//! Full network: encoder, pushing decoder with SDM-refined skips, pulling
//! branch of chained clustering modules, token fusion and head.

use alloc::format;
use alloc::vec::Vec;

use crate::ccm::{self, Ccm, CenterAtlas, CenterUpdate};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::loss::{self, LossParts};
use crate::nn::{DecoderStage, Encoder, EncoderSpec};
use crate::params::{Ctx, Init, ParamId, ParamStore};
use crate::real::Real;
use crate::sdm::{self, SdmParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PnPConfig {
    pub classes: usize,
    pub encoder: EncoderSpec,
    /// Center dimension `D`.
    pub center_dim: usize,
    /// Atlas size `N̂`.
    pub atlas_size: usize,
    pub heads: usize,
    /// SDM diffusion steps `T`.
    pub sdm_iterations: usize,
    pub lambda_cc: f64,
    pub enable_sdm: bool,
    pub enable_ccm: bool,
    pub center_update: CenterUpdate,
    /// Count-normalized pseudo-centers (per-class mean) instead of raw sums.
    pub mean_pseudo_centers: bool,
    pub pull_tokens: PullTokens,
}

/// Which mask embeddings are concatenated into the pulling tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PullTokens {
    /// Raw similarities `M`.
    #[default]
    Similarity,
    /// Class-softmaxed assignments `M̂`.
    Assignment,
}

impl PnPConfig {
    /// Small configuration that trains on a CPU in minutes.
    pub fn desk(classes: usize) -> Self {
        Self {
            classes,
            encoder: EncoderSpec::desk([8, 16, 32, 64]),
            center_dim: 32,
            atlas_size: 12,
            heads: 1,
            sdm_iterations: 1,
            lambda_cc: 0.1,
            enable_sdm: true,
            enable_ccm: true,
            center_update: CenterUpdate::Sum,
            mean_pseudo_centers: true,
            pull_tokens: PullTokens::Similarity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.encoder.channels.len() != 4 {
            return Err(Error::config("encoder.channels", "exactly four scales (1/2 … 1/16) are required"));
        }
        if self.classes < 2 {
            return Err(Error::config("classes", format!("need at least 2, got {}", self.classes)));
        }
        if !(self.lambda_cc >= 0.0 && self.lambda_cc.is_finite()) {
            return Err(Error::config("lambda_cc", format!("{} must be a finite value ≥ 0", self.lambda_cc)));
        }
        if self.sdm_iterations == 0 {
            return Err(Error::config("sdm_iterations", "must be at least 1"));
        }
        if self.enable_ccm {
            if self.atlas_size <= self.classes {
                return Err(Error::config(
                    "atlas_size",
                    format!("{} must exceed the class count {}", self.atlas_size, self.classes),
                ));
            }
            if self.heads == 0 || self.center_dim % self.heads != 0 {
                return Err(Error::config(
                    "heads",
                    format!("{} is not divisible by {} heads", self.center_dim, self.heads),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PullBranch {
    pub atlas: CenterAtlas,
    /// Coarse to fine: 1/8, 1/4, 1/2.
    pub ccms: [Ccm; 3],
    /// Pointwise `3N → N` head on fused tokens.
    pub head_w: ParamId,
    pub head_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct PnPModel {
    pub config: PnPConfig,
    pub encoder: Encoder,
    /// Coarse to fine: 1/8, 1/4, 1/2.
    pub decoder: [DecoderStage; 3],
    /// Pointwise projection of the last decoder feature: to `N` logits for
    /// the baseline, to `3N` push tokens when the pulling branch is on.
    pub out_w: ParamId,
    pub out_b: ParamId,
    /// Coarse to fine: skips at 1/8, 1/4, 1/2.
    pub sdm: Option<[SdmParams; 3]>,
    pub pull: Option<PullBranch>,
}

/// Everything a forward pass exposes.
#[derive(Clone, Debug)]
pub struct ForwardOutputs<R> {
    pub logits: Var,
    /// Skip features as handed to the decoder (after SDM when enabled),
    /// coarse to fine.
    pub decoder_skips: Vec<Var>,
    pub t_push: Option<Var>,
    pub t_pull: Option<Var>,
    /// Class-softmaxed embeddings per scale, coarse to fine.
    pub m_hat: Vec<Var>,
    pub c_hat: Option<Var>,
    /// Detached pseudo-centers, present when labels were supplied.
    pub c_gt: Option<Tensor<R>>,
}

fn pointwise<R: Real>(ctx: &mut Ctx<'_, R>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let w = ctx.param(w);
    let b = ctx.param(b);
    ctx.g.conv3d(x, w, Some(b), 1, 0, 1)
}

/// `T_pull + T_pull ⊙ σ(T_push)`.
pub fn fuse_tokens<R: Real>(ctx: &mut Ctx<'_, R>, t_pull: Var, t_push: Var) -> Result<Var> {
    if ctx.g.shape(t_pull) != ctx.g.shape(t_push) {
        return Err(Error::dim(
            "fuse_tokens",
            format!("pull {:?} vs push {:?}", ctx.g.shape(t_pull), ctx.g.shape(t_push)),
        ));
    }
    let gate = ctx.g.sigmoid(t_push)?;
    let gated = ctx.g.mul(t_pull, gate)?;
    ctx.g.add(t_pull, gated)
}

impl PnPModel {
    pub fn new<R: Real>(config: &PnPConfig, store: &mut ParamStore<R>, seed: u64) -> Result<Self> {
        config.validate()?;
        let n = config.classes;
        let ch = config.encoder.channels.clone();
        let norm = config.encoder.norm;
        let mut init = Init::new(store, seed);
        let encoder = init.scoped("encoder", |i| Encoder::new(i, &config.encoder))?;
        let decoder = init.scoped("decoder", |i| {
            Ok([
                i.scoped("up8", |i| DecoderStage::new(i, ch[3], ch[2], norm))?,
                i.scoped("up4", |i| DecoderStage::new(i, ch[2], ch[1], norm))?,
                i.scoped("up2", |i| DecoderStage::new(i, ch[1], ch[0], norm))?,
            ])
        })?;
        let out_c = if config.enable_ccm { 3 * n } else { n };
        let (out_w, out_b) = init.scoped("out", |i| {
            let w = i.uniform_fan_in("weight", &[out_c, ch[0], 1, 1, 1], ch[0])?;
            let b = i.constant("bias", &[out_c], 0.0)?;
            i.store.set_no_decay(b);
            Ok((w, b))
        })?;
        let sdm = if config.enable_sdm {
            Some(init.scoped("sdm", |i| {
                Ok([
                    i.scoped("s8", |i| SdmParams::new(i, ch[2], ch[3]))?,
                    i.scoped("s4", |i| SdmParams::new(i, ch[1], ch[2]))?,
                    i.scoped("s2", |i| SdmParams::new(i, ch[0], ch[1]))?,
                ])
            })?)
        } else {
            None
        };
        let pull = if config.enable_ccm {
            let (d, heads) = (config.center_dim, config.heads);
            Some(init.scoped("pull", |i| {
                let atlas = i.scoped("atlas", |i| CenterAtlas::new(i, config.atlas_size, n, d))?;
                let ccms = [
                    i.scoped("ccm8", |i| Ccm::new(i, ch[2], d, heads))?,
                    i.scoped("ccm4", |i| Ccm::new(i, ch[1], d, heads))?,
                    i.scoped("ccm2", |i| Ccm::new(i, ch[0], d, heads))?,
                ];
                let head_w = i.uniform_fan_in("head.weight", &[n, 3 * n, 1, 1, 1], 3 * n)?;
                let head_b = i.constant("head.bias", &[n], 0.0)?;
                i.store.set_no_decay(head_b);
                Ok(PullBranch {
                    atlas,
                    ccms,
                    head_w,
                    head_b,
                })
            })?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
            out_w,
            out_b,
            sdm,
            pull,
        })
    }

    /// Parameters whose EID corners must stay at ±1.
    pub fn eid_params(&self) -> Vec<ParamId> {
        self.sdm
            .iter()
            .flat_map(|s| s.iter().flat_map(|p| p.eid_params()))
            .collect()
    }

    /// `image` is `1×D×H×W`; `labels` (voxel class indices) enable the
    /// pseudo-center target.
    pub fn forward<R: Real>(&self, ctx: &mut Ctx<'_, R>, image: Var, labels: Option<&[u8]>) -> Result<ForwardOutputs<R>> {
        let shape = ctx.g.shape(image).to_vec();
        if shape.len() != 4 || shape[0] != self.config.encoder.in_channels {
            return Err(Error::dim("forward", format!("image {shape:?}")));
        }
        let dims = [shape[1], shape[2], shape[3]];
        let skips = self.encoder.forward(ctx, image)?;

        let mut deep = skips[3];
        let mut decoder_skips = Vec::with_capacity(3);
        for (k, stage) in self.decoder.iter().enumerate() {
            let skip = skips[2 - k];
            let skip = match &self.sdm {
                Some(p) => sdm::sdm_iterate(ctx, skip, deep, &p[k], self.config.sdm_iterations)?,
                None => skip,
            };
            decoder_skips.push(skip);
            deep = stage.forward(ctx, deep, skip)?;
        }
        // A pointwise projection commutes with trilinear upsampling, so the
        // projection runs at half resolution.
        let projected = pointwise(ctx, deep, self.out_w, self.out_b)?;
        let projected = ctx.g.upsample(projected, [2, 2, 2])?;

        let Some(pull) = &self.pull else {
            return Ok(ForwardOutputs {
                logits: projected,
                decoder_skips,
                t_push: None,
                t_pull: None,
                m_hat: Vec::new(),
                c_hat: None,
                c_gt: None,
            });
        };

        let mut centers = pull.atlas.cluster(ctx)?;
        let mut masks = Vec::with_capacity(3);
        let mut m_hat = Vec::with_capacity(3);
        let mut finest_values = None;
        for (k, module) in pull.ccms.iter().enumerate() {
            let out = module.forward(ctx, centers, skips[2 - k], self.config.center_update)?;
            let f = 8 >> k;
            let tokens = match self.config.pull_tokens {
                PullTokens::Similarity => out.m,
                PullTokens::Assignment => out.m_hat,
            };
            masks.push(ctx.g.upsample(tokens, [f, f, f])?);
            m_hat.push(out.m_hat);
            centers = out.c_hat;
            finest_values = Some(out.v_f);
        }
        let t_pull = ctx.g.concat_channels(&masks)?;
        let t_f = fuse_tokens(ctx, t_pull, projected)?;
        let logits = pointwise(ctx, t_f, pull.head_w, pull.head_b)?;

        let c_gt = match labels {
            Some(l) => {
                let values = ctx.g.value(finest_values.expect("three scales")).clone();
                let (half, _) = ccm::downsample_labels(l, dims, 2)?;
                let v = half.len();
                let oh = loss::one_hot::<R>(&half, self.config.classes, [1, 1, v])?;
                let oh = oh.reshape(&[self.config.classes, v])?;
                Some(ccm::pseudo_centers(&oh, &values, self.config.mean_pseudo_centers)?)
            }
            None => None,
        };
        Ok(ForwardOutputs {
            logits,
            decoder_skips,
            t_push: Some(projected),
            t_pull: Some(t_pull),
            m_hat,
            c_hat: Some(centers),
            c_gt,
        })
    }

    /// Total loss against voxel labels; requires a forward pass run with
    /// the same labels when the pulling branch is on.
    pub fn loss<R: Real>(&self, ctx: &mut Ctx<'_, R>, out: &ForwardOutputs<R>, labels: &[u8]) -> Result<LossParts> {
        let s = ctx.g.shape(out.logits).to_vec();
        let target = loss::one_hot::<R>(labels, self.config.classes, [s[1], s[2], s[3]])?;
        let center = match (out.c_hat, &out.c_gt) {
            (Some(c_hat), Some(c_gt)) => Some(ccm::center_loss(ctx, c_gt, c_hat)?),
            (Some(_), None) => {
                return Err(Error::Contract("pulling branch loss needs labels at forward time".into()));
            }
            _ => None,
        };
        loss::total_loss(ctx, out.logits, &target, center, self.config.lambda_cc)
    }
}
