//! Pushing branch: EID-constrained differential kernels and the semantic
//! difference module.
//!
//! For a skip feature `F` (`Cf` channels) and a deeper decoder feature `G`
//! (`Cg` channels, brought to `F`'s resolution), the enhanced feature is
//!
//! ```text
//! F̂[co](p) = Σ_o Σ_ci ω[co,ci,o] · S[ci,o](p) · (β[ci,o]·F[ci](p+o) − F[ci](p))
//! S[ci,o](p) = Σ_g h[ci,g] · (α[g,o]·G[g](p+o) − G[g](p))²
//! ```
//!
//! where `o` runs over the 27 offsets of the 3×3×3 neighborhood (zero
//! outside the volume), `α`/`β` are depthwise EID kernels, `ω` is a vanilla
//! 3×3×3 kernel and `h` a bias-free pointwise projection. One diffusion
//! step is then `F' = λ·F + ν·F̂`.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{self, NEIGHBORS};
use crate::params::{Ctx, Init, ParamId};
use crate::real::Real;
use crate::tensor::Tensor;

pub const TAPS: usize = 27;

/// Sign layout of a 3×3×3 EID kernel: eight fixed ±1 corners, 19 free taps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EidTemplate {
    fixed: [Option<i8>; TAPS],
}

impl Default for EidTemplate {
    fn default() -> Self {
        Self::build()
    }
}

impl EidTemplate {
    /// Corner `(i, j, k)`, `i, j, k ∈ {0, 2}`, is `+1` when `i/2 + j/2 + k/2`
    /// is even and `−1` otherwise: the two-coloring of the cube graph, so
    /// every edge joins opposite signs.
    pub fn build() -> Self {
        let mut fixed = [None; TAPS];
        for i in [0usize, 2] {
            for j in [0usize, 2] {
                for k in [0usize, 2] {
                    let parity = (i / 2 + j / 2 + k / 2) % 2;
                    fixed[Self::tap(i, j, k)] = Some(if parity == 0 { 1 } else { -1 });
                }
            }
        }
        Self { fixed }
    }

    pub const fn tap(i: usize, j: usize, k: usize) -> usize {
        (i * 3 + j) * 3 + k
    }

    pub fn fixed_value(&self, tap: usize) -> Option<i8> {
        self.fixed[tap]
    }

    pub fn is_fixed(&self, tap: usize) -> bool {
        self.fixed[tap].is_some()
    }

    pub fn corners(&self) -> impl Iterator<Item = (usize, i8)> + '_ {
        self.fixed
            .iter()
            .enumerate()
            .filter_map(|(t, v)| v.map(|v| (t, v)))
    }

    pub fn free_taps(&self) -> impl Iterator<Item = usize> + '_ {
        (0..TAPS).filter(|&t| !self.is_fixed(t))
    }

    /// The 12 cube edges as pairs of corner taps.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let corners: Vec<(usize, [usize; 3])> = (0..TAPS)
            .filter(|&t| self.is_fixed(t))
            .map(|t| (t, [t / 9, (t / 3) % 3, t % 3]))
            .collect();
        let mut out = Vec::new();
        for (a, (ta, ca)) in corners.iter().enumerate() {
            for (tb, cb) in &corners[a + 1..] {
                let differing = ca.iter().zip(cb).filter(|(x, y)| x != y).count();
                if differing == 1 {
                    out.push((*ta, *tb));
                }
            }
        }
        out
    }

    /// Per-element frozen flags for a `channels×1×3×3×3` kernel stack.
    pub fn frozen_mask(&self, channels: usize) -> Vec<bool> {
        (0..channels * TAPS).map(|i| self.is_fixed(i % TAPS)).collect()
    }

    /// A kernel stack with corners set and every free tap equal to `free`.
    pub fn kernel<R: Real>(&self, channels: usize, free: f64) -> Tensor<R> {
        let data = (0..channels * TAPS)
            .map(|i| match self.fixed[i % TAPS] {
                Some(s) => R::from_f64(s as f64),
                None => R::from_f64(free),
            })
            .collect();
        Tensor::new(&[channels, 1, 3, 3, 3], data).expect("shape matches data")
    }

    /// Checks that every corner of every kernel in the stack holds its exact
    /// fixed value.
    pub fn check<R: Real>(&self, name: &str, kernel: &[R]) -> Result<()> {
        if kernel.len() % TAPS != 0 {
            return Err(Error::Constraint {
                tensor: name.to_string(),
                detail: format!("length {} is not a multiple of 27", kernel.len()),
            });
        }
        for (c, k) in kernel.chunks(TAPS).enumerate() {
            for (t, s) in self.corners() {
                if k[t] != R::from_f64(s as f64) {
                    return Err(Error::Constraint {
                        tensor: name.to_string(),
                        detail: format!(
                            "channel {c} corner ({}, {}, {}) is {} (expected {s})",
                            t / 9,
                            (t / 3) % 3,
                            t % 3,
                            k[t]
                        ),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Depthwise 3×3×3 convolution (pad 1) with an EID-constrained kernel stack.
/// Corners receive zero gradient.
pub fn eid_conv<R: Real>(g: &mut Graph<R>, x: Var, kernels: Var) -> Result<Var> {
    let template = EidTemplate::build();
    let c = g.shape(x)[0];
    if g.shape(kernels) != [c, 1, 3, 3, 3] {
        return Err(Error::dim(
            "eid_conv",
            format!("kernel {:?} for {c} channels", g.shape(kernels)),
        ));
    }
    template.check("eid_conv", g.value(kernels).data())?;
    let masked = g.mask_grad(kernels, &template.frozen_mask(c))?;
    g.conv3d(x, masked, None, 1, 1, c)
}

/// Shape of one fused enhancement.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SdmGeom {
    pub cf: usize,
    pub cg: usize,
    pub dims: [usize; 3],
}

impl SdmGeom {
    fn voxels(&self) -> usize {
        self.dims.iter().product()
    }
}

pub(crate) fn enhance_forward<R: Real>(
    geom: &SdmGeom,
    f: &[R],
    g: &[R],
    alpha: &[R],
    beta: &[R],
    omega: &[R],
    h: &[R],
) -> Vec<R> {
    let (cf, cg, v) = (geom.cf, geom.cg, geom.voxels());
    let mut out = vec![R::zero(); cf * v];
    let mut gq = vec![R::zero(); cg * v];
    let mut fq = vec![R::zero(); cf * v];
    let mut a2 = vec![R::zero(); cg * v];
    let mut s = vec![R::zero(); cf * v];
    let mut w_o = vec![R::zero(); cf * cf];
    for (t, &delta) in NEIGHBORS.iter().enumerate() {
        kernels::shift_copy(g, &mut gq, cg, geom.dims, delta);
        kernels::shift_copy(f, &mut fq, cf, geom.dims, delta);
        for ch in 0..cg {
            let a = alpha[ch * TAPS + t];
            let r = ch * v..(ch + 1) * v;
            for ((o, &q), &p) in a2[r.clone()].iter_mut().zip(&gq[r.clone()]).zip(&g[r]) {
                let d = a * q - p;
                *o = d * d;
            }
        }
        s.fill(R::zero());
        kernels::matmul_acc(h, &a2, &mut s, cf, cg, v);
        for ci in 0..cf {
            let b = beta[ci * TAPS + t];
            let r = ci * v..(ci + 1) * v;
            for ((sv, &q), &p) in s[r.clone()].iter_mut().zip(&fq[r.clone()]).zip(&f[r]) {
                *sv *= b * q - p;
            }
        }
        for (i, w) in w_o.iter_mut().enumerate() {
            *w = omega[i * TAPS + t];
        }
        kernels::matmul_acc(&w_o, &s, &mut out, cf, cf, v);
    }
    out
}

pub(crate) struct EnhanceGrads<'a, R> {
    pub f: Option<&'a mut [R]>,
    pub g: Option<&'a mut [R]>,
    pub alpha: Option<&'a mut [R]>,
    pub beta: Option<&'a mut [R]>,
    pub omega: Option<&'a mut [R]>,
    pub h: Option<&'a mut [R]>,
}

pub(crate) fn enhance_backward<R: Real>(
    geom: &SdmGeom,
    [f, g, alpha, beta, omega, h]: [&[R]; 6],
    dout: &[R],
    mut grads: EnhanceGrads<'_, R>,
) {
    let (cf, cg, v) = (geom.cf, geom.cg, geom.voxels());
    let two = R::lit(2.0);
    let mut gq = vec![R::zero(); cg * v];
    let mut fq = vec![R::zero(); cf * v];
    let mut a = vec![R::zero(); cg * v];
    let mut a2 = vec![R::zero(); cg * v];
    let mut s = vec![R::zero(); cf * v];
    let mut dv = vec![R::zero(); cf * v];
    let mut p = vec![R::zero(); cf * v];
    let mut dp = vec![R::zero(); cf * v];
    let mut tmp_f = vec![R::zero(); cf * v];
    let mut da = vec![R::zero(); cg * v];
    let mut w_o = vec![R::zero(); cf * cf];
    let need_g_path = grads.g.is_some() || grads.alpha.is_some();
    for (t, &delta) in NEIGHBORS.iter().enumerate() {
        kernels::shift_copy(g, &mut gq, cg, geom.dims, delta);
        kernels::shift_copy(f, &mut fq, cf, geom.dims, delta);
        for ch in 0..cg {
            let al = alpha[ch * TAPS + t];
            for i in ch * v..(ch + 1) * v {
                a[i] = al * gq[i] - g[i];
                a2[i] = a[i] * a[i];
            }
        }
        s.fill(R::zero());
        kernels::matmul_acc(h, &a2, &mut s, cf, cg, v);
        for ci in 0..cf {
            let b = beta[ci * TAPS + t];
            for i in ci * v..(ci + 1) * v {
                dv[i] = b * fq[i] - f[i];
                p[i] = s[i] * dv[i];
            }
        }
        for (i, w) in w_o.iter_mut().enumerate() {
            *w = omega[i * TAPS + t];
        }
        if let Some(dw) = grads.omega.as_deref_mut() {
            for co in 0..cf {
                for ci in 0..cf {
                    dw[(co * cf + ci) * TAPS + t] +=
                        kernels::dot(&dout[co * v..(co + 1) * v], &p[ci * v..(ci + 1) * v]);
                }
            }
        }
        dp.fill(R::zero());
        kernels::matmul_tn_acc(&w_o, dout, &mut dp, cf, cf, v);
        // dp now holds dP; reuse p for dS and tmp_f for dDv
        for i in 0..cf * v {
            p[i] = dp[i] * dv[i];
            tmp_f[i] = dp[i] * s[i];
        }
        let (ds, ddv) = (&p, &mut tmp_f);
        if let Some(db) = grads.beta.as_deref_mut() {
            for ci in 0..cf {
                let r = ci * v..(ci + 1) * v;
                db[ci * TAPS + t] += kernels::dot(&ddv[r.clone()], &fq[r]);
            }
        }
        if let Some(df) = grads.f.as_deref_mut() {
            for (d, &x) in df.iter_mut().zip(ddv.iter()) {
                *d -= x;
            }
            for ci in 0..cf {
                let b = beta[ci * TAPS + t];
                for x in &mut ddv[ci * v..(ci + 1) * v] {
                    *x *= b;
                }
            }
            kernels::shift_add_back(ddv, df, cf, geom.dims, delta);
        }
        if let Some(dh) = grads.h.as_deref_mut() {
            kernels::matmul_nt_acc(ds, &a2, dh, cf, v, cg);
        }
        if need_g_path {
            da.fill(R::zero());
            kernels::matmul_tn_acc(h, ds, &mut da, cg, cf, v);
            for (d, &x) in da.iter_mut().zip(&a) {
                *d *= two * x;
            }
            if let Some(dal) = grads.alpha.as_deref_mut() {
                for ch in 0..cg {
                    let r = ch * v..(ch + 1) * v;
                    dal[ch * TAPS + t] += kernels::dot(&da[r.clone()], &gq[r]);
                }
            }
            if let Some(dg) = grads.g.as_deref_mut() {
                for (d, &x) in dg.iter_mut().zip(&da) {
                    *d -= x;
                }
                for ch in 0..cg {
                    let al = alpha[ch * TAPS + t];
                    for x in &mut da[ch * v..(ch + 1) * v] {
                        *x *= al;
                    }
                }
                kernels::shift_add_back(&da, dg, cg, geom.dims, delta);
            }
        }
    }
}

/// Parameters of one semantic difference module.
#[derive(Clone, Copy, Debug)]
pub struct SdmParams {
    /// EID kernels on the guidance feature, `Cg×1×3×3×3`.
    pub alpha: ParamId,
    /// EID kernels on the skip feature, `Cf×1×3×3×3`.
    pub beta: ParamId,
    /// Vanilla kernel `Cf×Cf×3×3×3`.
    pub omega: ParamId,
    /// Pointwise projection `Cf×Cg×1×1×1`, no bias.
    pub h: ParamId,
    pub lambda: ParamId,
    pub nu: ParamId,
    pub cf: usize,
    pub cg: usize,
}

impl SdmParams {
    /// EID free taps start at 1 so that every non-corner offset begins as a
    /// plain neighbor difference; `λ = 1`, `ν = 0.1`.
    pub fn new<R: Real>(init: &mut Init<'_, R>, cf: usize, cg: usize) -> Result<Self> {
        let template = EidTemplate::build();
        let alpha = init.tensor("alpha", template.kernel(cg, 1.0))?;
        init.store.set_frozen(alpha, template.frozen_mask(cg));
        init.store.set_no_decay(alpha);
        let beta = init.tensor("beta", template.kernel(cf, 1.0))?;
        init.store.set_frozen(beta, template.frozen_mask(cf));
        init.store.set_no_decay(beta);
        let omega = init.uniform_fan_in("omega", &[cf, cf, 3, 3, 3], cf * TAPS)?;
        let h = init.uniform_fan_in("h", &[cf, cg, 1, 1, 1], cg)?;
        let lambda = init.constant("lambda", &[1], 1.0)?;
        init.store.set_no_decay(lambda);
        let nu = init.constant("nu", &[1], 0.1)?;
        init.store.set_no_decay(nu);
        Ok(Self {
            alpha,
            beta,
            omega,
            h,
            lambda,
            nu,
            cf,
            cg,
        })
    }

    /// Names of the EID-constrained tensors.
    pub fn eid_params(&self) -> [ParamId; 2] {
        [self.alpha, self.beta]
    }
}

/// Brings `G` to the spatial size of `F`: identity when equal, ×2 trilinear
/// upsampling when `G` is one scale deeper.
pub fn align_guidance<R: Real>(g: &mut Graph<R>, f: Var, guidance: Var) -> Result<Var> {
    let fs = g.shape(f)[1..].to_vec();
    let gs = g.shape(guidance)[1..].to_vec();
    if fs == gs {
        return Ok(guidance);
    }
    if fs.iter().zip(&gs).all(|(a, b)| *a == 2 * *b) {
        return g.upsample(guidance, [2, 2, 2]);
    }
    Err(Error::dim(
        "sdm_forward",
        format!("guidance {gs:?} is neither equal to nor half of skip {fs:?}"),
    ))
}

/// Raw enhanced feature `F̂` for aligned `f` and `guidance`.
pub fn enhance<R: Real>(ctx: &mut Ctx<'_, R>, f: Var, guidance: Var, p: &SdmParams) -> Result<Var> {
    let template = EidTemplate::build();
    let (sf, sg) = (ctx.g.shape(f).to_vec(), ctx.g.shape(guidance).to_vec());
    if sf.len() != 4 || sg.len() != 4 || sf[1..] != sg[1..] || sf[0] != p.cf || sg[0] != p.cg {
        return Err(Error::dim(
            "sdm_forward",
            format!("skip {sf:?}, guidance {sg:?}, expected {} / {} channels", p.cf, p.cg),
        ));
    }
    let store = ctx.store();
    template.check(&store.get(p.alpha).name, store.value(p.alpha).data())?;
    template.check(&store.get(p.beta).name, store.value(p.beta).data())?;
    let alpha = ctx.param(p.alpha);
    let beta = ctx.param(p.beta);
    let omega = ctx.param(p.omega);
    let h = ctx.param(p.h);
    let alpha = ctx.g.mask_grad(alpha, &template.frozen_mask(p.cg))?;
    let beta = ctx.g.mask_grad(beta, &template.frozen_mask(p.cf))?;
    let geom = SdmGeom {
        cf: p.cf,
        cg: p.cg,
        dims: [sf[1], sf[2], sf[3]],
    };
    ctx.g.sdm_enhance(f, guidance, alpha, beta, omega, h, geom)
}

/// One diffusion step: `λ·F + ν·F̂`.
pub fn sdm_forward<R: Real>(ctx: &mut Ctx<'_, R>, f: Var, guidance: Var, p: &SdmParams) -> Result<Var> {
    let guidance = align_guidance(&mut ctx.g, f, guidance)?;
    step(ctx, f, guidance, p)
}

fn step<R: Real>(ctx: &mut Ctx<'_, R>, f: Var, guidance: Var, p: &SdmParams) -> Result<Var> {
    let fhat = enhance(ctx, f, guidance, p)?;
    let lambda = ctx.param(p.lambda);
    let nu = ctx.param(p.nu);
    let kept = ctx.g.mul(f, lambda)?;
    let injected = ctx.g.mul(fhat, nu)?;
    ctx.g.add(kept, injected)
}

/// `steps` diffusion iterations with the guidance held fixed.
pub fn sdm_iterate<R: Real>(
    ctx: &mut Ctx<'_, R>,
    f0: Var,
    guidance: Var,
    p: &SdmParams,
    steps: usize,
) -> Result<Var> {
    if steps == 0 {
        return Err(Error::config("sdm_iterations", "must be at least 1"));
    }
    let guidance = align_guidance(&mut ctx.g, f0, guidance)?;
    let mut f = f0;
    for _ in 0..steps {
        f = step(ctx, f, guidance, p)?;
    }
    Ok(f)
}
