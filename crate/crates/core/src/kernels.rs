//! Raw numeric kernels over slices. No shape checking happens here; the
//! graph layer validates shapes before calling in.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;
#[cfg(not(feature = "std"))]
use num_traits::Float;

/// `out[r×c] += a[r×k] · b[k×c]`
pub fn matmul_acc<R: Real>(a: &[R], b: &[R], out: &mut [R], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let out_row = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let aip = a[i * k + p];
            let b_row = &b[p * c..(p + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[r×c] += aᵀ · b` where `a` is stored `k×r` and `b` is `k×c`.
pub fn matmul_tn_acc<R: Real>(a: &[R], b: &[R], out: &mut [R], r: usize, k: usize, c: usize) {
    for p in 0..k {
        let b_row = &b[p * c..(p + 1) * c];
        for i in 0..r {
            let api = a[p * r + i];
            let out_row = &mut out[i * c..(i + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    }
}

/// `out[r×c] += a · bᵀ` where `a` is `r×k` and `b` is stored `c×k`.
pub fn matmul_nt_acc<R: Real>(a: &[R], b: &[R], out: &mut [R], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..c {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * c + j] += dot(a_row, b_row);
        }
    }
}

/// Eight independent partial sums so the loop vectorizes; the summation
/// order is fixed, so results are still deterministic.
#[inline]
pub fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [R::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut acc = R::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        acc += x * y;
    }
    let pairs = [lanes[0] + lanes[4], lanes[1] + lanes[5], lanes[2] + lanes[6], lanes[3] + lanes[7]];
    acc + (pairs[0] + pairs[2]) + (pairs[1] + pairs[3])
}

/// Geometry of a cubic-kernel 3-D convolution (cross-correlation).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    fn in_size(&self) -> usize {
        self.input.iter().product()
    }

    fn out_size(&self) -> usize {
        self.output.iter().product()
    }

    /// Output index range along one axis for which `o*stride + tap - pad`
    /// lands inside the input.
    fn valid_range(&self, tap: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = tap as isize - self.pad as isize;
        // smallest o with o*s + shift >= 0
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        // largest o with o*s + shift <= n_in - 1
        let top = n_in as isize - 1 - shift;
        let hi = if top < 0 { -1 } else { top / s };
        let lo = lo.max(0) as usize;
        let hi = (hi + 1).clamp(0, n_out as isize) as usize;
        (lo, hi.max(lo))
    }

    /// Valid output ranges along z, y, x for every tap, indexed like the
    /// kernel weights.
    fn tap_ranges(&self) -> Vec<[(usize, usize); 3]> {
        let k = self.k;
        let mut v = Vec::with_capacity(k * k * k);
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    v.push([
                        self.valid_range(kz, self.input[0], self.output[0]),
                        self.valid_range(ky, self.input[1], self.output[1]),
                        self.valid_range(kx, self.input[2], self.output[2]),
                    ]);
                }
            }
        }
        v
    }

    #[inline]
    fn src(&self, o: usize, tap: usize) -> usize {
        o * self.stride + tap - self.pad
    }
}

/// Gathers one group's input patches into `col`, laid out
/// `(cig·k³) × out_voxels`; taps that fall in the padding are zero.
fn im2col<R: Real>(g: &ConvGeom, ranges: &[[(usize, usize); 3]], x: &[R], grp: usize, col: &mut [R]) {
    let isz = g.in_size();
    let osz = g.out_size();
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let (k, kk, cig) = (g.k, g.k * g.k * g.k, g.cin / g.groups);
    let od = g.output[0];
    for cil in 0..cig {
        let xin = &x[(grp * cig + cil) * isz..][..isz];
        for t in 0..kk {
            let (kz, ky, kx) = (t / (k * k), (t / k) % k, t % k);
            let [(z0, z1), (y0, y1), (x0, x1)] = ranges[t];
            let row = &mut col[(cil * kk + t) * osz..][..osz];
            for oz in 0..od {
                for oy in 0..oh {
                    let orow = &mut row[(oz * oh + oy) * ow..][..ow];
                    if oz < z0 || oz >= z1 || oy < y0 || oy >= y1 {
                        orow.fill(R::zero());
                        continue;
                    }
                    let (iz, iy) = (g.src(oz, kz), g.src(oy, ky));
                    let irow = &xin[(iz * ih + iy) * iw..][..iw];
                    orow[..x0].fill(R::zero());
                    orow[x1..].fill(R::zero());
                    if g.stride == 1 {
                        let ix0 = x0 + kx - g.pad;
                        orow[x0..x1].copy_from_slice(&irow[ix0..ix0 + (x1 - x0)]);
                    } else {
                        for (ox, ov) in orow.iter_mut().enumerate().take(x1).skip(x0) {
                            *ov = irow[g.src(ox, kx)];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch matrix laid out like [`im2col`] back into `dx`.
fn col2im<R: Real>(g: &ConvGeom, ranges: &[[(usize, usize); 3]], col: &[R], grp: usize, dx: &mut [R]) {
    let isz = g.in_size();
    let osz = g.out_size();
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let (k, kk, cig) = (g.k, g.k * g.k * g.k, g.cin / g.groups);
    for cil in 0..cig {
        let dxin = &mut dx[(grp * cig + cil) * isz..][..isz];
        for t in 0..kk {
            let (kz, ky, kx) = (t / (k * k), (t / k) % k, t % k);
            let [(z0, z1), (y0, y1), (x0, x1)] = ranges[t];
            let row = &col[(cil * kk + t) * osz..][..osz];
            for oz in z0..z1 {
                let iz = g.src(oz, kz);
                for oy in y0..y1 {
                    let iy = g.src(oy, ky);
                    let crow = &row[(oz * oh + oy) * ow..][..ow];
                    let drow = &mut dxin[(iz * ih + iy) * iw..][..iw];
                    if g.stride == 1 {
                        let ix0 = x0 + kx - g.pad;
                        for (dv, &cv) in drow[ix0..ix0 + (x1 - x0)].iter_mut().zip(&crow[x0..x1]) {
                            *dv += cv;
                        }
                    } else {
                        for ox in x0..x1 {
                            drow[g.src(ox, kx)] += crow[ox];
                        }
                    }
                }
            }
        }
    }
}

impl ConvGeom {
    /// A 1×1×1 stride-1 convolution reads the input directly as its patch
    /// matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

pub fn conv3d_forward<R: Real>(g: &ConvGeom, x: &[R], w: &[R], bias: Option<&[R]>, out: &mut [R]) {
    let isz = g.in_size();
    let osz = g.out_size();
    let kk = g.k * g.k * g.k;
    let (cig, cog) = (g.cin / g.groups, g.cout / g.groups);
    if let Some(b) = bias {
        for co in 0..g.cout {
            out[co * osz..(co + 1) * osz].fill(b[co]);
        }
    }
    let ranges = g.tap_ranges();
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![R::zero(); cig * kk * osz] };
    for grp in 0..g.groups {
        let patches: &[R] = if g.is_pointwise() {
            &x[grp * cig * isz..(grp + 1) * cig * isz]
        } else {
            im2col(g, &ranges, x, grp, &mut col);
            &col
        };
        let wg = &w[grp * cog * cig * kk..(grp + 1) * cog * cig * kk];
        let og = &mut out[grp * cog * osz..(grp + 1) * cog * osz];
        matmul_acc(wg, patches, og, cog, cig * kk, osz);
    }
}

/// Accumulates input, weight and bias gradients.
pub fn conv3d_backward<R: Real>(
    g: &ConvGeom,
    x: &[R],
    w: &[R],
    dout: &[R],
    dx: Option<&mut [R]>,
    dw: Option<&mut [R]>,
    dbias: Option<&mut [R]>,
) {
    let isz = g.in_size();
    let osz = g.out_size();
    let kk = g.k * g.k * g.k;
    let (cig, cog) = (g.cin / g.groups, g.cout / g.groups);
    if let Some(db) = dbias {
        for co in 0..g.cout {
            db[co] += dout[co * osz..(co + 1) * osz].iter().copied().sum::<R>();
        }
    }
    let mut dx = dx;
    let mut dw = dw;
    let ranges = g.tap_ranges();
    let pointwise = g.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![R::zero(); cig * kk * osz] };
    let mut dcol = if pointwise || dx.is_none() { Vec::new() } else { vec![R::zero(); cig * kk * osz] };
    let wlen = cog * cig * kk;
    for grp in 0..g.groups {
        let dg = &dout[grp * cog * osz..(grp + 1) * cog * osz];
        let wg = &w[grp * wlen..(grp + 1) * wlen];
        if let Some(dw) = dw.as_deref_mut() {
            let patches: &[R] = if pointwise {
                &x[grp * cig * isz..(grp + 1) * cig * isz]
            } else {
                im2col(g, &ranges, x, grp, &mut col);
                &col
            };
            matmul_nt_acc(dg, patches, &mut dw[grp * wlen..(grp + 1) * wlen], cog, osz, cig * kk);
        }
        if let Some(dx) = dx.as_deref_mut() {
            if pointwise {
                matmul_tn_acc(wg, dg, &mut dx[grp * cig * isz..(grp + 1) * cig * isz], cig, cog, osz);
            } else {
                if grp > 0 {
                    dcol.fill(R::zero());
                }
                matmul_tn_acc(wg, dg, &mut dcol, cig * kk, cog, osz);
                col2im(g, &ranges, &dcol, grp, dx);
            }
        }
    }
}

/// Numerically stable softmax over the middle axis of an `outer×n×inner` layout.
pub fn softmax<R: Real>(x: &[R], out: &mut [R], outer: usize, n: usize, inner: usize, log: bool) {
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let mut m = R::neg_infinity();
            for j in 0..n {
                m = m.max(x[idx(j)]);
            }
            let mut s = R::zero();
            for j in 0..n {
                let e = (x[idx(j)] - m).exp();
                out[idx(j)] = e;
                s += e;
            }
            if log {
                let ls = s.ln();
                for j in 0..n {
                    out[idx(j)] = x[idx(j)] - m - ls;
                }
            } else {
                let inv = R::one() / s;
                for j in 0..n {
                    out[idx(j)] *= inv;
                }
            }
        }
    }
}

/// Gradient of softmax (`log == false`) or log-softmax given its output `y`.
pub fn softmax_backward<R: Real>(
    y: &[R],
    dy: &[R],
    dx: &mut [R],
    outer: usize,
    n: usize,
    inner: usize,
    log: bool,
) {
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            if log {
                let s: R = (0..n).map(|j| dy[idx(j)]).sum();
                for j in 0..n {
                    dx[idx(j)] += dy[idx(j)] - y[idx(j)].exp() * s;
                }
            } else {
                let s: R = (0..n).map(|j| dy[idx(j)] * y[idx(j)]).sum();
                for j in 0..n {
                    dx[idx(j)] += y[idx(j)] * (dy[idx(j)] - s);
                }
            }
        }
    }
}

/// Normalizes `groups` contiguous blocks of `block` elements each.
/// Returns the normalized values and per-block reciprocal std deviation.
pub fn normalize_blocks<R: Real>(x: &[R], groups: usize, block: usize, eps: R) -> (Vec<R>, Vec<R>) {
    let mut xhat = vec![R::zero(); x.len()];
    let mut rstd = vec![R::zero(); groups];
    let n = R::from_f64(block as f64);
    for g in 0..groups {
        let xs = &x[g * block..(g + 1) * block];
        let mean = xs.iter().copied().sum::<R>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / n;
        let r = R::one() / (var + eps).sqrt();
        rstd[g] = r;
        for (h, &v) in xhat[g * block..(g + 1) * block].iter_mut().zip(xs) {
            *h = (v - mean) * r;
        }
    }
    (xhat, rstd)
}

/// Backward of [`normalize_blocks`]: maps `d xhat` to `d x`.
pub fn normalize_blocks_backward<R: Real>(
    xhat: &[R],
    rstd: &[R],
    dxhat: &[R],
    dx: &mut [R],
    block: usize,
) {
    let n = R::from_f64(block as f64);
    for (g, &r) in rstd.iter().enumerate() {
        let rng = g * block..(g + 1) * block;
        let (h, dh) = (&xhat[rng.clone()], &dxhat[rng.clone()]);
        let s1: R = dh.iter().copied().sum();
        let s2: R = dh.iter().zip(h).map(|(&a, &b)| a * b).sum();
        for ((d, &a), &b) in dx[rng].iter_mut().zip(dh).zip(h) {
            *d += r / n * (n * a - s1 - b * s2);
        }
    }
}

/// Source taps for align-corners-false linear interpolation along one axis.
pub fn linear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let n_out = n_in * factor;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub struct UpsampleTaps {
    pub axes: [Vec<(usize, usize, f64)>; 3],
}

impl UpsampleTaps {
    pub fn new(input: [usize; 3], factor: [usize; 3]) -> Self {
        Self {
            axes: [
                linear_taps(input[0], factor[0]),
                linear_taps(input[1], factor[1]),
                linear_taps(input[2], factor[2]),
            ],
        }
    }

    /// Visits every output voxel with its eight (input offset, weight) pairs.
    fn visit<R: Real>(&self, input: [usize; 3], mut f: impl FnMut(usize, [(usize, R); 8])) {
        let [_, ih, iw] = input;
        let (az, ay, ax) = (&self.axes[0], &self.axes[1], &self.axes[2]);
        let mut o = 0;
        for &(z0, z1, tz) in az {
            for &(y0, y1, ty) in ay {
                for &(x0, x1, tx) in ax {
                    let (tz, ty, tx) = (R::from_f64(tz), R::from_f64(ty), R::from_f64(tx));
                    let one = R::one();
                    let at = |z: usize, y: usize, x: usize| (z * ih + y) * iw + x;
                    let taps = [
                        (at(z0, y0, x0), (one - tz) * (one - ty) * (one - tx)),
                        (at(z0, y0, x1), (one - tz) * (one - ty) * tx),
                        (at(z0, y1, x0), (one - tz) * ty * (one - tx)),
                        (at(z0, y1, x1), (one - tz) * ty * tx),
                        (at(z1, y0, x0), tz * (one - ty) * (one - tx)),
                        (at(z1, y0, x1), tz * (one - ty) * tx),
                        (at(z1, y1, x0), tz * ty * (one - tx)),
                        (at(z1, y1, x1), tz * ty * tx),
                    ];
                    f(o, taps);
                    o += 1;
                }
            }
        }
    }
}

pub fn upsample_forward<R: Real>(
    taps: &UpsampleTaps,
    x: &[R],
    out: &mut [R],
    channels: usize,
    input: [usize; 3],
) {
    let isz: usize = input.iter().product();
    let osz = out.len() / channels;
    for c in 0..channels {
        let xi = &x[c * isz..(c + 1) * isz];
        let oc = &mut out[c * osz..(c + 1) * osz];
        taps.visit::<R>(input, |o, t| {
            let mut acc = R::zero();
            for (i, w) in t {
                acc += w * xi[i];
            }
            oc[o] = acc;
        });
    }
}

pub fn upsample_backward<R: Real>(
    taps: &UpsampleTaps,
    dout: &[R],
    dx: &mut [R],
    channels: usize,
    input: [usize; 3],
) {
    let isz: usize = input.iter().product();
    let osz = dout.len() / channels;
    for c in 0..channels {
        let dc = &dout[c * osz..(c + 1) * osz];
        let dxi = &mut dx[c * isz..(c + 1) * isz];
        taps.visit::<R>(input, |o, t| {
            for (i, w) in t {
                dxi[i] += w * dc[o];
            }
        });
    }
}

/// Offsets of the 27 neighbors of a voxel, in kernel tap order.
pub const NEIGHBORS: [[isize; 3]; 27] = {
    let mut out = [[0isize; 3]; 27];
    let mut t = 0;
    while t < 27 {
        out[t] = [(t / 9) as isize - 1, ((t / 3) % 3) as isize - 1, (t % 3) as isize - 1];
        t += 1;
    }
    out
};

/// `dst[c](p) = src[c](p + delta)`, zero outside the volume.
pub fn shift_copy<R: Real>(src: &[R], dst: &mut [R], channels: usize, dims: [usize; 3], delta: [isize; 3]) {
    let v: usize = dims.iter().product();
    dst.fill(R::zero());
    for_each_shifted(dims, delta, |p, q| {
        for c in 0..channels {
            dst[c * v + p] = src[c * v + q];
        }
    });
}

/// Adjoint of [`shift_copy`]: `dsrc[c](p + delta) += ddst[c](p)`.
pub fn shift_add_back<R: Real>(
    ddst: &[R],
    dsrc: &mut [R],
    channels: usize,
    dims: [usize; 3],
    delta: [isize; 3],
) {
    let v: usize = dims.iter().product();
    for_each_shifted(dims, delta, |p, q| {
        for c in 0..channels {
            dsrc[c * v + q] += ddst[c * v + p];
        }
    });
}

fn for_each_shifted(dims: [usize; 3], delta: [isize; 3], mut f: impl FnMut(usize, usize)) {
    let [d, h, w] = dims;
    for z in 0..d {
        let qz = z as isize + delta[0];
        if qz < 0 || qz >= d as isize {
            continue;
        }
        for y in 0..h {
            let qy = y as isize + delta[1];
            if qy < 0 || qy >= h as isize {
                continue;
            }
            for x in 0..w {
                let qx = x as isize + delta[2];
                if qx < 0 || qx >= w as isize {
                    continue;
                }
                f((z * h + y) * w + x, (qz as usize * h + qy as usize) * w + qx as usize);
            }
        }
    }
}
