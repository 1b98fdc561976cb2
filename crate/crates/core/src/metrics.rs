//! Overlap and surface-distance metrics on label volumes.
//!
//! Conventions: surfaces are foreground voxels with at least one
//! background 6-neighbor (outside the volume counts as background);
//! distances are surface-to-surface and spacing-aware; HD95 is the
//! nearest-rank 95th percentile of the pooled distances in both directions.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
#[cfg(not(feature = "std"))]
use num_traits::Float;

#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    /// Millimetres per voxel along each axis.
    pub spacing: [f64; 3],
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Validation(format!("{} labels for dims {dims:?}", data.len())));
        }
        if spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Validation(format!("spacing {spacing:?} must be positive")));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn mask(&self, cls: u8) -> Vec<bool> {
        self.data.iter().map(|&l| l == cls).collect()
    }

    /// Length of the volume diagonal in millimetres.
    pub fn diagonal(&self) -> f64 {
        let s: f64 = (0..3).map(|a| (self.dims[a] as f64 * self.spacing[a]).powi(2)).sum();
        libm::sqrt(s)
    }
}

fn check_pair(pred: &LabelVolume, gt: &LabelVolume) -> Result<()> {
    if pred.dims != gt.dims {
        return Err(Error::Validation(format!("dims {:?} vs {:?}", pred.dims, gt.dims)));
    }
    if pred.spacing != gt.spacing {
        return Err(Error::Validation(format!("spacing {:?} vs {:?}", pred.spacing, gt.spacing)));
    }
    Ok(())
}

/// Dice in percent. Both empty gives 100, one empty gives 0.
pub fn dice(pred: &LabelVolume, gt: &LabelVolume, cls: u8) -> Result<f64> {
    if pred.dims != gt.dims {
        return Err(Error::Validation(format!("dims {:?} vs {:?}", pred.dims, gt.dims)));
    }
    let (mut x, mut y, mut both) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        x += (p == cls) as usize;
        y += (g == cls) as usize;
        both += (p == cls && g == cls) as usize;
    }
    if x + y == 0 {
        return Ok(100.0);
    }
    Ok(200.0 * both as f64 / (x + y) as f64)
}

/// Indices of foreground voxels with a background (or out-of-volume)
/// 6-neighbor.
pub fn surface_voxels(mask: &[bool], dims: [usize; 3]) -> Vec<usize> {
    let [d, h, w] = dims;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if !mask[i] {
                    continue;
                }
                let border = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                if border
                    || !mask[i - h * w]
                    || !mask[i + h * w]
                    || !mask[i - w]
                    || !mask[i + w]
                    || !mask[i - 1]
                    || !mask[i + 1]
                {
                    out.push(i);
                }
            }
        }
    }
    out
}

fn coords(i: usize, dims: [usize; 3]) -> [usize; 3] {
    [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]]
}

/// Squared Euclidean distance (in mm²) from every voxel to the nearest
/// site, by separable lower-envelope passes. Empty site sets give +∞.
pub fn squared_distance_transform(sites: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut f: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for a in 0..dims[others[0]] {
            for b in 0..dims[others[1]] {
                let base = a * strides[others[0]] + b * strides[others[1]];
                line.clear();
                line.extend((0..n).map(|k| f[base + k * stride]));
                envelope_1d(&line, spacing[axis], &mut out);
                for k in 0..n {
                    f[base + k * stride] = out[k];
                }
            }
        }
    }
    f
}

/// `out[q] = min_p (f[p] + ((q − p)·s)²)`.
fn envelope_1d(f: &[f64], s: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    let pos = |q: usize| q as f64 * s;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let cross = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if cross <= *z.last().expect("parallel to v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(cross);
                break;
            }
        }
    }
    if v.is_empty() {
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < pos(q) {
            k += 1;
        }
        let p = v[k];
        let d = (q as f64 - p as f64) * s;
        *o = d * d + f[p];
    }
}

/// Directed and reverse surface distances of one class, pooled.
#[derive(Clone, Debug, PartialEq)]
pub enum SurfaceDistances {
    Both(Vec<f64>),
    /// Neither volume contains the class.
    BothEmpty,
    /// Exactly one volume contains the class.
    OneEmpty,
}

fn surfaces(pred: &LabelVolume, gt: &LabelVolume, cls: u8) -> (Vec<usize>, Vec<usize>) {
    (
        surface_voxels(&pred.mask(cls), pred.dims),
        surface_voxels(&gt.mask(cls), gt.dims),
    )
}

fn sqdist(a: usize, b: usize, dims: [usize; 3], sp: [f64; 3]) -> f64 {
    let (ca, cb) = (coords(a, dims), coords(b, dims));
    (0..3)
        .map(|k| {
            let d = (ca[k] as f64 - cb[k] as f64) * sp[k];
            d * d
        })
        .sum()
}

/// Pooled distances via distance transforms.
pub fn surface_distances(pred: &LabelVolume, gt: &LabelVolume, cls: u8) -> Result<SurfaceDistances> {
    check_pair(pred, gt)?;
    let (sp, sg) = surfaces(pred, gt, cls);
    match (sp.is_empty(), sg.is_empty()) {
        (true, true) => return Ok(SurfaceDistances::BothEmpty),
        (true, false) | (false, true) => return Ok(SurfaceDistances::OneEmpty),
        _ => {}
    }
    let n = pred.data.len();
    let mut d = Vec::with_capacity(sp.len() + sg.len());
    for (from, to) in [(&sp, &sg), (&sg, &sp)] {
        let mut sites = vec![false; n];
        to.iter().for_each(|&i| sites[i] = true);
        let dt = squared_distance_transform(&sites, pred.dims, pred.spacing);
        d.extend(from.iter().map(|&i| libm::sqrt(dt[i])));
    }
    Ok(SurfaceDistances::Both(d))
}

/// Pooled distances by comparing every surface pair.
pub fn surface_distances_brute(pred: &LabelVolume, gt: &LabelVolume, cls: u8) -> Result<SurfaceDistances> {
    check_pair(pred, gt)?;
    let (sp, sg) = surfaces(pred, gt, cls);
    match (sp.is_empty(), sg.is_empty()) {
        (true, true) => return Ok(SurfaceDistances::BothEmpty),
        (true, false) | (false, true) => return Ok(SurfaceDistances::OneEmpty),
        _ => {}
    }
    let mut d = Vec::with_capacity(sp.len() + sg.len());
    for (from, to) in [(&sp, &sg), (&sg, &sp)] {
        for &a in from.iter() {
            let m = to
                .iter()
                .map(|&b| sqdist(a, b, pred.dims, pred.spacing))
                .fold(f64::INFINITY, f64::min);
            d.push(libm::sqrt(m));
        }
    }
    Ok(SurfaceDistances::Both(d))
}

/// A distance summary plus whether the empty-surface sentinel was used.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Distance {
    pub mm: f64,
    pub sentinel: bool,
}

fn summarize(d: SurfaceDistances, diag: f64, f: impl Fn(&mut [f64]) -> f64) -> Distance {
    match d {
        SurfaceDistances::Both(mut v) => Distance {
            mm: f(&mut v),
            sentinel: false,
        },
        SurfaceDistances::BothEmpty => Distance {
            mm: 0.0,
            sentinel: false,
        },
        SurfaceDistances::OneEmpty => Distance {
            mm: diag,
            sentinel: true,
        },
    }
}

/// Nearest-rank 95th percentile.
pub fn percentile95(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let rank = libm::ceil(0.95 * v.len() as f64) as usize;
    v[rank.max(1) - 1]
}

pub fn mean(v: &mut [f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn hd95(pred: &LabelVolume, gt: &LabelVolume, cls: u8) -> Result<Distance> {
    Ok(summarize(surface_distances(pred, gt, cls)?, gt.diagonal(), percentile95))
}

pub fn assd(pred: &LabelVolume, gt: &LabelVolume, cls: u8) -> Result<Distance> {
    Ok(summarize(surface_distances(pred, gt, cls)?, gt.diagonal(), mean))
}

pub fn hd95_brute(pred: &LabelVolume, gt: &LabelVolume, cls: u8) -> Result<Distance> {
    Ok(summarize(surface_distances_brute(pred, gt, cls)?, gt.diagonal(), percentile95))
}

pub fn assd_brute(pred: &LabelVolume, gt: &LabelVolume, cls: u8) -> Result<Distance> {
    Ok(summarize(surface_distances_brute(pred, gt, cls)?, gt.diagonal(), mean))
}

/// `counts[i][j]`: voxels with ground truth `i` predicted as `j`.
pub fn confusion(pred: &LabelVolume, gt: &LabelVolume, classes: usize) -> Result<Vec<Vec<u64>>> {
    check_pair(pred, gt)?;
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if p as usize >= classes || g as usize >= classes {
            return Err(Error::Validation(format!("label {} outside {classes} classes", p.max(g))));
        }
        m[g as usize][p as usize] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: u8,
    pub dice: f64,
    pub hd95: Distance,
    pub assd: Distance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Non-background classes `1..N`.
    pub per_class: Vec<ClassMetrics>,
    pub mean_dice: f64,
    pub mean_hd95: f64,
    pub mean_assd: f64,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn any_sentinel(&self) -> bool {
        self.per_class.iter().any(|c| c.hd95.sentinel || c.assd.sentinel)
    }
}

pub fn evaluate(pred: &LabelVolume, gt: &LabelVolume, classes: usize) -> Result<MetricsReport> {
    if classes < 2 {
        return Err(Error::Validation(format!("need at least 2 classes, got {classes}")));
    }
    let confusion = confusion(pred, gt, classes)?;
    let mut per_class = Vec::with_capacity(classes - 1);
    for c in 1..classes as u8 {
        let d = surface_distances(pred, gt, c)?;
        per_class.push(ClassMetrics {
            class: c,
            dice: dice(pred, gt, c)?,
            hd95: summarize(d.clone(), gt.diagonal(), percentile95),
            assd: summarize(d, gt.diagonal(), mean),
        });
    }
    let k = per_class.len() as f64;
    Ok(MetricsReport {
        mean_dice: per_class.iter().map(|c| c.dice).sum::<f64>() / k,
        mean_hd95: per_class.iter().map(|c| c.hd95.mm).sum::<f64>() / k,
        mean_assd: per_class.iter().map(|c| c.assd.mm).sum::<f64>() / k,
        per_class,
        confusion,
    })
}
