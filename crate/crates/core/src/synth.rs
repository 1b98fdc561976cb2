//! Deterministic synthetic volumes with three kinds of boundary confusion.
//!
//! Every sample draws from its own ChaCha stream (stream = sample index),
//! so a sample's bytes depend only on the spec and its index.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
#[cfg(not(feature = "std"))]
use num_traits::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// Adjacent ellipsoidal lobes of near-equal intensity, blurred
    /// interfaces and bright patches near them.
    BlurredNoisy,
    /// Fixed geometry whose label interface is displaced per sample.
    AnnotationVariance,
    /// Stacked slabs with identical texture but distinct labels.
    SimilarInstances,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenSpec {
    pub regime: Regime,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    /// Class count including background. Regimes A/B: 3 or 4 (2 or 3
    /// lobes). Regime C: slabs + 1.
    pub classes: usize,
    /// Gaussian blur width in voxels.
    pub blur_sigma: f64,
    pub patch_count: usize,
    pub patch_intensity: f64,
    /// Half-width of the uniform noise added to every voxel.
    pub noise: f64,
    /// Mean intensity gap between neighboring lobes.
    pub lobe_contrast: f64,
    /// Depth of the dark sheet marking lobe interfaces.
    pub fissure_depth: f64,
    /// Maximum label displacement in voxels (regime B).
    pub jitter: f64,
    pub seed: u64,
}

impl GenSpec {
    pub fn new(regime: Regime, seed: u64) -> Self {
        Self {
            regime,
            dims: [32, 32, 32],
            spacing: [1.0, 1.0, 1.0],
            classes: if regime == Regime::SimilarInstances { 4 } else { 3 },
            blur_sigma: 1.0,
            patch_count: 4,
            patch_intensity: 0.3,
            noise: 0.05,
            lobe_contrast: 0.05,
            fissure_depth: 0.15,
            jitter: 2.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0 || d % 16 != 0) {
            return Err(Error::config("dims", format!("{:?} must be positive multiples of 16", self.dims)));
        }
        if self.spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::config("spacing", format!("{:?} must be positive", self.spacing)));
        }
        let nonneg = [
            ("blur_sigma", self.blur_sigma),
            ("noise", self.noise),
            ("patch_intensity", self.patch_intensity),
            ("lobe_contrast", self.lobe_contrast),
            ("fissure_depth", self.fissure_depth),
            ("jitter", self.jitter),
        ];
        for (k, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(k, format!("{v} must be ≥ 0")));
            }
        }
        match self.regime {
            Regime::SimilarInstances => {
                if self.classes < 2 || self.classes - 1 > self.dims[0] / 4 {
                    return Err(Error::config(
                        "classes",
                        format!("{} slabs do not fit in depth {}", self.classes.saturating_sub(1), self.dims[0]),
                    ));
                }
            }
            _ => {
                if !(3..=4).contains(&self.classes) {
                    return Err(Error::config("classes", format!("{} (lobed regimes take 3 or 4)", self.classes)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    /// Intensities in `[0, 1]`, row-major.
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
}

const BACKGROUND: f64 = 0.1;
const TISSUE: f64 = 0.5;

/// An ellipsoid cut by parallel planes into lobes, in voxel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct LobeGeometry {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    /// Unit normal of the cutting planes.
    pub normal: [f64; 3],
    /// Plane offsets along `normal`, relative to `center`, ascending.
    pub cuts: Vec<f64>,
}

impl LobeGeometry {
    fn random(rng: &mut ChaCha8Rng, dims: [usize; 3], lobes: usize) -> Self {
        let center = dims.map(|d| d as f64 / 2.0 - 0.5 + rng.random_range(-1.5..1.5));
        let radii = dims.map(|d| d as f64 * rng.random_range(0.30..0.40));
        let mut normal = [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), 1.0];
        let len = libm::sqrt(normal.iter().map(|v| v * v).sum());
        normal.iter_mut().for_each(|v| *v /= len);
        let extent = radii[2] * 0.8;
        let cuts = if lobes == 2 {
            vec![rng.random_range(-0.25..0.25) * extent]
        } else {
            let a = rng.random_range(-0.55..-0.2) * extent;
            let b = rng.random_range(0.2..0.55) * extent;
            vec![a, b]
        };
        Self {
            center,
            radii,
            normal,
            cuts,
        }
    }

    pub fn inside(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    /// Signed distance of `p` along the normal, relative to the center.
    pub fn height(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| (p[a] - self.center[a]) * self.normal[a]).sum()
    }

    /// Class of `p` given a displacement of every cut plane.
    pub fn label(&self, p: [f64; 3], shift: f64) -> u8 {
        if !self.inside(p) {
            return 0;
        }
        let h = self.height(p);
        1 + self.cuts.iter().filter(|&&c| h > c + shift).count() as u8
    }
}

fn point(i: usize, dims: [usize; 3]) -> [f64; 3] {
    [
        (i / (dims[1] * dims[2])) as f64,
        ((i / dims[2]) % dims[1]) as f64,
        (i % dims[2]) as f64,
    ]
}

fn rng_for(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Voxels whose 6-neighborhood contains a different label.
pub fn interface_mask(labels: &[u8], dims: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = dims;
    let mut out = vec![false; labels.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                let l = labels[i];
                let differs = (z > 0 && labels[i - h * w] != l)
                    || (z + 1 < d && labels[i + h * w] != l)
                    || (y > 0 && labels[i - w] != l)
                    || (y + 1 < h && labels[i + w] != l)
                    || (x > 0 && labels[i - 1] != l)
                    || (x + 1 < w && labels[i + 1] != l);
                out[i] = differs;
            }
        }
    }
    out
}

/// Chebyshev distance (voxels) to the nearest interface voxel, capped.
pub fn chebyshev_to_interface(interface: &[bool], dims: [usize; 3], cap: usize) -> Vec<usize> {
    let mut dist: Vec<usize> = interface.iter().map(|&b| if b { 0 } else { cap }).collect();
    // Repeated 26-neighborhood relaxation; `cap` passes suffice.
    let [d, h, w] = dims;
    for _ in 0..cap {
        let prev = dist.clone();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    let mut best = prev[i];
                    for dz in z.saturating_sub(1)..=(z + 1).min(d - 1) {
                        for dy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                            for dx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                                best = best.min(prev[(dz * h + dy) * w + dx] + 1);
                            }
                        }
                    }
                    dist[i] = best.min(cap);
                }
            }
        }
    }
    dist
}

/// Separable Gaussian blur truncated at `ceil(3σ)`, edges replicated.
pub fn gaussian_blur(img: &mut [f64], dims: [usize; 3], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let r = libm::ceil(3.0 * sigma) as isize;
    let mut k: Vec<f64> = (-r..=r).map(|t| libm::exp(-((t * t) as f64) / (2.0 * sigma * sigma))).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let stride = strides[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for a in 0..dims[others[0]] {
            for b in 0..dims[others[1]] {
                let base = a * strides[others[0]] + b * strides[others[1]];
                line.clear();
                line.extend((0..n as usize).map(|q| img[base + q * stride]));
                for q in 0..n {
                    let mut acc = 0.0;
                    for (j, &kv) in k.iter().enumerate() {
                        let src = (q + j as isize - r).clamp(0, n - 1) as usize;
                        acc += kv * line[src];
                    }
                    img[base + q as usize * stride] = acc;
                }
            }
        }
    }
}

/// Generates `count` samples.
pub fn generate(spec: &GenSpec, count: usize) -> Result<Vec<VolumeSample>> {
    spec.validate()?;
    (0..count).map(|i| generate_one(spec, i as u64)).collect()
}

/// Generates the sample at `index`; independent of any other index.
pub fn generate_one(spec: &GenSpec, index: u64) -> Result<VolumeSample> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, index);
    let (image, labels) = match spec.regime {
        Regime::BlurredNoisy => {
            let geo = LobeGeometry::random(&mut rng, spec.dims, spec.classes - 1);
            let labels = lobe_labels(&geo, spec.dims, |_| 0.0);
            let mut image = lobe_image(spec, &geo, &labels, &mut rng);
            add_noise(&mut image, spec.noise, &mut rng);
            (image, labels)
        }
        Regime::AnnotationVariance => {
            // Geometry and image structure come from the shared stream;
            // only noise and the label field vary per sample.
            let mut shared = shared_rng(spec.seed);
            let geo = LobeGeometry::random(&mut shared, spec.dims, spec.classes - 1);
            let canonical = lobe_labels(&geo, spec.dims, |_| 0.0);
            let mut image = lobe_image(spec, &geo, &canonical, &mut shared);
            add_noise(&mut image, spec.noise, &mut rng);
            let field = SmoothField::random(&mut rng, spec.dims);
            let labels = lobe_labels(&geo, spec.dims, |p| spec.jitter * field.at(p));
            (image, labels)
        }
        Regime::SimilarInstances => slabs(spec, &mut rng),
    };
    Ok(VolumeSample {
        dims: spec.dims,
        spacing: spec.spacing,
        image: image.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect(),
        labels,
    })
}

/// The lobe layout behind sample `index`; `None` for slab volumes.
pub fn lobe_geometry(spec: &GenSpec, index: u64) -> Result<Option<LobeGeometry>> {
    spec.validate()?;
    let lobes = spec.classes - 1;
    Ok(match spec.regime {
        Regime::BlurredNoisy => Some(LobeGeometry::random(&mut rng_for(spec.seed, index), spec.dims, lobes)),
        Regime::AnnotationVariance => Some(LobeGeometry::random(&mut shared_rng(spec.seed), spec.dims, lobes)),
        Regime::SimilarInstances => None,
    })
}

fn shared_rng(seed: u64) -> ChaCha8Rng {
    rng_for(seed ^ 0x9e37_79b9_7f4a_7c15, 0)
}

fn add_noise(img: &mut [f64], noise: f64, rng: &mut ChaCha8Rng) {
    for v in img {
        *v += rng.random_range(-1.0..=1.0) * noise;
    }
}

fn lobe_labels(geo: &LobeGeometry, dims: [usize; 3], shift: impl Fn([f64; 3]) -> f64) -> Vec<u8> {
    (0..dims.iter().product())
        .map(|i| {
            let p = point(i, dims);
            geo.label(p, shift(p))
        })
        .collect()
}

/// Region means, a faint dark sheet on lobe interfaces, bright patches in
/// the two-voxel band around interfaces, then blur.
fn lobe_image(spec: &GenSpec, geo: &LobeGeometry, labels: &[u8], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dims = spec.dims;
    let mut img: Vec<f64> = labels
        .iter()
        .map(|&l| match l {
            0 => BACKGROUND,
            l => TISSUE + spec.lobe_contrast * (l - 1) as f64,
        })
        .collect();
    for (i, v) in img.iter_mut().enumerate() {
        if labels[i] == 0 {
            continue;
        }
        let h = geo.height(point(i, dims));
        let gap = geo.cuts.iter().map(|c| (h - c).abs()).fold(f64::INFINITY, f64::min);
        if gap < 0.75 {
            *v -= spec.fissure_depth;
        }
    }
    let iface = interface_mask(labels, dims);
    let band = chebyshev_to_interface(&iface, dims, 3);
    let candidates: Vec<usize> = (0..labels.len()).filter(|&i| band[i] <= 2).collect();
    if !candidates.is_empty() {
        for _ in 0..spec.patch_count {
            let c = point(candidates[rng.random_range(0..candidates.len())], dims);
            let radius: f64 = rng.random_range(1.0..2.5);
            for &i in &candidates {
                let p = point(i, dims);
                let d2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
                if d2 <= radius * radius {
                    img[i] += spec.patch_intensity;
                }
            }
        }
    }
    gaussian_blur(&mut img, dims, spec.blur_sigma);
    img
}

/// A sum of a few low-frequency sinusoids scaled into `[-1, 1]`.
struct SmoothField {
    waves: Vec<([f64; 3], f64)>,
}

impl SmoothField {
    fn random(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Self {
        let waves = (0..3)
            .map(|_| {
                let freq = dims.map(|d| rng.random_range(0.5..2.0) * core::f64::consts::TAU / d as f64);
                (freq, rng.random_range(0.0..core::f64::consts::TAU))
            })
            .collect();
        Self { waves }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|(f, phase)| libm::sin(f[0] * p[0] + f[1] * p[1] + f[2] * p[2] + phase))
            .sum();
        s / self.waves.len() as f64
    }
}

/// Slabs stacked along the first axis inside a body block, separated by
/// one-voxel gaps. Every slab shares the same intensity distribution.
fn slabs(spec: &GenSpec, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let dims = spec.dims;
    let k = spec.classes - 1;
    let [d, h, w] = dims;
    let margin = d / 8;
    let span = d - 2 * margin;
    let thick = span / k;
    let cy = h as f64 / 2.0 + rng.random_range(-1.0..1.0);
    let cx = w as f64 / 2.0 + rng.random_range(-1.0..1.0);
    let ry = h as f64 * rng.random_range(0.22..0.30);
    let rx = w as f64 * rng.random_range(0.22..0.30);
    let mut labels = vec![0u8; d * h * w];
    let mut img = vec![BACKGROUND; d * h * w];
    for z in 0..d {
        if z < margin || z >= margin + k * thick {
            continue;
        }
        let slab = (z - margin) / thick;
        if (z - margin) % thick == thick - 1 {
            continue;
        }
        for y in 0..h {
            for x in 0..w {
                let e = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2);
                if e <= 1.0 {
                    let i = (z * h + y) * w + x;
                    labels[i] = 1 + slab as u8;
                    img[i] = TISSUE;
                }
            }
        }
    }
    gaussian_blur(&mut img, dims, spec.blur_sigma);
    add_noise(&mut img, spec.noise, rng);
    (img, labels)
}
