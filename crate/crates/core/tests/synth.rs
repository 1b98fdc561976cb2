use pnp_core::synth::*;
use pnp_core::Error;

fn quiet(regime: Regime, seed: u64) -> GenSpec {
    GenSpec {
        blur_sigma: 0.0,
        noise: 0.0,
        patch_count: 0,
        fissure_depth: 0.0,
        ..GenSpec::new(regime, seed)
    }
}

fn point(i: usize, dims: [usize; 3]) -> [f64; 3] {
    [(i / (dims[1] * dims[2])) as f64, ((i / dims[2]) % dims[1]) as f64, (i % dims[2]) as f64]
}

fn region_mean(spec: &GenSpec, label: u8) -> f64 {
    if label == 0 {
        0.1
    } else {
        0.5 + spec.lobe_contrast * (label - 1) as f64
    }
}

#[test]
fn generation_is_deterministic_and_order_free() {
    for regime in [Regime::BlurredNoisy, Regime::AnnotationVariance, Regime::SimilarInstances] {
        let spec = GenSpec::new(regime, 11);
        let a = generate(&spec, 4).unwrap();
        assert_eq!(a, generate(&spec, 4).unwrap());
        assert_eq!(a[3], generate_one(&spec, 3).unwrap());
        assert_ne!(a[0].image, a[1].image);
        assert_ne!(a[0], generate_one(&GenSpec::new(regime, 12), 0).unwrap());
        for s in &a {
            assert_eq!(s.image.len(), 32 * 32 * 32);
            assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.labels.iter().all(|&l| (l as usize) < spec.classes));
        }
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let base = GenSpec::new(Regime::BlurredNoisy, 0);
    let bad = [
        GenSpec { dims: [32, 30, 32], ..base.clone() },
        GenSpec { classes: 5, ..base.clone() },
        GenSpec { noise: -0.1, ..base.clone() },
        GenSpec { spacing: [1.0, 0.0, 1.0], ..base.clone() },
        GenSpec {
            classes: 12,
            ..GenSpec::new(Regime::SimilarInstances, 0)
        },
    ];
    for spec in bad {
        assert!(matches!(generate(&spec, 1), Err(Error::Config { .. })), "{spec:?}");
    }
}

#[test]
fn unblurred_lobes_are_piecewise_constant_with_the_analytic_interface() {
    for seed in 0..3 {
        for classes in [3, 4] {
            let spec = GenSpec {
                classes,
                ..quiet(Regime::BlurredNoisy, seed)
            };
            let s = generate_one(&spec, 0).unwrap();
            for (v, &l) in s.image.iter().zip(&s.labels) {
                assert_eq!(*v, region_mean(&spec, l) as f32);
            }
            // Count voxels whose geometric class differs from a 6-neighbor's.
            let geo = lobe_geometry(&spec, 0).unwrap().unwrap();
            let dims = spec.dims;
            let mut analytic = 0;
            for i in 0..s.labels.len() {
                let p = point(i, dims);
                let own = geo.label(p, 0.0);
                let differs = (0..3).any(|a| {
                    [-1.0, 1.0].iter().any(|d| {
                        let mut q = p;
                        q[a] += d;
                        q[a] >= 0.0 && q[a] < dims[a] as f64 && geo.label(q, 0.0) != own
                    })
                });
                analytic += differs as usize;
            }
            let mask = interface_mask(&s.labels, dims);
            assert_eq!(mask.iter().filter(|&&b| b).count(), analytic);
            assert!(analytic > 0);
            let present: std::collections::BTreeSet<u8> = s.labels.iter().copied().collect();
            assert_eq!(present.len(), classes);
        }
    }
}

#[test]
fn far_from_interfaces_only_noise_remains() {
    let spec = GenSpec::new(Regime::BlurredNoisy, 5);
    let reach = (3.0 * spec.blur_sigma).ceil() as usize + 3;
    for index in 0..3 {
        let s = generate_one(&spec, index).unwrap();
        let band = chebyshev_to_interface(&interface_mask(&s.labels, spec.dims), spec.dims, reach + 1);
        let mut checked = 0;
        for i in 0..s.labels.len() {
            if band[i] > reach {
                let dev = (s.image[i] as f64 - region_mean(&spec, s.labels[i])).abs();
                assert!(dev <= spec.noise + 1e-6, "voxel {i}: {dev}");
                checked += 1;
            }
        }
        assert!(checked > 1000);
    }
}

#[test]
fn noise_is_bounded_and_flat() {
    let spec = GenSpec {
        noise: 0.05,
        ..quiet(Regime::BlurredNoisy, 2)
    };
    let s = generate_one(&spec, 0).unwrap();
    let mut bins = [0usize; 10];
    for (v, &l) in s.image.iter().zip(&s.labels) {
        let r = *v as f64 - region_mean(&spec, l);
        assert!(r.abs() <= 0.05 + 1e-6);
        bins[(((r + 0.05) / 0.1 * 10.0) as usize).min(9)] += 1;
    }
    let expect = s.image.len() as f64 / 10.0;
    for b in bins {
        assert!((b as f64 - expect).abs() < 0.1 * expect, "{bins:?}");
    }
}

#[test]
fn annotation_variance_moves_labels_only_near_cut_planes() {
    let spec = GenSpec {
        noise: 0.0,
        ..GenSpec::new(Regime::AnnotationVariance, 3)
    };
    let samples = generate(&spec, 4).unwrap();
    let geo = lobe_geometry(&spec, 0).unwrap().unwrap();
    assert_eq!(Some(geo.clone()), lobe_geometry(&spec, 3).unwrap());
    for s in &samples[1..] {
        assert_eq!(s.image, samples[0].image);
        assert_ne!(s.labels, samples[0].labels);
        for (i, (&a, &b)) in s.labels.iter().zip(&samples[0].labels).enumerate() {
            if a != b {
                let p = point(i, spec.dims);
                assert!(geo.inside(p) && a != 0 && b != 0);
                let h = geo.height(p);
                assert!(geo.cuts.iter().any(|c| (h - c).abs() <= 2.0 * spec.jitter));
            }
        }
    }
}

#[test]
fn similar_instances_share_their_intensity_distribution() {
    let spec = GenSpec::new(Regime::SimilarInstances, 8);
    let s = generate_one(&spec, 0).unwrap();
    let band = chebyshev_to_interface(&interface_mask(&s.labels, spec.dims), spec.dims, 4);
    let mut per_slab: Vec<Vec<f32>> = vec![Vec::new(); spec.classes - 1];
    let mut counts = vec![0usize; spec.classes];
    for i in 0..s.labels.len() {
        counts[s.labels[i] as usize] += 1;
        if s.labels[i] > 0 && band[i] >= 3 {
            per_slab[s.labels[i] as usize - 1].push(s.image[i]);
        }
    }
    assert!(counts[1..].iter().all(|&c| c == counts[1] && c > 0));
    for v in &mut per_slab {
        assert!(v.len() > 30, "{}", v.len());
        v.sort_by(f32::total_cmp);
    }
    // Two-sample Kolmogorov–Smirnov statistic against the first slab.
    let ks = |a: &[f32], b: &[f32]| {
        let cdf = |v: &[f32], x: f32| v.partition_point(|&y| y <= x) as f64 / v.len() as f64;
        a.iter().chain(b).map(|&x| (cdf(a, x) - cdf(b, x)).abs()).fold(0.0, f64::max)
    };
    for other in &per_slab[1..] {
        assert!(ks(&per_slab[0], other) < 0.15);
    }
    assert!(lobe_geometry(&spec, 0).unwrap().is_none());
}

#[test]
fn blur_preserves_constants_and_mass() {
    let dims = [8, 8, 8];
    let mut flat = vec![0.7; 512];
    gaussian_blur(&mut flat, dims, 1.3);
    assert!(flat.iter().all(|v| (v - 0.7).abs() < 1e-12));
    let mut spike = vec![0.0; 512];
    spike[4 * 64 + 4 * 8 + 4] = 1.0;
    gaussian_blur(&mut spike, dims, 0.8);
    assert!((spike.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(spike[4 * 64 + 4 * 8 + 4] < 1.0);
    let mut same = spike.clone();
    gaussian_blur(&mut same, dims, 0.0);
    assert_eq!(same, spike);
}
