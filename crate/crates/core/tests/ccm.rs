use pnp_core::ccm::{self, cluster_update, Ccm, CenterAtlas, CenterUpdate};
use pnp_core::gradcheck::grad_check_param;
use pnp_core::{Ctx, Error, Init, ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[test]
fn atlas_shapes_determinism_and_size_check() {
    let mut a = ParamStore::<f64>::new();
    let atlas = CenterAtlas::new(&mut Init::new(&mut a, 3), 12, 3, 32).unwrap();
    assert_eq!(a.value(atlas.atlas).shape(), &[12, 32]);
    let mut b = ParamStore::<f64>::new();
    let again = CenterAtlas::new(&mut Init::new(&mut b, 3), 12, 3, 32).unwrap();
    assert_eq!(a.value(atlas.atlas), b.value(again.atlas));

    let mut s = ParamStore::<f64>::new();
    assert!(matches!(CenterAtlas::new(&mut Init::new(&mut s, 1), 3, 3, 8), Err(Error::Config { .. })));
    let mut s = ParamStore::<f64>::new();
    assert!(CenterAtlas::new(&mut Init::new(&mut s, 1), 50, 1, 8).is_err());

    let mut ctx = Ctx::new(&a);
    let c = atlas.cluster(&mut ctx).unwrap();
    assert_eq!(ctx.g.shape(c), &[3, 32]);
}

#[test]
fn atlas_cluster_hand_cases() {
    let mut store = ParamStore::<f64>::new();
    let atlas = CenterAtlas::new(&mut Init::new(&mut store, 4), 4, 2, 3).unwrap();
    store.get_mut(atlas.w2).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let mut ctx = Ctx::new(&store);
    let c = atlas.cluster(&mut ctx).unwrap();
    assert!(ctx.g.value(c).data().iter().all(|v| *v == 0.0));

    // W₁ = I and W₂ picking rows 2 and 0 give GELU of those atlas rows.
    let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.25).collect();
    store.set_value(atlas.atlas, Tensor::new(&[4, 3], a.clone()).unwrap()).unwrap();
    let mut eye = Tensor::zeros(&[4, 4]);
    (0..4).for_each(|i| eye.set(&[i, i], 1.0));
    store.set_value(atlas.w1, eye).unwrap();
    let mut pick = Tensor::zeros(&[2, 4]);
    pick.set(&[0, 2], 1.0);
    pick.set(&[1, 0], 1.0);
    store.set_value(atlas.w2, pick).unwrap();
    let mut ctx = Ctx::new(&store);
    let c = atlas.cluster(&mut ctx).unwrap();
    let want: Vec<f64> = [6, 7, 8, 0, 1, 2].iter().map(|&i| gelu(a[i])).collect();
    for (g, w) in ctx.g.value(c).data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-15);
    }
}

#[test]
fn atlas_gradients() {
    let mut store = ParamStore::<f64>::new();
    let atlas = CenterAtlas::new(&mut Init::new(&mut store, 5), 5, 3, 4).unwrap();
    let w = random(&[3, 4], 6);
    let build = |ctx: &mut Ctx<'_, f64>| {
        let c = atlas.cluster(ctx)?;
        let wv = ctx.input(w.clone());
        let y = ctx.g.mul(c, wv)?;
        ctx.g.sum(y)
    };
    for id in [atlas.atlas, atlas.w1, atlas.w2] {
        let n = store.value(id).len();
        let r = grad_check_param(build, &store, id, 1e-5, &(0..n).collect::<Vec<_>>()).unwrap();
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
    }
}

/// Queries, keys and values registered as store entries.
struct Raw {
    store: ParamStore<f64>,
    q: ParamId,
    k: ParamId,
    v: ParamId,
}

fn raw(q: Tensor<f64>, k: Tensor<f64>, v: Tensor<f64>) -> Raw {
    let mut store = ParamStore::new();
    let q = store.register("q", q).unwrap();
    let k = store.register("k", k).unwrap();
    let v = store.register("v", v).unwrap();
    Raw { store, q, k, v }
}

fn run_raw(r: &Raw, mode: CenterUpdate) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut ctx = Ctx::new(&r.store);
    let (q, k, v) = (ctx.param(r.q), ctx.param(r.k), ctx.param(r.v));
    let out = cluster_update(&mut ctx, q, k, v, mode).unwrap();
    (
        ctx.g.value(out.m).clone(),
        ctx.g.value(out.m_hat).clone(),
        ctx.g.value(out.c_hat).clone(),
    )
}

#[test]
fn two_class_two_voxel_hand_case() {
    let r = raw(
        Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap(),
        Tensor::from_f64(&[2, 1, 1, 2], &[1., 2., 0., 1.]).unwrap(),
        Tensor::from_f64(&[2, 1, 1, 2], &[1., 0., 0., 2.]).unwrap(),
    );
    let (m, m_hat, c_hat) = run_raw(&r, CenterUpdate::Sum);
    assert_eq!(m.data(), &[1., 2., 0., 1.]);
    let e = std::f64::consts::E;
    let (a, b) = (e / (1.0 + e), 1.0 / (1.0 + e));
    for (g, w) in m_hat.data().iter().zip([a, a, b, b]) {
        assert!((g - w).abs() < 1e-15);
    }
    for (g, w) in c_hat.data().iter().zip([1.0 + a, 2.0 * a, b, 1.0 + 2.0 * b]) {
        assert!((g - w).abs() < 1e-15);
    }
    let (_, _, mean) = run_raw(&r, CenterUpdate::VoxelMean);
    for (g, w) in mean.data().iter().zip([1.0 + a / 2.0, a, b / 2.0, 1.0 + b]) {
        assert!((g - w).abs() < 1e-15);
    }
}

#[test]
fn identical_queries_give_uniform_assignments_and_zero_values_keep_queries() {
    let row = random(&[1, 5], 1);
    let q = Tensor::new(&[4, 5], row.data().repeat(4)).unwrap();
    let r = raw(q.clone(), random(&[5, 4, 4, 4], 2), Tensor::zeros(&[5, 4, 4, 4]));
    let (_, m_hat, c_hat) = run_raw(&r, CenterUpdate::Sum);
    assert!(m_hat.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    assert_eq!(&c_hat, &q);
}

#[test]
fn mask_embeddings_sum_to_one_per_voxel() {
    for seed in 0..5 {
        let r = raw(random(&[3, 6], seed), random(&[6, 4, 4, 4], seed + 10).map(|v| v * 8.0), random(&[6, 4, 4, 4], seed + 20));
        let (_, m_hat, _) = run_raw(&r, CenterUpdate::Sum);
        for x in 0..64 {
            let s: f64 = (0..3).map(|c| m_hat.data()[c * 64 + x]).sum();
            assert!((s - 1.0).abs() <= 1e-6);
            assert!((0..3).all(|c| (0.0..=1.0).contains(&m_hat.data()[c * 64 + x])));
        }
    }
}

#[test]
fn center_update_is_the_soft_assignment_weighted_feature_sum() {
    // Attention bypassed (Q = C) and K = V = F.
    for seed in 0..5 {
        let (n, d) = (3, 4);
        let c = random(&[n, d], seed);
        let f = random(&[d, 4, 4, 4], seed + 50);
        let r = raw(c.clone(), f.clone(), f.clone());
        let (_, _, c_hat) = run_raw(&r, CenterUpdate::Sum);
        for i in 0..n {
            for j in 0..d {
                let mut acc = 0.0;
                for x in 0..64 {
                    let logits: Vec<f64> = (0..n)
                        .map(|k| (0..d).map(|t| c.data()[k * d + t] * f.data()[t * 64 + x]).sum())
                        .collect();
                    let z: f64 = logits.iter().map(|l| l.exp()).sum();
                    acc += logits[i].exp() / z * f.data()[j * 64 + x];
                }
                let delta = c_hat.data()[i * d + j] - c.data()[i * d + j];
                assert!((delta - acc).abs() <= 1e-6, "seed {seed} ({i},{j}): {delta} vs {acc}");
            }
        }
    }
}

fn ccm_case(seed: u64) -> (ParamStore<f64>, Ccm, ParamId, ParamId) {
    let mut store = ParamStore::<f64>::new();
    let module = Ccm::new(&mut Init::new(&mut store, seed), 3, 4, 2).unwrap();
    let c = store.register("input.c", random(&[3, 4], seed + 1)).unwrap();
    let f = store.register("input.f", random(&[3, 2, 3, 2], seed + 2)).unwrap();
    (store, module, c, f)
}

#[test]
fn permuting_centers_permutes_outputs() {
    let (mut store, module, c, f) = ccm_case(7);
    let run = |store: &ParamStore<f64>| {
        let mut ctx = Ctx::new(store);
        let (cv, fv) = (ctx.param(c), ctx.param(f));
        let out = module.forward(&mut ctx, cv, fv, CenterUpdate::Sum).unwrap();
        (ctx.g.value(out.m_hat).clone(), ctx.g.value(out.c_hat).clone())
    };
    let (m0, c0) = run(&store);
    let perm = [2usize, 0, 1];
    let orig = store.value(c).clone();
    let permuted: Vec<f64> = perm.iter().flat_map(|&i| orig.data()[i * 4..(i + 1) * 4].to_vec()).collect();
    store.set_value(c, Tensor::new(&[3, 4], permuted).unwrap()).unwrap();
    let (m1, c1) = run(&store);
    let v = 12;
    for (r, &i) in perm.iter().enumerate() {
        for x in 0..v {
            assert!((m1.data()[r * v + x] - m0.data()[i * v + x]).abs() < 1e-12);
        }
        for j in 0..4 {
            assert!((c1.data()[r * 4 + j] - c0.data()[i * 4 + j]).abs() < 1e-12);
        }
    }
}

#[test]
fn ccm_forward_gradients() {
    let (store, module, c, f) = ccm_case(9);
    let w = random(&[3, 4], 10);
    let wm = random(&[3, 2, 3, 2], 11);
    for mode in [CenterUpdate::Sum, CenterUpdate::VoxelMean] {
        let build = |ctx: &mut Ctx<'_, f64>| {
            let (cv, fv) = (ctx.param(c), ctx.param(f));
            let out = module.forward(ctx, cv, fv, mode)?;
            let a = ctx.input(w.clone());
            let b = ctx.input(wm.clone());
            let y1 = ctx.g.mul(out.c_hat, a)?;
            let y2 = ctx.g.mul(out.m, b)?;
            let s1 = ctx.g.sum(y1)?;
            let s2 = ctx.g.sum(y2)?;
            ctx.g.add(s1, s2)
        };
        for id in [c, f, module.key, module.value, module.attention.wq, module.attention.w2] {
            let n = store.value(id).len();
            let r = grad_check_param(build, &store, id, 1e-5, &(0..n).collect::<Vec<_>>()).unwrap();
            assert!(r.max_rel_error <= 1e-5, "{}: {r:?}", store.get(id).name);
        }
    }
}

#[test]
fn pseudo_centers_cases() {
    // All voxels in class 1: row 1 is the mean feature, the rest zero.
    let f = random(&[2, 5], 1);
    let mut oh = Tensor::zeros(&[3, 5]);
    (0..5).for_each(|x| oh.set(&[1, x], 1.0));
    let c = ccm::pseudo_centers(&oh, &f, true).unwrap();
    for j in 0..2 {
        let mean: f64 = (0..5).map(|x| f.get(&[j, x])).sum::<f64>() / 5.0;
        assert!((c.get(&[1, j]) - mean).abs() < 1e-6 * mean.abs().max(1.0));
        assert_eq!(c.get(&[0, j]), 0.0);
        assert_eq!(c.get(&[2, j]), 0.0);
    }

    // Hand case: voxels 0,1 in class 0 and 2,3 in class 1.
    let f = Tensor::from_f64(&[2, 4], &[1., 3., 5., 7., 2., 2., 0., 4.]).unwrap();
    let oh = Tensor::from_f64(&[2, 4], &[1., 1., 0., 0., 0., 0., 1., 1.]).unwrap();
    let c = ccm::pseudo_centers(&oh, &f, true).unwrap();
    let want = [2.0, 2.0, 6.0, 2.0].map(|v: f64| v * 2.0 / (2.0 + 1e-6));
    for (g, w) in c.data().iter().zip(want) {
        assert!((g - w).abs() < 1e-12);
    }
    let raw_sum = ccm::pseudo_centers(&oh, &f, false).unwrap();
    assert_eq!(raw_sum.data(), &[4., 4., 12., 4.]);

    let bad = Tensor::from_f64(&[2, 4], &[1., 1., 0., 0., 0., 1., 1., 1.]).unwrap();
    assert!(matches!(ccm::pseudo_centers(&bad, &f, true), Err(Error::Validation(_))));
    let frac = Tensor::from_f64(&[2, 4], &[0.5, 1., 0., 0., 0.5, 0., 1., 1.]).unwrap();
    assert!(matches!(ccm::pseudo_centers(&frac, &f, true), Err(Error::Validation(_))));
}

#[test]
fn center_loss_cases() {
    let store = ParamStore::<f64>::new();
    let mut ctx = Ctx::new(&store);
    let t = random(&[2, 3], 1);
    let same = ctx.input(t.clone());
    let l = ccm::center_loss(&mut ctx, &t, same).unwrap();
    assert_eq!(ctx.g.value(l).data(), &[0.0]);

    let mut off = t.clone();
    off.data_mut()[4] += 1.0;
    let v = ctx.input(off);
    let l = ccm::center_loss(&mut ctx, &t, v).unwrap();
    assert!((ctx.g.value(l).data()[0] - 1.0).abs() < 1e-12);

    let u = random(&[2, 3], 2);
    let v = ctx.input(u.clone());
    let l = ccm::center_loss(&mut ctx, &t, v).unwrap();
    let hand: f64 = t.data().iter().zip(u.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    assert!((ctx.g.value(l).data()[0] - hand).abs() < 1e-12);

    let w = ctx.input(Tensor::zeros(&[3, 2]));
    assert!(ccm::center_loss(&mut ctx, &t, w).is_err());
}

#[test]
fn label_downsampling_keeps_even_voxels() {
    let labels: Vec<u8> = (0..64).map(|i| (i % 4) as u8).collect();
    let (half, dims) = ccm::downsample_labels(&labels, [4, 4, 4], 2).unwrap();
    assert_eq!(dims, [2, 2, 2]);
    assert_eq!(half, vec![0, 2, 0, 2, 0, 2, 0, 2]);
    assert!(ccm::downsample_labels(&labels, [4, 4, 4], 3).is_err());
}
