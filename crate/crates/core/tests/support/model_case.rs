use pnp_core::gradcheck::grad_check_param;
use pnp_core::model::{PnPConfig, PnPModel};
use pnp_core::nn::EncoderSpec;
use pnp_core::{Ctx, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny(sdm: bool, ccm: bool) -> PnPConfig {
    PnPConfig {
        encoder: EncoderSpec::desk([2, 3, 4, 4]),
        center_dim: 4,
        atlas_size: 5,
        enable_sdm: sdm,
        enable_ccm: ccm,
        ..PnPConfig::desk(3)
    }
}

pub fn volume(seed: u64, side: usize) -> (Tensor<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = side * side * side;
    let image = (0..v).map(|_| rng.random_range(0.0..1.0)).collect();
    let labels = (0..v)
        .map(|i| {
            let z = i / (side * side);
            (if z < side / 3 { 0 } else if z < 2 * side / 3 { 1 } else { 2 }) as u8
        })
        .collect();
    (Tensor::new(&[1, side, side, side], image).unwrap(), labels)
}

/// Largest relative error over two random non-frozen entries of every
/// parameter, for the full loss of a 16³ volume in all-on mode.
pub fn full_graph_max_error(seed: u64) -> (f64, String) {
    let (image, labels) = volume(seed, 16);
    let mut store = ParamStore::<f64>::new();
    let model = PnPModel::new(&tiny(true, true), &mut store, seed).unwrap();
    // The pseudo-center target is a constant of the loss, so it is
    // computed once and held fixed while parameters are perturbed.
    let c_gt = {
        let mut ctx = Ctx::new(&store);
        let x = ctx.input(image.clone());
        model.forward(&mut ctx, x, Some(&labels)).unwrap().c_gt
    };
    let build = |ctx: &mut Ctx<'_, f64>| {
        let x = ctx.input(image.clone());
        let mut out = model.forward(ctx, x, None)?;
        out.c_gt = c_gt.clone();
        Ok(model.loss(ctx, &out, &labels)?.total)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let mut worst = (0.0, String::new());
    for (id, p) in store.iter() {
        let free: Vec<usize> = (0..p.value.len())
            .filter(|&i| !p.frozen.as_ref().is_some_and(|f| f[i]))
            .collect();
        let entries: Vec<usize> = (0..2).map(|_| free[rng.random_range(0..free.len())]).collect();
        let r = grad_check_param(build, &store, id, 1e-5, &entries).unwrap();
        if r.max_rel_error >= worst.0 {
            worst = (r.max_rel_error, p.name.clone());
        }
    }
    worst
}
