use pnp_core::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `Σ wᵢ·yᵢ` with fixed pseudo-random weights, so every output entry matters.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> pnp_core::Result<Var> {
    let w = random(g.shape(y), seed ^ 0x5eed);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

pub type OpBuilder = Box<dyn Fn(&mut Graph<f64>, Var, u64) -> pnp_core::Result<Var>>;

/// Each differentiable op wrapped as a scalar function of one input.
pub fn op_suite() -> Vec<(&'static str, Vec<usize>, OpBuilder)> {
    vec![
        ("matmul_lhs", vec![3, 4], Box::new(|g, x, s| {
            let b = g.constant(random(&[4, 2], s + 1));
            let y = g.matmul(x, b)?;
            weighted_sum(g, y, s)
        })),
        ("matmul_rhs", vec![4, 2], Box::new(|g, x, s| {
            let a = g.constant(random(&[3, 4], s + 1));
            let y = g.matmul(a, x)?;
            weighted_sum(g, y, s)
        })),
        ("transpose", vec![3, 5], Box::new(|g, x, s| {
            let y = g.transpose(x)?;
            weighted_sum(g, y, s)
        })),
        ("conv3d_input_s1", vec![2, 4, 3, 4], Box::new(|g, x, s| {
            let w = g.constant(random(&[3, 2, 3, 3, 3], s + 1));
            let b = g.constant(random(&[3], s + 2));
            let y = g.conv3d(x, w, Some(b), 1, 1, 1)?;
            weighted_sum(g, y, s)
        })),
        ("conv3d_weight_s2", vec![2, 2, 3, 3, 3], Box::new(|g, w, s| {
            let x = g.constant(random(&[2, 4, 4, 5], s + 1));
            let y = g.conv3d(x, w, None, 2, 1, 1)?;
            weighted_sum(g, y, s)
        })),
        ("conv3d_input_s2", vec![2, 4, 5, 4], Box::new(|g, x, s| {
            let w = g.constant(random(&[2, 2, 3, 3, 3], s + 1));
            let y = g.conv3d(x, w, None, 2, 1, 1)?;
            weighted_sum(g, y, s)
        })),
        ("conv3d_bias", vec![3], Box::new(|g, b, s| {
            let x = g.constant(random(&[2, 3, 3, 3], s + 1));
            let w = g.constant(random(&[3, 2, 1, 1, 1], s + 2));
            let y = g.conv3d(x, w, Some(b), 1, 0, 1)?;
            weighted_sum(g, y, s)
        })),
        ("conv3d_depthwise", vec![3, 1, 3, 3, 3], Box::new(|g, w, s| {
            let x = g.constant(random(&[3, 3, 4, 3], s + 1));
            let y = g.conv3d(x, w, None, 1, 1, 3)?;
            weighted_sum(g, y, s)
        })),
        ("add_scalar_broadcast", vec![1], Box::new(|g, x, s| {
            let a = g.constant(random(&[3, 3], s + 1));
            let y = g.add(a, x)?;
            let y = g.square(y)?;
            weighted_sum(g, y, s)
        })),
        ("sub", vec![3, 3], Box::new(|g, x, s| {
            let a = g.constant(random(&[3, 3], s + 1));
            let y = g.sub(a, x)?;
            let y = g.square(y)?;
            weighted_sum(g, y, s)
        })),
        ("mul", vec![4, 2], Box::new(|g, x, s| {
            let a = g.constant(random(&[4, 2], s + 1));
            let y = g.mul(x, a)?;
            let y = g.mul(y, x)?;
            weighted_sum(g, y, s)
        })),
        ("mul_scalar", vec![1], Box::new(|g, x, s| {
            let a = g.constant(random(&[4, 2], s + 1));
            let y = g.mul(a, x)?;
            weighted_sum(g, y, s)
        })),
        ("scale", vec![6], Box::new(|g, x, s| {
            let y = g.affine(x, -1.7, 0.3)?;
            let y = g.square(y)?;
            weighted_sum(g, y, s)
        })),
        ("sigmoid", vec![7], Box::new(|g, x, s| {
            let y = g.scale(x, 3.0)?;
            let y = g.sigmoid(y)?;
            weighted_sum(g, y, s)
        })),
        ("gelu", vec![7], Box::new(|g, x, s| {
            let y = g.scale(x, 3.0)?;
            let y = g.gelu(y)?;
            weighted_sum(g, y, s)
        })),
        ("square", vec![5], Box::new(|g, x, s| {
            let y = g.square(x)?;
            weighted_sum(g, y, s)
        })),
        ("mul_along_x", vec![3, 2, 2], Box::new(|g, x, s| {
            let v = g.constant(random(&[3], s + 1));
            let y = g.mul_along(x, v, 0)?;
            weighted_sum(g, y, s)
        })),
        ("mul_along_v", vec![2], Box::new(|g, v, s| {
            let x = g.constant(random(&[3, 2], s + 1));
            let y = g.mul_along(x, v, 1)?;
            let y = g.square(y)?;
            weighted_sum(g, y, s)
        })),
        ("add_along_v", vec![3], Box::new(|g, v, s| {
            let x = g.constant(random(&[3, 2, 2], s + 1));
            let y = g.add_along(x, v, 0)?;
            let y = g.square(y)?;
            weighted_sum(g, y, s)
        })),
        ("softmax_axis0", vec![4, 3], Box::new(|g, x, s| {
            let y = g.scale(x, 2.0)?;
            let y = g.softmax(y, 0)?;
            weighted_sum(g, y, s)
        })),
        ("softmax_axis1", vec![2, 5, 2], Box::new(|g, x, s| {
            let y = g.softmax(x, 1)?;
            weighted_sum(g, y, s)
        })),
        ("log_softmax", vec![3, 4], Box::new(|g, x, s| {
            let y = g.log_softmax(x, 0)?;
            weighted_sum(g, y, s)
        })),
        ("layer_norm_x", vec![3, 5], Box::new(|g, x, s| {
            let gm = g.constant(random(&[5], s + 1));
            let bt = g.constant(random(&[5], s + 2));
            let y = g.layer_norm(x, gm, bt, 1e-5)?;
            weighted_sum(g, y, s)
        })),
        ("layer_norm_gamma", vec![5], Box::new(|g, gm, s| {
            let x = g.constant(random(&[3, 5], s + 1));
            let bt = g.constant(random(&[5], s + 2));
            let y = g.layer_norm(x, gm, bt, 1e-5)?;
            weighted_sum(g, y, s)
        })),
        ("layer_norm_beta", vec![5], Box::new(|g, bt, s| {
            let x = g.constant(random(&[3, 5], s + 1));
            let gm = g.constant(random(&[5], s + 2));
            let y = g.layer_norm(x, gm, bt, 1e-5)?;
            let y = g.square(y)?;
            weighted_sum(g, y, s)
        })),
        ("group_norm_1", vec![3, 2, 3, 2], Box::new(|g, x, s| {
            let gm = g.constant(random(&[3], s + 1));
            let bt = g.constant(random(&[3], s + 2));
            let y = g.group_norm(x, gm, bt, 1, 1e-5)?;
            weighted_sum(g, y, s)
        })),
        ("group_norm_c", vec![2, 3, 2, 2], Box::new(|g, x, s| {
            let gm = g.constant(random(&[2], s + 1));
            let bt = g.constant(random(&[2], s + 2));
            let y = g.group_norm(x, gm, bt, 2, 1e-5)?;
            weighted_sum(g, y, s)
        })),
        ("group_norm_affine", vec![3], Box::new(|g, gm, s| {
            let x = g.constant(random(&[3, 2, 2, 2], s + 1));
            let y = g.group_norm(x, gm, gm, 1, 1e-5)?;
            weighted_sum(g, y, s)
        })),
        ("upsample", vec![2, 2, 3, 2], Box::new(|g, x, s| {
            let y = g.upsample(x, [2, 2, 3])?;
            weighted_sum(g, y, s)
        })),
        ("concat_narrow", vec![2, 2, 2, 2], Box::new(|g, x, s| {
            let c = g.constant(random(&[1, 2, 2, 2], s + 1));
            let y = g.concat(&[c, x, x], 0)?;
            let y = g.narrow(y, 0, 1, 4)?;
            let y = g.square(y)?;
            weighted_sum(g, y, s)
        })),
        ("concat_axis1", vec![2, 3], Box::new(|g, x, s| {
            let c = g.constant(random(&[2, 2], s + 1));
            let y = g.concat(&[x, c], 1)?;
            let y = g.narrow(y, 1, 2, 2)?;
            weighted_sum(g, y, s)
        })),
        ("reshape_mean", vec![2, 6], Box::new(|g, x, s| {
            let y = g.reshape(x, &[3, 4])?;
            let y = g.square(y)?;
            let w = weighted_sum(g, y, s)?;
            let m = g.mean(y)?;
            g.add(w, m)
        })),
    ]
}
