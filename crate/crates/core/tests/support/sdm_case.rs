use pnp_core::sdm::{self, EidTemplate, SdmParams, TAPS};
use pnp_core::{Ctx, Init, ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn random_eid(channels: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let t = EidTemplate::build();
    let mut k = t.kernel::<f64>(channels, 0.0);
    for (i, v) in k.data_mut().iter_mut().enumerate() {
        if !t.is_fixed(i % TAPS) {
            *v = rng.random_range(-1.5..1.5);
        }
    }
    k
}

/// An SDM parameter set with every tensor randomized, plus the skip and
/// guidance features registered as store entries so they can be probed too.
pub struct Case {
    pub store: ParamStore<f64>,
    pub p: SdmParams,
    pub f: ParamId,
    pub g: ParamId,
}

pub fn case(cf: usize, cg: usize, dims: [usize; 3], gdims: [usize; 3], seed: u64) -> Case {
    let mut store = ParamStore::new();
    let mut init = Init::new(&mut store, seed);
    let p = SdmParams::new(&mut init, cf, cg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fv = random(&[cf, dims[0], dims[1], dims[2]], &mut rng, 1.0);
    let gv = random(&[cg, gdims[0], gdims[1], gdims[2]], &mut rng, 1.0);
    let f = store.register("input.f", fv).unwrap();
    let g = store.register("input.g", gv).unwrap();
    store.set_value(p.alpha, random_eid(cg, &mut rng)).unwrap();
    store.set_value(p.beta, random_eid(cf, &mut rng)).unwrap();
    store.set_value(p.omega, random(&[cf, cf, 3, 3, 3], &mut rng, 0.5)).unwrap();
    store.set_value(p.h, random(&[cf, cg, 1, 1, 1], &mut rng, 1.0)).unwrap();
    store.set_value(p.lambda, random(&[1], &mut rng, 1.0)).unwrap();
    store.set_value(p.nu, random(&[1], &mut rng, 1.0)).unwrap();
    Case { store, p, f, g }
}

/// Direct evaluation of the enhanced feature, one output voxel at a time,
/// with every neighborhood and channel sum written out.
pub fn literal_sdm(c: &Case) -> Vec<f64> {
    let s = &c.store;
    let (f, g) = (s.value(c.f), s.value(c.g));
    let (alpha, beta, omega, h) = (s.value(c.p.alpha), s.value(c.p.beta), s.value(c.p.omega), s.value(c.p.h));
    let (lambda, nu) = (s.value(c.p.lambda).data()[0], s.value(c.p.nu).data()[0]);
    let (cf, cg) = (c.p.cf, c.p.cg);
    let [d, hh, w] = [f.shape()[1], f.shape()[2], f.shape()[3]];
    let at = |t: &Tensor<f64>, ch: usize, z: isize, y: isize, x: isize| -> f64 {
        if z < 0 || y < 0 || x < 0 || z >= d as isize || y >= hh as isize || x >= w as isize {
            0.0
        } else {
            t.get(&[ch, z as usize, y as usize, x as usize])
        }
    };
    let mut out = vec![0.0; cf * d * hh * w];
    for co in 0..cf {
        for z in 0..d as isize {
            for y in 0..hh as isize {
                for x in 0..w as isize {
                    let mut acc = 0.0;
                    for i in 0..3usize {
                        for j in 0..3usize {
                            for k in 0..3usize {
                                let (dz, dy, dx) = (i as isize - 1, j as isize - 1, k as isize - 1);
                                for ci in 0..cf {
                                    let mut sim = 0.0;
                                    for gc in 0..cg {
                                        let a = alpha.get(&[gc, 0, i, j, k]);
                                        let diff = a * at(g, gc, z + dz, y + dy, x + dx) - at(g, gc, z, y, x);
                                        sim += h.get(&[ci, gc, 0, 0, 0]) * diff * diff;
                                    }
                                    let b = beta.get(&[ci, 0, i, j, k]);
                                    let fd = b * at(f, ci, z + dz, y + dy, x + dx) - at(f, ci, z, y, x);
                                    acc += omega.get(&[co, ci, i, j, k]) * sim * fd;
                                }
                            }
                        }
                    }
                    let idx = ((co * d + z as usize) * hh + y as usize) * w + x as usize;
                    out[idx] = lambda * at(f, co, z, y, x) + nu * acc;
                }
            }
        }
    }
    out
}

pub fn run_forward(c: &Case) -> Tensor<f64> {
    let mut ctx = Ctx::new(&c.store);
    let f = ctx.param(c.f);
    let g = ctx.param(c.g);
    let y = sdm::sdm_forward(&mut ctx, f, g, &c.p).unwrap();
    ctx.g.value(y).clone()
}
