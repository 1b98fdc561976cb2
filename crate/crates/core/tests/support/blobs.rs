use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Labels painted from a few random balls.
pub fn blobs(rng: &mut ChaCha8Rng, classes: u8) -> Vec<u8> {
    let mut v = vec![0u8; 4096];
    for _ in 0..rng.random_range(2..6) {
        let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..16.0));
        let r = rng.random_range(2.0..6.0);
        let l = rng.random_range(1..classes);
        for (i, e) in v.iter_mut().enumerate() {
            let p = [(i / 256) as f64, ((i / 16) % 16) as f64, (i % 16) as f64];
            if (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>() <= r * r {
                *e = l;
            }
        }
    }
    v
}
