//! Seeded toy instances: patches of layered sinusoid textures. Small enough
//! to condense in seconds, structured enough that distribution matching has
//! something to chase.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datapipe::{PatchKind, PatchSet};
use crate::numerics::{num, Element, Tensor};

/// `n` RGB patches of `size x size` sinusoid textures, deterministic per
/// seed. Every pixel lies in [0.05, 0.95], so there is headroom on both
/// sides of the clamp bounds.
pub fn sinusoid_patches<S: Element>(n: usize, size: usize, seed: u64) -> PatchSet<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = std::f64::consts::TAU;
    let mut data = Vec::with_capacity(n * 3 * size * size);
    for _ in 0..n {
        for _ in 0..3 {
            // two plane waves per channel: orientation, frequency, phase
            let (a0, a1) = (rng.gen_range(0.0..tau), rng.gen_range(0.0..tau));
            let (f0, f1) = (rng.gen_range(1.0..4.0), rng.gen_range(2.0..6.0));
            let (p0, p1) = (rng.gen_range(0.0..tau), rng.gen_range(0.0..tau));
            let dc = rng.gen_range(0.4..0.6);
            for y in 0..size {
                for x in 0..size {
                    let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
                    let w0 = (tau * f0 * (u * a0.cos() + v * a0.sin()) + p0).sin();
                    let w1 = (tau * f1 * (u * a1.cos() + v * a1.sin()) + p1).sin();
                    let value = dc + 0.28 * w0 + 0.12 * w1;
                    data.push(num::<S>(value.clamp(0.05, 0.95)));
                }
            }
        }
    }
    let pixels = Tensor::new(vec![n, 3, size, size], data).expect("toy shape");
    PatchSet::new(pixels, format!("toy_{seed}"), vec![], PatchKind::RealLr)
        .expect("toy patches are in range")
}
