//! Deterministic random streams.
//!
//! Every random quantity in the engine is drawn from a ChaCha8 generator
//! keyed by `(seed, stream)`, so values never depend on the order in which
//! callers ask for them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Shape, Tensor};

pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream id for the latent of canvas cell `(row, col)`.
pub fn cell_stream(row: usize, col: usize) -> u64 {
    // Top bit reserved so cell streams never collide with the small fixed
    // stream ids used elsewhere.
    (1 << 63) | ((row as u64 & 0x7fff_ffff) << 32) | (col as u64 & 0xffff_ffff)
}

pub fn normal_tensor(shape: Shape, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.sample::<f32, _>(StandardNormal))
}

pub fn uniform_tensor(shape: Shape, lo: f32, hi: f32, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}
