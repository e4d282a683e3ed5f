use crate::rng::{seeded, uniform_tensor};
use crate::tensor::{Shape, Tensor};

pub fn random_tensor(shape: Shape, seed: u64) -> Tensor {
    uniform_tensor(shape, -1.0, 1.0, &mut seeded(seed, 0))
}
