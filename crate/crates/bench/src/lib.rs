//! Fixtures shared by the benchmarks.

use modiff::fields::{compute_fields, FieldStack};
use modiff::phantom::{generate_sequence, PhantomConfig, Video4D};
use modiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn phantom(grid: usize, frames: usize) -> Video4D {
    let cfg = PhantomConfig { grid: [grid; 3], frame_number: frames, ..Default::default() };
    generate_sequence(&cfg).expect("valid phantom config")
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn fields(grid: usize, frames: usize) -> FieldStack {
    compute_fields(&phantom(grid, frames)).expect("fields of a valid video")
}
