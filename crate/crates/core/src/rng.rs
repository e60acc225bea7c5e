//! Seeded randomness. One root seed fans out into independent streams by
//! fixed offsets so that data, initialization and Gumbel noise never share
//! a generator.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Real;
use crate::tensor::Tensor;

pub type SeededRng = ChaCha8Rng;

/// Purpose-specific offsets added to the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 0x0000_1000,
    Init = 0x0002_0000,
    Gumbel = 0x0030_0000,
    Shuffle = 0x0400_0000,
}

pub fn stream_seed(root: u64, stream: Stream) -> u64 {
    root.wrapping_add(stream as u64)
}

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a seed with a counter (step, sample index, ...) into a fresh seed.
pub fn derive_seed(seed: u64, counter: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ counter.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform sample strictly inside (0, 1).
pub fn open_unit(rng: &mut impl Rng) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return u;
        }
    }
}

/// `−ln(−ln u)`, the inverse CDF of the standard Gumbel distribution.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -libm::log(-libm::log(u))
}

/// Standard Gumbel noise of the given shape, reproducible per seed.
pub fn sample_gumbel<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = rng_from_seed(seed);
    Tensor::from_fn(shape, |_| T::of(gumbel_from_uniform(open_unit(&mut rng))))
}

/// Fisher–Yates shuffle of `0..n`.
pub fn permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
