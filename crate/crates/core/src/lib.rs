//! Conditional GAN training, Online-Output snapshot streaming, two-stage
//! sample sifting, image-transform augmentation and classifier training.
//!
//! The crate is `no_std` (it needs `alloc`); file formats, the CLI and the
//! experiment harness live in the `siftgan` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod augment;
pub mod clstrain;
pub mod data;
pub mod error;
pub mod gantrain;
pub mod nets;
pub mod sifter;
pub mod tensor;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The deterministic generator used everywhere in the pipeline.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a stream index (SplitMix64 finalizer), so that
/// independent sub-streams can be derived without sharing generator state.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
