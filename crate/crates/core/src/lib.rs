//! Toy-scale neural machine translation with a two-stream decoder: the
//! content stream builds (and learns to correct) representations of the
//! tokens actually fed in, while the query stream predicts the next token
//! from positions alone. Includes scheduled sampling, the correction loss,
//! training, beam-search decoding, and BLEU evaluation.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod infer;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod scalar;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

/// Derives a child seed from a base seed and a context path (step number,
/// purpose tag, …), so independent random streams never alias even when the
/// base seed is reused across steps. splitmix64 finalizer per component.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for &p in path {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

/// Training-time scalar type.
pub type TrainScalar = f32;
/// Gradient-checking scalar type.
pub type CheckScalar = f64;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
