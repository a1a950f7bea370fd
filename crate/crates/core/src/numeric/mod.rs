//! Dense `f64` numeric core: tensors, a reverse-mode tape over a fixed set of
//! primitives, named parameter storage, Adam, and labelled RNG streams.

mod optim;
mod params;
mod rng;
mod tape;
mod tensor;

pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use rng::RngStreams;
pub use tape::{log_sum_exp, matmul, Composition, EdgeMessages, Gradients, Pooling, ProductQueries, Tape, Var};
pub use tensor::Tensor;

/// Inverted-dropout mask: kept entries are scaled by `1 / (1 - p)`.
pub fn dropout_mask<R: rand::Rng>(len: usize, p: f64, rng: &mut R) -> Vec<f64> {
    if p <= 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}
