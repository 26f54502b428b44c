//! Minimal dense autodiff engine used by the classifiers.

mod adam;
mod graph;
mod params;
mod tensor;

pub use adam::Adam;
pub use graph::{log_sum_exp, sigmoid, softmax_in_place, Tape, Var};
pub use params::{Gradients, ParamId, ParamSet};
pub use tensor::{matmul, Tensor};

use rand::Rng;

/// Inverted-dropout mask: kept units are scaled by `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; len];
    }
    if rate >= 1.0 {
        return vec![0.0; len];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}
