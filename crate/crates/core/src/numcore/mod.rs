//! Dense f32 tensors with f64 accumulation, and counter-based seeded randomness.

mod rng;
mod tensor;

pub use rng::{gaussian, RngState};
pub use tensor::{clamp, frobenius_norm_concat, matmul, sign, Tensor};
