//! Dense tensors, reverse-mode differentiation, AdamW, dropout, and the
//! matrix norms used to couple task towers.

pub mod dropout;
pub mod gradcheck;
pub mod linalg;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use dropout::{dropout, dropout_var};
pub use gradcheck::{grad_check, grad_check_named, relative_error};
pub use linalg::{svd, trace_norm, Svd};
pub use optim::{adamw_step, clip_global_norm, global_norm, AdamWState, Moments, OptimHyper};
pub use rng::{named_stream, stream, substream, Stream, StreamRng};
pub use tape::{Gradients, Tape, TapeStats, Var};
pub use tensor::{frobenius_sq_distance, log_sum_exp, matmul, relu, sigmoid, sigmoid_scalar, softmax_rows, Tensor};

use crate::error::Result;

/// Taped trace norm; the backward pass uses the `U·Vᵀ` subgradient.
pub fn trace_norm_var(tape: &mut Tape, w: Var) -> Result<Var> {
    let (value, grad) = trace_norm(tape.value(w))?;
    tape.scalar_fn(w, value, grad)
}
