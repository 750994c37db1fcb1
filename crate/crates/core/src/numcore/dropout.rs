use rand::Rng;

use crate::error::{MtlError, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Inverted-dropout multiplier: each entry is 0 with probability `p`,
/// otherwise `1/(1−p)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Result<Vec<f64>> {
    check_p(p)?;
    let keep = 1.0 / (1.0 - p);
    Ok((0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect())
}

fn check_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(MtlError::contract(format!("dropout probability {p} not in [0, 1)")));
    }
    Ok(())
}

/// Dropout on a plain tensor. Inference mode and `p = 0` return the input
/// unchanged without drawing from `rng`.
pub fn dropout<R: Rng + ?Sized>(x: &Tensor, p: f64, training: bool, rng: &mut R) -> Result<Tensor> {
    check_p(p)?;
    if !training || p == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), p, rng)?;
    let mut out = x.clone();
    for (o, m) in out.data_mut().iter_mut().zip(&mask) {
        *o *= m;
    }
    Ok(out)
}

/// Taped dropout; records nothing in inference mode or for `p = 0`.
pub fn dropout_var<R: Rng + ?Sized>(tape: &mut Tape, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
    check_p(p)?;
    if !training || p == 0.0 {
        return Ok(x);
    }
    let mask = dropout_mask(tape.value(x).len(), p, rng)?;
    tape.mask_mul(x, mask)
}
