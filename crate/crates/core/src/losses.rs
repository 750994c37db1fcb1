//! Classification losses over raw logits, each with its exact gradient.
//!
//! Cross-entropy and focal loss share one code path; with `gamma = 0` the
//! focal loss is the (optionally class-weighted) cross-entropy bit for bit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MtlError, Result};
use crate::numcore::{log_sum_exp, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    CrossEntropy,
    Hinge,
    Focal,
    Kld,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "ce",
            LossKind::Hinge => "hinge",
            LossKind::Focal => "focal",
            LossKind::Kld => "kld",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = MtlError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ce" | "cross_entropy" | "crossentropy" => Ok(LossKind::CrossEntropy),
            "hinge" | "hl" => Ok(LossKind::Hinge),
            "focal" | "fl" => Ok(LossKind::Focal),
            "kld" | "kl" => Ok(LossKind::Kld),
            other => Err(MtlError::config(format!("unknown loss kind {other:?}"))),
        }
    }
}

/// A loss selection together with its tunables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub focal_gamma: f64,
    /// Label-smoothing mass for the KLD target.
    pub kld_epsilon: f64,
    /// Only honored by cross-entropy and focal loss.
    pub use_class_weights: bool,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            kind: LossKind::CrossEntropy,
            focal_gamma: 2.0,
            kld_epsilon: 0.1,
            use_class_weights: false,
        }
    }
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        LossSpec {
            kind,
            ..LossSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(MtlError::config(format!(
                "focal_gamma {} must be >= 0",
                self.focal_gamma
            )));
        }
        if !(0.0..0.5).contains(&self.kld_epsilon) {
            return Err(MtlError::config(format!(
                "kld_epsilon {} must be in [0, 0.5)",
                self.kld_epsilon
            )));
        }
        Ok(())
    }

    pub fn weights_apply(&self) -> bool {
        self.use_class_weights && matches!(self.kind, LossKind::CrossEntropy | LossKind::Focal)
    }
}

/// Per-class weights `wᵢ = 1 − countᵢ / Σcounts`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }
}

/// Inverse-frequency weights from per-class counts.
pub fn class_weights(counts: &[u64]) -> Result<ClassWeights> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(MtlError::data("class counts sum to zero"));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(MtlError::data(format!(
            "class {c} has no examples; its weight would be 1 and it cannot be trained"
        )));
    }
    let t = total as f64;
    Ok(ClassWeights(counts.iter().map(|&n| 1.0 - n as f64 / t).collect()))
}

/// Value of a loss and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_target(logits: &[f64], target: usize) -> Result<()> {
    if target >= logits.len() {
        return Err(MtlError::contract(format!(
            "target {target} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(())
}

fn target_weight(weights: Option<&ClassWeights>, n: usize, target: usize) -> Result<f64> {
    match weights {
        None => Ok(1.0),
        Some(w) if w.len() == n => Ok(w.get(target)),
        Some(w) => Err(MtlError::contract(format!("{} class weights for {n} logits", w.len()))),
    }
}

/// `−w·(1 − p_t)^γ·ln p_t`, the shared body of cross-entropy and focal loss.
fn modulated_nll(logits: &[f64], target: usize, weight: f64, gamma: f64) -> LossOutput {
    let lse = log_sum_exp(logits);
    let nll = lse - logits[target];
    let probs: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();

    let (modulator, coeff) = if gamma == 0.0 {
        (1.0, 1.0)
    } else {
        let pt = probs[target];
        // Σ_{j≠t} p_j keeps precision when p_t is close to 1.
        let rest: f64 = probs
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != target)
            .map(|(_, p)| p)
            .sum();
        let modulator = rest.powf(gamma);
        let slope = if rest > 0.0 {
            gamma * pt * modulator * nll / rest
        } else {
            0.0
        };
        (modulator, modulator + slope)
    };

    let value = weight * modulator * nll;
    let grad = probs
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let delta = if j == target { 1.0 } else { 0.0 };
            weight * coeff * (p - delta)
        })
        .collect();
    LossOutput { value, grad }
}

pub fn cross_entropy_grad(logits: &[f64], target: usize, weights: Option<&ClassWeights>) -> Result<LossOutput> {
    check_target(logits, target)?;
    let w = target_weight(weights, logits.len(), target)?;
    Ok(modulated_nll(logits, target, w, 0.0))
}

/// Negative log-likelihood of `target` under `softmax(logits)`, scaled by
/// the target's class weight when given.
pub fn cross_entropy(logits: &[f64], target: usize, weights: Option<&ClassWeights>) -> Result<f64> {
    cross_entropy_grad(logits, target, weights).map(|o| o.value)
}

pub fn focal_grad(logits: &[f64], target: usize, gamma: f64, weights: Option<&ClassWeights>) -> Result<LossOutput> {
    check_target(logits, target)?;
    if gamma.is_nan() || gamma < 0.0 {
        return Err(MtlError::contract(format!("focal gamma {gamma} must be >= 0")));
    }
    let w = target_weight(weights, logits.len(), target)?;
    Ok(modulated_nll(logits, target, w, gamma))
}

pub fn focal(logits: &[f64], target: usize, gamma: f64, weights: Option<&ClassWeights>) -> Result<f64> {
    focal_grad(logits, target, gamma, weights).map(|o| o.value)
}

/// Multi-class hinge `Σ_{y≠t} max(0, 1 + s_y − s_t)` on raw scores.
pub fn hinge_multiclass_grad(logits: &[f64], target: usize) -> Result<LossOutput> {
    check_target(logits, target)?;
    let st = logits[target];
    let mut value = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (y, &sy) in logits.iter().enumerate() {
        if y == target {
            continue;
        }
        let margin = 1.0 + sy - st;
        if margin > 0.0 {
            value += margin;
            grad[y] += 1.0;
            grad[target] -= 1.0;
        }
    }
    Ok(LossOutput { value, grad })
}

pub fn hinge_multiclass(logits: &[f64], target: usize) -> Result<f64> {
    hinge_multiclass_grad(logits, target).map(|o| o.value)
}

/// Label-smoothed one-hot target: `1 − ε` on the target, `ε/(n−1)` elsewhere.
pub fn smoothed_target(n: usize, target: usize, epsilon: f64) -> Vec<f64> {
    let other = if n > 1 { epsilon / (n - 1) as f64 } else { 0.0 };
    (0..n)
        .map(|j| if j == target { 1.0 - epsilon } else { other })
        .collect()
}

/// `D_KL(p ‖ softmax(logits))` with `p` the smoothed target, natural log.
pub fn kld_grad(logits: &[f64], target: usize, epsilon: f64) -> Result<LossOutput> {
    check_target(logits, target)?;
    if !(0.0..0.5).contains(&epsilon) {
        return Err(MtlError::contract(format!("kld epsilon {epsilon} not in [0, 0.5)")));
    }
    if epsilon > 0.0 && logits.len() < 2 {
        return Err(MtlError::contract("label smoothing needs at least two classes"));
    }
    let lse = log_sum_exp(logits);
    let p = smoothed_target(logits.len(), target, epsilon);
    let mut value = 0.0;
    for (&pj, &zj) in p.iter().zip(logits) {
        if pj > 0.0 {
            value += pj * (pj.ln() - (zj - lse));
        }
    }
    let grad = logits.iter().zip(&p).map(|(&z, &pj)| (z - lse).exp() - pj).collect();
    Ok(LossOutput { value, grad })
}

pub fn kld(logits: &[f64], target: usize, epsilon: f64) -> Result<f64> {
    kld_grad(logits, target, epsilon).map(|o| o.value)
}

/// Dispatches on `spec`; class weights are dropped for hinge and KLD.
pub fn loss_grad(spec: &LossSpec, logits: &[f64], target: usize, weights: Option<&ClassWeights>) -> Result<LossOutput> {
    let weights = if spec.weights_apply() { weights } else { None };
    match spec.kind {
        LossKind::CrossEntropy => cross_entropy_grad(logits, target, weights),
        LossKind::Focal => focal_grad(logits, target, spec.focal_gamma, weights),
        LossKind::Hinge => hinge_multiclass_grad(logits, target),
        LossKind::Kld => kld_grad(logits, target, spec.kld_epsilon),
    }
}

/// Records the selected loss of one sample's logits on the tape.
pub fn loss_var(
    tape: &mut Tape,
    logits: Var,
    target: usize,
    spec: &LossSpec,
    weights: Option<&ClassWeights>,
) -> Result<Var> {
    let lv = tape.value(logits);
    let out = loss_grad(spec, lv.data(), target, weights)?;
    let grad = Tensor::new(lv.shape().to_vec(), out.grad)?;
    tape.scalar_fn(logits, out.value, grad)
}

/// Arithmetic mean of per-sample losses.
pub fn batch_loss(losses: &[f64]) -> Result<f64> {
    if losses.is_empty() {
        return Err(MtlError::contract("empty batch"));
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Taped mean of per-sample loss nodes.
pub fn batch_loss_var(tape: &mut Tape, losses: &[Var]) -> Result<Var> {
    tape.mean(losses)
}
