//! Transformer encoder with learned positional embeddings, pre-norm
//! residual blocks, a `[CLS]` pooler, and per-task classification heads.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{MtlError, Result};
use crate::numcore::{dropout_var, named_stream, Stream, Tape, Tensor, Var};
use crate::text::TokenSeq;

/// Width of the hidden layer in each classification head.
pub const HEAD_HIDDEN: usize = 128;
pub const LAYER_NORM_EPS: f64 = 1e-12;
/// Additive score for padded key positions.
pub const MASK_BIAS: f64 = -1e9;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub dropout_p: f64,
}

impl EncoderConfig {
    /// Desk-scale defaults for the given vocabulary size.
    pub fn with_vocab(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ffn: 128,
            max_len: 64,
            dropout_p: 0.4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ffn", self.d_ffn),
            ("max_len", self.max_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(MtlError::config(format!("model.{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(MtlError::config(format!(
                "model.n_heads {} does not divide model.d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.max_len < 3 {
            return Err(MtlError::config("model.max_len must be at least 3"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(MtlError::config(format!(
                "model.dropout {} must be in [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadSpec {
    pub task: String,
    pub n_classes: usize,
    pub hidden: usize,
}

impl HeadSpec {
    pub fn new(task: impl Into<String>, n_classes: usize) -> Self {
        HeadSpec {
            task: task.into(),
            n_classes,
            hidden: HEAD_HIDDEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(MtlError::config(format!(
                "task {} needs at least 2 classes, has {}",
                self.task, self.n_classes
            )));
        }
        Ok(())
    }
}

/// Named parameter shapes of one encoder tower under `prefix`.
pub fn encoder_shapes(prefix: &str, cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut out = vec![
        (format!("{prefix}.tok_emb"), vec![cfg.vocab_size, d]),
        (format!("{prefix}.pos_emb"), vec![cfg.max_len, d]),
    ];
    for l in 0..cfg.n_layers {
        let p = format!("{prefix}.layer{l}");
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{p}.attn.{w}"), vec![d, d]));
        }
        out.push((format!("{p}.ffn.w1"), vec![d, cfg.d_ffn]));
        out.push((format!("{p}.ffn.b1"), vec![cfg.d_ffn]));
        out.push((format!("{p}.ffn.w2"), vec![cfg.d_ffn, d]));
        out.push((format!("{p}.ffn.b2"), vec![d]));
        for norm in ["norm1", "norm2"] {
            out.push((format!("{p}.{norm}.gain"), vec![d]));
            out.push((format!("{p}.{norm}.bias"), vec![d]));
        }
    }
    out.push((format!("{prefix}.final_norm.gain"), vec![d]));
    out.push((format!("{prefix}.final_norm.bias"), vec![d]));
    out.push((format!("{prefix}.pooler.w"), vec![d, d]));
    out.push((format!("{prefix}.pooler.b"), vec![d]));
    out
}

/// Named parameter shapes of one classification head under `prefix`.
pub fn head_shapes(prefix: &str, head: &HeadSpec, d_model: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        (format!("{prefix}.hidden.w"), vec![d_model, head.hidden]),
        (format!("{prefix}.hidden.b"), vec![head.hidden]),
        (format!("{prefix}.out.w"), vec![head.hidden, head.n_classes]),
        (format!("{prefix}.out.b"), vec![head.n_classes]),
    ]
}

enum InitKind {
    Weight,
    Zero,
    One,
}

fn init_kind(name: &str) -> InitKind {
    if name.ends_with(".gain") {
        InitKind::One
    } else if name.ends_with(".bias") || name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
        InitKind::Zero
    } else {
        InitKind::Weight
    }
}

/// Normal(0, std) truncated to two standard deviations by resampling.
fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Named weight collection for an encoder and its heads.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        ModelParams { tensors }
    }

    /// Random initialization; each tensor draws from a stream keyed by its
    /// own name, so its values do not depend on which other tensors exist.
    pub fn init(shapes: &[(String, Vec<usize>)], seed: u64) -> Self {
        let tensors = shapes
            .iter()
            .map(|(name, shape)| {
                let t = match init_kind(name) {
                    InitKind::One => Tensor::filled(shape, 1.0),
                    InitKind::Zero => Tensor::zeros(shape),
                    InitKind::Weight => {
                        let mut rng = named_stream(seed, Stream::Init, name);
                        let mut t = Tensor::zeros(shape);
                        for x in t.data_mut() {
                            *x = truncated_normal(&mut rng, INIT_STD);
                        }
                        t
                    }
                };
                (name.clone(), t)
            })
            .collect();
        ModelParams { tensors }
    }

    /// All weights and biases zero, normalization gains one.
    pub fn zeroed(shapes: &[(String, Vec<usize>)]) -> Self {
        let tensors = shapes
            .iter()
            .map(|(name, shape)| {
                let t = match init_kind(name) {
                    InitKind::One => Tensor::filled(shape, 1.0),
                    _ => Tensor::zeros(shape),
                };
                (name.clone(), t)
            })
            .collect();
        ModelParams { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Checks that names and shapes match `shapes` exactly.
    pub fn check_shapes(&self, shapes: &[(String, Vec<usize>)]) -> Result<()> {
        if shapes.len() != self.tensors.len() {
            return Err(MtlError::contract(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in shapes {
            match self.tensors.get(name) {
                None => return Err(MtlError::contract(format!("missing tensor {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(MtlError::Dimension {
                        op: "model_params",
                        left: shape.clone(),
                        right: t.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Every tensor rounded through `f32`.
    pub fn round_to_f32(&self) -> Self {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.round_to_f32()))
                .collect(),
        }
    }

    /// Registers every tensor as a named trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(
            self.tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(k.clone(), v.clone())))
                .collect(),
        )
    }
}

/// Tape handles of bound parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamVars(BTreeMap<String, Var>);

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| MtlError::contract(format!("parameter {name} is not bound")))
    }

    pub fn from_map(map: BTreeMap<String, Var>) -> Self {
        ParamVars(map)
    }
}

/// `softmax(q·kᵀ/√d_k + mask_bias)·v`; keys with `key_mask == 0` get a
/// large negative bias before the softmax.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, key_mask: &[u8]) -> Result<Var> {
    let dk = tape.value(q).dims2().1;
    let (lk, dk2) = tape.value(k).dims2();
    let (lv, _) = tape.value(v).dims2();
    if dk != dk2 || lk != lv {
        return Err(MtlError::Dimension {
            op: "attention",
            left: tape.value(q).shape().to_vec(),
            right: tape.value(k).shape().to_vec(),
        });
    }
    if key_mask.len() != lk {
        return Err(MtlError::contract(format!(
            "attention mask has {} entries for {lk} keys",
            key_mask.len()
        )));
    }
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let mut scaled = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    if key_mask.contains(&0) {
        let bias: Vec<f64> = key_mask.iter().map(|&m| if m == 0 { MASK_BIAS } else { 0.0 }).collect();
        let bias = tape.constant(Tensor::new(vec![lk], bias)?);
        scaled = tape.add_row(scaled, bias)?;
    }
    let probs = tape.softmax_rows(scaled);
    tape.matmul(probs, v)
}

/// Multi-head self-attention of one layer: per-head projections of width
/// `d_model / n_heads`, attention per head, concatenation, output projection.
pub fn multi_head(
    tape: &mut Tape,
    x: Var,
    vars: &ParamVars,
    layer_prefix: &str,
    n_heads: usize,
    mask: &[u8],
) -> Result<Var> {
    let wq = vars.get(&format!("{layer_prefix}.attn.wq"))?;
    let wk = vars.get(&format!("{layer_prefix}.attn.wk"))?;
    let wv = vars.get(&format!("{layer_prefix}.attn.wv"))?;
    let wo = vars.get(&format!("{layer_prefix}.attn.wo"))?;
    let d_model = tape.value(x).dims2().1;
    if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
        return Err(MtlError::contract(format!(
            "{n_heads} heads do not divide width {d_model}"
        )));
    }
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let concat = if n_heads == 1 {
        attention(tape, q, k, v, mask)?
    } else {
        let hd = d_model / n_heads;
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(k, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            heads.push(attention(tape, qh, kh, vh, mask)?);
        }
        tape.concat_cols(&heads)?
    };
    tape.matmul(concat, wo)
}

fn layer_norm(tape: &mut Tape, x: Var, vars: &ParamVars, prefix: &str) -> Result<Var> {
    let g = vars.get(&format!("{prefix}.gain"))?;
    let b = vars.get(&format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b, LAYER_NORM_EPS)
}

/// Position-wise `relu(x·W1 + b1)·W2 + b2`.
pub fn feed_forward(tape: &mut Tape, x: Var, vars: &ParamVars, layer_prefix: &str) -> Result<Var> {
    let w1 = vars.get(&format!("{layer_prefix}.ffn.w1"))?;
    let b1 = vars.get(&format!("{layer_prefix}.ffn.b1"))?;
    let w2 = vars.get(&format!("{layer_prefix}.ffn.w2"))?;
    let b2 = vars.get(&format!("{layer_prefix}.ffn.b2"))?;
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, w2)?;
    tape.add_row(o, b2)
}

/// Encodes one sequence and returns the pooled `[CLS]` vector `[1×d_model]`.
///
/// Every op recorded here is counted in `tape.stats`.
pub fn encoder_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    seq: &TokenSeq,
    vars: &ParamVars,
    prefix: &str,
    cfg: &EncoderConfig,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if seq.max_len() != cfg.max_len {
        return Err(MtlError::contract(format!(
            "sequence length {} differs from configured max_len {}",
            seq.max_len(),
            cfg.max_len
        )));
    }
    if let Some(&bad) = seq.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(MtlError::contract(format!(
            "token id {bad} out of range for vocab_size {}",
            cfg.vocab_size
        )));
    }
    let start = tape.len();
    let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
    let tok = tape.gather(vars.get(&format!("{prefix}.tok_emb"))?, &ids)?;
    let pos = tape.slice_rows(vars.get(&format!("{prefix}.pos_emb"))?, 0, cfg.max_len)?;
    let mut x = tape.add(tok, pos)?;

    for l in 0..cfg.n_layers {
        let lp = format!("{prefix}.layer{l}");
        let h = layer_norm(tape, x, vars, &format!("{lp}.norm1"))?;
        let a = multi_head(tape, h, vars, &lp, cfg.n_heads, &seq.mask)?;
        let a = dropout_var(tape, a, cfg.dropout_p, training, rng)?;
        x = tape.add(x, a)?;
        let h = layer_norm(tape, x, vars, &format!("{lp}.norm2"))?;
        let f = feed_forward(tape, h, vars, &lp)?;
        let f = dropout_var(tape, f, cfg.dropout_p, training, rng)?;
        x = tape.add(x, f)?;
    }
    let x = layer_norm(tape, x, vars, &format!("{prefix}.final_norm"))?;
    let cls = tape.slice_rows(x, 0, 1)?;
    let pooled = tape.matmul(cls, vars.get(&format!("{prefix}.pooler.w"))?)?;
    let pooled = tape.add_row(pooled, vars.get(&format!("{prefix}.pooler.b"))?)?;
    let out = tape.tanh(pooled);

    tape.stats.encoder_ops += tape.len() - start;
    tape.stats.encoder_passes += 1;
    Ok(out)
}

/// Raw class scores `relu(cls·W_h + b_h)·W_o + b_o`, shape `[1×n_classes]`.
pub fn classify(tape: &mut Tape, cls: Var, vars: &ParamVars, head_prefix: &str) -> Result<Var> {
    let wh = vars.get(&format!("{head_prefix}.hidden.w"))?;
    let bh = vars.get(&format!("{head_prefix}.hidden.b"))?;
    let wo = vars.get(&format!("{head_prefix}.out.w"))?;
    let bo = vars.get(&format!("{head_prefix}.out.b"))?;
    let h = tape.matmul(cls, wh)?;
    let h = tape.add_row(h, bh)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, wo)?;
    tape.add_row(o, bo)
}
