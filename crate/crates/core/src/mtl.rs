//! Training regimes: single-task, hard parameter sharing (one encoder, one
//! head per task) and soft parameter sharing (one encoder tower per task,
//! coupled through a norm penalty on matching weights).

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;

use crate::data::{batch_indices, class_counts, Corpus};
use crate::encoder::{
    classify, encoder_forward, encoder_shapes, head_shapes, EncoderConfig, HeadSpec, ModelParams, ParamVars,
};
use crate::error::{MtlError, Result};
use crate::losses::{class_weights, loss_var, ClassWeights, LossSpec};
use crate::metrics::task_report;
use crate::numcore::{adamw_step, stream, substream, trace_norm_var, AdamWState, OptimHyper, Stream, Tape, Var};
use crate::text::{encode, TokenSeq, Vocab};

pub const SHARED_ENCODER: &str = "encoder";
/// Batch sizes accepted by the trainer configuration.
pub const BATCH_SIZES: [usize; 3] = [16, 32, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegimeKind {
    Stl,
    HardShare,
    SoftShare,
}

impl RegimeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RegimeKind::Stl => "stl",
            RegimeKind::HardShare => "hard",
            RegimeKind::SoftShare => "soft",
        }
    }
}

impl fmt::Display for RegimeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegimeKind {
    type Err = MtlError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "stl" | "single" => Ok(RegimeKind::Stl),
            "hard" | "hardshare" | "hard_share" => Ok(RegimeKind::HardShare),
            "soft" | "softshare" | "soft_share" => Ok(RegimeKind::SoftShare),
            other => Err(MtlError::config(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Penalty {
    #[default]
    Frobenius,
    TraceNorm,
}

impl Penalty {
    pub fn as_str(self) -> &'static str {
        match self {
            Penalty::Frobenius => "frobenius",
            Penalty::TraceNorm => "trace",
        }
    }
}

impl fmt::Display for Penalty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Penalty {
    type Err = MtlError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "frobenius" | "fro" => Ok(Penalty::Frobenius),
            "trace" | "trace_norm" | "tracenorm" => Ok(Penalty::TraceNorm),
            other => Err(MtlError::config(format!("unknown soft penalty {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SoftConfig {
    pub penalty: Penalty,
    pub lambda: f64,
    /// Tower-relative tensor names, e.g. `layer0.attn.wq`. Empty means the
    /// attention projections and FFN matrices of every layer.
    pub coupled: Vec<String>,
    pub lambda_overrides: BTreeMap<String, f64>,
}

impl SoftConfig {
    pub fn lambda_for(&self, layer: &str) -> f64 {
        self.lambda_overrides.get(layer).copied().unwrap_or(self.lambda)
    }
}

/// Tower-relative names coupled by default.
pub fn default_coupled(cfg: &EncoderConfig) -> Vec<String> {
    let mut out = Vec::new();
    for l in 0..cfg.n_layers {
        for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.w1", "ffn.w2"] {
            out.push(format!("layer{l}.{w}"));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeConfig {
    pub kind: RegimeKind,
    /// Task names, matching corpus schema names.
    pub tasks: Vec<String>,
    /// One loss per task.
    pub losses: Vec<LossSpec>,
    /// One weight per task.
    pub task_weights: Vec<f64>,
    pub soft: SoftConfig,
}

impl RegimeConfig {
    pub fn stl(task: &str, loss: LossSpec) -> Self {
        RegimeConfig {
            kind: RegimeKind::Stl,
            tasks: vec![task.to_string()],
            losses: vec![loss],
            task_weights: vec![1.0],
            soft: SoftConfig::default(),
        }
    }

    pub fn hard(tasks: [&str; 2], loss: LossSpec) -> Self {
        RegimeConfig {
            kind: RegimeKind::HardShare,
            tasks: tasks.iter().map(|t| t.to_string()).collect(),
            losses: vec![loss; 2],
            task_weights: vec![1.0, 1.0],
            soft: SoftConfig::default(),
        }
    }

    pub fn soft(tasks: [&str; 2], loss: LossSpec, soft: SoftConfig) -> Self {
        RegimeConfig {
            kind: RegimeKind::SoftShare,
            soft,
            ..Self::hard(tasks, loss)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let want = match self.kind {
            RegimeKind::Stl => 1,
            RegimeKind::HardShare | RegimeKind::SoftShare => 2,
        };
        if self.tasks.len() != want {
            return Err(MtlError::config(format!(
                "regime.tasks: {} regime takes {want} task(s), got {}",
                self.kind,
                self.tasks.len()
            )));
        }
        if self.tasks.len() == 2 && self.tasks[0] == self.tasks[1] {
            return Err(MtlError::config("regime.tasks must name two different tasks"));
        }
        if self.losses.len() != want {
            return Err(MtlError::config(format!("regime.loss: expected {want} loss kind(s)")));
        }
        for l in &self.losses {
            l.validate()?;
        }
        if self.task_weights.len() != want || self.task_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(MtlError::config(format!(
                "regime.task_weights {:?} must be {want} finite nonnegative value(s)",
                self.task_weights
            )));
        }
        let lambdas = std::iter::once(&self.soft.lambda).chain(self.soft.lambda_overrides.values());
        for l in lambdas {
            if !l.is_finite() || *l < 0.0 {
                return Err(MtlError::config(format!(
                    "regime.soft_lambda {l} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimHyper,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 32,
            optim: OptimHyper::default(),
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(MtlError::config("train.epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(MtlError::config("train.batch_size must be at least 1"));
        }
        self.optim.validate()
    }
}

/// Encoder configuration, regime and head layout of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderConfig,
    pub regime: RegimeConfig,
    pub heads: Vec<HeadSpec>,
}

impl Model {
    /// Head sizes come from the corpus schemas of the regime's tasks.
    pub fn new(encoder: EncoderConfig, regime: RegimeConfig, corpus_like: &Corpus) -> Result<Self> {
        encoder.validate()?;
        regime.validate()?;
        let heads = regime
            .tasks
            .iter()
            .map(|t| {
                let i = corpus_like.task_index(t)?;
                let h = HeadSpec::new(t.clone(), corpus_like.schemas[i].len());
                h.validate()?;
                Ok(h)
            })
            .collect::<Result<Vec<_>>>()?;
        let model = Model { encoder, regime, heads };
        model.check_coupling()?;
        Ok(model)
    }

    pub fn encoder_prefix(&self, task: usize) -> String {
        match self.regime.kind {
            RegimeKind::SoftShare => format!("{SHARED_ENCODER}.{}", self.heads[task].task),
            _ => SHARED_ENCODER.to_string(),
        }
    }

    pub fn head_prefix(&self, task: usize) -> String {
        format!("head.{}", self.heads[task].task)
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        match self.regime.kind {
            RegimeKind::SoftShare => {
                for t in 0..self.heads.len() {
                    out.extend(encoder_shapes(&self.encoder_prefix(t), &self.encoder));
                }
            }
            _ => out.extend(encoder_shapes(SHARED_ENCODER, &self.encoder)),
        }
        for (t, h) in self.heads.iter().enumerate() {
            out.extend(head_shapes(&self.head_prefix(t), h, self.encoder.d_model));
        }
        out
    }

    pub fn init_params(&self, seed: u64) -> ModelParams {
        ModelParams::init(&self.shapes(), seed)
    }

    /// Tower-relative names of the coupled tensors.
    pub fn coupled_layers(&self) -> Vec<String> {
        if self.regime.soft.coupled.is_empty() {
            default_coupled(&self.encoder)
        } else {
            self.regime.soft.coupled.clone()
        }
    }

    fn check_coupling(&self) -> Result<()> {
        if self.regime.kind != RegimeKind::SoftShare {
            return Ok(());
        }
        let shapes: BTreeMap<String, Vec<usize>> = self.shapes().into_iter().collect();
        for layer in self.coupled_layers() {
            let a = shapes.get(&format!("{}.{layer}", self.encoder_prefix(0)));
            let b = shapes.get(&format!("{}.{layer}", self.encoder_prefix(1)));
            match (a, b) {
                (Some(a), Some(b)) if a == b && a.len() == 2 => {}
                _ => {
                    return Err(MtlError::config(format!(
                        "regime.soft_layers: {layer} does not name a matching matrix in both towers"
                    )))
                }
            }
        }
        for layer in self.regime.soft.lambda_overrides.keys() {
            if !self.coupled_layers().contains(layer) {
                return Err(MtlError::config(format!(
                    "regime.soft_lambda_override: {layer} is not a coupled layer"
                )));
            }
        }
        Ok(())
    }

    /// Per-task `[1×n_t]` logits of one sample. Hard sharing and STL run a
    /// single encoder pass; soft sharing runs one pass per tower.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        seq: &TokenSeq,
        training: bool,
        rng: &mut R,
    ) -> Result<Vec<Var>> {
        let mut logits = Vec::with_capacity(self.heads.len());
        match self.regime.kind {
            RegimeKind::SoftShare => {
                for t in 0..self.heads.len() {
                    let cls = encoder_forward(tape, seq, vars, &self.encoder_prefix(t), &self.encoder, training, rng)?;
                    logits.push(classify(tape, cls, vars, &self.head_prefix(t))?);
                }
            }
            _ => {
                let cls = encoder_forward(tape, seq, vars, SHARED_ENCODER, &self.encoder, training, rng)?;
                for t in 0..self.heads.len() {
                    logits.push(classify(tape, cls, vars, &self.head_prefix(t))?);
                }
            }
        }
        Ok(logits)
    }
}

/// Shared-encoder forward over a batch: `[B×n1]` and `[B×n2]` logits from
/// one encoder pass per sample.
pub fn hard_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    vars: &ParamVars,
    model: &Model,
    seqs: &[TokenSeq],
    training: bool,
    rng: &mut R,
) -> Result<(Var, Var)> {
    if model.regime.kind != RegimeKind::HardShare {
        return Err(MtlError::contract("hard_forward needs a hard-sharing model"));
    }
    let mut rows: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
    for seq in seqs {
        let l = model.forward(tape, vars, seq, training, rng)?;
        rows[0].push(l[0]);
        rows[1].push(l[1]);
    }
    Ok((tape.concat_rows(&rows[0])?, tape.concat_rows(&rows[1])?))
}

/// `w1·loss1 + w2·loss2`.
pub fn hard_loss(tape: &mut Tape, loss1: Var, loss2: Var, weights: [f64; 2]) -> Result<Var> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(MtlError::contract(format!(
            "task weights {weights:?} must be nonnegative"
        )));
    }
    tape.lin_comb(&[(loss1, weights[0]), (loss2, weights[1])])
}

/// Weighted tower losses plus `λ_l·penalty(W_l^1, W_l^2)` summed over the
/// coupled layers. Layers whose λ is zero are left out.
pub fn soft_loss(
    tape: &mut Tape,
    tower_losses: [Var; 2],
    weights: [f64; 2],
    vars: &ParamVars,
    prefixes: [&str; 2],
    soft: &SoftConfig,
    layers: &[String],
) -> Result<Var> {
    let mut terms = vec![(tower_losses[0], weights[0]), (tower_losses[1], weights[1])];
    for layer in layers {
        let lambda = soft.lambda_for(layer);
        if lambda == 0.0 {
            continue;
        }
        let bad = || MtlError::config(format!("coupled layer {layer} is missing from a tower"));
        let a = vars.get(&format!("{}.{layer}", prefixes[0])).map_err(|_| bad())?;
        let b = vars.get(&format!("{}.{layer}", prefixes[1])).map_err(|_| bad())?;
        if tape.value(a).shape() != tape.value(b).shape() {
            return Err(MtlError::config(format!(
                "coupled layer {layer} differs in shape between towers"
            )));
        }
        let p = match soft.penalty {
            Penalty::Frobenius => tape.frobenius_sq_distance(a, b)?,
            Penalty::TraceNorm => {
                let stacked = tape.concat_rows(&[a, b])?;
                trace_norm_var(tape, stacked)?
            }
        };
        terms.push((p, lambda));
    }
    tape.lin_comb(&terms)
}

/// Σ ‖W^1 − W^2‖²_F over the coupled layers of a soft-sharing model.
pub fn coupling_distance(model: &Model, params: &ModelParams) -> Result<f64> {
    let (p0, p1) = (model.encoder_prefix(0), model.encoder_prefix(1));
    let mut total = 0.0;
    for layer in model.coupled_layers() {
        let get = |p: &str| {
            params
                .get(&format!("{p}.{layer}"))
                .ok_or_else(|| MtlError::contract(format!("missing coupled tensor {p}.{layer}")))
        };
        total += crate::numcore::frobenius_sq_distance(get(&p0)?, get(&p1)?)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean training loss per task.
    pub loss: Vec<f64>,
    /// Running training accuracy per task.
    pub accuracy: Vec<f64>,
    /// Validation weighted F1 per task, when a validation split is given.
    pub val_weighted_f1: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainTrace {
    pub tasks: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    /// Wall-clock seconds per epoch, kept apart so the records stay
    /// reproducible.
    pub seconds: Vec<f64>,
}

impl TrainTrace {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch");
        for prefix in ["loss", "acc", "val_weighted_f1"] {
            for t in &self.tasks {
                let _ = write!(s, "\t{prefix}_{t}");
            }
        }
        s.push('\n');
        for r in &self.epochs {
            let _ = write!(s, "{}", r.epoch);
            for x in r.loss.iter().chain(&r.accuracy) {
                let _ = write!(s, "\t{x}");
            }
            match &r.val_weighted_f1 {
                Some(v) => v.iter().for_each(|x| {
                    let _ = write!(s, "\t{x}");
                }),
                None => self.tasks.iter().for_each(|_| s.push_str("\t-")),
            }
            s.push('\n');
        }
        s
    }

    pub fn timing_tsv(&self) -> String {
        let mut s = String::from("epoch\tseconds\n");
        for (r, sec) in self.epochs.iter().zip(&self.seconds) {
            let _ = writeln!(s, "{}\t{sec:.3}", r.epoch);
        }
        s
    }
}

/// Lowest index among the maxima.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn task_columns(model: &Model, corpus: &Corpus) -> Result<Vec<usize>> {
    model
        .heads
        .iter()
        .map(|h| {
            let i = corpus.task_index(&h.task)?;
            if corpus.schemas[i].len() != h.n_classes {
                return Err(MtlError::contract(format!(
                    "task {} has {} classes in the data but {} in the model",
                    h.task,
                    corpus.schemas[i].len(),
                    h.n_classes
                )));
            }
            Ok(i)
        })
        .collect()
}

fn encode_all(corpus: &Corpus, vocab: &Vocab, max_len: usize) -> Result<Vec<TokenSeq>> {
    corpus.records.iter().map(|r| encode(&r.text, vocab, max_len)).collect()
}

const EVAL_CHUNK: usize = 64;

/// Argmax predictions per model task (dropout off), in corpus order.
pub fn evaluate(model: &Model, params: &ModelParams, corpus: &Corpus, vocab: &Vocab) -> Result<Vec<Vec<usize>>> {
    task_columns(model, corpus)?;
    params.check_shapes(&model.shapes())?;
    let seqs = encode_all(corpus, vocab, model.encoder.max_len)?;
    predict(model, params, &seqs)
}

fn predict(model: &Model, params: &ModelParams, seqs: &[TokenSeq]) -> Result<Vec<Vec<usize>>> {
    let mut preds = vec![Vec::with_capacity(seqs.len()); model.heads.len()];
    // dropout is off, so the stream is never drawn from
    let mut rng = stream(0, Stream::Dropout);
    for chunk in seqs.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        for seq in chunk {
            let logits = model.forward(&mut tape, &vars, seq, false, &mut rng)?;
            for (t, l) in logits.into_iter().enumerate() {
                preds[t].push(argmax(tape.value(l).data()));
            }
        }
    }
    Ok(preds)
}

/// Per-batch loss graph built by [`train`]; exposed for gradient checks.
pub struct BatchGraph {
    pub total: Var,
    /// Batch-mean loss per task.
    pub task_losses: Vec<Var>,
    /// Per-task logits of each sample.
    pub logits: Vec<Vec<Var>>,
}

/// Records forward pass and regime loss of one batch on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn batch_graph<R: Rng + ?Sized>(
    tape: &mut Tape,
    vars: &ParamVars,
    model: &Model,
    seqs: &[&TokenSeq],
    labels: &[Vec<usize>],
    weights: &[Option<ClassWeights>],
    training: bool,
    rng: &mut R,
) -> Result<BatchGraph> {
    let n_tasks = model.heads.len();
    let mut per_task: Vec<Vec<Var>> = vec![Vec::with_capacity(seqs.len()); n_tasks];
    let mut logits = Vec::with_capacity(seqs.len());
    for (i, seq) in seqs.iter().enumerate() {
        let l = model.forward(tape, vars, seq, training, rng)?;
        for t in 0..n_tasks {
            per_task[t].push(loss_var(
                tape,
                l[t],
                labels[t][i],
                &model.regime.losses[t],
                weights[t].as_ref(),
            )?);
        }
        logits.push(l);
    }
    let task_losses = per_task.iter().map(|ls| tape.mean(ls)).collect::<Result<Vec<_>>>()?;
    let w = &model.regime.task_weights;
    let total = match model.regime.kind {
        RegimeKind::Stl => tape.lin_comb(&[(task_losses[0], w[0])])?,
        RegimeKind::HardShare => hard_loss(tape, task_losses[0], task_losses[1], [w[0], w[1]])?,
        RegimeKind::SoftShare => {
            let (p0, p1) = (model.encoder_prefix(0), model.encoder_prefix(1));
            soft_loss(
                tape,
                [task_losses[0], task_losses[1]],
                [w[0], w[1]],
                vars,
                [&p0, &p1],
                &model.regime.soft,
                &model.coupled_layers(),
            )?
        }
    };
    Ok(BatchGraph {
        total,
        task_losses,
        logits,
    })
}

/// Class weights per model task from training counts, where the loss uses them.
pub fn task_class_weights(model: &Model, train: &Corpus) -> Result<Vec<Option<ClassWeights>>> {
    let cols = task_columns(model, train)?;
    model
        .regime
        .losses
        .iter()
        .zip(cols)
        .map(|(spec, c)| {
            if spec.weights_apply() {
                class_weights(&class_counts(train, c)).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}

/// Trains `init` for `cfg.epochs` epochs. Each epoch reshuffles with its
/// own seeded stream; each batch runs forward, regime loss, backward, and
/// one clipped AdamW step.
pub fn train(
    model: &Model,
    init: ModelParams,
    train: &Corpus,
    validation: Option<&Corpus>,
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainTrace)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(MtlError::data("training split is empty"));
    }
    init.check_shapes(&model.shapes())?;
    let cols = task_columns(model, train)?;
    let weights = task_class_weights(model, train)?;
    let seqs = encode_all(train, vocab, model.encoder.max_len)?;
    let labels: Vec<Vec<usize>> = cols.iter().map(|&c| train.labels(c)).collect();
    let val = match validation {
        Some(v) if !v.is_empty() => {
            let vcols = task_columns(model, v)?;
            let vseqs = encode_all(v, vocab, model.encoder.max_len)?;
            let vlabels: Vec<Vec<usize>> = vcols.iter().map(|&c| v.labels(c)).collect();
            Some((vcols, vseqs, vlabels, v))
        }
        _ => None,
    };

    let n_tasks = model.heads.len();
    let mut params = init;
    let mut state = AdamWState::new();
    let mut dropout_rng = stream(cfg.seed, Stream::Dropout);
    let mut trace = TrainTrace {
        tasks: model.heads.iter().map(|h| h.task.clone()).collect(),
        ..TrainTrace::default()
    };

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut shuffle_rng = substream(cfg.seed, Stream::Shuffle, epoch as u64);
        let groups = batch_indices(seqs.len(), cfg.batch_size, cfg.shuffle, &mut shuffle_rng)?;
        let mut loss_sum = vec![0.0; n_tasks];
        let mut correct = vec![0usize; n_tasks];
        for (b, group) in groups.iter().enumerate() {
            let batch_seqs: Vec<&TokenSeq> = group.iter().map(|&i| &seqs[i]).collect();
            let batch_labels: Vec<Vec<usize>> = labels.iter().map(|l| group.iter().map(|&i| l[i]).collect()).collect();
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let g = batch_graph(
                &mut tape,
                &vars,
                model,
                &batch_seqs,
                &batch_labels,
                &weights,
                true,
                &mut dropout_rng,
            )?;
            let total = tape.value(g.total).data()[0];
            if !total.is_finite() {
                return Err(MtlError::Numerical(format!(
                    "non-finite loss {total} at epoch {epoch}, batch {}",
                    b + 1
                )));
            }
            for t in 0..n_tasks {
                loss_sum[t] += tape.value(g.task_losses[t]).data()[0] * group.len() as f64;
                for (i, l) in g.logits.iter().enumerate() {
                    if argmax(tape.value(l[t]).data()) == batch_labels[t][i] {
                        correct[t] += 1;
                    }
                }
            }
            let grads = tape.backward(g.total)?.named(&tape);
            adamw_step(params.tensors_mut(), &grads, &mut state, &cfg.optim)?;
        }
        let n = seqs.len() as f64;
        let val_weighted_f1 = match &val {
            Some((vcols, vseqs, vlabels, v)) => {
                let preds = predict(model, &params, vseqs)?;
                let f1s = (0..n_tasks)
                    .map(|t| task_report(&vlabels[t], &preds[t], &v.schemas[vcols[t]]).map(|r| r.weighted.f1))
                    .collect::<Result<Vec<_>>>()?;
                Some(f1s)
            }
            None => None,
        };
        let record = EpochRecord {
            epoch,
            loss: loss_sum.iter().map(|s| s / n).collect(),
            accuracy: correct.iter().map(|&c| c as f64 / n).collect(),
            val_weighted_f1,
        };
        log::info!(
            "epoch {epoch}: loss {:?} acc {:?} val wF1 {:?}",
            record.loss,
            record.accuracy,
            record.val_weighted_f1
        );
        trace.epochs.push(record);
        trace.seconds.push(started.elapsed().as_secs_f64());
    }
    Ok((params, trace))
}
