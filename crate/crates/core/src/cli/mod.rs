//! Command implementations behind the `mtlc` binary.

pub mod checkpoint;
pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{
    load_joint_tsv, merge_task_files, parse_tsv, schemas_for, split_manifest, stratified_split, Corpus, LabelSchema,
    Language, LoadReport, SplitRatios, SplitSet,
};
use crate::error::{MtlError, Result};
use crate::io::{read_to_string, write_atomic};
use crate::metrics::{build_report, Metric, MetricsReport};
use crate::mtl::{evaluate, train, Model, TrainTrace};
use crate::text::{build_vocab, TokenMode, Vocab};

use checkpoint::Checkpoint;
use config::{DataFormat, ModelConfig, RawConfig, RunConfig, SEED_ENV};

pub const CHECKPOINT_FILE: &str = "checkpoint.mtlc";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const TRACE_FILE: &str = "trace.tsv";
pub const TIMING_FILE: &str = "timing.tsv";
pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_FILE: &str = "predictions.tsv";

fn warn_skipped(source: &Path, report: &LoadReport) {
    for e in &report.bad_rows {
        log::warn!("{}: skipped {e}", source.display());
    }
    if report.duplicates > 0 {
        log::warn!("{}: dropped {} duplicate text(s)", source.display(), report.duplicates);
    }
}

fn load_corpus(paths: &DataFormat, validation: bool, schemas: &[LabelSchema], language: Language) -> Result<Corpus> {
    match paths {
        DataFormat::Joint { train, validation: v } => {
            let p = if validation { v } else { train };
            let (c, rep) = load_joint_tsv(p, schemas, language)?;
            warn_skipped(p, &rep);
            Ok(c)
        }
        DataFormat::Pair { train, validation: v } => {
            let [s, o] = if validation { v } else { train };
            let (c, rep) = merge_task_files(s, o, schemas, language)?;
            warn_skipped(s, &rep.sentiment);
            warn_skipped(o, &rep.offense);
            log::info!(
                "merged {} rows; dropped {} sentiment-only and {} offense-only",
                c.len(),
                rep.dropped_sentiment_only,
                rep.dropped_offense_only
            );
            Ok(c)
        }
    }
}

/// Splits a joint TSV into `train.tsv`, `validation.tsv`, `test.tsv` and
/// `manifest.tsv` under `out_dir`.
pub fn cmd_split(
    input: &Path,
    out_dir: &Path,
    ratios: SplitRatios,
    seed: u64,
    stratify_task: &str,
    language: Language,
) -> Result<(SplitSet, LoadReport)> {
    ratios.validate()?;
    let schemas = schemas_for(language);
    let (corpus, report) = load_joint_tsv(input, &schemas, language)?;
    let task = corpus.task_index(stratify_task)?;
    let split = stratified_split(&corpus, ratios, seed, task)?;
    write_atomic(&out_dir.join("train.tsv"), split.train.to_tsv().as_bytes())?;
    write_atomic(&out_dir.join("validation.tsv"), split.validation.to_tsv().as_bytes())?;
    write_atomic(&out_dir.join("test.tsv"), split.test.to_tsv().as_bytes())?;
    write_atomic(
        &out_dir.join("manifest.tsv"),
        split_manifest(&split, ratios, seed, task).as_bytes(),
    )?;
    Ok((split, report))
}

/// Builds a vocabulary from the texts of a joint TSV.
pub fn cmd_vocab(
    input: &Path,
    out: &Path,
    language: Language,
    mode: TokenMode,
    min_freq: usize,
    max_size: usize,
) -> Result<Vocab> {
    let (corpus, report) = load_joint_tsv(input, &schemas_for(language), language)?;
    warn_skipped(input, &report);
    let vocab = build_vocab(&corpus.texts(), mode, min_freq, max_size)?;
    vocab.save(out)?;
    Ok(vocab)
}

fn predictions_tsv(model: &Model, corpus: &Corpus, preds: &[Vec<usize>]) -> Result<String> {
    let cols = model
        .heads
        .iter()
        .map(|h| corpus.task_index(&h.task))
        .collect::<Result<Vec<_>>>()?;
    let mut s = String::from("index");
    for h in &model.heads {
        let _ = write!(s, "\tgold_{0}\tpred_{0}", h.task);
    }
    s.push('\n');
    for i in 0..corpus.len() {
        let _ = write!(s, "{i}");
        for (t, &c) in cols.iter().enumerate() {
            let classes = &corpus.schemas[c].classes;
            let _ = write!(
                s,
                "\t{}\t{}",
                classes[corpus.records[i].labels[c]], classes[preds[t][i]]
            );
        }
        s.push('\n');
    }
    Ok(s)
}

fn report_for(model: &Model, corpus: &Corpus, preds: Vec<Vec<usize>>) -> Result<MetricsReport> {
    let mut pairs = Vec::new();
    let mut schemas = Vec::new();
    for (h, p) in model.heads.iter().zip(preds) {
        let c = corpus.task_index(&h.task)?;
        pairs.push((corpus.labels(c), p));
        schemas.push(corpus.schemas[c].clone());
    }
    build_report(&pairs, &schemas)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub report: MetricsReport,
    pub trace: TrainTrace,
}

/// Trains per the configuration and writes the checkpoint, vocabulary,
/// trace, timing, validation report and validation predictions.
///
/// The validation report is computed from the f32-rounded parameters that
/// the checkpoint stores.
pub fn cmd_train(config_path: &Path, seed: Option<u64>) -> Result<TrainOutcome> {
    let mut cfg = RunConfig::load(config_path)?;
    let env = std::env::var(SEED_ENV).ok();
    cfg.apply_seed(seed, env.as_deref())?;
    run_training(cfg)
}

pub fn run_training(cfg: RunConfig) -> Result<TrainOutcome> {
    let mut mc = cfg.model.clone();
    let schemas = schemas_for(mc.language);
    let train_set = load_corpus(&cfg.data, false, &schemas, mc.language)?;
    let val_set = load_corpus(&cfg.data, true, &schemas, mc.language)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(MtlError::data("training and validation splits must be non-empty"));
    }
    let vocab = match &mc.text.vocab_file {
        Some(p) => {
            let v = Vocab::load(p)?;
            if v.mode() != mc.text.mode {
                return Err(MtlError::config(format!(
                    "text.vocab_file is a {} vocabulary but text.mode is {}",
                    v.mode(),
                    mc.text.mode
                )));
            }
            v
        }
        None => build_vocab(&train_set.texts(), mc.text.mode, mc.text.min_freq, mc.text.max_size)?,
    };
    mc.encoder.vocab_size = vocab.len();
    let model = Model::new(mc.encoder, mc.regime.clone(), &train_set)?;
    let init = model.init_params(mc.train.seed);
    let (params, trace) = train(&model, init, &train_set, Some(&val_set), &vocab, &mc.train)?;
    let params = params.round_to_f32();
    let preds = evaluate(&model, &params, &val_set, &vocab)?;
    let predictions = predictions_tsv(&model, &val_set, &preds)?;
    let report = report_for(&model, &val_set, preds)?;

    let out = &cfg.output;
    vocab.save(&out.join(VOCAB_FILE))?;
    Checkpoint {
        config_text: mc.to_text(VOCAB_FILE),
        params,
    }
    .save(&out.join(CHECKPOINT_FILE))?;
    write_atomic(&out.join(TRACE_FILE), trace.to_tsv().as_bytes())?;
    write_atomic(&out.join(TIMING_FILE), trace.timing_tsv().as_bytes())?;
    write_atomic(&out.join(REPORT_FILE), report.to_json().as_bytes())?;
    write_atomic(&out.join(PREDICTIONS_FILE), predictions.as_bytes())?;
    Ok(TrainOutcome {
        out_dir: out.clone(),
        report,
        trace,
    })
}

/// A checkpoint with its configuration, vocabulary and model layout.
pub struct LoadedModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub model: Model,
    pub checkpoint: Checkpoint,
}

pub fn load_model(checkpoint_path: &Path) -> Result<LoadedModel> {
    let checkpoint = Checkpoint::load(checkpoint_path)?;
    let base = checkpoint_path.parent().unwrap_or(Path::new("."));
    let config = ModelConfig::from_raw(&RawConfig::parse(&checkpoint.config_text)?, base)?;
    let vocab_path = config.text.vocab_file.clone().ok_or_else(|| MtlError::Corrupt {
        path: checkpoint_path.to_path_buf(),
        reason: "configuration names no vocabulary file".into(),
    })?;
    let vocab = Vocab::load(&vocab_path)?;
    if vocab.len() != config.encoder.vocab_size {
        return Err(MtlError::Corrupt {
            path: vocab_path,
            reason: format!(
                "vocabulary has {} entries, checkpoint expects {}",
                vocab.len(),
                config.encoder.vocab_size
            ),
        });
    }
    let model = Model::new(config.encoder, config.regime.clone(), &config.schema_corpus())?;
    checkpoint.check_params(&model.shapes(), checkpoint_path)?;
    Ok(LoadedModel {
        config,
        vocab,
        model,
        checkpoint,
    })
}

fn check_header(path: &Path, text: &str, schemas: &[LabelSchema]) -> Result<()> {
    let Some(first) = text.lines().find(|l| !l.trim().is_empty()) else {
        return Ok(());
    };
    let cols: Vec<String> = first.split('\t').map(|c| c.trim().to_lowercase()).collect();
    if cols.first().map(String::as_str) != Some("text") {
        return Ok(());
    }
    let want: Vec<String> = std::iter::once("text".to_string())
        .chain(schemas.iter().map(|s| s.task.clone()))
        .collect();
    if cols != want {
        return Err(MtlError::config(format!(
            "{}: columns {cols:?} do not match the checkpoint tasks {want:?}",
            path.display()
        )));
    }
    Ok(())
}

/// Evaluates a checkpoint on a joint TSV and writes the report JSON to
/// `out` (default `eval_report.json` beside the checkpoint) and the
/// predictions beside it.
pub fn cmd_evaluate(
    checkpoint_path: &Path,
    data: &Path,
    out: Option<&Path>,
    language: Option<Language>,
) -> Result<MetricsReport> {
    let loaded = load_model(checkpoint_path)?;
    let lang = loaded.config.language;
    if let Some(l) = language.filter(|&l| l != lang) {
        return Err(MtlError::config(format!(
            "data language {l} differs from checkpoint language {lang}"
        )));
    }
    let schemas = schemas_for(lang);
    let text = read_to_string(data)?;
    check_header(data, &text, &schemas)?;
    let (corpus, rep) = parse_tsv(&data.display().to_string(), &text, &schemas, lang)?;
    warn_skipped(data, &rep);
    if corpus.is_empty() {
        return Err(MtlError::data(format!("{}: no rows to evaluate", data.display())));
    }
    let preds = evaluate(&loaded.model, &loaded.checkpoint.params, &corpus, &loaded.vocab)?;
    let predictions = predictions_tsv(&loaded.model, &corpus, &preds)?;
    let report = report_for(&loaded.model, &corpus, preds)?;
    let out = match out {
        Some(p) => p.to_path_buf(),
        None => checkpoint_path.with_file_name("eval_report.json"),
    };
    write_atomic(&out, report.to_json().as_bytes())?;
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    write_atomic(
        &out.with_file_name(format!("{stem}.predictions.tsv")),
        predictions.as_bytes(),
    )?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub task: String,
    pub metric: String,
    pub row: String,
    /// One value per run; `None` when the run lacks the task.
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub runs: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

fn run_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

/// Collects `report.json` of each run into per-task rows of class scores
/// followed by the macro and weighted rows.
pub fn cmd_report(runs: &[PathBuf]) -> Result<Comparison> {
    if runs.is_empty() {
        return Err(MtlError::config("at least one run directory is required"));
    }
    let mut names = Vec::new();
    let mut reports = Vec::new();
    for r in runs {
        let name = run_name(r);
        let path = r.join(REPORT_FILE);
        let text = read_to_string(&path)
            .map_err(|_| MtlError::data(format!("run {name}: missing report file {}", path.display())))?;
        let rep = MetricsReport::from_json(&text).map_err(|e| MtlError::data(format!("run {name}: {e}")))?;
        names.push(name);
        reports.push(rep);
    }
    let mut tasks: Vec<String> = Vec::new();
    for rep in &reports {
        for t in &rep.tasks {
            if !tasks.contains(&t.task) {
                tasks.push(t.task.clone());
            }
        }
    }
    let mut rows = Vec::new();
    for task in &tasks {
        let template = reports.iter().find_map(|r| r.task(task)).expect("task seen");
        for metric in Metric::ALL {
            let labels: Vec<String> = template.rows(metric).into_iter().map(|(l, _)| l).collect();
            for label in &labels {
                let values = reports
                    .iter()
                    .map(|r| {
                        r.task(task)
                            .and_then(|t| t.rows(metric).into_iter().find(|(l, _)| l == label))
                            .map(|(_, v)| v)
                    })
                    .collect();
                rows.push(ComparisonRow {
                    task: task.clone(),
                    metric: metric.name().to_string(),
                    row: label.clone(),
                    values,
                });
            }
        }
    }
    Ok(Comparison { runs: names, rows })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.5}")).unwrap_or_else(|| "-".into())
}

impl Comparison {
    /// Every metric row, one column per run.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("task\tmetric\trow");
        for r in &self.runs {
            let _ = write!(s, "\t{r}");
        }
        s.push('\n');
        for row in &self.rows {
            let _ = write!(s, "{}\t{}\t{}", row.task, row.metric, row.row);
            for v in &row.values {
                let _ = write!(s, "\t{}", cell(*v));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| MtlError::data("empty comparison table"))?;
        let runs: Vec<String> = header.split('\t').skip(3).map(str::to_string).collect();
        let mut rows = Vec::new();
        for line in lines {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != runs.len() + 3 {
                return Err(MtlError::data(format!("bad comparison row {line:?}")));
            }
            let values = cols[3..]
                .iter()
                .map(|c| match *c {
                    "-" => Ok(None),
                    v => v
                        .parse::<f64>()
                        .map(Some)
                        .map_err(|_| MtlError::data(format!("bad value {v:?}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(ComparisonRow {
                task: cols[0].into(),
                metric: cols[1].into(),
                row: cols[2].into(),
                values,
            });
        }
        Ok(Comparison { runs, rows })
    }

    /// Aligned F1 table per task; with several runs, each later run also
    /// gets a delta column against the first.
    pub fn to_text(&self) -> String {
        let mut header = vec!["".to_string()];
        header.extend(self.runs.iter().cloned());
        for r in self.runs.iter().skip(1) {
            header.push(format!("Δ {r}"));
        }
        let mut out = String::new();
        let mut tasks: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !tasks.contains(&r.task.as_str()) {
                tasks.push(&r.task);
            }
        }
        for task in tasks {
            let mut table = vec![header.clone()];
            for row in self
                .rows
                .iter()
                .filter(|r| r.task == task && r.metric == Metric::F1.name())
            {
                let mut line = vec![row.row.clone()];
                line.extend(row.values.iter().map(|v| cell(*v)));
                for v in row.values.iter().skip(1) {
                    line.push(match (row.values[0], v) {
                        (Some(a), Some(b)) => format!("{:+.5}", b - a),
                        _ => "-".into(),
                    });
                }
                table.push(line);
            }
            let widths: Vec<usize> = (0..header.len())
                .map(|c| table.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
                .collect();
            let _ = writeln!(out, "{task} (F1)");
            for line in &table {
                let mut l = String::new();
                for (c, v) in line.iter().enumerate() {
                    let pad = widths[c] - v.chars().count();
                    if c == 0 {
                        let _ = write!(l, "{v}{}", " ".repeat(pad));
                    } else {
                        let _ = write!(l, "  {}{v}", " ".repeat(pad));
                    }
                }
                let _ = writeln!(out, "{}", l.trim_end());
            }
            out.push('\n');
        }
        out
    }
}
