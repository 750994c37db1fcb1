//! Run configuration: flat `section.key = value` lines with `#` comments.
//!
//! Relative paths resolve against the directory of the configuration file.
//! Every field is validated before any work starts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{schemas_for, Corpus, Language, OFFENSE, SENTIMENT};
use crate::encoder::EncoderConfig;
use crate::error::{MtlError, Result};
use crate::io::read_to_string;
use crate::losses::{LossKind, LossSpec};
use crate::mtl::{Penalty, RegimeConfig, RegimeKind, SoftConfig, TrainConfig, BATCH_SIZES};
use crate::numcore::OptimHyper;
use crate::text::TokenMode;

/// Environment variable overriding `train.seed`.
pub const SEED_ENV: &str = "MTLC_SEED";

const KEYS: &[&str] = &[
    "data.format",
    "data.language",
    "data.train",
    "data.validation",
    "data.train_sentiment",
    "data.train_offense",
    "data.validation_sentiment",
    "data.validation_offense",
    "text.mode",
    "text.min_freq",
    "text.max_size",
    "text.max_len",
    "text.vocab_file",
    "model.vocab_size",
    "model.d_model",
    "model.n_heads",
    "model.n_layers",
    "model.d_ffn",
    "model.dropout",
    "regime.kind",
    "regime.tasks",
    "regime.loss",
    "regime.loss_sentiment",
    "regime.loss_offense",
    "regime.focal_gamma",
    "regime.kld_epsilon",
    "regime.class_weights",
    "regime.task_weights",
    "regime.soft_penalty",
    "regime.soft_lambda",
    "regime.soft_layers",
    "regime.soft_lambda_override",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.epsilon",
    "train.weight_decay",
    "train.clip_norm",
    "train.seed",
    "train.shuffle",
    "output.directory",
];

/// Parsed `key = value` pairs in file order of first appearance.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = match line.find('#') {
                Some(p) => &line[..p],
                None => line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MtlError::config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(MtlError::config(format!("line {}: unknown key {k:?}", i + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(MtlError::config(format!("line {}: duplicate key {k}", i + 1)));
            }
        }
        Ok(RawConfig { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    fn parsed<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| MtlError::config(format!("{key}: cannot parse {v:?}"))),
        }
    }

    fn required(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| MtlError::config(format!("{key} is required")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataFormat {
    /// One file per split with `text, sentiment, offense` columns.
    Joint { train: PathBuf, validation: PathBuf },
    /// One `text, label` file per task and split, joined on text.
    Pair {
        train: [PathBuf; 2],
        validation: [PathBuf; 2],
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextConfig {
    pub mode: TokenMode,
    pub min_freq: usize,
    pub max_size: usize,
    pub max_len: usize,
    /// Existing vocabulary to use instead of building one.
    pub vocab_file: Option<PathBuf>,
}

/// Model-defining settings; these are what a checkpoint embeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub language: Language,
    pub text: TextConfig,
    pub encoder: EncoderConfig,
    pub regime: RegimeConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataFormat,
    pub model: ModelConfig,
    pub output: PathBuf,
}

fn list(v: &str) -> Vec<String> {
    v.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn number(key: &str, v: &str) -> Result<f64> {
    v.trim()
        .parse::<f64>()
        .map_err(|_| MtlError::config(format!("{key}: cannot parse {v:?}")))
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn check_exists(key: &str, p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(MtlError::config(format!("{key}: file {} not found", p.display())))
    }
}

fn positive(key: &str, v: usize) -> Result<usize> {
    if v == 0 {
        Err(MtlError::config(format!("{key} must be at least 1")))
    } else {
        Ok(v)
    }
}

impl ModelConfig {
    /// Parses the model-defining sections. `vocab_size` falls back to 0
    /// until a vocabulary is known.
    pub fn from_raw(raw: &RawConfig, base: &Path) -> Result<Self> {
        let language: Language = raw.get("data.language").unwrap_or("kannada").parse()?;
        let text = TextConfig {
            mode: raw.get("text.mode").unwrap_or("char").parse()?,
            min_freq: positive("text.min_freq", raw.parsed("text.min_freq", 1)?)?,
            max_size: positive("text.max_size", raw.parsed("text.max_size", 20_000)?)?,
            max_len: raw.parsed("text.max_len", 64)?,
            vocab_file: raw.get("text.vocab_file").map(|p| resolve(base, p)),
        };
        let encoder = EncoderConfig {
            vocab_size: raw.parsed("model.vocab_size", 0)?,
            d_model: raw.parsed("model.d_model", 64)?,
            n_heads: raw.parsed("model.n_heads", 4)?,
            n_layers: raw.parsed("model.n_layers", 2)?,
            d_ffn: raw.parsed("model.d_ffn", 128)?,
            max_len: text.max_len,
            dropout_p: raw.parsed("model.dropout", 0.4)?,
        };
        if text.max_len < 3 {
            return Err(MtlError::config("text.max_len must be at least 3"));
        }
        EncoderConfig {
            vocab_size: 1,
            ..encoder
        }
        .validate()?;

        let regime = parse_regime(raw)?;
        let train = parse_train(raw)?;
        Ok(ModelConfig {
            language,
            text,
            encoder,
            regime,
            train,
        })
    }

    /// Canonical text form; paths other than the vocabulary are omitted.
    pub fn to_text(&self, vocab_file: &str) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("data.language", self.language.to_string());
        kv("text.mode", self.text.mode.to_string());
        kv("text.min_freq", self.text.min_freq.to_string());
        kv("text.max_size", self.text.max_size.to_string());
        kv("text.max_len", self.text.max_len.to_string());
        kv("text.vocab_file", vocab_file.to_string());
        let e = &self.encoder;
        kv("model.vocab_size", e.vocab_size.to_string());
        kv("model.d_model", e.d_model.to_string());
        kv("model.n_heads", e.n_heads.to_string());
        kv("model.n_layers", e.n_layers.to_string());
        kv("model.d_ffn", e.d_ffn.to_string());
        kv("model.dropout", e.dropout_p.to_string());
        let r = &self.regime;
        kv("regime.kind", r.kind.to_string());
        kv("regime.tasks", r.tasks.join(","));
        for (t, l) in r.tasks.iter().zip(&r.losses) {
            kv(&format!("regime.loss_{t}"), l.kind.to_string());
        }
        kv("regime.focal_gamma", r.losses[0].focal_gamma.to_string());
        kv("regime.kld_epsilon", r.losses[0].kld_epsilon.to_string());
        kv("regime.class_weights", r.losses[0].use_class_weights.to_string());
        kv(
            "regime.task_weights",
            r.task_weights.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        );
        kv("regime.soft_penalty", r.soft.penalty.to_string());
        kv("regime.soft_lambda", r.soft.lambda.to_string());
        if !r.soft.coupled.is_empty() {
            kv("regime.soft_layers", r.soft.coupled.join(","));
        }
        if !r.soft.lambda_overrides.is_empty() {
            let o: Vec<String> = r
                .soft
                .lambda_overrides
                .iter()
                .map(|(k, v)| format!("{k}:{v}"))
                .collect();
            kv("regime.soft_lambda_override", o.join(","));
        }
        let t = &self.train;
        kv("train.epochs", t.epochs.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.lr", t.optim.learning_rate.to_string());
        kv("train.beta1", t.optim.beta1.to_string());
        kv("train.beta2", t.optim.beta2.to_string());
        kv("train.epsilon", t.optim.epsilon.to_string());
        kv("train.weight_decay", t.optim.weight_decay.to_string());
        kv("train.clip_norm", t.optim.clip_norm.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.shuffle", t.shuffle.to_string());
        s
    }

    /// An empty corpus carrying this language's schemas.
    pub fn schema_corpus(&self) -> Corpus {
        Corpus::new(schemas_for(self.language), self.language)
    }
}

fn parse_regime(raw: &RawConfig) -> Result<RegimeConfig> {
    let kind: RegimeKind = raw.get("regime.kind").unwrap_or("hard").parse()?;
    let tasks = match raw.get("regime.tasks") {
        Some(v) => list(v),
        None if kind == RegimeKind::Stl => vec![SENTIMENT.to_string()],
        None => vec![SENTIMENT.to_string(), OFFENSE.to_string()],
    };
    for t in &tasks {
        if t != SENTIMENT && t != OFFENSE {
            return Err(MtlError::config(format!("regime.tasks: unknown task {t:?}")));
        }
    }
    let base_kind: LossKind = raw.get("regime.loss").unwrap_or("ce").parse()?;
    let gamma = raw.parsed("regime.focal_gamma", 2.0)?;
    let epsilon = raw.parsed("regime.kld_epsilon", 0.1)?;
    let weights_on = raw.parsed("regime.class_weights", false)?;
    let losses = tasks
        .iter()
        .map(|t| {
            let kind = match raw.get(&format!("regime.loss_{t}")) {
                Some(v) => v.parse()?,
                None => base_kind,
            };
            Ok(LossSpec {
                kind,
                focal_gamma: gamma,
                kld_epsilon: epsilon,
                use_class_weights: weights_on,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let task_weights = match raw.get("regime.task_weights") {
        Some(v) => list(v)
            .iter()
            .map(|x| number("regime.task_weights", x))
            .collect::<Result<Vec<_>>>()?,
        None => vec![1.0; tasks.len()],
    };
    let mut lambda_overrides = BTreeMap::new();
    if let Some(v) = raw.get("regime.soft_lambda_override") {
        for item in list(v) {
            let (layer, l) = item.split_once(':').ok_or_else(|| {
                MtlError::config(format!(
                    "regime.soft_lambda_override: expected layer:lambda, got {item:?}"
                ))
            })?;
            lambda_overrides.insert(layer.trim().to_string(), number("regime.soft_lambda_override", l)?);
        }
    }
    let soft = SoftConfig {
        penalty: raw
            .get("regime.soft_penalty")
            .unwrap_or("frobenius")
            .parse::<Penalty>()?,
        lambda: raw.parsed("regime.soft_lambda", 1e-3)?,
        coupled: raw.get("regime.soft_layers").map(list).unwrap_or_default(),
        lambda_overrides,
    };
    let regime = RegimeConfig {
        kind,
        tasks,
        losses,
        task_weights,
        soft,
    };
    regime.validate()?;
    Ok(regime)
}

const OPTIM_KEYS: [(&str, &str); 6] = [
    ("learning_rate", "train.lr"),
    ("beta1", "train.beta1"),
    ("beta2", "train.beta2"),
    ("epsilon", "train.epsilon"),
    ("weight_decay", "train.weight_decay"),
    ("clip_norm", "train.clip_norm"),
];

fn parse_train(raw: &RawConfig) -> Result<TrainConfig> {
    let d = OptimHyper::default();
    let cfg = TrainConfig {
        epochs: raw.parsed("train.epochs", 5)?,
        batch_size: raw.parsed("train.batch_size", 32)?,
        optim: OptimHyper {
            learning_rate: raw.parsed("train.lr", d.learning_rate)?,
            beta1: raw.parsed("train.beta1", d.beta1)?,
            beta2: raw.parsed("train.beta2", d.beta2)?,
            epsilon: raw.parsed("train.epsilon", d.epsilon)?,
            weight_decay: raw.parsed("train.weight_decay", d.weight_decay)?,
            clip_norm: raw.parsed("train.clip_norm", d.clip_norm)?,
        },
        seed: raw.parsed("train.seed", 0)?,
        shuffle: raw.parsed("train.shuffle", true)?,
    };
    if !BATCH_SIZES.contains(&cfg.batch_size) {
        return Err(MtlError::config(format!(
            "train.batch_size {} must be one of {BATCH_SIZES:?}",
            cfg.batch_size
        )));
    }
    cfg.validate().map_err(|e| match e {
        MtlError::Config(m) => {
            let key = OPTIM_KEYS
                .iter()
                .find(|(field, _)| m.contains(&format!("field {field} ")))
                .map(|(_, key)| *key);
            match key {
                Some(k) => MtlError::config(format!("{k} out of bounds")),
                None => MtlError::Config(m),
            }
        }
        other => other,
    })?;
    Ok(cfg)
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let raw = RawConfig::parse(text)?;
        let model = ModelConfig::from_raw(&raw, base)?;
        let format = raw.get("data.format").unwrap_or("joint");
        let data = match format {
            "joint" => DataFormat::Joint {
                train: resolve(base, raw.required("data.train")?),
                validation: resolve(base, raw.required("data.validation")?),
            },
            "pair" => {
                let p = |k: &str| raw.required(k).map(|v| resolve(base, v));
                DataFormat::Pair {
                    train: [p("data.train_sentiment")?, p("data.train_offense")?],
                    validation: [p("data.validation_sentiment")?, p("data.validation_offense")?],
                }
            }
            other => return Err(MtlError::config(format!("data.format: unknown format {other:?}"))),
        };
        match &data {
            DataFormat::Joint { train, validation } => {
                check_exists("data.train", train)?;
                check_exists("data.validation", validation)?;
            }
            DataFormat::Pair { train, validation } => {
                check_exists("data.train_sentiment", &train[0])?;
                check_exists("data.train_offense", &train[1])?;
                check_exists("data.validation_sentiment", &validation[0])?;
                check_exists("data.validation_offense", &validation[1])?;
            }
        }
        if let Some(v) = &model.text.vocab_file {
            check_exists("text.vocab_file", v)?;
        }
        let output = resolve(base, raw.required("output.directory")?);
        Ok(RunConfig { data, model, output })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Applies the seed precedence flag, then environment, then file.
    pub fn apply_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> Result<()> {
        if let Some(s) = flag {
            self.model.train.seed = s;
        } else if let Some(v) = env {
            self.model.train.seed = v
                .trim()
                .parse()
                .map_err(|_| MtlError::config(format!("{SEED_ENV}: cannot parse {v:?}")))?;
        }
        Ok(())
    }
}
