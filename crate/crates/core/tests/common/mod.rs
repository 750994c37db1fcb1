//! Shared fixtures and checks for the integration tests and the acceptance
//! report.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;

use mtlc::cli::config::{ModelConfig, RunConfig};
use mtlc::data::{load_joint_tsv, schemas_for, Corpus, Language};
use mtlc::encoder::{
    attention, classify, encoder_forward, encoder_shapes, feed_forward, head_shapes, multi_head, EncoderConfig,
    HeadSpec, ModelParams, ParamVars,
};
use mtlc::losses::{batch_loss_var, class_weights, loss_var, LossKind, LossSpec};
use mtlc::mtl::{
    batch_graph, evaluate, train, Model, Penalty, RegimeConfig, RegimeKind, SoftConfig, TrainConfig, TrainTrace,
};
use mtlc::numcore::{
    dropout_var, grad_check, grad_check_named, stream, trace_norm_var, Stream, StreamRng, Tape, Tensor, Var,
};
use mtlc::text::{build_vocab, encode, TokenSeq, Vocab, CLS, PAD, SEP};
use mtlc::Result;

/// Central-difference step.
pub const H: f64 = 1e-5;
/// Largest accepted relative gradient error.
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_SEEDS: u64 = 100;

pub fn rng(seed: u64) -> StreamRng {
    stream(seed, Stream::Custom(17))
}

pub fn normal(rng: &mut StreamRng, shape: &[usize], std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        *x = std * rng.sample::<f64, _>(StandardNormal);
    }
    t
}

/// Uniform draws in [-2, 2].
pub fn uniform(rng: &mut StreamRng, shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        *x = rng.gen_range(-2.0..=2.0);
    }
    t
}

/// Uniform draws in [-2, 2] at least `gap` away from zero, for kinked ops.
pub fn away_from_zero(rng: &mut StreamRng, shape: &[usize], gap: f64) -> Tensor {
    let mut t = uniform(rng, shape);
    for x in t.data_mut() {
        *x = x.signum() * (gap + x.abs() * (2.0 - gap) / 2.0);
    }
    t
}

/// Reduces `y` to a scalar through a fixed random projection, so every
/// element of `y` gets a distinct upstream gradient.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let r = normal(&mut stream(seed, Stream::Custom(99)), &shape, 1.0);
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn map(pairs: Vec<(&str, Tensor)>) -> BTreeMap<String, Tensor> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn worst(errs: Result<BTreeMap<String, f64>>) -> Result<f64> {
    Ok(errs?.into_values().fold(0.0, f64::max))
}

fn unary(seed: u64, x: Tensor, op: impl Fn(&mut Tape, Var) -> Result<Var>) -> Result<f64> {
    grad_check(
        |t, v| {
            let y = op(t, v)?;
            project(t, y, seed)
        },
        &x,
        H,
    )
}

fn binary(seed: u64, a: Tensor, b: Tensor, op: impl Fn(&mut Tape, Var, Var) -> Result<Var>) -> Result<f64> {
    let ps = map(vec![("a", a), ("b", b)]);
    worst(grad_check_named(
        |t, v| {
            let y = op(t, v["a"], v["b"])?;
            project(t, y, seed)
        },
        &ps,
        H,
    ))
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 11,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ffn: 16,
        max_len: 6,
        dropout_p: 0.1,
    }
}

/// Parameters whose gradients sit well above the central-difference noise:
/// matrices drawn with std `1/√fan_in`, so activations stay of order one.
pub fn wide_params(shapes: &[(String, Vec<usize>)], seed: u64) -> BTreeMap<String, Tensor> {
    let mut r = rng(seed ^ 0x5eed);
    shapes
        .iter()
        .map(|(name, shape)| {
            let t = if name.ends_with("_emb") {
                normal(&mut r, shape, 1.0)
            } else if shape.len() == 2 {
                normal(&mut r, shape, 1.0 / (shape[0] as f64).sqrt())
            } else if name.ends_with(".gain") {
                normal(&mut r, shape, 0.2).map(|x| x + 1.0)
            } else {
                normal(&mut r, shape, 0.2)
            };
            (name.clone(), t)
        })
        .collect()
}

/// A random sequence of `max_len` slots with at least one padded slot.
pub fn random_seq(r: &mut StreamRng, cfg: &EncoderConfig) -> TokenSeq {
    let real = r.gen_range(3..cfg.max_len);
    let mut ids = vec![CLS];
    for _ in 0..real - 2 {
        ids.push(r.gen_range(4..cfg.vocab_size as u32));
    }
    ids.push(SEP);
    ids.resize(cfg.max_len, PAD);
    let mask = (0..cfg.max_len).map(|i| u8::from(i < real)).collect();
    TokenSeq {
        ids,
        mask,
        raw_length: real - 2,
    }
}

fn loss_case(seed: u64, spec: LossSpec, weighted: bool) -> Result<f64> {
    let mut r = rng(seed);
    let n = r.gen_range(2..7);
    let target = r.gen_range(0..n);
    let logits = normal(&mut r, &[1, n], 2.0);
    let weights = if weighted {
        Some(class_weights(
            &(0..n).map(|_| r.gen_range(1..50u64)).collect::<Vec<_>>(),
        )?)
    } else {
        None
    };
    grad_check(|t, v| loss_var(t, v, target, &spec, weights.as_ref()), &logits, H)
}

fn hinge_case(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let n = r.gen_range(2..7);
    let target = r.gen_range(0..n);
    // Margins are kept off their kinks.
    let mut logits = away_from_zero(&mut r, &[1, n], 0.0);
    let data = logits.data().to_vec();
    for (j, x) in logits.data_mut().iter_mut().enumerate() {
        if j != target {
            let m = 1.0 + data[j] - data[target];
            if m.abs() < 1e-3 {
                *x += 0.01;
            }
        }
    }
    let spec = LossSpec::new(LossKind::Hinge);
    grad_check(|t, v| loss_var(t, v, target, &spec, None), &logits, H)
}

/// One seeded instance of a single op's gradient check.
pub type GradCase = fn(u64) -> Result<f64>;

/// Every differentiable op of the tape, the encoder and the losses.
pub fn gradient_cases() -> Vec<(&'static str, GradCase)> {
    vec![
        ("matmul", |s| {
            let mut r = rng(s);
            binary(s, uniform(&mut r, &[3, 4]), uniform(&mut r, &[4, 2]), |t, a, b| {
                t.matmul(a, b)
            })
        }),
        ("transpose", |s| {
            unary(s, uniform(&mut rng(s), &[3, 5]), |t, x| Ok(t.transpose(x)))
        }),
        ("add", |s| {
            let mut r = rng(s);
            binary(s, uniform(&mut r, &[3, 4]), uniform(&mut r, &[3, 4]), |t, a, b| {
                t.add(a, b)
            })
        }),
        ("sub", |s| {
            let mut r = rng(s);
            binary(s, uniform(&mut r, &[3, 4]), uniform(&mut r, &[3, 4]), |t, a, b| {
                t.sub(a, b)
            })
        }),
        ("mul", |s| {
            let mut r = rng(s);
            binary(s, uniform(&mut r, &[3, 4]), uniform(&mut r, &[3, 4]), |t, a, b| {
                t.mul(a, b)
            })
        }),
        ("add_row", |s| {
            let mut r = rng(s);
            binary(s, uniform(&mut r, &[3, 4]), uniform(&mut r, &[4]), |t, a, b| {
                t.add_row(a, b)
            })
        }),
        ("scale", |s| {
            unary(s, uniform(&mut rng(s), &[2, 3]), |t, x| Ok(t.scale(x, -1.7)))
        }),
        ("relu", |s| {
            unary(s, away_from_zero(&mut rng(s), &[3, 4], 1e-2), |t, x| Ok(t.relu(x)))
        }),
        ("sigmoid", |s| {
            unary(s, uniform(&mut rng(s), &[3, 4]), |t, x| Ok(t.sigmoid(x)))
        }),
        ("tanh", |s| {
            unary(s, uniform(&mut rng(s), &[3, 4]), |t, x| Ok(t.tanh(x)))
        }),
        ("softmax_rows", |s| {
            unary(s, uniform(&mut rng(s), &[3, 5]), |t, x| Ok(t.softmax_rows(x)))
        }),
        ("layer_norm", |s| {
            let mut r = rng(s);
            let mut g = normal(&mut r, &[6], 0.3);
            for x in g.data_mut() {
                *x += 1.0;
            }
            let ps = map(vec![
                ("x", uniform(&mut r, &[3, 6])),
                ("g", g),
                ("b", uniform(&mut r, &[6])),
            ]);
            worst(grad_check_named(
                |t, v| {
                    let y = t.layer_norm(v["x"], v["g"], v["b"], 1e-12)?;
                    project(t, y, s)
                },
                &ps,
                H,
            ))
        }),
        ("gather", |s| {
            let mut r = rng(s);
            let ids: Vec<usize> = (0..6).map(|_| r.gen_range(0..4)).collect();
            unary(s, uniform(&mut r, &[4, 3]), move |t, x| t.gather(x, &ids))
        }),
        ("slice_rows", |s| {
            unary(s, uniform(&mut rng(s), &[5, 3]), |t, x| t.slice_rows(x, 1, 3))
        }),
        ("slice_cols", |s| {
            unary(s, uniform(&mut rng(s), &[3, 5]), |t, x| t.slice_cols(x, 2, 2))
        }),
        ("concat_rows", |s| {
            let mut r = rng(s);
            binary(s, uniform(&mut r, &[2, 3]), uniform(&mut r, &[1, 3]), |t, a, b| {
                t.concat_rows(&[a, b, a])
            })
        }),
        ("concat_cols", |s| {
            let mut r = rng(s);
            binary(s, uniform(&mut r, &[3, 2]), uniform(&mut r, &[3, 1]), |t, a, b| {
                t.concat_cols(&[b, a])
            })
        }),
        ("mask_mul", |s| {
            let mut r = rng(s);
            let mask: Vec<f64> = (0..12).map(|_| if r.gen_bool(0.7) { 1.0 / 0.7 } else { 0.0 }).collect();
            unary(s, uniform(&mut r, &[3, 4]), move |t, x| t.mask_mul(x, mask.clone()))
        }),
        ("dropout", |s| {
            unary(s, uniform(&mut rng(s), &[3, 4]), move |t, x| {
                let mut d = stream(s, Stream::Dropout);
                dropout_var(t, x, 0.3, true, &mut d)
            })
        }),
        ("sum", |s| {
            grad_check(|t, x| Ok(t.sum(x)), &uniform(&mut rng(s), &[3, 4]), H)
        }),
        ("mean", |s| {
            let mut r = rng(s);
            binary(s, uniform(&mut r, &[2, 2]), uniform(&mut r, &[3]), |t, a, b| {
                let (pa, pb) = (project(t, a, 5)?, project(t, b, 6)?);
                t.mean(&[pa, pb, pa])
            })
        }),
        ("lin_comb", |s| {
            let mut r = rng(s);
            binary(s, uniform(&mut r, &[2, 2]), uniform(&mut r, &[3]), |t, a, b| {
                let (pa, pb) = (project(t, a, 5)?, project(t, b, 6)?);
                t.lin_comb(&[(pa, 0.7), (pb, -1.3)])
            })
        }),
        ("frobenius_sq_distance", |s| {
            let mut r = rng(s);
            let ps = map(vec![("a", uniform(&mut r, &[3, 4])), ("b", uniform(&mut r, &[3, 4]))]);
            worst(grad_check_named(|t, v| t.frobenius_sq_distance(v["a"], v["b"]), &ps, H))
        }),
        ("trace_norm", |s| {
            let mut r = rng(s);
            let (m, n) = (r.gen_range(2..6), r.gen_range(2..6));
            grad_check(trace_norm_var, &uniform(&mut r, &[m, n]), H)
        }),
        ("cross_entropy", |s| {
            loss_case(s, LossSpec::new(LossKind::CrossEntropy), false)
        }),
        ("weighted_cross_entropy", |s| {
            let spec = LossSpec {
                use_class_weights: true,
                ..LossSpec::new(LossKind::CrossEntropy)
            };
            loss_case(s, spec, true)
        }),
        ("focal", |s| {
            let spec = LossSpec {
                focal_gamma: 2.0,
                use_class_weights: true,
                ..LossSpec::new(LossKind::Focal)
            };
            loss_case(s, spec, true)
        }),
        ("hinge", hinge_case),
        ("kld", |s| loss_case(s, LossSpec::new(LossKind::Kld), false)),
        ("batch_loss", |s| {
            let mut r = rng(s);
            let targets = [r.gen_range(0..4), r.gen_range(0..4), r.gen_range(0..4)];
            let spec = LossSpec::new(LossKind::CrossEntropy);
            grad_check(
                |t, x| {
                    let mut ls = Vec::new();
                    for (i, &y) in targets.iter().enumerate() {
                        let row = t.slice_rows(x, i, 1)?;
                        ls.push(loss_var(t, row, y, &spec, None)?);
                    }
                    batch_loss_var(t, &ls)
                },
                &uniform(&mut r, &[3, 4]),
                H,
            )
        }),
        ("attention", |s| {
            let mut r = rng(s);
            let real = r.gen_range(1..=5);
            let mask: Vec<u8> = (0..5).map(|i| u8::from(i < real)).collect();
            let ps = map(vec![
                ("q", uniform(&mut r, &[4, 3])),
                ("k", uniform(&mut r, &[5, 3])),
                ("v", uniform(&mut r, &[5, 3])),
            ]);
            worst(grad_check_named(
                |t, v| {
                    let y = attention(t, v["q"], v["k"], v["v"], &mask)?;
                    project(t, y, s)
                },
                &ps,
                H,
            ))
        }),
        ("multi_head", |s| {
            let cfg = tiny_encoder();
            let mut r = rng(s);
            let seq = random_seq(&mut r, &cfg);
            let mut ps = wide_params(&encoder_shapes("e", &cfg), s);
            ps.retain(|k, _| k.starts_with("e.layer0.attn"));
            ps.insert("x".into(), uniform(&mut r, &[cfg.max_len, cfg.d_model]));
            worst(grad_check_named(
                |t, v| {
                    let vars = ParamVars::from_map(v.clone());
                    let y = multi_head(t, v["x"], &vars, "e.layer0", cfg.n_heads, &seq.mask)?;
                    project(t, y, s)
                },
                &ps,
                H,
            ))
        }),
        ("feed_forward", |s| {
            let cfg = tiny_encoder();
            let mut r = rng(s);
            let mut ps = wide_params(&encoder_shapes("e", &cfg), s);
            ps.retain(|k, _| k.starts_with("e.layer0.ffn"));
            ps.insert("x".into(), uniform(&mut r, &[cfg.max_len, cfg.d_model]));
            worst(grad_check_named(
                |t, v| {
                    let vars = ParamVars::from_map(v.clone());
                    let y = feed_forward(t, v["x"], &vars, "e.layer0")?;
                    project(t, y, s)
                },
                &ps,
                H,
            ))
        }),
        ("encoder_forward", |s| {
            let cfg = tiny_encoder();
            let mut r = rng(s);
            let seq = random_seq(&mut r, &cfg);
            let ps = wide_params(&encoder_shapes("e", &cfg), s);
            worst(grad_check_named(
                |t, v| {
                    let vars = ParamVars::from_map(v.clone());
                    let mut d = stream(s, Stream::Dropout);
                    let y = encoder_forward(t, &seq, &vars, "e", &cfg, true, &mut d)?;
                    project(t, y, s)
                },
                &ps,
                H,
            ))
        }),
        ("classify", |s| {
            let mut r = rng(s);
            let head = HeadSpec::new("t", 4);
            let mut ps = wide_params(&head_shapes("h", &head, 8), s);
            ps.insert("cls".into(), uniform(&mut r, &[1, 8]));
            worst(grad_check_named(
                |t, v| {
                    let vars = ParamVars::from_map(v.clone());
                    let y = classify(t, v["cls"], &vars, "h")?;
                    project(t, y, s)
                },
                &ps,
                H,
            ))
        }),
    ]
}

/// Runs every case over `seeds` and returns the worst error per op.
pub fn gradient_suite(seeds: u64) -> Result<Vec<(&'static str, f64)>> {
    gradient_cases()
        .into_iter()
        .map(|(name, case)| {
            let mut w: f64 = 0.0;
            for s in 0..seeds {
                let e = case(s)?;
                // NaN must not hide behind max().
                w = if e.is_nan() {
                    f64::NAN
                } else if w.is_nan() {
                    w
                } else {
                    w.max(e)
                };
            }
            Ok((name, w))
        })
        .collect()
}

pub fn kannada_corpus() -> Corpus {
    Corpus::new(schemas_for(Language::Kannada), Language::Kannada)
}

pub fn tiny_model(regime: RegimeConfig) -> Model {
    Model::new(tiny_encoder(), regime, &kannada_corpus()).expect("tiny model")
}

pub fn hard_regime() -> RegimeConfig {
    RegimeConfig::hard([mtlc::data::SENTIMENT, mtlc::data::OFFENSE], LossSpec::default())
}

pub fn soft_regime(penalty: Penalty, lambda: f64) -> RegimeConfig {
    let soft = SoftConfig {
        penalty,
        lambda,
        ..SoftConfig::default()
    };
    RegimeConfig::soft([mtlc::data::SENTIMENT, mtlc::data::OFFENSE], LossSpec::default(), soft)
}

/// Worst per-tensor error of the whole regime loss on a two-sample batch,
/// dropout active, every parameter checked.
pub fn end_to_end_check(model: &Model, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let seqs = [random_seq(&mut r, &model.encoder), random_seq(&mut r, &model.encoder)];
    let labels: Vec<Vec<usize>> = model
        .heads
        .iter()
        .map(|h| (0..2).map(|_| r.gen_range(0..h.n_classes)).collect())
        .collect();
    let weights = vec![None; model.heads.len()];
    let ps = wide_params(&model.shapes(), seed);
    let ps = near_towers(model, ps, seed);
    let refs: Vec<&TokenSeq> = seqs.iter().collect();
    worst(grad_check_named(
        |t, v| {
            let vars = ParamVars::from_map(v.clone());
            let mut d = stream(seed, Stream::Dropout);
            Ok(batch_graph(t, &vars, model, &refs, &labels, &weights, true, &mut d)?.total)
        },
        &ps,
        H,
    ))
}

/// For soft sharing, redraws the second tower as a small perturbation of the
/// first; a large coupling penalty would otherwise bury the task gradients
/// under rounding noise of the total.
pub fn near_towers(model: &Model, mut ps: BTreeMap<String, Tensor>, seed: u64) -> BTreeMap<String, Tensor> {
    if model.regime.kind != RegimeKind::SoftShare {
        return ps;
    }
    let (p0, p1) = (model.encoder_prefix(0), model.encoder_prefix(1));
    let mut r = rng(seed ^ 0x70e5);
    let names: Vec<String> = ps
        .keys()
        .filter(|k| k.starts_with(&format!("{p1}.")))
        .cloned()
        .collect();
    for name in names {
        let base = ps[&name.replacen(&p1, &p0, 1)].clone();
        let noise = normal(&mut r, base.shape(), 0.05);
        ps.insert(name, base.zip_map(&noise, "add", |a, b| a + b).expect("same shape"));
    }
    ps
}

pub fn wide_model_params(model: &Model, seed: u64) -> ModelParams {
    ModelParams::from_map(wide_params(&model.shapes(), seed))
}

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn toy_config_path() -> PathBuf {
    fixtures().join("toy").join("toy.conf")
}

/// The bundled toy run configuration with its output sent to `out`.
pub fn toy_run_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::load(&toy_config_path()).expect("toy config");
    cfg.output = out.to_path_buf();
    cfg
}

pub fn toy_model_config() -> ModelConfig {
    toy_run_config(Path::new("unused")).model
}

pub fn toy_corpora() -> (Corpus, Corpus) {
    let schemas = schemas_for(Language::Kannada);
    let load = |f: &str| {
        load_joint_tsv(&fixtures().join("toy").join(f), &schemas, Language::Kannada)
            .expect("toy corpus")
            .0
    };
    (load("train.tsv"), load("validation.tsv"))
}

pub fn mtlc_bin() -> &'static str {
    env!("CARGO_BIN_EXE_mtlc")
}

/// Toy corpora, model settings and vocabulary, as the bundled config builds
/// them.
pub struct Toy {
    pub config: ModelConfig,
    pub train: Corpus,
    pub validation: Corpus,
    pub vocab: Vocab,
}

impl Toy {
    pub fn load() -> Toy {
        let mut config = toy_model_config();
        let (train, validation) = toy_corpora();
        let t = &config.text;
        let vocab = build_vocab(&train.texts(), t.mode, t.min_freq, t.max_size).expect("toy vocab");
        config.encoder.vocab_size = vocab.len();
        Toy {
            config,
            train,
            validation,
            vocab,
        }
    }

    pub fn model(&self, regime: RegimeConfig) -> Model {
        Model::new(self.config.encoder, regime, &self.train).expect("toy model")
    }

    pub fn train(&self, model: &Model, epochs: usize) -> (ModelParams, TrainTrace) {
        let cfg = TrainConfig {
            epochs,
            ..self.config.train.clone()
        };
        train(model, model.init_params(cfg.seed), &self.train, None, &self.vocab, &cfg).expect("toy training")
    }

    /// Inference-mode accuracy per model task on the training split.
    pub fn train_accuracy(&self, model: &Model, params: &ModelParams) -> Vec<f64> {
        let preds = evaluate(model, params, &self.train, &self.vocab).expect("evaluate");
        model
            .heads
            .iter()
            .zip(preds)
            .map(|(h, p)| {
                let gold = self.train.labels(self.train.task_index(&h.task).unwrap());
                gold.iter().zip(&p).filter(|(g, p)| g == p).count() as f64 / gold.len() as f64
            })
            .collect()
    }

    pub fn seqs(&self, n: usize) -> Vec<TokenSeq> {
        self.train.records[..n]
            .iter()
            .map(|r| encode(&r.text, &self.vocab, self.config.encoder.max_len).unwrap())
            .collect()
    }
}

/// Writes a copy of the toy config with absolute data paths, the given
/// output directory and `extra` lines replacing same-key settings; returns
/// its path.
pub fn write_toy_config(dir: &Path, out: &Path, extra: &str) -> PathBuf {
    let toy = fixtures().join("toy");
    let key_of = |line: &str| line.split('=').next().unwrap_or("").trim().to_string();
    let overridden: Vec<String> = extra.lines().map(key_of).collect();
    let mut text = String::new();
    for line in std::fs::read_to_string(toy_config_path()).unwrap().lines() {
        let key = key_of(line);
        if overridden.contains(&key) {
            continue;
        }
        match key.as_str() {
            "data.train" | "data.validation" => {
                let v = line.split('=').nth(1).unwrap().trim();
                text.push_str(&format!("{key} = {}\n", toy.join(v).display()));
            }
            "output.directory" => text.push_str(&format!("{key} = {}\n", out.display())),
            _ => {
                text.push_str(line);
                text.push('\n');
            }
        }
    }
    text.push_str(extra);
    let path = dir.join("toy.conf");
    std::fs::write(&path, text).unwrap();
    path
}
