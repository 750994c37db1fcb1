mod common;

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use proptest::prelude::*;

use common::*;
use mtlc::data::{batches, class_counts, schemas_for, stratified_split, Corpus, Language, Record, SplitRatios};
use mtlc::encoder::{encoder_forward, encoder_shapes, head_shapes, EncoderConfig, HeadSpec, ModelParams, HEAD_HIDDEN};
use mtlc::losses::{class_weights, cross_entropy, focal, hinge_multiclass, kld};
use mtlc::metrics::{confusion, per_class_prf, task_report, weighted_avg};
use mtlc::mtl::{batch_graph, Model};
use mtlc::numcore::{
    adamw_step, dropout, softmax_rows, stream, trace_norm, AdamWState, OptimHyper, Stream, Tape, Tensor,
};
use mtlc::text::{build_vocab, encode, TokenMode, CLS, PAD, SEP};
use rand::Rng;

fn matrix(max: usize) -> impl Strategy<Value = Tensor> {
    (1..=max, 1..=max).prop_flat_map(|(m, n)| {
        prop::collection::vec(-2.0f64..2.0, m * n).prop_map(move |d| Tensor::new(vec![m, n], d).unwrap())
    })
}

fn logits_and_target() -> impl Strategy<Value = (Vec<f64>, usize)> {
    (2usize..8).prop_flat_map(|n| (prop::collection::vec(-8.0f64..8.0, n), 0..n))
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(x in matrix(6), shift in -50.0f64..50.0) {
        let s = softmax_rows(&x);
        let (m, n) = x.dims2();
        for i in 0..m {
            prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let shifted = softmax_rows(&x.map(|v| v + shift));
        prop_assert!(s.max_abs_diff(&shifted) <= 1e-12, "{m}x{n}");
    }

    #[test]
    fn trace_norm_matches_eigen_oracle_and_dominates_frobenius(w in matrix(7)) {
        let (m, n) = w.dims2();
        let (value, _) = trace_norm(&w).unwrap();
        let oracle: f64 = DMatrix::from_row_slice(m, n, w.data()).singular_values().iter().sum();
        prop_assert!((value - oracle).abs() <= 1e-9 * oracle.max(1.0), "{value} vs {oracle}");
        prop_assert!(value >= w.frobenius_norm() - 1e-12);
    }

    #[test]
    fn inference_dropout_is_identity(x in matrix(5), p in 0.0f64..0.9, seed in any::<u64>()) {
        let y = dropout(&x, p, false, &mut stream(seed, Stream::Dropout)).unwrap();
        prop_assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    /// With `lr·steps` below the smallest starting coordinate no coordinate
    /// can cross its minimum, so every step lowers the quadratic.
    #[test]
    fn adamw_descends_convex_quadratic(
        x0 in prop::collection::vec(0.5f64..2.0, 1..6),
        a in prop::collection::vec(0.1f64..10.0, 6),
    ) {
        let hyper = OptimHyper { learning_rate: 1e-3, weight_decay: 0.0, clip_norm: 0.0, ..OptimHyper::default() };
        let loss = |x: &Tensor| x.data().iter().zip(&a).map(|(x, a)| 0.5 * a * x * x).sum::<f64>();
        let mut params = BTreeMap::from([("x".to_string(), Tensor::new(vec![x0.len()], x0.clone()).unwrap())]);
        let mut state = AdamWState::new();
        let mut prev = loss(&params["x"]);
        for _ in 0..200 {
            let g: Vec<f64> = params["x"].data().iter().zip(&a).map(|(x, a)| a * x).collect();
            let grads = BTreeMap::from([("x".to_string(), Tensor::new(vec![x0.len()], g).unwrap())]);
            adamw_step(&mut params, &grads, &mut state, &hyper).unwrap();
            let now = loss(&params["x"]);
            prop_assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn encode_properties(words in prop::collection::vec("[a-e]{1,3}", 0..12), max_len in 3usize..10) {
        let text = words.join(" ");
        let vocab = build_vocab(&[text.as_str()], TokenMode::Word, 1, 100).unwrap();
        let a = encode(&text, &vocab, max_len).unwrap();
        prop_assert_eq!(&a, &encode(&text, &vocab, max_len).unwrap());
        let mask_sum: usize = a.mask.iter().map(|&m| m as usize).sum();
        prop_assert_eq!(mask_sum, 2 + words.len().min(max_len - 2));
        if words.len() <= max_len - 2 {
            prop_assert_eq!(vocab.decode(&a.ids), words);
        }
    }

    #[test]
    fn losses_are_nonnegative((z, y) in logits_and_target(), gamma in 0.0f64..5.0, eps in 0.0f64..0.45) {
        prop_assert!(cross_entropy(&z, y, None).unwrap() >= 0.0);
        prop_assert!(focal(&z, y, gamma, None).unwrap() >= 0.0);
        prop_assert!(hinge_multiclass(&z, y).unwrap() >= 0.0);
        prop_assert!(kld(&z, y, eps).unwrap() >= -1e-15);
    }

    #[test]
    fn equal_count_weights_scale_ce((z, y) in logits_and_target(), count in 1u64..1000) {
        let n = z.len();
        let w = class_weights(&vec![count; n]).unwrap();
        let weighted = cross_entropy(&z, y, Some(&w)).unwrap();
        let plain = cross_entropy(&z, y, None).unwrap();
        prop_assert!((weighted - plain * (n - 1) as f64 / n as f64).abs() <= 1e-12 * plain.max(1.0));
    }

    #[test]
    fn hinge_matches_brute_force_and_scales_linearly((z, y) in logits_and_target(), k in 1.0f64..4.0) {
        let brute = |z: &[f64], m: f64| -> f64 {
            (0..z.len()).filter(|&j| j != y).map(|j| (m + z[j] - z[y]).max(0.0)).sum()
        };
        prop_assert!((hinge_multiclass(&z, y).unwrap() - brute(&z, 1.0)).abs() <= 1e-12);
        // With the margin scaled along, every term scales by k.
        let scaled: Vec<f64> = z.iter().map(|v| v * k).collect();
        prop_assert!((brute(&scaled, k) - k * brute(&z, 1.0)).abs() <= 1e-9);
    }

    #[test]
    fn metric_identities(
        n in 2usize..7,
        pairs in prop::collection::vec((0usize..100, 0usize..100), 1..150),
    ) {
        let golds: Vec<usize> = pairs.iter().map(|p| p.0 % n).collect();
        let preds: Vec<usize> = pairs.iter().map(|p| p.1 % n).collect();
        let cm = confusion(&golds, &preds, n).unwrap();
        for c in 0..n {
            let tp = cm.get(c, c);
            let fp = preds.iter().zip(&golds).filter(|&(&p, &g)| p == c && g != c).count() as u64;
            let fnn = preds.iter().zip(&golds).filter(|&(&p, &g)| p != c && g == c).count() as u64;
            prop_assert_eq!(tp + fp, cm.col_sum(c));
            prop_assert_eq!(tp + fnn, cm.row_sum(c));
        }
        let scores = per_class_prf(&cm);
        for s in &scores {
            for v in [s.precision, s.recall, s.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if s.precision > 0.0 && s.recall > 0.0 {
                prop_assert!(s.f1 >= s.precision.min(s.recall) - 1e-15);
                prop_assert!(s.f1 <= s.precision.max(s.recall) + 1e-15);
            }
        }
        let accuracy = cm.trace() as f64 / cm.total() as f64;
        prop_assert!((weighted_avg(&scores).unwrap().recall - accuracy).abs() <= 1e-12);
        let schema = &schemas_for(Language::Kannada)[0];
        if n == schema.len() {
            let r = task_report(&golds, &preds, schema).unwrap();
            prop_assert!((r.micro.f1 - r.accuracy).abs() <= 1e-12);
        }
    }

    #[test]
    fn split_is_a_stratified_partition(
        counts in prop::collection::vec(0usize..60, 5),
        seed in any::<u64>(),
    ) {
        let mut corpus = Corpus::new(schemas_for(Language::Kannada), Language::Kannada);
        for (class, &n) in counts.iter().enumerate() {
            for i in 0..n {
                corpus.records.push(Record { text: format!("{class}-{i}"), labels: vec![class, i % 6] });
            }
        }
        prop_assume!(!corpus.is_empty());
        let s = stratified_split(&corpus, SplitRatios::default(), seed, 0).unwrap();
        prop_assert_eq!(s.train.len() + s.validation.len() + s.test.len(), corpus.len());
        let mut all: Vec<String> = [&s.train, &s.validation, &s.test]
            .iter()
            .flat_map(|c| c.texts().into_iter().map(str::to_string))
            .collect();
        all.sort();
        let mut want: Vec<String> = corpus.texts().into_iter().map(str::to_string).collect();
        want.sort();
        prop_assert_eq!(all, want);
        for (class, &n) in class_counts(&s.train, 0).iter().enumerate() {
            let full = counts[class];
            if full >= 3 {
                prop_assert!((n as f64 - 0.8 * full as f64).abs() <= 1.0, "class {class}: {n} of {full}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn batch_labels_stay_in_schema(seed in any::<u64>(), bs in 1usize..40) {
        let (train, _) = toy_corpora();
        let vocab = build_vocab(&train.texts(), TokenMode::Word, 1, 100).unwrap();
        for b in batches(&train, bs, true, seed, &vocab, 10).unwrap() {
            for (t, labels) in b.labels.iter().enumerate() {
                prop_assert!(labels.iter().all(|&l| l < train.schemas[t].len()));
            }
            prop_assert!(b.seqs.iter().all(|s| s.ids.iter().all(|&i| (i as usize) < vocab.len())));
        }
    }

    #[test]
    fn encoder_output_width_and_pad_invariance(seed in any::<u64>(), real in 1usize..5, row in prop::collection::vec(-3.0f64..3.0, 8)) {
        let cfg = EncoderConfig { vocab_size: 11, d_model: 8, n_heads: 2, n_layers: 2, d_ffn: 16, max_len: 6, dropout_p: 0.0 };
        let params = ModelParams::from_map(wide_params(&encoder_shapes("e", &cfg), seed));
        let mut r = rng(seed);
        let mut seq = random_seq(&mut r, &cfg);
        // [CLS], `real` content tokens, [SEP], then padding.
        seq.ids = std::iter::once(CLS)
            .chain((0..real).map(|_| r.gen_range(4..cfg.vocab_size as u32)))
            .chain(std::iter::once(SEP))
            .collect();
        seq.ids.resize(cfg.max_len, PAD);
        seq.mask = (0..cfg.max_len).map(|i| u8::from(i < real + 2)).collect();
        let cls = |p: &ModelParams| {
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape);
            let out = encoder_forward(&mut tape, &seq, &vars, "e", &cfg, false, &mut stream(0, Stream::Dropout)).unwrap();
            tape.value(out).clone()
        };
        let base = cls(&params);
        prop_assert_eq!(base.shape(), &[1, cfg.d_model][..]);
        for pos in real + 2..cfg.max_len {
            let mut p = params.clone();
            let emb = p.get_mut("e.pos_emb").unwrap();
            emb.data_mut()[pos * 8..(pos + 1) * 8].copy_from_slice(&row);
            prop_assert!(cls(&p).max_abs_diff(&base) <= 1e-9);
        }
        if real + 2 < cfg.max_len {
            let mut p = params.clone();
            p.get_mut("e.tok_emb").unwrap().data_mut()[..8].copy_from_slice(&row);
            prop_assert!(cls(&p).max_abs_diff(&base) <= 1e-9);
        }
    }

    /// ∂(L1+L2)/∂θ equals ∂L1/∂θ + ∂L2/∂θ for every parameter.
    #[test]
    fn hard_share_gradients_add(seed in any::<u64>()) {
        let model = tiny_model(hard_regime());
        let mut r = rng(seed);
        let seqs = [random_seq(&mut r, &model.encoder), random_seq(&mut r, &model.encoder)];
        let refs: Vec<_> = seqs.iter().collect();
        let labels = vec![vec![0, 4], vec![5, 1]];
        let params = wide_model_params(&model, seed);
        let grads = |weights: Vec<f64>| {
            let mut m: Model = model.clone();
            m.regime.task_weights = weights;
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let g = batch_graph(&mut tape, &vars, &m, &refs, &labels, &[None, None], true, &mut stream(seed, Stream::Dropout)).unwrap();
            tape.backward(g.total).unwrap().named(&tape)
        };
        let (both, first, second) = (grads(vec![1.0, 1.0]), grads(vec![1.0, 0.0]), grads(vec![0.0, 1.0]));
        for (name, g) in &both {
            let sum = first[name].zip_map(&second[name], "add", |a, b| a + b).unwrap();
            prop_assert!(g.max_abs_diff(&sum) <= 1e-12, "{name}");
        }
    }
}

#[test]
fn parameter_count_closed_form() {
    for (v, d, h, l, f, len) in [(11, 8, 2, 2, 16, 6), (300, 64, 4, 2, 128, 64), (50, 12, 3, 1, 7, 9)] {
        let cfg = EncoderConfig {
            vocab_size: v,
            d_model: d,
            n_heads: h,
            n_layers: l,
            d_ffn: f,
            max_len: len,
            dropout_p: 0.1,
        };
        let count = |shapes: Vec<(String, Vec<usize>)>| -> usize {
            shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
        };
        let encoder = v * d + len * d + l * (4 * d * d + d * f + f + f * d + d + 4 * d) + 2 * d + d * d + d;
        assert_eq!(count(encoder_shapes("e", &cfg)), encoder);
        for n in [5, 6] {
            let head = d * HEAD_HIDDEN + HEAD_HIDDEN + HEAD_HIDDEN * n + n;
            assert_eq!(count(head_shapes("h", &HeadSpec::new("t", n), d)), head);
        }
    }
}

/// The trained objective is the weighted task sum; a single task's loss
/// may rise while the sum falls.
#[test]
fn toy_training_objective_does_not_rise_after_first_epoch() {
    let toy = Toy::load();
    let model = toy.model(hard_regime());
    let (_, trace) = toy.train(&model, toy.config.train.epochs);
    let w = &model.regime.task_weights;
    let totals: Vec<f64> = trace
        .epochs
        .iter()
        .map(|e| e.loss[0] * w[0] + e.loss[1] * w[1])
        .collect();
    for pair in totals[1..].windows(2) {
        assert!(pair[1] <= pair[0], "{totals:?}");
    }
}
