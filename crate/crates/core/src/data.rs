//! Corpus ingestion, label schemas, stratified splitting, and batching.

use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use unicode_normalization::UnicodeNormalization;

use crate::error::{MtlError, Result};
use crate::io::read_to_string;
use crate::numcore::{stream, Stream};
use crate::text::{encode, TokenSeq, Vocab};

pub const SENTIMENT: &str = "sentiment";
pub const OFFENSE: &str = "offense";
/// Fraction of bad rows above which ingestion fails.
pub const MAX_BAD_ROW_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Language {
    #[default]
    Kannada,
    Malayalam,
    Tamil,
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Language::Kannada => "kannada",
            Language::Malayalam => "malayalam",
            Language::Tamil => "tamil",
        })
    }
}

impl FromStr for Language {
    type Err = MtlError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "kannada" => Ok(Language::Kannada),
            "malayalam" => Ok(Language::Malayalam),
            "tamil" => Ok(Language::Tamil),
            other => Err(MtlError::config(format!("unknown language {other:?}"))),
        }
    }
}

/// Ordered class names of one task; the position is the label id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSchema {
    pub task: String,
    pub classes: Vec<String>,
}

fn normalize_label(s: &str) -> String {
    s.trim().to_lowercase().replace('_', " ")
}

impl LabelSchema {
    pub fn new(task: impl Into<String>, classes: &[&str]) -> Result<Self> {
        let classes: Vec<String> = classes.iter().map(|c| c.to_string()).collect();
        let mut seen = std::collections::HashSet::new();
        for c in &classes {
            if !seen.insert(normalize_label(c)) {
                return Err(MtlError::config(format!("duplicate class name {c:?}")));
            }
        }
        Ok(LabelSchema {
            task: task.into(),
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Case-insensitive match after trimming; `_` is read as a space.
    pub fn id_of(&self, label: &str) -> Option<usize> {
        let key = normalize_label(label);
        self.classes.iter().position(|c| normalize_label(c) == key)
    }
}

/// The sentiment and offense schemas of a language, in that order.
pub fn schemas_for(language: Language) -> Vec<LabelSchema> {
    let sentiment = LabelSchema::new(
        SENTIMENT,
        &["Positive", "Negative", "Mixed feelings", "Neutral", "Other language"],
    )
    .expect("static schema");
    let mut offense = vec![
        "Not offensive",
        "Offensive untargeted",
        "Offensive targeted individual",
        "Offensive targeted group",
        "Offensive targeted others",
        "Other language",
    ];
    if language == Language::Malayalam {
        offense.retain(|c| *c != "Offensive targeted others");
    }
    let offense = LabelSchema::new(OFFENSE, &offense).expect("static schema");
    vec![sentiment, offense]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub text: String,
    /// One label id per task, in schema order.
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub records: Vec<Record>,
    pub schemas: Vec<LabelSchema>,
    pub language: Language,
}

impl Corpus {
    pub fn new(schemas: Vec<LabelSchema>, language: Language) -> Self {
        Corpus {
            records: Vec::new(),
            schemas,
            language,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn task_index(&self, task: &str) -> Result<usize> {
        self.schemas
            .iter()
            .position(|s| s.task == task)
            .ok_or_else(|| MtlError::config(format!("unknown task {task:?}")))
    }

    pub fn texts(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.text.as_str()).collect()
    }

    pub fn labels(&self, task: usize) -> Vec<usize> {
        self.records.iter().map(|r| r.labels[task]).collect()
    }

    fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            schemas: self.schemas.clone(),
            language: self.language,
        }
    }

    /// Three-column TSV with a header row.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("text");
        for schema in &self.schemas {
            s.push('\t');
            s.push_str(&schema.task);
        }
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.text);
            for (schema, &l) in self.schemas.iter().zip(&r.labels) {
                s.push('\t');
                s.push_str(&schema.classes[l]);
            }
            s.push('\n');
        }
        s
    }
}

/// NFC-normalized, trimmed text; the identity used for deduplication.
pub fn normalize_text(text: &str) -> String {
    text.trim().nfc().collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub rows: usize,
    pub bad_rows: Vec<RowError>,
    pub duplicates: usize,
}

fn too_many_bad(rows: usize, bad: usize) -> bool {
    rows > 0 && bad as f64 > MAX_BAD_ROW_FRACTION * rows as f64
}

fn fail_bad_rows(source: &str, rows: usize, bad: &[RowError]) -> MtlError {
    let mut msg = format!("{source}: {} of {rows} rows rejected", bad.len());
    for e in bad.iter().take(20) {
        let _ = write!(msg, "\n  {e}");
    }
    if bad.len() > 20 {
        let _ = write!(msg, "\n  ... {} more", bad.len() - 20);
    }
    MtlError::data(msg)
}

/// Data lines of a TSV with 1-based line numbers, header and blank lines
/// removed. A first line whose first column is `text` is a header.
fn data_lines(text: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut first = true;
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        if first {
            first = false;
            let head = line.split('\t').next().unwrap_or("");
            if head.trim().eq_ignore_ascii_case("text") {
                continue;
            }
        }
        out.push((i + 1, line));
    }
    out
}

fn parse_row(line: &str, schemas: &[LabelSchema]) -> std::result::Result<(String, Vec<usize>), String> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != schemas.len() + 1 {
        return Err(format!(
            "expected {} tab-separated columns, found {}",
            schemas.len() + 1,
            cols.len()
        ));
    }
    let text = normalize_text(cols[0]);
    let mut labels = Vec::with_capacity(schemas.len());
    for (schema, raw) in schemas.iter().zip(&cols[1..]) {
        match schema.id_of(raw) {
            Some(id) => labels.push(id),
            None => return Err(format!("unknown {} label {:?}", schema.task, raw.trim())),
        }
    }
    Ok((text, labels))
}

/// Parses TSV text whose label columns follow `schemas`.
pub fn parse_tsv(
    source: &str,
    text: &str,
    schemas: &[LabelSchema],
    language: Language,
) -> Result<(Corpus, LoadReport)> {
    let mut corpus = Corpus::new(schemas.to_vec(), language);
    let mut report = LoadReport::default();
    let mut seen: HashMap<String, ()> = HashMap::new();
    for (line_no, line) in data_lines(text) {
        report.rows += 1;
        match parse_row(line, schemas) {
            Ok((text, labels)) => {
                if seen.insert(text.clone(), ()).is_some() {
                    report.duplicates += 1;
                    continue;
                }
                corpus.records.push(Record { text, labels });
            }
            Err(message) => report.bad_rows.push(RowError { line: line_no, message }),
        }
    }
    if too_many_bad(report.rows, report.bad_rows.len()) {
        return Err(fail_bad_rows(source, report.rows, &report.bad_rows));
    }
    Ok((corpus, report))
}

/// Loads a `text, sentiment, offense` TSV. Exact duplicate texts keep their
/// first occurrence; bad rows are skipped unless they exceed 1% of rows.
pub fn load_joint_tsv(path: &Path, schemas: &[LabelSchema], language: Language) -> Result<(Corpus, LoadReport)> {
    if schemas.len() != 2 {
        return Err(MtlError::contract("joint files carry exactly two tasks"));
    }
    let text = read_to_string(path)?;
    parse_tsv(&path.display().to_string(), &text, schemas, language)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeReport {
    pub sentiment: LoadReport,
    pub offense: LoadReport,
    pub dropped_sentiment_only: usize,
    pub dropped_offense_only: usize,
}

/// Inner join of two `text, label` files on normalized text, in the order
/// of the sentiment file.
pub fn merge_task_files(
    sentiment_path: &Path,
    offense_path: &Path,
    schemas: &[LabelSchema],
    language: Language,
) -> Result<(Corpus, MergeReport)> {
    let sent_text = read_to_string(sentiment_path)?;
    let off_text = read_to_string(offense_path)?;
    merge_task_texts(
        (&sentiment_path.display().to_string(), &sent_text),
        (&offense_path.display().to_string(), &off_text),
        schemas,
        language,
    )
}

pub fn merge_task_texts(
    sentiment: (&str, &str),
    offense: (&str, &str),
    schemas: &[LabelSchema],
    language: Language,
) -> Result<(Corpus, MergeReport)> {
    if schemas.len() != 2 {
        return Err(MtlError::contract("merging needs exactly two task schemas"));
    }
    let (sent, sent_report) = parse_tsv(sentiment.0, sentiment.1, &schemas[..1], language)?;
    let (off, off_report) = parse_tsv(offense.0, offense.1, &schemas[1..], language)?;
    let off_index: HashMap<&str, usize> = off.records.iter().map(|r| (r.text.as_str(), r.labels[0])).collect();
    let mut corpus = Corpus::new(schemas.to_vec(), language);
    let mut matched = 0;
    for r in &sent.records {
        if let Some(&o) = off_index.get(r.text.as_str()) {
            matched += 1;
            corpus.records.push(Record {
                text: r.text.clone(),
                labels: vec![r.labels[0], o],
            });
        }
    }
    let report = MergeReport {
        dropped_sentiment_only: sent.len() - matched,
        dropped_offense_only: off.len() - matched,
        sentiment: sent_report,
        offense: off_report,
    };
    Ok((corpus, report))
}

/// Per-class counts of one task, in schema order.
pub fn class_counts(corpus: &Corpus, task: usize) -> Vec<u64> {
    let mut counts = vec![0u64; corpus.schemas[task].len()];
    for r in &corpus.records {
        counts[r.labels[task]] += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.validation, self.test];
        if r.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(MtlError::config(format!(
                "split ratios {r:?} must be within [0, 1] and sum to 1"
            )));
        }
        Ok(())
    }
}

impl FromStr for SplitRatios {
    type Err = MtlError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| MtlError::config(format!("bad ratios {s:?}")))?;
        let [train, validation, test] = parts[..] else {
            return Err(MtlError::config(format!("expected three ratios, got {s:?}")));
        };
        let r = SplitRatios {
            train,
            validation,
            test,
        };
        r.validate()?;
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSet {
    pub train: Corpus,
    pub validation: Corpus,
    pub test: Corpus,
    pub warnings: Vec<String>,
}

fn floor_share(ratio: f64, n: usize) -> usize {
    // the small offset keeps e.g. 0.1·70 = 7.000000000000001 from flooring low
    ((ratio * n as f64) + 1e-9).floor() as usize
}

/// Hands out `leftover` extra slots, one per class, by largest fractional
/// share (ties to the lower class index).
fn distribute(
    leftover: usize,
    ratio: f64,
    sizes: &[usize],
    base: &mut [usize],
    room: &dyn Fn(usize, &[usize]) -> bool,
) {
    let mut order: Vec<usize> = (0..sizes.len()).filter(|&c| sizes[c] > 0).collect();
    let frac = |c: usize| ratio * sizes[c] as f64 - base[c] as f64;
    order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
    let mut left = leftover;
    for c in order {
        if left == 0 {
            break;
        }
        if room(c, base) {
            base[c] += 1;
            left -= 1;
        }
    }
}

/// Stratified three-way split.
///
/// Split totals are `floor(r_train·n)`, `floor(r_val·n)` and the remainder
/// for test. Each class receives `floor(r·n_c)` members of the train and
/// validation parts plus at most one of the leftover slots, so per-class
/// shares stay within one sample of `r·n_c`. Members are shuffled within
/// their class by the seeded split stream. Classes with fewer than three
/// members go entirely to train.
pub fn stratified_split(corpus: &Corpus, ratios: SplitRatios, seed: u64, stratify_task: usize) -> Result<SplitSet> {
    ratios.validate()?;
    if stratify_task >= corpus.schemas.len() {
        return Err(MtlError::config(format!(
            "stratify task index {stratify_task} out of range"
        )));
    }
    let n_classes = corpus.schemas[stratify_task].len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, r) in corpus.records.iter().enumerate() {
        members[r.labels[stratify_task]].push(i);
    }

    let mut warnings = Vec::new();
    let mut sizes = vec![0usize; n_classes];
    for (c, m) in members.iter().enumerate() {
        if m.len() >= 3 {
            sizes[c] = m.len();
        } else if !m.is_empty() {
            warnings.push(format!(
                "class {:?} has {} member(s); all assigned to train",
                corpus.schemas[stratify_task].classes[c],
                m.len()
            ));
        }
    }
    let eligible: usize = sizes.iter().sum();

    let mut train: Vec<usize> = sizes.iter().map(|&n| floor_share(ratios.train, n)).collect();
    let mut val: Vec<usize> = sizes.iter().map(|&n| floor_share(ratios.validation, n)).collect();
    let train_left = floor_share(ratios.train, eligible).saturating_sub(train.iter().sum());
    let val_total = floor_share(ratios.validation, eligible);
    {
        let val_now = val.clone();
        distribute(train_left, ratios.train, &sizes, &mut train, &|c, t: &[usize]| {
            t[c] < sizes[c] && t[c] + 1 + val_now[c] <= sizes[c]
        });
    }
    let val_left = val_total.saturating_sub(val.iter().sum());
    {
        let train_now = train.clone();
        distribute(val_left, ratios.validation, &sizes, &mut val, &|c, v: &[usize]| {
            train_now[c] + v[c] < sizes[c]
        });
    }

    let mut rng = stream(seed, Stream::Split);
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for (c, m) in members.iter().enumerate() {
        let mut m = m.clone();
        if sizes[c] == 0 {
            tr.extend(m);
            continue;
        }
        m.shuffle(&mut rng);
        tr.extend_from_slice(&m[..train[c]]);
        va.extend_from_slice(&m[train[c]..train[c] + val[c]]);
        te.extend_from_slice(&m[train[c] + val[c]..]);
    }
    for part in [&mut tr, &mut va, &mut te] {
        part.sort_unstable();
    }
    Ok(SplitSet {
        train: corpus.subset(&tr),
        validation: corpus.subset(&va),
        test: corpus.subset(&te),
        warnings,
    })
}

/// Text manifest describing a split: seed, ratios, per-class counts.
pub fn split_manifest(split: &SplitSet, ratios: SplitRatios, seed: u64, stratify_task: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed\t{seed}");
    let _ = writeln!(s, "ratios\t{},{},{}", ratios.train, ratios.validation, ratios.test);
    let _ = writeln!(s, "stratify_task\t{}", split.train.schemas[stratify_task].task);
    let _ = writeln!(
        s,
        "sizes\t{}\t{}\t{}",
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    for (t, schema) in split.train.schemas.iter().enumerate() {
        let counts = [
            class_counts(&split.train, t),
            class_counts(&split.validation, t),
            class_counts(&split.test, t),
        ];
        for (c, name) in schema.classes.iter().enumerate() {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}",
                schema.task, name, counts[0][c], counts[1][c], counts[2][c]
            );
        }
    }
    for w in &split.warnings {
        let _ = writeln!(s, "warning\t{w}");
    }
    s
}

/// Index batches of size `batch_size`, the last one possibly shorter.
pub fn batch_indices<R: Rng + ?Sized>(
    n: usize,
    batch_size: usize,
    shuffle: bool,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(MtlError::contract("batch_size must be at least 1"));
    }
    if n == 0 {
        return Err(MtlError::contract("cannot batch an empty split"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub seqs: Vec<TokenSeq>,
    /// `labels[task][i]` is the label of sample `i`.
    pub labels: Vec<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }
}

/// Encodes a split and cuts it into batches, shuffled by the seeded
/// shuffle stream when `shuffle` is set.
pub fn batches(
    split: &Corpus,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<Batch>> {
    let mut rng = stream(seed, Stream::Shuffle);
    let groups = batch_indices(split.len(), batch_size, shuffle, &mut rng)?;
    let encoded: Vec<TokenSeq> = split
        .records
        .iter()
        .map(|r| encode(&r.text, vocab, max_len))
        .collect::<Result<_>>()?;
    Ok(groups
        .iter()
        .map(|g| Batch {
            seqs: g.iter().map(|&i| encoded[i].clone()).collect(),
            labels: (0..split.schemas.len())
                .map(|t| g.iter().map(|&i| split.records[i].labels[t]).collect())
                .collect(),
        })
        .collect())
}
