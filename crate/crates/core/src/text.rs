//! Vocabulary construction and fixed-length encoding with `[CLS]`/`[SEP]`
//! framing.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use unicode_properties::{GeneralCategoryGroup, UnicodeGeneralCategory};

use crate::error::{MtlError, Result};
use crate::io::{read_to_string, write_atomic};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

const VOCAB_FORMAT: &str = "mtlc-vocab 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TokenMode {
    Word,
    /// Unicode scalar values; the default for mixed-script text.
    #[default]
    Char,
}

impl fmt::Display for TokenMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenMode::Word => "word",
            TokenMode::Char => "char",
        })
    }
}

impl FromStr for TokenMode {
    type Err = MtlError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "word" => Ok(TokenMode::Word),
            "char" => Ok(TokenMode::Char),
            other => Err(MtlError::config(format!("unknown token mode {other:?}"))),
        }
    }
}

fn is_punctuation(c: char) -> bool {
    c.general_category_group() == GeneralCategoryGroup::Punctuation
}

/// Splits text into tokens.
///
/// Word mode splits on Unicode whitespace and trims leading and trailing
/// punctuation from each piece. Char mode yields each scalar value, with any
/// whitespace run collapsed to a single space.
pub fn tokenize(text: &str, mode: TokenMode) -> Vec<String> {
    match mode {
        TokenMode::Word => text
            .split_whitespace()
            .map(|w| w.trim_matches(is_punctuation))
            .filter(|w| !w.is_empty())
            .map(str::to_string)
            .collect(),
        TokenMode::Char => {
            let mut out = Vec::new();
            let mut in_space = false;
            for c in text.trim().chars() {
                if c.is_whitespace() {
                    if !in_space {
                        out.push(" ".to_string());
                    }
                    in_space = true;
                } else {
                    out.push(c.to_string());
                    in_space = false;
                }
            }
            out
        }
    }
}

/// Bijection between tokens and dense ids; ids 0–3 are the special tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    mode: TokenMode,
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_regular(mode: TokenMode, regular: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(regular);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(MtlError::data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { mode, tokens, index })
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Token strings for the given ids with special tokens removed.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id > SEP)
            .filter_map(|&id| self.token(id).map(str::to_string))
            .collect()
    }

    /// Two header lines (format, mode) and then one regular token per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("{VOCAB_FORMAT}\n{}\n", self.mode);
        for t in &self.tokens[4..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.split('\n');
        if lines.next() != Some(VOCAB_FORMAT) {
            return Err(MtlError::data("vocabulary file has an unknown format header"));
        }
        let mode: TokenMode = lines
            .next()
            .ok_or_else(|| MtlError::data("vocabulary file is missing its mode line"))?
            .parse()
            .map_err(|_| MtlError::data("vocabulary file has a bad mode line"))?;
        let mut regular: Vec<String> = lines.map(str::to_string).collect();
        // the file ends with a newline, which leaves one empty trailing piece
        if regular.last().is_some_and(String::is_empty) {
            regular.pop();
        }
        Vocab::from_regular(mode, regular)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Vocab::from_text(&read_to_string(path)?)
    }
}

/// Builds a vocabulary from a corpus.
///
/// Tokens seen at least `min_freq` times are ranked by descending
/// frequency, then lexicographically, and the first `max_size` are kept
/// after the four special tokens.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], mode: TokenMode, min_freq: usize, max_size: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(MtlError::contract("cannot build a vocabulary from an empty corpus"));
    }
    if min_freq < 1 {
        return Err(MtlError::contract("min_freq must be at least 1"));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for tok in tokenize(text.as_ref(), mode) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq && !SPECIAL_TOKENS.contains(&t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size);
    Vocab::from_regular(mode, ranked.into_iter().map(|(t, _)| t).collect())
}

/// An encoded comment of fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    /// 1 for real tokens (including `[CLS]` and `[SEP]`), 0 for padding.
    pub mask: Vec<u8>,
    /// Token count before truncation.
    pub raw_length: usize,
}

impl TokenSeq {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Number of unmasked positions.
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `[CLS] tokens… [SEP]` padded with `[PAD]` to `max_len`; content beyond
/// `max_len − 2` tokens is truncated.
pub fn encode(text: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSeq> {
    if max_len < 3 {
        return Err(MtlError::contract(format!("max_len {max_len} must be at least 3")));
    }
    let toks = tokenize(text, vocab.mode());
    let raw_length = toks.len();
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(toks.iter().take(max_len - 2).map(|t| vocab.id(t).unwrap_or(UNK)));
    ids.push(SEP);
    let real = ids.len();
    ids.resize(max_len, PAD);
    let mask = (0..max_len).map(|i| u8::from(i < real)).collect();
    Ok(TokenSeq { ids, mask, raw_length })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_vocab_hand_case() {
        let v = build_vocab(&["a b", "a"], TokenMode::Word, 1, 100).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(v.id(s), Some(i as u32));
        }
    }

    #[test]
    fn char_vocab_hand_case() {
        let v = build_vocab(&["ab"], TokenMode::Char, 1, 100).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
    }

    #[test]
    fn min_freq_excludes_rare_tokens() {
        let v = build_vocab(&["a b", "a"], TokenMode::Word, 2, 100).unwrap();
        assert_eq!(v.id("b"), None);
        let seq = encode("b", &v, 4).unwrap();
        assert_eq!(seq.ids, vec![CLS, UNK, SEP, PAD]);
    }

    #[test]
    fn max_size_caps_regular_tokens() {
        let v = build_vocab(&["c c c b b a"], TokenMode::Word, 1, 2).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("c"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        assert_eq!(v.id("a"), None);
    }

    #[test]
    fn empty_corpus_rejected() {
        let empty: [&str; 0] = [];
        assert!(build_vocab(&empty, TokenMode::Word, 1, 10).is_err());
    }

    #[test]
    fn encode_cases() {
        let v = build_vocab(&["a b", "a"], TokenMode::Word, 1, 100).unwrap();
        let e = encode("", &v, 5).unwrap();
        assert_eq!(e.ids, vec![CLS, SEP, PAD, PAD, PAD]);
        assert_eq!(e.mask, vec![1, 1, 0, 0, 0]);
        let e = encode("a b", &v, 5).unwrap();
        assert_eq!(e.ids, vec![2, 4, 5, 3, 0]);
        assert_eq!(e.mask, vec![1, 1, 1, 1, 0]);

        let long = vec!["a"; 100].join(" ");
        let e = encode(&long, &v, 8).unwrap();
        assert_eq!(e.raw_length, 100);
        assert_eq!(e.ids.iter().filter(|&&i| i == 4).count(), 6);
        assert_eq!(*e.ids.last().unwrap(), SEP);
        assert!(encode("a", &v, 2).is_err());
    }

    #[test]
    fn word_mode_strips_edge_punctuation_only() {
        assert_eq!(
            tokenize("  «hello», wor-ld!! ¿qué?  ...", TokenMode::Word),
            vec!["hello", "wor-ld", "qué"]
        );
    }

    #[test]
    fn char_mode_handles_mixed_scripts() {
        let toks = tokenize("ಸೂಪರ್  movie", TokenMode::Char);
        assert!(toks.contains(&" ".to_string()));
        assert_eq!(toks.iter().filter(|t| *t == " ").count(), 1);
        assert_eq!(toks.concat(), "ಸೂಪರ್ movie");
    }

    #[test]
    fn text_persistence_round_trip() {
        let v = build_vocab(&["x y z y", "ನಮಸ್ಕಾರ"], TokenMode::Char, 1, 100).unwrap();
        let back = Vocab::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert!(Vocab::from_text("garbage\nword\n").is_err());
    }
}
