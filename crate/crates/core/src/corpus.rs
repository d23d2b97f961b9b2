//! Word-level vocabulary, token streams and task-specific batching.
//!
//! Text is lowercased and split on whitespace; inside each whitespace-delimited
//! chunk, runs of alphanumeric characters (with apostrophes kept when they sit
//! between two alphanumerics, as in `don't`) form one token and every other
//! character is a token of its own. Documents are separated by blank lines.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const NUM_SPECIALS: usize = 3;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["[PAD]", "[UNK]", "[MASK]"];

pub const VOCAB_HEADER: &str = "#twintower-vocab v1";

/// Splits raw text into lowercase word and punctuation tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        tokenize_chunk(chunk, &mut out);
    }
    out
}

fn tokenize_chunk(chunk: &str, out: &mut Vec<String>) {
    let chars: Vec<char> = chunk.chars().collect();
    let n = chars.len();
    let mut i = 0;
    while i < n {
        if chars[i].is_alphanumeric() {
            let mut j = i + 1;
            loop {
                if j < n && chars[j].is_alphanumeric() {
                    j += 1;
                } else if j + 1 < n && chars[j] == '\'' && chars[j + 1].is_alphanumeric() {
                    j += 2;
                } else {
                    break;
                }
            }
            out.push(chars[i..j].iter().collect::<String>().to_lowercase());
            i = j;
        } else {
            out.push(chars[i].to_lowercase().collect());
            i += 1;
        }
    }
}

/// Splits text into documents at blank lines. Empty documents are dropped.
pub fn documents(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut current = String::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.trim().is_empty() {
                docs.push(std::mem::take(&mut current));
            }
            current.clear();
        } else {
            current.push_str(line);
            current.push('\n');
        }
    }
    if !current.trim().is_empty() {
        docs.push(current);
    }
    docs
}

/// Token ↔ id mapping. Ids `0..NUM_SPECIALS` are `[PAD]`, `[UNK]`, `[MASK]`;
/// the remaining ids follow non-increasing corpus frequency.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: HashMap<String, u32>,
    freq: Vec<u64>,
}

impl Vocabulary {
    fn from_parts(tokens: Vec<String>, freq: Vec<u64>) -> Self {
        let id_of = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, id_of, freq }
    }

    /// Counts tokens in `text` and keeps the `max_vocab - NUM_SPECIALS` most
    /// frequent ones with at least `min_count` occurrences. Everything else is
    /// folded into `[UNK]`, whose frequency accumulates the folded counts.
    pub fn build(text: &str, max_vocab: usize, min_count: u64) -> Result<Self> {
        if max_vocab < NUM_SPECIALS {
            return Err(Error::VocabTooSmall {
                max_vocab,
                specials: NUM_SPECIALS,
            });
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut total = 0u64;
        for chunk in text.split_whitespace() {
            let mut toks = Vec::new();
            tokenize_chunk(chunk, &mut toks);
            for t in toks {
                *counts.entry(t).or_insert(0) += 1;
                total += 1;
            }
        }
        if total == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let capacity = max_vocab - NUM_SPECIALS;
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut freq = vec![0u64; NUM_SPECIALS];
        for (token, count) in ranked {
            if count >= min_count && tokens.len() - NUM_SPECIALS < capacity {
                tokens.push(token);
                freq.push(count);
            } else {
                freq[UNK as usize] += count;
            }
        }
        Ok(Self::from_parts(tokens, freq))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    /// Id for `token`, or `[UNK]`.
    pub fn lookup(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn freq(&self, id: u32) -> u64 {
        self.freq[id as usize]
    }

    pub fn frequencies(&self) -> &[u64] {
        &self.freq
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    /// Non-special ids in frequency-rank order (most frequent first).
    pub fn ranked_ids(&self) -> impl Iterator<Item = u32> + '_ {
        (NUM_SPECIALS as u32)..(self.tokens.len() as u32)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::with_capacity(self.tokens.len() * 12);
        out.push_str(VOCAB_HEADER);
        out.push('\n');
        for (t, c) in self.tokens.iter().zip(&self.freq) {
            out.push_str(t);
            out.push('\t');
            out.push_str(&c.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(VOCAB_HEADER) => {}
            Some(other) => {
                return Err(Error::UnsupportedVersion {
                    what: "vocabulary",
                    found: other.to_string(),
                    expected: VOCAB_HEADER.to_string(),
                })
            }
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing vocabulary header".into(),
                })
            }
        }
        let mut tokens = Vec::new();
        let mut freq = Vec::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let (token, count) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: lineno,
                message: "expected token<TAB>count".into(),
            })?;
            let count: u64 = count.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("bad count {count:?}"),
            })?;
            tokens.push(token.to_string());
            freq.push(count);
        }
        if tokens.len() < NUM_SPECIALS
            || tokens[..NUM_SPECIALS]
                .iter()
                .zip(SPECIAL_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Parse {
                line: 2,
                message: "vocabulary must start with [PAD], [UNK], [MASK]".into(),
            });
        }
        let vocab = Self::from_parts(tokens, freq);
        if vocab.id_of.len() != vocab.tokens.len() {
            return Err(Error::Parse {
                line: 0,
                message: "duplicate tokens in vocabulary".into(),
            });
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tsv(&fs::read_to_string(path)?)
    }

    /// Stable identifier of the serialized vocabulary.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(&Sha256::digest(self.to_tsv().as_bytes())[..8])
    }

    /// Maps ids back to token strings.
    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }
}

/// A corpus as one id sequence plus the (exclusive) end offset of every document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenStream {
    pub ids: Vec<u32>,
    pub doc_boundaries: Vec<usize>,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn documents(&self) -> impl Iterator<Item = &[u32]> + '_ {
        let mut start = 0;
        self.doc_boundaries.iter().map(move |&end| {
            let doc = &self.ids[start..end];
            start = end;
            doc
        })
    }

    fn from_documents<'a>(docs: impl IntoIterator<Item = &'a [u32]>) -> Self {
        let mut ids = Vec::new();
        let mut doc_boundaries = Vec::new();
        for doc in docs {
            if doc.is_empty() {
                continue;
            }
            ids.extend_from_slice(doc);
            doc_boundaries.push(ids.len());
        }
        TokenStream {
            ids,
            doc_boundaries,
        }
    }

    /// Holds out roughly `fraction` of the documents (chosen by `seed`) as an
    /// evaluation stream. Returns `(train, eval)`; document order is preserved
    /// within each part.
    pub fn split(&self, fraction: f64, seed: u64) -> (TokenStream, TokenStream) {
        let docs: Vec<&[u32]> = self.documents().collect();
        let n = docs.len();
        let mut n_eval = (fraction * n as f64).round() as usize;
        if fraction > 0.0 && n >= 2 {
            n_eval = n_eval.clamp(1, n - 1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut held = vec![false; n];
        for i in index::sample(&mut rng, n, n_eval.min(n)).iter() {
            held[i] = true;
        }
        let train = Self::from_documents(
            docs.iter()
                .zip(&held)
                .filter(|(_, &h)| !h)
                .map(|(d, _)| *d),
        );
        let eval = Self::from_documents(
            docs.iter()
                .zip(&held)
                .filter(|(_, &h)| h)
                .map(|(d, _)| *d),
        );
        (train, eval)
    }

    /// Stable identifier of the stream contents.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for id in &self.ids {
            h.update(id.to_le_bytes());
        }
        for b in &self.doc_boundaries {
            h.update((*b as u64).to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Encodes text with `vocab`; unknown tokens become `[UNK]`.
pub fn encode(text: &str, vocab: &Vocabulary) -> TokenStream {
    let mut ids = Vec::new();
    let mut doc_boundaries = Vec::new();
    for doc in documents(text) {
        for chunk in doc.split_whitespace() {
            let mut toks = Vec::new();
            tokenize_chunk(chunk, &mut toks);
            ids.extend(toks.iter().map(|t| vocab.lookup(t)));
        }
        if ids.len() > doc_boundaries.last().copied().unwrap_or(0) {
            doc_boundaries.push(ids.len());
        }
    }
    TokenStream {
        ids,
        doc_boundaries,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Cloze,
    Causal,
    Mlm,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Cloze => "cloze",
            Task::Causal => "causal",
            Task::Mlm => "mlm",
        })
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cloze" => Ok(Task::Cloze),
            "causal" => Ok(Task::Causal),
            "mlm" => Ok(Task::Mlm),
            _ => Err(Error::InvalidArgument(format!("unknown task {s:?}"))),
        }
    }
}

/// `batch_size × seq_len` id matrices in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub task: Task,
    pub batch_size: usize,
    pub seq_len: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub score_mask: Vec<bool>,
}

impl Batch {
    pub fn scored_positions(&self) -> Vec<usize> {
        self.score_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn num_scored(&self) -> usize {
        self.score_mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchConfig {
    pub task: Task,
    pub seq_len: usize,
    pub batch_size: usize,
    pub mask_rate: f64,
    pub seed: u64,
    /// Shuffle sequence order (training); evaluation keeps corpus order.
    pub shuffle: bool,
}

impl BatchConfig {
    pub fn masked_count(&self) -> usize {
        (self.mask_rate * self.seq_len as f64).round() as usize
    }
}

/// Deterministic single-pass batch iterator produced by [`make_batches`].
pub struct Batches<'a> {
    stream: &'a TokenStream,
    config: BatchConfig,
    starts: Vec<usize>,
    next: usize,
    rng: ChaCha8Rng,
}

/// Cuts every document into non-overlapping `seq_len` windows (dropping the
/// remainder of each document) and groups them into batches. The final batch
/// may be smaller than `batch_size`.
pub fn make_batches<'a>(stream: &'a TokenStream, config: &BatchConfig) -> Result<Batches<'a>> {
    if config.seq_len < 2 {
        return Err(Error::InvalidArgument("seq_len must be at least 2".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    if config.task == Task::Mlm {
        if !(config.mask_rate > 0.0 && config.mask_rate < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "mask_rate must lie in (0, 1), got {}",
                config.mask_rate
            )));
        }
        if config.masked_count() == 0 {
            return Err(Error::InvalidArgument(format!(
                "mask_rate {} masks no position of a {}-token sequence",
                config.mask_rate, config.seq_len
            )));
        }
    }
    let mut starts = Vec::new();
    let mut doc_start = 0;
    for &end in &stream.doc_boundaries {
        let mut s = doc_start;
        while s + config.seq_len <= end {
            starts.push(s);
            s += config.seq_len;
        }
        doc_start = end;
    }
    if starts.is_empty() {
        return Err(Error::CorpusTooShort {
            seq_len: config.seq_len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    if config.shuffle {
        starts.shuffle(&mut rng);
    }
    Ok(Batches {
        stream,
        config: config.clone(),
        starts,
        next: 0,
        rng,
    })
}

impl Batches<'_> {
    pub fn num_sequences(&self) -> usize {
        self.starts.len()
    }

    pub fn num_batches(&self) -> usize {
        self.starts.len().div_ceil(self.config.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.next >= self.starts.len() {
            return None;
        }
        let cfg = &self.config;
        let end = (self.next + cfg.batch_size).min(self.starts.len());
        let rows = end - self.next;
        let l = cfg.seq_len;
        let mut inputs = Vec::with_capacity(rows * l);
        let mut targets = Vec::with_capacity(rows * l);
        let mut score_mask = Vec::with_capacity(rows * l);
        for &s in &self.starts[self.next..end] {
            let seq = &self.stream.ids[s..s + l];
            match cfg.task {
                Task::Cloze => {
                    inputs.extend_from_slice(seq);
                    targets.extend_from_slice(seq);
                    score_mask.extend(std::iter::repeat(true).take(l));
                }
                Task::Causal => {
                    inputs.extend_from_slice(seq);
                    targets.extend_from_slice(&seq[1..]);
                    targets.push(PAD);
                    score_mask.extend(std::iter::repeat(true).take(l - 1));
                    score_mask.push(false);
                }
                Task::Mlm => {
                    let base = inputs.len();
                    inputs.extend_from_slice(seq);
                    targets.extend_from_slice(seq);
                    score_mask.extend(std::iter::repeat(false).take(l));
                    for p in index::sample(&mut self.rng, l, cfg.masked_count()).iter() {
                        inputs[base + p] = MASK;
                        score_mask[base + p] = true;
                    }
                }
            }
        }
        self.next = end;
        Some(Batch {
            task: cfg.task,
            batch_size: rows,
            seq_len: l,
            inputs,
            targets,
            score_mask,
        })
    }
}

/// Universal Dependencies part-of-speech tags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum UdTag {
    ADJ,
    ADP,
    ADV,
    AUX,
    CCONJ,
    DET,
    INTJ,
    NOUN,
    NUM,
    PART,
    PRON,
    PROPN,
    PUNCT,
    SCONJ,
    SYM,
    VERB,
    X,
}

impl UdTag {
    pub const ALL: [UdTag; 17] = [
        UdTag::ADJ,
        UdTag::ADP,
        UdTag::ADV,
        UdTag::AUX,
        UdTag::CCONJ,
        UdTag::DET,
        UdTag::INTJ,
        UdTag::NOUN,
        UdTag::NUM,
        UdTag::PART,
        UdTag::PRON,
        UdTag::PROPN,
        UdTag::PUNCT,
        UdTag::SCONJ,
        UdTag::SYM,
        UdTag::VERB,
        UdTag::X,
    ];

    /// The seven tags compared in the preference-by-POS analysis.
    pub const REPORTED: [UdTag; 7] = [
        UdTag::PROPN,
        UdTag::NOUN,
        UdTag::ADJ,
        UdTag::AUX,
        UdTag::ADP,
        UdTag::ADV,
        UdTag::VERB,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            UdTag::ADJ => "ADJ",
            UdTag::ADP => "ADP",
            UdTag::ADV => "ADV",
            UdTag::AUX => "AUX",
            UdTag::CCONJ => "CCONJ",
            UdTag::DET => "DET",
            UdTag::INTJ => "INTJ",
            UdTag::NOUN => "NOUN",
            UdTag::NUM => "NUM",
            UdTag::PART => "PART",
            UdTag::PRON => "PRON",
            UdTag::PROPN => "PROPN",
            UdTag::PUNCT => "PUNCT",
            UdTag::SCONJ => "SCONJ",
            UdTag::SYM => "SYM",
            UdTag::VERB => "VERB",
            UdTag::X => "X",
        }
    }
}

impl fmt::Display for UdTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UdTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        UdTag::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::UnknownTag(s.to_string()))
    }
}

/// One POS tag per vocabulary id; ids absent from the source table are `X`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PosTable {
    tags: Vec<UdTag>,
}

impl PosTable {
    pub fn uniform(vocab: &Vocabulary, tag: UdTag) -> Self {
        PosTable {
            tags: vec![tag; vocab.len()],
        }
    }

    /// Parses `token<TAB>TAG` lines. Blank lines and `#` comments are skipped;
    /// tokens outside the vocabulary are ignored.
    pub fn parse(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let mut tags = vec![UdTag::X; vocab.len()];
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let (token, tag) = match (cols.next(), cols.next(), cols.next()) {
                (Some(t), Some(g), None) if !t.is_empty() => (t, g.trim()),
                _ => {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: "expected token<TAB>UD-tag".into(),
                    })
                }
            };
            let tag: UdTag = tag.parse()?;
            if let Some(id) = vocab.id(token) {
                tags[id as usize] = tag;
            }
        }
        Ok(PosTable { tags })
    }

    pub fn tag(&self, id: u32) -> UdTag {
        self.tags[id as usize]
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

pub fn load_pos_table(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<PosTable> {
    PosTable::parse(&fs::read_to_string(path)?, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_punctuation_and_lowercases() {
        assert_eq!(
            tokenize("Hello, World! Don't 'tis"),
            vec!["hello", ",", "world", "!", "don't", "'", "tis"]
        );
    }

    #[test]
    fn build_counts_and_orders() {
        let v = Vocabulary::build("a b a", 10, 1).unwrap();
        assert_eq!(v.tokens(), &["[PAD]", "[UNK]", "[MASK]", "a", "b"]);
        assert_eq!(v.freq(3), 2);
        assert_eq!(v.freq(4), 1);
    }

    #[test]
    fn min_count_folds_into_unk() {
        let v = Vocabulary::build("a b a", 10, 2).unwrap();
        assert_eq!(v.id("b"), None);
        assert_eq!(v.freq(UNK), 1);
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn build_errors() {
        assert!(matches!(
            Vocabulary::build("  \n ", 10, 1),
            Err(Error::EmptyCorpus)
        ));
        let e = Vocabulary::build("a", 2, 1).unwrap_err();
        assert!(e.to_string().contains("vocab too small"));
    }

    #[test]
    fn frequency_ties_break_lexicographically() {
        let v = Vocabulary::build("c b a c b a", 10, 1).unwrap();
        assert_eq!(&v.tokens()[3..], &["a", "b", "c"]);
    }

    #[test]
    fn encode_and_decode() {
        let v = Vocabulary::build("a b", 10, 1).unwrap();
        let s = encode("a b", &v);
        assert_eq!(s.ids, vec![v.lookup("a"), v.lookup("b")]);
        let s = encode("a zzz", &v);
        assert_eq!(s.ids, vec![v.lookup("a"), UNK]);
        let s = encode("b a a\n\na b", &v);
        assert_eq!(s.doc_boundaries, vec![3, 5]);
        assert_eq!(v.decode(&s.ids), vec!["b", "a", "a", "a", "b"]);
    }

    #[test]
    fn vocab_tsv_roundtrip() {
        let v = Vocabulary::build("x y z x", 10, 1).unwrap();
        let text = v.to_tsv();
        assert!(text.starts_with("#twintower-vocab v1\n"));
        assert_eq!(Vocabulary::from_tsv(&text).unwrap(), v);
        assert!(matches!(
            Vocabulary::from_tsv("#twintower-vocab v9\n"),
            Err(Error::UnsupportedVersion { .. })
        ));
    }

    fn stream(ids: Vec<u32>) -> TokenStream {
        let n = ids.len();
        TokenStream {
            ids,
            doc_boundaries: vec![n],
        }
    }

    fn cfg(task: Task, seq_len: usize, batch_size: usize, mask_rate: f64) -> BatchConfig {
        BatchConfig {
            task,
            seq_len,
            batch_size,
            mask_rate,
            seed: 7,
            shuffle: true,
        }
    }

    #[test]
    fn causal_batch_shifts_targets() {
        let s = stream(vec![1, 2, 3, 4]);
        let b: Vec<Batch> = make_batches(&s, &cfg(Task::Causal, 4, 1, 0.15))
            .unwrap()
            .collect();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].inputs, vec![1, 2, 3, 4]);
        assert_eq!(&b[0].targets[..3], &[2, 3, 4]);
        assert_eq!(b[0].score_mask, vec![true, true, true, false]);
    }

    #[test]
    fn mlm_masks_exact_count() {
        let s = stream((3..203).collect());
        for b in make_batches(&s, &cfg(Task::Mlm, 8, 4, 0.25)).unwrap() {
            for row in 0..b.batch_size {
                let r = row * 8..(row + 1) * 8;
                assert_eq!(b.score_mask[r.clone()].iter().filter(|&&m| m).count(), 2);
                for p in r {
                    assert_eq!(b.inputs[p] == MASK, b.score_mask[p]);
                    assert!(b.targets[p] != MASK);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_batches() {
        let s = stream((3..403).collect());
        let a: Vec<Batch> = make_batches(&s, &cfg(Task::Mlm, 8, 3, 0.15)).unwrap().collect();
        let b: Vec<Batch> = make_batches(&s, &cfg(Task::Mlm, 8, 3, 0.15)).unwrap().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn sequences_stay_inside_documents() {
        let s = TokenStream {
            ids: (0..25).collect(),
            doc_boundaries: vec![5, 12, 25],
        };
        let all: Vec<Batch> = make_batches(&s, &cfg(Task::Cloze, 4, 2, 0.15)).unwrap().collect();
        let mut seqs: Vec<Vec<u32>> = all
            .iter()
            .flat_map(|b| b.inputs.chunks(4).map(|c| c.to_vec()).collect::<Vec<_>>())
            .collect();
        seqs.sort();
        assert_eq!(
            seqs,
            vec![
                vec![0, 1, 2, 3],
                vec![5, 6, 7, 8],
                vec![12, 13, 14, 15],
                vec![16, 17, 18, 19],
                vec![20, 21, 22, 23],
            ]
        );
    }

    #[test]
    fn short_corpus_is_an_error() {
        let s = stream(vec![1, 2, 3]);
        let e = make_batches(&s, &cfg(Task::Cloze, 4, 1, 0.15)).err().unwrap();
        assert!(e.to_string().contains("corpus too short"));
    }

    #[test]
    fn pos_table_parsing() {
        let v = Vocabulary::build("run fast run", 10, 1).unwrap();
        let t = PosTable::parse("run\tVERB\n", &v).unwrap();
        assert_eq!(t.tag(v.lookup("run")), UdTag::VERB);
        assert_eq!(t.tag(v.lookup("fast")), UdTag::X);
        match PosTable::parse("run\tVERB\nfast\n", &v) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let e = PosTable::parse("run\tVRB\n", &v).unwrap_err();
        assert!(e.to_string().contains("VRB"));
    }

    #[test]
    fn split_partitions_documents() {
        let s = TokenStream {
            ids: (0..100).collect(),
            doc_boundaries: (1..=20).map(|i| i * 5).collect(),
        };
        let (train, eval) = s.split(0.1, 3);
        assert_eq!(eval.doc_boundaries.len(), 2);
        assert_eq!(train.len() + eval.len(), 100);
        let mut all: Vec<u32> = train.ids.iter().chain(&eval.ids).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(s.split(0.1, 3), (train, eval));
    }
}
