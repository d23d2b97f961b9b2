//! Per-token preference scores and the statistics built on them.
//!
//! For token `a`, `p̄1_a` and `p̄2_a` are the primary and secondary towers'
//! mean probabilities for `a` over the evaluation positions whose target is
//! `a`, and `s_a = ln p̄1_a − ln p̄2_a`. Tokens never scored have no score and
//! are left out of every statistic.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{PosTable, TokenStream, UdTag, Vocabulary};
use crate::error::{Error, Result};
use crate::training::{for_each_scored, Checkpoint, EvalConfig};

pub const PREF_HEADER: &str = "#twintower-pref v1";
pub const DEFAULT_TOP_K: usize = 5000;
pub const DEFAULT_BINS: usize = 41;

/// Which positions contribute to a token's mean probability.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PreferenceMode {
    /// Positions whose target is the token.
    #[default]
    TargetPositions,
    /// Every scored position (mean probability mass given to the token).
    AllPositions,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenPreference {
    /// Positions where the token was the target.
    pub count: u64,
    pub p1_mean: f64,
    pub p2_mean: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceVector {
    pub vocab: Vocabulary,
    /// Indexed by token id; `None` where the token was never scored.
    pub entries: Vec<Option<TokenPreference>>,
    pub checkpoint_id: String,
    pub eval_id: String,
}

/// Running per-token sums for [`PreferenceVector`]. Feed it one scored
/// position at a time with the primary and secondary distributions.
#[derive(Clone, Debug)]
pub struct PreferenceAccumulator {
    mode: PreferenceMode,
    sums: [Vec<f64>; 2],
    counts: Vec<u64>,
    positions: u64,
}

impl PreferenceAccumulator {
    pub fn new(vocab_size: usize, mode: PreferenceMode) -> Self {
        PreferenceAccumulator {
            mode,
            sums: [vec![0.0; vocab_size], vec![0.0; vocab_size]],
            counts: vec![0; vocab_size],
            positions: 0,
        }
    }

    pub fn add(&mut self, target: u32, primary: &[f64], secondary: &[f64]) {
        let t = target as usize;
        self.counts[t] += 1;
        self.positions += 1;
        match self.mode {
            PreferenceMode::TargetPositions => {
                self.sums[0][t] += primary[t];
                self.sums[1][t] += secondary[t];
            }
            PreferenceMode::AllPositions => {
                for (k, p) in [primary, secondary].into_iter().enumerate() {
                    for (s, v) in self.sums[k].iter_mut().zip(p) {
                        *s += v;
                    }
                }
            }
        }
    }

    pub fn finish(self, vocab: &Vocabulary, checkpoint_id: String, eval_id: String) -> Result<PreferenceVector> {
        if vocab.len() != self.counts.len() {
            return Err(Error::VocabMismatch(format!(
                "vocabulary has {} tokens, scores cover {}",
                vocab.len(),
                self.counts.len()
            )));
        }
        if self.positions == 0 {
            return Err(Error::EmptyEvalStream);
        }
        let entries = (0..self.counts.len())
            .map(|a| {
                let count = self.counts[a];
                if count == 0 {
                    return None;
                }
                let denom = match self.mode {
                    PreferenceMode::TargetPositions => count,
                    PreferenceMode::AllPositions => self.positions,
                } as f64;
                let p1_mean = self.sums[0][a] / denom;
                let p2_mean = self.sums[1][a] / denom;
                let score = p1_mean.ln() - p2_mean.ln();
                // A mean that underflowed to zero has no finite score.
                score.is_finite().then_some(TokenPreference {
                    count,
                    p1_mean,
                    p2_mean,
                    score,
                })
            })
            .collect();
        Ok(PreferenceVector {
            vocab: vocab.clone(),
            entries,
            checkpoint_id,
            eval_id,
        })
    }
}

/// Scores every token of `vocab` with an ordered checkpoint over `stream`.
pub fn compute_preference(
    ckpt: &Checkpoint,
    vocab: &Vocabulary,
    stream: &TokenStream,
    eval: &EvalConfig,
    mode: PreferenceMode,
) -> Result<PreferenceVector> {
    let order = ckpt.tower_order.ok_or(Error::TowersNotOrdered)?;
    if vocab.len() != ckpt.config.vocab_size {
        return Err(Error::VocabMismatch(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.len(),
            ckpt.config.vocab_size
        )));
    }
    let mut acc = PreferenceAccumulator::new(vocab.len(), mode);
    for_each_scored(ckpt, stream, eval, |t, p1, p2| {
        if order.primary == 1 {
            acc.add(t, p1, p2);
        } else {
            acc.add(t, p2, p1);
        }
    })?;
    acc.finish(vocab, ckpt.id(), stream.fingerprint())
}

impl PreferenceVector {
    pub fn get(&self, id: u32) -> Option<&TokenPreference> {
        self.entries.get(id as usize).and_then(Option::as_ref)
    }

    pub fn score(&self, id: u32) -> Option<f64> {
        self.get(id).map(|e| e.score)
    }

    /// Ids with a defined score, in id order.
    pub fn defined_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.as_ref().map(|_| i as u32))
    }

    pub fn num_defined(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }

    /// Primary and secondary exchanged: every score negates.
    pub fn swapped(&self) -> Self {
        PreferenceVector {
            entries: self
                .entries
                .iter()
                .map(|e| {
                    e.map(|p| TokenPreference {
                        count: p.count,
                        p1_mean: p.p2_mean,
                        p2_mean: p.p1_mean,
                        score: -p.score,
                    })
                })
                .collect(),
            ..self.clone()
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str(PREF_HEADER);
        out.push('\n');
        let _ = writeln!(out, "#checkpoint={}\teval={}", self.checkpoint_id, self.eval_id);
        for (id, e) in self.entries.iter().enumerate() {
            if let Some(p) = e {
                let _ = writeln!(
                    out,
                    "{}\t{id}\t{}\t{:?}\t{:?}\t{:?}",
                    self.vocab.token(id as u32),
                    p.count,
                    p.p1_mean,
                    p.p2_mean,
                    p.score
                );
            }
        }
        out
    }

    pub fn from_tsv(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, PREF_HEADER)) => {}
            Some((_, other)) => {
                return Err(Error::UnsupportedVersion {
                    what: "preference file",
                    found: other.to_string(),
                    expected: PREF_HEADER.to_string(),
                })
            }
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing preference header".into(),
                })
            }
        }
        let mut entries = vec![None; vocab.len()];
        let mut checkpoint_id = String::new();
        let mut eval_id = String::new();
        for (i, line) in lines {
            let lineno = i + 1;
            if let Some(meta) = line.strip_prefix('#') {
                for field in meta.split('\t') {
                    match field.split_once('=') {
                        Some(("checkpoint", v)) => checkpoint_id = v.to_string(),
                        Some(("eval", v)) => eval_id = v.to_string(),
                        _ => {}
                    }
                }
                continue;
            }
            let bad = |message: String| Error::Parse { line: lineno, message };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 6 {
                return Err(bad("expected token, id, count, p1_mean, p2_mean, s".into()));
            }
            let id: u32 = cols[1].parse().map_err(|_| bad(format!("bad id {:?}", cols[1])))?;
            if id as usize >= vocab.len() || vocab.token(id) != cols[0] {
                return Err(Error::VocabMismatch(format!(
                    "line {lineno}: token {:?} with id {id} is not in the vocabulary",
                    cols[0]
                )));
            }
            let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| bad(format!("bad number {s:?}"))) };
            entries[id as usize] = Some(TokenPreference {
                count: cols[2].parse().map_err(|_| bad(format!("bad count {:?}", cols[2])))?,
                p1_mean: num(cols[3])?,
                p2_mean: num(cols[4])?,
                score: num(cols[5])?,
            });
        }
        Ok(PreferenceVector {
            vocab: vocab.clone(),
            entries,
            checkpoint_id,
            eval_id,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Self> {
        Self::from_tsv(&fs::read_to_string(path)?, vocab)
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "correlation inputs differ in length ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::DegenerateInput("need at least two points".into()));
    }
    Ok(())
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Spearman rank correlation: Pearson over average-tie ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

fn same_vocab(a: &PreferenceVector, b: &PreferenceVector) -> Result<()> {
    if a.vocab.tokens() != b.vocab.tokens() {
        return Err(Error::VocabMismatch(
            "preference vectors were scored over different vocabularies".into(),
        ));
    }
    Ok(())
}

/// Scores of the `k` most frequent non-special tokens defined in both vectors.
pub fn common_topk(a: &PreferenceVector, b: &PreferenceVector, k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    same_vocab(a, b)?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for id in a.vocab.ranked_ids() {
        if xs.len() == k {
            break;
        }
        if let (Some(x), Some(y)) = (a.score(id), b.score(id)) {
            xs.push(x);
            ys.push(y);
        }
    }
    if xs.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "only {} tokens are scored in both vectors",
            xs.len()
        )));
    }
    if xs.len() < k {
        log::warn!("top-{k} correlation uses only {} common tokens", xs.len());
    }
    Ok((xs, ys))
}

/// Pearson correlation of the scores of the `k` most frequent tokens scored
/// in both vectors.
pub fn correlate_topk(a: &PreferenceVector, b: &PreferenceVector, k: usize) -> Result<f64> {
    let (x, y) = common_topk(a, b, k)?;
    pearson(&x, &y)
}

/// Spearman correlation over the same token set as [`correlate_topk`].
pub fn rank_correlate_topk(a: &PreferenceVector, b: &PreferenceVector, k: usize) -> Result<f64> {
    let (x, y) = common_topk(a, b, k)?;
    spearman(&x, &y)
}

/// Spearman correlation between score and corpus frequency over the `k`
/// most frequent non-special tokens that have a score.
pub fn frequency_correlation(v: &PreferenceVector, k: usize) -> Result<f64> {
    let (mut s, mut f) = (Vec::new(), Vec::new());
    for id in v.vocab.ranked_ids() {
        if s.len() == k {
            break;
        }
        if let Some(x) = v.score(id) {
            s.push(x);
            f.push(v.vocab.freq(id) as f64);
        }
    }
    spearman(&s, &f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosGroup {
    pub tag: UdTag,
    pub tokens: usize,
    pub scores: Vec<f64>,
    pub counts: Vec<usize>,
    /// `counts` divided by `tokens` (all zero for an empty group).
    pub density: Vec<f64>,
    pub mean: Option<f64>,
    pub median: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosReport {
    /// `bins + 1` shared edges spanning `[−max|s|, max|s|]`.
    pub edges: Vec<f64>,
    pub groups: Vec<PosGroup>,
}

fn median(sorted: &[f64]) -> Option<f64> {
    let n = sorted.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(sorted[n / 2]),
        _ => Some((sorted[n / 2 - 1] + sorted[n / 2]) / 2.0),
    }
}

/// Histogram of scores per POS tag, all tags sharing the same bin edges.
pub fn pos_report(v: &PreferenceVector, table: &PosTable, tags: &[UdTag], bins: usize) -> Result<PosReport> {
    if bins == 0 {
        return Err(Error::InvalidArgument("bins must be positive".into()));
    }
    if table.len() != v.vocab.len() {
        return Err(Error::VocabMismatch(format!(
            "POS table covers {} tokens, vocabulary has {}",
            table.len(),
            v.vocab.len()
        )));
    }
    let max_abs = v
        .defined_ids()
        .filter_map(|id| v.score(id))
        .fold(0.0f64, |m, s| m.max(s.abs()));
    let half = if max_abs > 0.0 { max_abs } else { 1.0 };
    let width = 2.0 * half / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| -half + i as f64 * width).collect();
    let groups = tags
        .iter()
        .map(|&tag| {
            let mut scores: Vec<f64> = v
                .defined_ids()
                .filter(|&id| table.tag(id) == tag)
                .filter_map(|id| v.score(id))
                .collect();
            let mut counts = vec![0usize; bins];
            for &s in &scores {
                let b = (((s + half) / width).floor() as isize).clamp(0, bins as isize - 1);
                counts[b as usize] += 1;
            }
            let n = scores.len();
            let density = counts
                .iter()
                .map(|&c| if n > 0 { c as f64 / n as f64 } else { 0.0 })
                .collect();
            let mean = (n > 0).then(|| scores.iter().sum::<f64>() / n as f64);
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            scores.shrink_to_fit();
            PosGroup {
                tag,
                tokens: n,
                median: median(&sorted),
                scores,
                counts,
                density,
                mean,
            }
        })
        .collect();
    Ok(PosReport { edges, groups })
}
