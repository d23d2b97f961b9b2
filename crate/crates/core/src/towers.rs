//! Encoders, the two-tower composition and the per-tower output heads.
//!
//! Both towers read the same embedded input. Their hiddens at every scored
//! position are concatenated, projected to the embedding width by a joint
//! affine head, and scored against the (tied) embedding table. After joint
//! training each tower gets its own head so it can be evaluated alone.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, Task, PAD};
use crate::error::{Error, Result};
use crate::substrate::params::{join, uniform, EMBEDDING_INIT_BOUND};
use crate::substrate::{
    attention_block, attention_block_backward, gemm, lstm_sequence, lstm_sequence_backward,
    softmax_xent, softmax_xent_backward, Affine, AttentionCache, AttentionParams, LstmParams,
    Parameters, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelType {
    #[serde(rename = "cloze-lstm")]
    ClozeLstm,
    #[serde(rename = "causal-tfm")]
    CausalTfm,
    #[serde(rename = "mlm-tfm")]
    MlmTfm,
}

impl ModelType {
    pub fn task(self) -> Task {
        match self {
            ModelType::ClozeLstm => Task::Cloze,
            ModelType::CausalTfm => Task::Causal,
            ModelType::MlmTfm => Task::Mlm,
        }
    }

    pub fn is_transformer(self) -> bool {
        self != ModelType::ClozeLstm
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelType::ClozeLstm => "cloze-lstm",
            ModelType::CausalTfm => "causal-tfm",
            ModelType::MlmTfm => "mlm-tfm",
        }
    }
}

impl fmt::Display for ModelType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cloze-lstm" => Ok(ModelType::ClozeLstm),
            "causal-tfm" => Ok(ModelType::CausalTfm),
            "mlm-tfm" => Ok(ModelType::MlmTfm),
            _ => Err(Error::InvalidArgument(format!("unknown model type {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_type: ModelType,
    pub layers: usize,
    /// Width of each tower's hidden state.
    pub hidden_size: usize,
    /// Width of the embedding table (and of the projected head output).
    pub embed_size: usize,
    /// Attention heads; ignored by the LSTM encoder.
    pub heads: usize,
    /// Feed-forward width; ignored by the LSTM encoder.
    pub intermediate_size: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub mask_rate: f64,
}

pub const PRESETS: [&str; 7] = [
    "elmo",
    "gpt",
    "bert-base",
    "bert-large",
    "tiny-elmo",
    "tiny-gpt",
    "tiny-bert",
];

pub const DEFAULT_SCALE: usize = 8;
pub const DEFAULT_MASK_RATE: f64 = 0.15;

impl ModelConfig {
    /// Named configurations. The full-size names keep the reference layer
    /// counts and width ratios with widths divided by `scale`; the `tiny-*`
    /// names are small fixed configurations for quick experiments.
    pub fn preset(name: &str, scale: usize, vocab_size: usize, seq_len: usize) -> Result<Self> {
        if scale == 0 {
            return Err(Error::InvalidArgument("preset scale must be positive".into()));
        }
        let (model_type, layers, hidden, embed, heads, intermediate) = match name {
            "elmo" => (ModelType::ClozeLstm, 2, 4096 / scale, 512 / scale, 1, 0),
            "gpt" => (ModelType::CausalTfm, 12, 768 / scale, 768 / scale, 12, 3072 / scale),
            "bert-base" => (ModelType::MlmTfm, 12, 384 / scale, 384 / scale, 12, 1024 / scale),
            "bert-large" => (ModelType::MlmTfm, 24, 512 / scale, 512 / scale, 16, 2048 / scale),
            "tiny-elmo" => (ModelType::ClozeLstm, 1, 32, 32, 1, 0),
            "tiny-gpt" => (ModelType::CausalTfm, 2, 32, 32, 2, 64),
            "tiny-bert" => (ModelType::MlmTfm, 2, 32, 32, 2, 64),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown preset {name:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        let config = ModelConfig {
            model_type,
            layers,
            hidden_size: hidden,
            embed_size: embed,
            heads,
            intermediate_size: intermediate,
            vocab_size,
            seq_len,
            mask_rate: DEFAULT_MASK_RATE,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn task(&self) -> Task {
        self.model_type.task()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden_size", self.hidden_size),
            ("embed_size", self.embed_size),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.seq_len < 2 {
            return Err(Error::InvalidArgument("seq_len must be at least 2".into()));
        }
        if self.model_type.is_transformer() {
            if self.heads == 0 || self.hidden_size % self.heads != 0 {
                return Err(Error::InvalidArgument(format!(
                    "heads ({}) must divide hidden_size ({})",
                    self.heads, self.hidden_size
                )));
            }
            if self.intermediate_size == 0 {
                return Err(Error::InvalidArgument("intermediate_size must be positive".into()));
            }
        }
        if self.model_type == ModelType::MlmTfm && !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "mask_rate must lie in (0, 1), got {}",
                self.mask_rate
            )));
        }
        Ok(())
    }

    /// `key=value` lines, sorted by key.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("model_type".into(), self.model_type.to_string());
        m.insert("layers".into(), self.layers.to_string());
        m.insert("hidden_size".into(), self.hidden_size.to_string());
        m.insert("embed_size".into(), self.embed_size.to_string());
        m.insert("heads".into(), self.heads.to_string());
        m.insert("intermediate_size".into(), self.intermediate_size.to_string());
        m.insert("vocab_size".into(), self.vocab_size.to_string());
        m.insert("seq_len".into(), self.seq_len.to_string());
        m.insert("mask_rate".into(), self.mask_rate.to_string());
        m
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        fn get<'a>(kv: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
            kv.get(key)
                .map(String::as_str)
                .ok_or_else(|| Error::MalformedCheckpoint(format!("missing config key {key}")))
        }
        fn num<T: FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
            get(kv, key)?
                .parse()
                .map_err(|_| Error::MalformedCheckpoint(format!("bad value for config key {key}")))
        }
        let config = ModelConfig {
            model_type: get(kv, "model_type")?.parse()?,
            layers: num(kv, "layers")?,
            hidden_size: num(kv, "hidden_size")?,
            embed_size: num(kv, "embed_size")?,
            heads: num(kv, "heads")?,
            intermediate_size: num(kv, "intermediate_size")?,
            vocab_size: num(kv, "vocab_size")?,
            seq_len: num(kv, "seq_len")?,
            mask_rate: num(kv, "mask_rate")?,
        };
        config.validate()?;
        Ok(config)
    }
}

/// A bidirectional LSTM encoder: separate forward and backward stacks whose
/// top outputs around each position are combined into one hidden.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmTower {
    pub forward: Vec<LstmParams>,
    pub backward: Vec<LstmParams>,
    /// `2·hidden → hidden`
    pub combine: Affine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerTower {
    /// Present when the embedding and hidden widths differ.
    pub in_proj: Option<Affine>,
    pub blocks: Vec<AttentionParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TowerParams {
    Lstm(LstmTower),
    Transformer(TransformerTower),
}

impl TowerParams {
    pub fn new(rng: &mut impl Rng, config: &ModelConfig) -> Self {
        let (d_e, d_h) = (config.embed_size, config.hidden_size);
        match config.model_type {
            ModelType::ClozeLstm => {
                let stack = |rng: &mut _| {
                    (0..config.layers)
                        .map(|l| LstmParams::new(rng, if l == 0 { d_e } else { d_h }, d_h))
                        .collect::<Vec<_>>()
                };
                let forward = stack(rng);
                let backward = stack(rng);
                TowerParams::Lstm(LstmTower {
                    forward,
                    backward,
                    combine: Affine::new(rng, 2 * d_h, d_h),
                })
            }
            ModelType::CausalTfm | ModelType::MlmTfm => {
                let in_proj = (d_e != d_h).then(|| Affine::new(rng, d_e, d_h));
                let blocks = (0..config.layers)
                    .map(|_| AttentionParams::new(rng, d_h, config.intermediate_size))
                    .collect();
                TowerParams::Transformer(TransformerTower { in_proj, blocks })
            }
        }
    }
}

impl Parameters for TowerParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        match self {
            TowerParams::Lstm(t) => {
                for (l, p) in t.forward.iter().enumerate() {
                    p.visit(&join(prefix, &format!("fwd{l}")), f);
                }
                for (l, p) in t.backward.iter().enumerate() {
                    p.visit(&join(prefix, &format!("bwd{l}")), f);
                }
                t.combine.visit(&join(prefix, "combine"), f);
            }
            TowerParams::Transformer(t) => {
                if let Some(p) = &t.in_proj {
                    p.visit(&join(prefix, "in_proj"), f);
                }
                for (l, p) in t.blocks.iter().enumerate() {
                    p.visit(&join(prefix, &format!("block{l}")), f);
                }
            }
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        match self {
            TowerParams::Lstm(t) => {
                for (l, p) in t.forward.iter_mut().enumerate() {
                    p.visit_mut(&join(prefix, &format!("fwd{l}")), f);
                }
                for (l, p) in t.backward.iter_mut().enumerate() {
                    p.visit_mut(&join(prefix, &format!("bwd{l}")), f);
                }
                t.combine.visit_mut(&join(prefix, "combine"), f);
            }
            TowerParams::Transformer(t) => {
                if let Some(p) = &mut t.in_proj {
                    p.visit_mut(&join(prefix, "in_proj"), f);
                }
                for (l, p) in t.blocks.iter_mut().enumerate() {
                    p.visit_mut(&join(prefix, &format!("block{l}")), f);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoTowerParams {
    /// `vocab × embed`, shared by the input lookup and the output scoring.
    pub embedding: Tensor,
    /// `seq_len × embed`; transformer encoders only.
    pub positional: Option<Tensor>,
    pub tower1: TowerParams,
    pub tower2: TowerParams,
    /// `2·hidden → embed`; rows `0..hidden` read tower 1, the rest tower 2.
    pub joint_head: Affine,
}

impl TwoTowerParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_e = config.embed_size;
        let embedding = uniform(&mut rng, &[config.vocab_size, d_e], EMBEDDING_INIT_BOUND);
        let positional = config
            .model_type
            .is_transformer()
            .then(|| uniform(&mut rng, &[config.seq_len, d_e], EMBEDDING_INIT_BOUND));
        let tower1 = TowerParams::new(&mut rng, config);
        let tower2 = TowerParams::new(&mut rng, config);
        let joint_head = Affine::new(&mut rng, 2 * config.hidden_size, d_e);
        Ok(TwoTowerParams {
            embedding,
            positional,
            tower1,
            tower2,
            joint_head,
        })
    }

    /// The same model with the towers exchanged (and the joint head's halves
    /// exchanged to match).
    pub fn swapped(&self) -> Self {
        let d_h = self.joint_head.input_dim() / 2;
        let cols = self.joint_head.output_dim();
        let w = self.joint_head.w.data();
        let mut sw = Vec::with_capacity(w.len());
        sw.extend_from_slice(&w[d_h * cols..]);
        sw.extend_from_slice(&w[..d_h * cols]);
        TwoTowerParams {
            embedding: self.embedding.clone(),
            positional: self.positional.clone(),
            tower1: self.tower2.clone(),
            tower2: self.tower1.clone(),
            joint_head: Affine {
                w: Tensor::from_vec(self.joint_head.w.shape(), sw).expect("same shape"),
                b: self.joint_head.b.clone(),
            },
        }
    }
}

impl Parameters for TwoTowerParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "embedding"), &self.embedding);
        if let Some(p) = &self.positional {
            f(join(prefix, "positional"), p);
        }
        self.tower1.visit(&join(prefix, "tower1"), f);
        self.tower2.visit(&join(prefix, "tower2"), f);
        self.joint_head.visit(&join(prefix, "joint_head"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "embedding"), &mut self.embedding);
        if let Some(p) = &mut self.positional {
            f(join(prefix, "positional"), p);
        }
        self.tower1.visit_mut(&join(prefix, "tower1"), f);
        self.tower2.visit_mut(&join(prefix, "tower2"), f);
        self.joint_head.visit_mut(&join(prefix, "joint_head"), f);
    }
}

/// Per-tower output projections (`hidden → embed`) trained after the towers
/// are frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct TowerHeads {
    pub head1: Affine,
    pub head2: Affine,
}

impl TowerHeads {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head1 = Affine::new(&mut rng, config.hidden_size, config.embed_size);
        let head2 = Affine::new(&mut rng, config.hidden_size, config.embed_size);
        TowerHeads { head1, head2 }
    }

    /// Heads initialized from the matching halves of the joint head.
    pub fn from_joint(joint: &Affine) -> Self {
        let d_h = joint.input_dim() / 2;
        let cols = joint.output_dim();
        let w = joint.w.data();
        let half = |data: &[f64]| Affine {
            w: Tensor::from_vec(&[d_h, cols], data.to_vec()).expect("half of joint head"),
            b: joint.b.clone(),
        };
        TowerHeads {
            head1: half(&w[..d_h * cols]),
            head2: half(&w[d_h * cols..]),
        }
    }

    pub fn swapped(&self) -> Self {
        TowerHeads {
            head1: self.head2.clone(),
            head2: self.head1.clone(),
        }
    }
}

impl Parameters for TowerHeads {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.head1.visit(&join(prefix, "head1"), f);
        self.head2.visit(&join(prefix, "head2"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.head1.visit_mut(&join(prefix, "head1"), f);
        self.head2.visit_mut(&join(prefix, "head2"), f);
    }
}

fn check_batch(batch: &Batch, config: &ModelConfig) -> Result<()> {
    if batch.task != config.task() {
        return Err(Error::InvalidArgument(format!(
            "{} batch given to a {} model",
            batch.task, config.model_type
        )));
    }
    if batch.seq_len > config.seq_len {
        return Err(Error::InvalidArgument(format!(
            "sequence length {} exceeds the model's {}",
            batch.seq_len, config.seq_len
        )));
    }
    let n = batch.batch_size * batch.seq_len;
    if batch.inputs.len() != n || batch.targets.len() != n || batch.score_mask.len() != n {
        return Err(Error::InvalidArgument("batch arrays disagree with its shape".into()));
    }
    Ok(())
}

/// Token plus (for transformers) positional embeddings, `batch × len × embed`.
pub fn embed(params: &TwoTowerParams, batch: &Batch) -> Result<Tensor> {
    let (vocab, d_e) = (params.embedding.rows(), params.embedding.cols());
    let (bs, len) = (batch.batch_size, batch.seq_len);
    let mut out = vec![0.0; bs * len * d_e];
    for (r, (&id, row)) in batch.inputs.iter().zip(out.chunks_mut(d_e)).enumerate() {
        if id as usize >= vocab {
            return Err(Error::InvalidArgument(format!(
                "token id {id} outside vocabulary of {vocab}"
            )));
        }
        row.copy_from_slice(params.embedding.row(id as usize));
        if let Some(p) = &params.positional {
            for (o, v) in row.iter_mut().zip(p.row(r % len)) {
                *o += v;
            }
        }
    }
    Tensor::from_vec(&[bs, len, d_e], out)
}

fn embed_backward(params: &TwoTowerParams, batch: &Batch, dx: &Tensor, grad: &mut TwoTowerParams) {
    let d_e = params.embedding.cols();
    let len = batch.seq_len;
    for (r, (&id, drow)) in batch.inputs.iter().zip(dx.data().chunks(d_e)).enumerate() {
        for (g, d) in grad.embedding.row_mut(id as usize).iter_mut().zip(drow) {
            *g += d;
        }
        if let Some(p) = &mut grad.positional {
            for (g, d) in p.row_mut(r % len).iter_mut().zip(drow) {
                *g += d;
            }
        }
    }
}

enum TowerCache {
    Lstm {
        fwd: Vec<crate::substrate::lstm::LstmSequence>,
        bwd: Vec<crate::substrate::lstm::LstmSequence>,
        combined: Tensor,
    },
    Transformer {
        projected: Option<Tensor>,
        blocks: Vec<AttentionCache>,
    },
}

/// Splits `batch × len × dim` into one `batch × dim` tensor per time step.
fn time_major(x: &Tensor) -> Vec<Tensor> {
    let s = x.shape();
    let (bs, len, dim) = (s[0], s[1], s[2]);
    (0..len)
        .map(|t| {
            let mut d = Vec::with_capacity(bs * dim);
            for b in 0..bs {
                d.extend_from_slice(&x.data()[(b * len + t) * dim..][..dim]);
            }
            Tensor::from_vec(&[bs, dim], d).expect("sized")
        })
        .collect()
}

fn batch_major(steps: &[Tensor], bs: usize, dim: usize) -> Tensor {
    let len = steps.len();
    let mut d = vec![0.0; bs * len * dim];
    for (t, step) in steps.iter().enumerate() {
        for b in 0..bs {
            d[(b * len + t) * dim..][..dim].copy_from_slice(step.row(b));
        }
    }
    Tensor::from_vec(&[bs, len, dim], d).expect("sized")
}

fn encode_with_cache(tower: &TowerParams, x: &Tensor, config: &ModelConfig) -> Result<(Tensor, TowerCache)> {
    let (bs, len) = (x.shape()[0], x.shape()[1]);
    match tower {
        TowerParams::Lstm(t) => {
            let d_h = config.hidden_size;
            let xs = time_major(x);
            let run = |stack: &[LstmParams], reverse: bool| -> Result<_> {
                let mut seqs = Vec::with_capacity(stack.len());
                let mut inputs = xs.clone();
                for p in stack {
                    let seq = lstm_sequence(&inputs, p, reverse)?;
                    inputs = seq.outputs.clone();
                    seqs.push(seq);
                }
                Ok((seqs, inputs))
            };
            let (fwd, f_top) = run(&t.forward, false)?;
            let (bwd, b_top) = run(&t.backward, true)?;
            // Position i sees the forward state through i-1 and the backward
            // state from i+1; out-of-range neighbours contribute zeros.
            let mut combined = vec![0.0; bs * len * 2 * d_h];
            for i in 0..len {
                for b in 0..bs {
                    let row = &mut combined[(b * len + i) * 2 * d_h..][..2 * d_h];
                    if i > 0 {
                        row[..d_h].copy_from_slice(f_top[i - 1].row(b));
                    }
                    if i + 1 < len {
                        row[d_h..].copy_from_slice(b_top[i + 1].row(b));
                    }
                }
            }
            let combined = Tensor::from_vec(&[bs, len, 2 * d_h], combined)?;
            let h = t.combine.forward(&combined)?;
            Ok((h, TowerCache::Lstm { fwd, bwd, combined }))
        }
        TowerParams::Transformer(t) => {
            let causal = config.model_type == ModelType::CausalTfm;
            let projected = match &t.in_proj {
                Some(p) => Some(p.forward(x)?),
                None => None,
            };
            let mut h = projected.clone().unwrap_or_else(|| x.clone());
            let mut blocks = Vec::with_capacity(t.blocks.len());
            for p in &t.blocks {
                let (out, cache) = attention_block(&h, p, config.heads, causal)?;
                h = out;
                blocks.push(cache);
            }
            Ok((h, TowerCache::Transformer { projected, blocks }))
        }
    }
}

fn encode_backward(
    tower: &TowerParams,
    x: &Tensor,
    cache: &TowerCache,
    dh: &Tensor,
    grad: &mut TowerParams,
) -> Result<Tensor> {
    let (bs, len) = (x.shape()[0], x.shape()[1]);
    match (tower, cache, grad) {
        (TowerParams::Lstm(t), TowerCache::Lstm { fwd, bwd, combined }, TowerParams::Lstm(g)) => {
            let d_h = t.combine.output_dim();
            let dc = t.combine.backward(combined, dh, &mut g.combine)?;
            let mut df = vec![Tensor::zeros(&[bs, d_h]); len];
            let mut db = vec![Tensor::zeros(&[bs, d_h]); len];
            for i in 0..len {
                for b in 0..bs {
                    let row = &dc.data()[(b * len + i) * 2 * d_h..][..2 * d_h];
                    if i > 0 {
                        df[i - 1].row_mut(b).copy_from_slice(&row[..d_h]);
                    }
                    if i + 1 < len {
                        db[i + 1].row_mut(b).copy_from_slice(&row[d_h..]);
                    }
                }
            }
            for (l, seq) in fwd.iter().enumerate().rev() {
                df = lstm_sequence_backward(seq, &df, &t.forward[l], &mut g.forward[l]);
            }
            for (l, seq) in bwd.iter().enumerate().rev() {
                db = lstm_sequence_backward(seq, &db, &t.backward[l], &mut g.backward[l]);
            }
            for (a, b) in df.iter_mut().zip(&db) {
                a.add_assign(b);
            }
            Ok(batch_major(&df, bs, x.shape()[2]))
        }
        (
            TowerParams::Transformer(t),
            TowerCache::Transformer { projected, blocks },
            TowerParams::Transformer(g),
        ) => {
            let mut d = dh.clone();
            for (l, c) in blocks.iter().enumerate().rev() {
                d = attention_block_backward(c, &d, &t.blocks[l], &mut g.blocks[l])?;
            }
            match (&t.in_proj, projected, &mut g.in_proj) {
                (Some(p), Some(_), Some(gp)) => p.backward(x, &d, gp),
                _ => Ok(d),
            }
        }
        _ => Err(Error::InvalidArgument("tower and cache kinds disagree".into())),
    }
}

/// Hiddens (`batch × len × hidden`) of one tower for `batch`.
///
/// Visibility per encoder: the cloze LSTM's hidden at `i` never reads the
/// token at `i`; the causal transformer's hidden at `i` reads tokens `≤ i`
/// (and scores token `i+1`); the MLM transformer reads everything, with the
/// scored positions already replaced by `[MASK]`.
pub fn encode_tower(
    params: &TwoTowerParams,
    tower: &TowerParams,
    batch: &Batch,
    config: &ModelConfig,
) -> Result<Tensor> {
    check_batch(batch, config)?;
    let x = embed(params, batch)?;
    Ok(encode_with_cache(tower, &x, config)?.0)
}

/// Both towers' hiddens for `batch`.
pub fn encode_both(params: &TwoTowerParams, batch: &Batch, config: &ModelConfig) -> Result<(Tensor, Tensor)> {
    check_batch(batch, config)?;
    let x = embed(params, batch)?;
    let h1 = encode_with_cache(&params.tower1, &x, config)?.0;
    let h2 = encode_with_cache(&params.tower2, &x, config)?.0;
    Ok((h1, h2))
}

fn gather_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let c = t.cols();
    let mut d = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        d.extend_from_slice(t.row(r));
    }
    Tensor::from_vec(&[rows.len(), c], d).expect("sized")
}

/// `z·Eᵀ` with the `[PAD]` column forced to `-inf`, so `[PAD]` is never predicted.
pub fn tied_logits(z: &Tensor, embedding: &Tensor) -> Result<Tensor> {
    let (n, d_e) = (z.rows(), z.cols());
    let v = embedding.rows();
    if embedding.cols() != d_e {
        return Err(Error::ShapeMismatch {
            left: z.shape().to_vec(),
            right: embedding.shape().to_vec(),
            context: "projected hidden vs embedding",
        });
    }
    let mut logits = vec![0.0; n * v];
    gemm(n, d_e, v, z.data(), false, embedding.data(), true, &mut logits, false);
    for row in logits.chunks_mut(v) {
        row[PAD as usize] = f64::NEG_INFINITY;
    }
    Tensor::from_vec(&[n, v], logits)
}

/// `h1·W_top + h2·W_bottom + b`, with the two products formed separately so
/// exchanging the towers and the halves reproduces the result bit for bit.
pub fn joint_projection(h1: &Tensor, h2: &Tensor, head: &Affine) -> Result<Tensor> {
    let (n, d_h) = (h1.rows(), h1.cols());
    let d_e = head.output_dim();
    if h2.rows() != n || h2.cols() != d_h || head.input_dim() != 2 * d_h {
        return Err(Error::ShapeMismatch {
            left: h1.shape().to_vec(),
            right: head.w.shape().to_vec(),
            context: "tower hiddens vs joint head",
        });
    }
    let w = head.w.data();
    let mut top = vec![0.0; n * d_e];
    gemm(n, d_h, d_e, h1.data(), false, &w[..d_h * d_e], false, &mut top, false);
    let mut bottom = vec![0.0; n * d_e];
    gemm(n, d_h, d_e, h2.data(), false, &w[d_h * d_e..], false, &mut bottom, false);
    for (t, b) in top.chunks_mut(d_e).zip(bottom.chunks(d_e)) {
        for ((tv, bv), bias) in t.iter_mut().zip(b).zip(head.b.data()) {
            *tv = (*tv + bv) + bias;
        }
    }
    Tensor::from_vec(&[n, d_e], top)
}

/// Result of a joint forward pass, restricted to scored positions.
#[derive(Clone, Debug)]
pub struct JointOutput {
    pub loss: f64,
    /// Flat `batch·len` indices of the scored positions, in order.
    pub positions: Vec<usize>,
    /// `scored × vocab` probabilities.
    pub probs: Tensor,
}

struct JointTrace {
    x: Tensor,
    caches: [TowerCache; 2],
    hs: [Tensor; 2],
    z: Tensor,
    targets: Vec<u32>,
    xent: crate::substrate::SoftmaxXent,
    positions: Vec<usize>,
}

fn joint_trace(params: &TwoTowerParams, batch: &Batch, config: &ModelConfig) -> Result<JointTrace> {
    check_batch(batch, config)?;
    let positions = batch.scored_positions();
    if positions.is_empty() {
        return Err(Error::NoScorablePositions);
    }
    let x = embed(params, batch)?;
    let (h1, c1) = encode_with_cache(&params.tower1, &x, config)?;
    let (h2, c2) = encode_with_cache(&params.tower2, &x, config)?;
    let hs = [gather_rows(&h1, &positions), gather_rows(&h2, &positions)];
    let z = joint_projection(&hs[0], &hs[1], &params.joint_head)?;
    let logits = tied_logits(&z, &params.embedding)?;
    let targets: Vec<u32> = positions.iter().map(|&p| batch.targets[p]).collect();
    let xent = softmax_xent(&logits, &targets, &vec![true; positions.len()])?;
    Ok(JointTrace {
        x,
        caches: [c1, c2],
        hs,
        z,
        targets,
        xent,
        positions,
    })
}

/// Joint-model loss (mean negative log-likelihood over scored positions) and
/// the full predictive distributions at those positions.
pub fn two_tower_forward(params: &TwoTowerParams, batch: &Batch, config: &ModelConfig) -> Result<JointOutput> {
    let t = joint_trace(params, batch, config)?;
    Ok(JointOutput {
        loss: t.xent.loss,
        positions: t.positions,
        probs: t.xent.probs,
    })
}

/// Joint-model loss and its gradient with respect to every parameter.
pub fn two_tower_loss_and_grad(
    params: &TwoTowerParams,
    batch: &Batch,
    config: &ModelConfig,
) -> Result<(f64, TwoTowerParams)> {
    let t = joint_trace(params, batch, config)?;
    let n = t.positions.len();
    let mask = vec![true; n];
    let dlogits = softmax_xent_backward(&t.xent, &t.targets, &mask);
    let mut grad = params.zeros_like();
    let (v, d_e) = (params.embedding.rows(), params.embedding.cols());
    // Output side of the tied embedding.
    gemm(v, n, d_e, dlogits.data(), true, t.z.data(), false, grad.embedding.data_mut(), true);
    let mut dz = vec![0.0; n * d_e];
    gemm(n, v, d_e, dlogits.data(), false, params.embedding.data(), false, &mut dz, false);
    let dz = Tensor::from_vec(&[n, d_e], dz)?;

    let hcat = concat_cols(&t.hs[0], &t.hs[1]);
    let dhcat = params.joint_head.backward(&hcat, &dz, &mut grad.joint_head)?;
    let d_h = t.hs[0].cols();
    let (bs, len) = (batch.batch_size, batch.seq_len);
    let mut dh = [Tensor::zeros(&[bs, len, d_h]), Tensor::zeros(&[bs, len, d_h])];
    for (k, &p) in t.positions.iter().enumerate() {
        let row = dhcat.row(k);
        dh[0].row_mut(p).copy_from_slice(&row[..d_h]);
        dh[1].row_mut(p).copy_from_slice(&row[d_h..]);
    }
    let mut dx = encode_backward(&params.tower1, &t.x, &t.caches[0], &dh[0], &mut grad.tower1)?;
    let dx2 = encode_backward(&params.tower2, &t.x, &t.caches[1], &dh[1], &mut grad.tower2)?;
    dx.add_assign(&dx2);
    embed_backward(params, batch, &dx, &mut grad);
    Ok((t.xent.loss, grad))
}

fn concat_cols(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, ca, cb) = (a.rows(), a.cols(), b.cols());
    let mut d = Vec::with_capacity(n * (ca + cb));
    for r in 0..n {
        d.extend_from_slice(a.row(r));
        d.extend_from_slice(b.row(r));
    }
    Tensor::from_vec(&[n, ca + cb], d).expect("sized")
}

/// Per-tower distributions at the scored positions of `batch`:
/// `p_k = softmax(head_k(h_k)·Eᵀ)`. `hiddens1`/`hiddens2` are full
/// `batch × len × hidden` encoder outputs.
pub fn tower_head_forward(
    heads: &TowerHeads,
    hiddens1: &Tensor,
    hiddens2: &Tensor,
    embedding: &Tensor,
    batch: &Batch,
) -> Result<(Tensor, Tensor)> {
    let positions = batch.scored_positions();
    if positions.is_empty() {
        return Err(Error::NoScorablePositions);
    }
    let mut out = Vec::with_capacity(2);
    for (head, h) in [(&heads.head1, hiddens1), (&heads.head2, hiddens2)] {
        if h.rows() != batch.batch_size * batch.seq_len {
            return Err(Error::ShapeMismatch {
                left: h.shape().to_vec(),
                right: vec![batch.batch_size, batch.seq_len],
                context: "tower hiddens vs batch",
            });
        }
        let z = head.forward(&gather_rows(h, &positions))?;
        out.push(crate::substrate::softmax_rows(&tied_logits(&z, embedding)?));
    }
    let p2 = out.pop().expect("two heads");
    let p1 = out.pop().expect("two heads");
    Ok((p1, p2))
}

/// Losses of both heads on `batch` and the gradient of `loss1 + loss2`
/// with respect to the heads. Only the heads receive gradients; the hiddens
/// and embedding are treated as constants.
pub fn heads_loss_and_grad(
    heads: &TowerHeads,
    hiddens1: &Tensor,
    hiddens2: &Tensor,
    embedding: &Tensor,
    batch: &Batch,
) -> Result<([f64; 2], TowerHeads)> {
    let positions = batch.scored_positions();
    if positions.is_empty() {
        return Err(Error::NoScorablePositions);
    }
    let targets: Vec<u32> = positions.iter().map(|&p| batch.targets[p]).collect();
    let mask = vec![true; positions.len()];
    let mut grad = heads.zeros_like();
    let mut losses = [0.0; 2];
    let (v, d_e) = (embedding.rows(), embedding.cols());
    for (k, (head, h)) in [(&heads.head1, hiddens1), (&heads.head2, hiddens2)]
        .into_iter()
        .enumerate()
    {
        let hs = gather_rows(h, &positions);
        let z = head.forward(&hs)?;
        let xent = softmax_xent(&tied_logits(&z, embedding)?, &targets, &mask)?;
        let dlogits = softmax_xent_backward(&xent, &targets, &mask);
        let n = positions.len();
        let mut dz = vec![0.0; n * d_e];
        gemm(n, v, d_e, dlogits.data(), false, embedding.data(), false, &mut dz, false);
        let dz = Tensor::from_vec(&[n, d_e], dz)?;
        let g = if k == 0 { &mut grad.head1 } else { &mut grad.head2 };
        head.backward(&hs, &dz, g)?;
        losses[k] = xent.loss;
    }
    Ok((losses, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(model_type: ModelType) -> ModelConfig {
        ModelConfig {
            model_type,
            layers: 1,
            hidden_size: 4,
            embed_size: 4,
            heads: 2,
            intermediate_size: 8,
            vocab_size: 10,
            seq_len: 5,
            mask_rate: 0.4,
        }
    }

    fn batch(task: Task, inputs: Vec<u32>, bs: usize, len: usize) -> Batch {
        let (targets, score_mask) = match task {
            Task::Cloze => (inputs.clone(), vec![true; inputs.len()]),
            Task::Causal => {
                let mut t = Vec::new();
                let mut m = Vec::new();
                for row in inputs.chunks(len) {
                    t.extend_from_slice(&row[1..]);
                    t.push(PAD);
                    m.extend(std::iter::repeat(true).take(len - 1));
                    m.push(false);
                }
                (t, m)
            }
            Task::Mlm => {
                let m: Vec<bool> = inputs.iter().map(|&i| i == crate::corpus::MASK).collect();
                (inputs.clone(), m)
            }
        };
        Batch {
            task,
            batch_size: bs,
            seq_len: len,
            inputs,
            targets,
            score_mask,
        }
    }

    #[test]
    fn presets_validate_and_scale() {
        for name in PRESETS {
            let c = ModelConfig::preset(name, DEFAULT_SCALE, 100, 16).unwrap();
            c.validate().unwrap();
        }
        let gpt = ModelConfig::preset("gpt", 8, 100, 16).unwrap();
        assert_eq!((gpt.layers, gpt.hidden_size, gpt.intermediate_size, gpt.heads), (12, 96, 384, 12));
        assert!(ModelConfig::preset("nope", 8, 100, 16).is_err());
    }

    #[test]
    fn heads_must_divide_hidden() {
        let mut c = tiny(ModelType::CausalTfm);
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_kv_round_trip() {
        let c = tiny(ModelType::MlmTfm);
        assert_eq!(ModelConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn task_mismatch_is_rejected() {
        let c = tiny(ModelType::CausalTfm);
        let p = TwoTowerParams::init(&c, 1).unwrap();
        let b = batch(Task::Cloze, vec![3, 4, 5, 6, 7], 1, 5);
        assert!(two_tower_forward(&p, &b, &c).is_err());
    }

    #[test]
    fn hand_evaluated_joint_probability() {
        // V = 3 ([PAD], [UNK], [MASK]), d_h = 1 per tower, d_e = 2.
        let e = Tensor::from_rows(&[vec![0.3, -0.2], vec![1.0, 0.5], vec![-0.5, 2.0]]);
        let head = Affine {
            w: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, -1.0]]),
            b: Tensor::from_vec(&[2], vec![0.1, 0.2]).unwrap(),
        };
        let h1 = Tensor::from_rows(&[vec![2.0]]);
        let h2 = Tensor::from_rows(&[vec![-1.0]]);
        let z = joint_projection(&h1, &h2, &head).unwrap();
        // z = 2·[1,0] + (−1)·[0.5,−1] + [0.1,0.2] = [1.6, 1.2]
        assert!((z.data()[0] - 1.6).abs() < 1e-15 && (z.data()[1] - 1.2).abs() < 1e-15);
        let logits = tied_logits(&z, &e).unwrap();
        let p = crate::substrate::softmax_rows(&logits);
        // logits: unk 1.6+0.6 = 2.2, mask −0.8+2.4 = 1.6, pad excluded
        let p_unk = 1.0 / (1.0 + (1.6f64 - 2.2).exp());
        assert_eq!(p.data()[0], 0.0);
        assert!((p.data()[1] - p_unk).abs() < 1e-12);
        assert!((p.data()[2] - (1.0 - p_unk)).abs() < 1e-12);
    }

    #[test]
    fn hand_evaluated_head_probability() {
        let e = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let heads = TowerHeads {
            head1: Affine {
                w: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
                b: Tensor::zeros(&[2]),
            },
            head2: Affine {
                w: Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]),
                b: Tensor::zeros(&[2]),
            },
        };
        let h = Tensor::from_vec(&[1, 1, 2], vec![1.0, 0.0]).unwrap();
        let b = batch(Task::Cloze, vec![1], 1, 1);
        let (p1, p2) = tower_head_forward(&heads, &h, &h, &e, &b).unwrap();
        let hi = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((p1.data()[1] - hi).abs() < 1e-12);
        assert!((p2.data()[2] - hi).abs() < 1e-12);
        assert_eq!(p1.data()[0], 0.0);
    }

    #[test]
    fn swap_leaves_loss_bitwise_unchanged() {
        for mt in [ModelType::ClozeLstm, ModelType::CausalTfm] {
            let c = tiny(mt);
            let p = TwoTowerParams::init(&c, 7).unwrap();
            let b = batch(mt.task(), vec![3, 4, 5, 6, 7, 8, 9, 3, 4, 5], 2, 5);
            let a = two_tower_forward(&p, &b, &c).unwrap();
            let s = two_tower_forward(&p.swapped(), &b, &c).unwrap();
            assert_eq!(a.loss.to_bits(), s.loss.to_bits());
            assert_eq!(a.probs, s.probs);
        }
    }

    #[test]
    fn probabilities_are_normalized() {
        let c = tiny(ModelType::MlmTfm);
        let p = TwoTowerParams::init(&c, 3).unwrap();
        let b = batch(Task::Mlm, vec![3, 2, 5, 2, 7], 1, 5);
        let out = two_tower_forward(&p, &b, &c).unwrap();
        assert_eq!(out.positions, vec![1, 3]);
        for r in 0..out.probs.rows() {
            assert!((out.probs.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn from_joint_heads_split_the_joint_weights() {
        let c = tiny(ModelType::CausalTfm);
        let p = TwoTowerParams::init(&c, 3).unwrap();
        let h = TowerHeads::from_joint(&p.joint_head);
        assert_eq!(h.head1.w.data(), &p.joint_head.w.data()[..16]);
        assert_eq!(h.head2.w.data(), &p.joint_head.w.data()[16..]);
    }
}
