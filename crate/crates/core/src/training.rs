//! Joint training, per-tower head retraining, tower ordering and checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::corpus::{make_batches, BatchConfig, Task, TokenStream};
use crate::error::{Error, Result};
use crate::substrate::{AdamConfig, AdamState, Parameters, Tensor};
use crate::towers::{
    encode_both, heads_loss_and_grad, tower_head_forward, two_tower_loss_and_grad, ModelConfig,
    TowerHeads, TwoTowerParams,
};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TTLM";
pub const CHECKPOINT_VERSION: u8 = 1;
pub const DEFAULT_LOG_EVERY: usize = 100;

/// How phase-2 heads start out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadInit {
    /// Freshly initialized projections.
    Fresh,
    /// Copies of the joint head's halves.
    CopyJoint,
}

impl fmt::Display for HeadInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadInit::Fresh => "fresh",
            HeadInit::CopyJoint => "copy",
        })
    }
}

impl FromStr for HeadInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fresh" => Ok(HeadInit::Fresh),
            "copy" => Ok(HeadInit::CopyJoint),
            _ => Err(Error::InvalidArgument(format!("unknown head init {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Loss history granularity, in steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 32,
            adam: AdamConfig::default(),
            log_every: DEFAULT_LOG_EVERY,
        }
    }
}

/// Which tower is primary after ordering, with the evidence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TowerOrder {
    /// 1 or 2.
    pub primary: u8,
    /// The two means were exactly equal; tower 1 was kept as primary.
    pub tie: bool,
    /// Mean correct-token probability of tower 1 and tower 2.
    pub mean_p: [f64; 2],
}

impl TowerOrder {
    pub fn secondary(&self) -> u8 {
        3 - self.primary
    }

    pub fn swapped(&self) -> Self {
        TowerOrder {
            primary: self.secondary(),
            ..*self
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: TwoTowerParams,
    pub heads: Option<TowerHeads>,
    pub tower_order: Option<TowerOrder>,
    pub seed: u64,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub head_init: Option<HeadInit>,
    pub phase2_seed: Option<u64>,
    /// Mean joint loss over each logging interval of phase 1.
    pub loss_history: Vec<f64>,
    /// Mean per-head losses over each logging interval of phase 2.
    pub head_loss_history: Vec<[f64; 2]>,
    /// Fingerprint of the vocabulary the model was trained with, if known.
    pub vocab_id: String,
}

/// Derives independent sub-seeds (splitmix64 finalizer over seed and tag).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_PHASE1_EPOCH: u64 = 0x1000;
const TAG_PHASE2_EPOCH: u64 = 0x2000;
const TAG_HEADS: u64 = 0x3000;
const TAG_EVAL_MASK: u64 = 0x4000;

/// Endless shuffled batches: each pass over the stream is reshuffled with a
/// seed derived from `seed` and the pass number.
fn for_each_training_batch(
    stream: &TokenStream,
    config: &ModelConfig,
    batch_size: usize,
    seed: u64,
    tag: u64,
    steps: usize,
    mut f: impl FnMut(usize, &crate::corpus::Batch) -> Result<()>,
) -> Result<()> {
    let mut step = 0;
    let mut epoch = 0u64;
    while step < steps {
        let cfg = BatchConfig {
            task: config.task(),
            seq_len: config.seq_len,
            batch_size,
            mask_rate: config.mask_rate,
            seed: derive_seed(seed, tag + epoch),
            shuffle: true,
        };
        for batch in make_batches(stream, &cfg)? {
            if step >= steps {
                break;
            }
            f(step, &batch)?;
            step += 1;
        }
        epoch += 1;
    }
    Ok(())
}

struct IntervalMean<const N: usize> {
    every: usize,
    sum: [f64; N],
    n: usize,
    history: Vec<[f64; N]>,
}

impl<const N: usize> IntervalMean<N> {
    fn new(every: usize) -> Self {
        IntervalMean {
            every: every.max(1),
            sum: [0.0; N],
            n: 0,
            history: Vec::new(),
        }
    }

    fn push(&mut self, v: [f64; N]) {
        for (s, x) in self.sum.iter_mut().zip(v) {
            *s += x;
        }
        self.n += 1;
        if self.n == self.every {
            self.flush();
        }
    }

    /// Records the trailing partial interval, if any.
    fn flush(&mut self) -> &Vec<[f64; N]> {
        if self.n > 0 {
            self.history.push(self.sum.map(|s| s / self.n as f64));
            self.sum = [0.0; N];
            self.n = 0;
        }
        &self.history
    }
}

fn validate_train(train: &TrainConfig) -> Result<()> {
    if train.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    if !(train.adam.lr >= 0.0) || !train.adam.lr.is_finite() {
        return Err(Error::InvalidArgument("learning rate must be finite and non-negative".into()));
    }
    Ok(())
}

/// Phase 1: trains both towers, the embedding and the joint head together.
pub fn train_joint(config: &ModelConfig, stream: &TokenStream, seed: u64, train: &TrainConfig) -> Result<Checkpoint> {
    if train.steps == 0 {
        return Err(Error::InvalidArgument("phase 1 needs at least one step".into()));
    }
    validate_train(train)?;
    let mut params = TwoTowerParams::init(config, seed)?;
    let mut adam = AdamState::new(train.adam, params.tensors());
    let mut log = IntervalMean::<1>::new(train.log_every);
    for_each_training_batch(stream, config, train.batch_size, seed, TAG_PHASE1_EPOCH, train.steps, |step, batch| {
        let (loss, grad) = two_tower_loss_and_grad(&params, batch, config)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: step + 1 });
        }
        adam.step(params.tensors_mut(), grad.tensors())?;
        log.push([loss]);
        if (step + 1) % 100 == 0 {
            log::debug!("phase 1 step {}: loss {loss:.4}", step + 1);
        }
        Ok(())
    })?;
    let loss_history = log.flush().iter().map(|v| v[0]).collect();
    Ok(Checkpoint {
        config: config.clone(),
        params,
        heads: None,
        tower_order: None,
        seed,
        phase1_steps: train.steps,
        phase2_steps: 0,
        batch_size: train.batch_size,
        adam: train.adam,
        head_init: None,
        phase2_seed: None,
        loss_history,
        head_loss_history: Vec::new(),
        vocab_id: String::new(),
    })
}

/// Phase 2: freezes the embedding and both towers and trains one head per
/// tower, each against its own tower's predictions and with its own Adam
/// state. Any previous ordering is discarded.
pub fn train_heads(
    ckpt: &Checkpoint,
    stream: &TokenStream,
    seed: u64,
    train: &TrainConfig,
    init: HeadInit,
) -> Result<Checkpoint> {
    validate_train(train)?;
    let config = &ckpt.config;
    let mut heads = match init {
        HeadInit::Fresh => TowerHeads::init(config, derive_seed(seed, TAG_HEADS)),
        HeadInit::CopyJoint => TowerHeads::from_joint(&ckpt.params.joint_head),
    };
    let mut adam1 = AdamState::new(train.adam, heads.head1.tensors());
    let mut adam2 = AdamState::new(train.adam, heads.head2.tensors());
    let mut log = IntervalMean::<2>::new(train.log_every);
    let params = &ckpt.params;
    for_each_training_batch(stream, config, train.batch_size, seed, TAG_PHASE2_EPOCH, train.steps, |step, batch| {
        let (h1, h2) = encode_both(params, batch, config)?;
        let (losses, grad) = heads_loss_and_grad(&heads, &h1, &h2, &params.embedding, batch)?;
        if !losses.iter().all(|l| l.is_finite()) {
            return Err(Error::NonFiniteLoss { step: step + 1 });
        }
        adam1.step(heads.head1.tensors_mut(), grad.head1.tensors())?;
        adam2.step(heads.head2.tensors_mut(), grad.head2.tensors())?;
        log.push(losses);
        Ok(())
    })?;
    let head_loss_history = log.flush().clone();
    Ok(Checkpoint {
        heads: Some(heads),
        tower_order: None,
        phase2_steps: train.steps,
        head_init: Some(init),
        phase2_seed: Some(seed),
        head_loss_history,
        ..ckpt.clone()
    })
}

/// Settings for read-only passes over an evaluation stream. Sequences are
/// taken in corpus order. For MLM the stream is scored `mask_passes` times,
/// each pass with its own mask drawn from `mask_seed`; the other tasks score
/// every position in a single pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub batch_size: usize,
    pub mask_seed: u64,
    pub mask_passes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            batch_size: 64,
            mask_seed: 0,
            mask_passes: 1,
        }
    }
}

/// Calls `f(target, p1, p2)` for every scored position of `stream` in a fixed
/// order, where `p1`/`p2` are tower 1's and tower 2's head distributions.
pub fn for_each_scored(
    ckpt: &Checkpoint,
    stream: &TokenStream,
    eval: &EvalConfig,
    mut f: impl FnMut(u32, &[f64], &[f64]),
) -> Result<usize> {
    let heads = ckpt.heads.as_ref().ok_or(Error::MissingHeads)?;
    if stream.is_empty() {
        return Err(Error::EmptyEvalStream);
    }
    if eval.mask_passes == 0 {
        return Err(Error::InvalidArgument("mask_passes must be positive".into()));
    }
    let config = &ckpt.config;
    let passes = if config.task() == Task::Mlm { eval.mask_passes } else { 1 };
    let mut count = 0;
    for pass in 0..passes {
        let cfg = BatchConfig {
            task: config.task(),
            seq_len: config.seq_len,
            batch_size: eval.batch_size,
            mask_rate: config.mask_rate,
            seed: derive_seed(eval.mask_seed, TAG_EVAL_MASK + pass as u64),
            shuffle: false,
        };
        let batches = make_batches(stream, &cfg).map_err(|e| match e {
            Error::CorpusTooShort { .. } => Error::EmptyEvalStream,
            e => e,
        })?;
        for batch in batches {
            let (h1, h2) = encode_both(&ckpt.params, &batch, config)?;
            let (p1, p2) = tower_head_forward(heads, &h1, &h2, &ckpt.params.embedding, &batch)?;
            for (k, pos) in batch.scored_positions().into_iter().enumerate() {
                f(batch.targets[pos], p1.row(k), p2.row(k));
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyEvalStream);
    }
    Ok(count)
}

/// Mean correct-token probability of each tower's head over `stream`.
pub fn mean_correct_probability(ckpt: &Checkpoint, stream: &TokenStream, eval: &EvalConfig) -> Result<[f64; 2]> {
    let mut sum = [0.0; 2];
    let n = for_each_scored(ckpt, stream, eval, |t, p1, p2| {
        sum[0] += p1[t as usize];
        sum[1] += p2[t as usize];
    })?;
    Ok(sum.map(|s| s / n as f64))
}

/// Marks as primary the tower whose head gives the higher mean probability
/// to the correct token on `stream`; an exact tie keeps tower 1.
pub fn order_towers(ckpt: &Checkpoint, stream: &TokenStream, eval: &EvalConfig) -> Result<Checkpoint> {
    let mean_p = mean_correct_probability(ckpt, stream, eval)?;
    let order = TowerOrder {
        primary: if mean_p[1] > mean_p[0] { 2 } else { 1 },
        tie: mean_p[0] == mean_p[1],
        mean_p,
    };
    Ok(Checkpoint {
        tower_order: Some(order),
        ..ckpt.clone()
    })
}

fn join_floats(v: impl IntoIterator<Item = f64>) -> String {
    v.into_iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| {
            x.parse()
                .map_err(|_| Error::MalformedCheckpoint(format!("bad number {x:?}")))
        })
        .collect()
}

impl Checkpoint {
    fn header(&self) -> BTreeMap<String, String> {
        let mut kv = self.config.to_kv();
        let mut put = |k: &str, v: String| {
            kv.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("phase1_steps", self.phase1_steps.to_string());
        put("phase2_steps", self.phase2_steps.to_string());
        put("batch_size", self.batch_size.to_string());
        put("adam.lr", format!("{:?}", self.adam.lr));
        put("adam.beta1", format!("{:?}", self.adam.beta1));
        put("adam.beta2", format!("{:?}", self.adam.beta2));
        put("adam.eps", format!("{:?}", self.adam.eps));
        put("adam.weight_decay", format!("{:?}", self.adam.weight_decay));
        put("has_heads", self.heads.is_some().to_string());
        if let Some(h) = self.head_init {
            put("head_init", h.to_string());
        }
        if let Some(s) = self.phase2_seed {
            put("phase2_seed", s.to_string());
        }
        if let Some(o) = &self.tower_order {
            put("tower_order.primary", o.primary.to_string());
            put("tower_order.tie", o.tie.to_string());
            put("tower_order.mean_p", join_floats(o.mean_p));
        }
        put("loss_history", join_floats(self.loss_history.iter().copied()));
        put(
            "head_loss_history",
            join_floats(self.head_loss_history.iter().flat_map(|p| *p)),
        );
        put("vocab_id", self.vocab_id.clone());
        kv
    }

    /// Serialized checkpoint bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        let header: String = self
            .header()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        let mut tensors = self.params.named_tensors();
        if let Some(h) = &self.heads {
            h.visit("heads", &mut |n, t| tensors.push((n, t)));
        }
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        if r.read_exact(&mut magic).is_err() || &magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = read_u8(&mut r, "version byte")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "checkpoint",
                found: version.to_string(),
                expected: CHECKPOINT_VERSION.to_string(),
            });
        }
        let len = read_len(&mut r, "config block")?;
        let block = read_bytes(&mut r, len, "config block")?;
        let text = String::from_utf8(block)
            .map_err(|_| Error::MalformedCheckpoint("config block is not UTF-8".into()))?;
        let mut kv = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::MalformedCheckpoint(format!("config line {line:?}")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let config = ModelConfig::from_kv(&kv)?;
        let get = |k: &str| -> Result<&str> {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::MalformedCheckpoint(format!("missing key {k}")))
        };
        fn parse<T: FromStr>(s: &str, k: &str) -> Result<T> {
            s.parse()
                .map_err(|_| Error::MalformedCheckpoint(format!("bad value for {k}")))
        }
        let num = |k: &str| -> Result<u64> { parse(get(k)?, k) };
        let float = |k: &str| -> Result<f64> { parse(get(k)?, k) };
        let has_heads: bool = parse(get("has_heads")?, "has_heads")?;

        let mut params = TwoTowerParams::init(&config, 0)?;
        let mut heads = has_heads.then(|| TowerHeads::init(&config, 0));
        let count = read_u64(&mut r, "tensor count")?;
        let mut slots: Vec<(String, &mut Tensor)> = Vec::new();
        params.visit_mut("", &mut |n, t| slots.push((n, t)));
        if let Some(h) = &mut heads {
            h.visit_mut("heads", &mut |n, t| slots.push((n, t)));
        }
        if count != slots.len() as u64 {
            return Err(Error::MalformedCheckpoint(format!(
                "expected {} tensors, found {count}",
                slots.len()
            )));
        }
        for (name, slot) in slots {
            let nlen = read_len(&mut r, "tensor name")?;
            let found = String::from_utf8(read_bytes(&mut r, nlen, "tensor name")?)
                .map_err(|_| Error::MalformedCheckpoint("tensor name is not UTF-8".into()))?;
            if found != name {
                return Err(Error::MalformedCheckpoint(format!(
                    "expected tensor {name}, found {found}"
                )));
            }
            let rank = read_u64(&mut r, "tensor rank")?;
            if rank != slot.shape().len() as u64 {
                return Err(Error::MalformedCheckpoint(format!(
                    "tensor {name} has rank {rank}, config implies {}",
                    slot.shape().len()
                )));
            }
            let mut shape = Vec::with_capacity(slot.shape().len());
            for _ in 0..rank {
                shape.push(read_u64(&mut r, "tensor dimension")? as usize);
            }
            if shape != slot.shape() {
                return Err(Error::MalformedCheckpoint(format!(
                    "tensor {name} has shape {shape:?}, config implies {:?}",
                    slot.shape()
                )));
            }
            for v in slot.data_mut() {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)
                    .map_err(|_| Error::Truncated(format!("data of tensor {name}")))?;
                *v = f64::from_le_bytes(b);
            }
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::MalformedCheckpoint("trailing bytes after tensors".into()));
        }

        let tower_order = match kv.get("tower_order.primary") {
            None => None,
            Some(p) => {
                let primary: u8 = parse(p, "tower_order.primary")?;
                if primary != 1 && primary != 2 {
                    return Err(Error::MalformedCheckpoint("tower_order.primary must be 1 or 2".into()));
                }
                let m = parse_floats(get("tower_order.mean_p")?)?;
                if m.len() != 2 {
                    return Err(Error::MalformedCheckpoint("tower_order.mean_p needs two values".into()));
                }
                Some(TowerOrder {
                    primary,
                    tie: parse(get("tower_order.tie")?, "tower_order.tie")?,
                    mean_p: [m[0], m[1]],
                })
            }
        };
        if tower_order.is_some() && heads.is_none() {
            return Err(Error::MalformedCheckpoint("tower order recorded without heads".into()));
        }
        let hl = parse_floats(get("head_loss_history")?)?;
        if hl.len() % 2 != 0 {
            return Err(Error::MalformedCheckpoint("odd head_loss_history length".into()));
        }
        Ok(Checkpoint {
            config,
            params,
            heads,
            tower_order,
            seed: num("seed")?,
            phase1_steps: num("phase1_steps")? as usize,
            phase2_steps: num("phase2_steps")? as usize,
            batch_size: num("batch_size")? as usize,
            adam: AdamConfig {
                lr: float("adam.lr")?,
                beta1: float("adam.beta1")?,
                beta2: float("adam.beta2")?,
                eps: float("adam.eps")?,
                weight_decay: float("adam.weight_decay")?,
            },
            head_init: kv.get("head_init").map(|s| s.parse()).transpose()?,
            phase2_seed: kv
                .get("phase2_seed")
                .map(|s| parse(s, "phase2_seed"))
                .transpose()?,
            loss_history: parse_floats(get("loss_history")?)?,
            head_loss_history: hl.chunks(2).map(|c| [c[0], c[1]]).collect(),
            vocab_id: get("vocab_id")?.to_string(),
        })
    }

    /// Short content hash of the serialized checkpoint.
    pub fn id(&self) -> String {
        hex::encode(&Sha256::digest(self.to_bytes())[..8])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// The same checkpoint with towers, joint-head halves, heads and
    /// ordering all exchanged.
    pub fn swapped(&self) -> Self {
        Checkpoint {
            params: self.params.swapped(),
            heads: self.heads.as_ref().map(TowerHeads::swapped),
            tower_order: self.tower_order.map(|o| TowerOrder {
                primary: o.secondary(),
                tie: o.tie,
                mean_p: [o.mean_p[1], o.mean_p[0]],
            }),
            ..self.clone()
        }
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

fn read_u8(r: &mut Cursor<&[u8]>, what: &str) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b).map_err(|_| Error::Truncated(what.to_string()))?;
    Ok(b[0])
}

fn read_u64(r: &mut Cursor<&[u8]>, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::Truncated(what.to_string()))?;
    Ok(u64::from_le_bytes(b))
}

/// Reads the length of a byte run that must follow in the file.
fn read_len(r: &mut Cursor<&[u8]>, what: &str) -> Result<usize> {
    let v = read_u64(r, what)?;
    let remaining = r.get_ref().len() as u64 - r.position();
    if v > remaining {
        return Err(Error::Truncated(what.to_string()));
    }
    Ok(v as usize)
}

fn read_bytes(r: &mut Cursor<&[u8]>, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|_| Error::Truncated(what.to_string()))?;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{encode, Vocabulary};
    use crate::towers::ModelType;

    fn toy() -> (ModelConfig, TokenStream) {
        let text = "the cat sat on the mat . the dog sat on the log .\n\n".repeat(20);
        let vocab = Vocabulary::build(&text, 50, 1).unwrap();
        let stream = encode(&text, &vocab);
        let config = ModelConfig {
            model_type: ModelType::CausalTfm,
            layers: 1,
            hidden_size: 8,
            embed_size: 8,
            heads: 2,
            intermediate_size: 16,
            vocab_size: vocab.len(),
            seq_len: 6,
            mask_rate: 0.3,
        };
        (config, stream)
    }

    fn quick(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            adam: AdamConfig::default(),
            log_every: 5,
        }
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }

    #[test]
    fn zero_rate_step_changes_nothing() {
        let (config, stream) = toy();
        let mut t = quick(1);
        t.adam.lr = 0.0;
        let ckpt = train_joint(&config, &stream, 5, &t).unwrap();
        assert_eq!(ckpt.params, TwoTowerParams::init(&config, 5).unwrap());
    }

    #[test]
    fn loss_history_has_one_entry_per_interval() {
        let (config, stream) = toy();
        let ckpt = train_joint(&config, &stream, 1, &quick(12)).unwrap();
        assert_eq!(ckpt.loss_history.len(), 3);
    }

    #[test]
    fn zero_phase2_steps_keep_initial_heads() {
        let (config, stream) = toy();
        let ckpt = train_joint(&config, &stream, 1, &quick(2)).unwrap();
        let h = train_heads(&ckpt, &stream, 9, &quick(0), HeadInit::Fresh).unwrap();
        assert_eq!(h.heads, Some(TowerHeads::init(&config, derive_seed(9, TAG_HEADS))));
        assert!(h.tower_order.is_none());
        assert_eq!(h.params, ckpt.params);
    }

    #[test]
    fn round_trip_is_lossless() {
        let (config, stream) = toy();
        let ckpt = train_joint(&config, &stream, 3, &quick(3)).unwrap();
        let ckpt = train_heads(&ckpt, &stream, 4, &quick(3), HeadInit::Fresh).unwrap();
        let ckpt = order_towers(&ckpt, &stream, &EvalConfig::default()).unwrap();
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), ckpt.to_bytes());
    }

    #[test]
    fn corrupted_files_are_named() {
        let (config, stream) = toy();
        let bytes = train_joint(&config, &stream, 3, &quick(1)).unwrap().to_bytes();
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::UnsupportedVersion { .. })
        ));
        for cut in [3, 6, 20, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, Error::Truncated(_) | Error::BadMagic),
                "cut at {cut}: {err}"
            );
        }
    }
}
