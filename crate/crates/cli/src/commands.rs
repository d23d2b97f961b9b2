//! One function per subcommand. Each reads its settings, writes its declared
//! outputs and appends a manifest line to `run.log` beside them.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use serde::Serialize;
use twintower::components::{
    cluster_preference, components_to_tsv, extract_clusters, fraction_within, ica_fit, pca_reduce, sample_embeddings,
    token_components, ClusterPreferenceTable, IcaConfig, PcaScaling,
};
use twintower::corpus::{encode, load_pos_table, PosTable, TokenStream, UdTag, Vocabulary};
use twintower::preference::{
    compute_preference, correlate_topk, pos_report, rank_correlate_topk, PosReport, PreferenceMode, PreferenceVector,
};
use twintower::substrate::AdamConfig;
use twintower::towers::ModelConfig;
use twintower::training::{order_towers, train_heads, train_joint, Checkpoint, EvalConfig, HeadInit, TrainConfig};

use crate::settings::{append_manifest, usage, Settings};

const MODEL_KEYS: &[&str] = &[
    "preset",
    "scale",
    "seq_len",
    "mask_rate",
    "layers",
    "hidden_size",
    "embed_size",
    "heads",
    "intermediate_size",
];
const SPLIT_KEYS: &[&str] = &["corpus", "vocab", "eval_fraction", "split_seed"];
const EVAL_KEYS: &[&str] = &["eval_batch_size", "mask_seed", "mask_passes"];
const OPT_KEYS: &[&str] = &["batch_size", "lr", "weight_decay", "log_every"];
const ICA_KEYS: &[&str] = &[
    "dim",
    "max_samples",
    "sample_seed",
    "ica_lr",
    "ica_max_iter",
    "ica_tol",
    "threshold",
    "paper_literal_pca",
];
const POS_KEYS: &[&str] = &["pos", "tags", "bins"];

fn keys(groups: &[&[&'static str]]) -> Vec<&'static str> {
    groups.iter().flat_map(|g| g.iter().copied()).collect()
}

/// Directory that receives `run.log` for an output path.
fn log_dir(out: &Path) -> PathBuf {
    match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn ensure_parent(out: &Path) -> Result<()> {
    let dir = log_dir(out);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))
}

fn finish(s: &Settings, command: &str, dir: &Path, hashed: &[&str]) -> Result<()> {
    let seed = if hashed.contains(&"seed") { s.raw("seed") } else { "-" };
    append_manifest(dir, command, &s.hash(hashed), seed)
}

fn read_corpus(s: &Settings) -> Result<String> {
    let mut text = String::new();
    for path in s.paths("corpus")? {
        let part = fs::read_to_string(&path).with_context(|| format!("reading corpus {}", path.display()))?;
        text.push_str(&part);
        text.push_str("\n\n");
    }
    Ok(text)
}

fn read_vocab(s: &Settings) -> Result<Vocabulary> {
    let path = s.path("vocab")?;
    Vocabulary::load(&path).with_context(|| format!("reading vocabulary {}", path.display()))
}

fn read_checkpoint(path: &Path, vocab: &Vocabulary) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    if ckpt.vocab_id != vocab.fingerprint() {
        bail!(
            "checkpoint {} was trained with vocabulary {}, not the given one ({})",
            path.display(),
            ckpt.vocab_id,
            vocab.fingerprint()
        );
    }
    Ok(ckpt)
}

fn read_prefs(path: &Path, vocab: &Vocabulary) -> Result<PreferenceVector> {
    PreferenceVector::load(path, vocab).with_context(|| format!("reading preference file {}", path.display()))
}

/// Train and held-out streams of the corpus.
fn split_streams(s: &Settings, vocab: &Vocabulary) -> Result<(TokenStream, TokenStream)> {
    let fraction: f64 = s.get("eval_fraction")?;
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(usage("--eval-fraction must lie in (0, 1)"));
    }
    let stream = encode(&read_corpus(s)?, vocab);
    let (train, eval) = stream.split(fraction, s.get("split_seed")?);
    info!("{} training tokens, {} held-out tokens", train.len(), eval.len());
    Ok((train, eval))
}

fn model_config(s: &Settings, vocab: &Vocabulary) -> Result<ModelConfig> {
    let mut c = ModelConfig::preset(s.required("preset")?, s.positive("scale")?, vocab.len(), s.positive("seq_len")?)
        .map_err(|e| usage(e.to_string()))?;
    c.mask_rate = s.get("mask_rate")?;
    if let Some(v) = s.optional("layers")? {
        c.layers = v;
    }
    if let Some(v) = s.optional("hidden_size")? {
        c.hidden_size = v;
    }
    if let Some(v) = s.optional("embed_size")? {
        c.embed_size = v;
    }
    if let Some(v) = s.optional("heads")? {
        c.heads = v;
    }
    if let Some(v) = s.optional("intermediate_size")? {
        c.intermediate_size = v;
    }
    c.validate().map_err(|e| usage(e.to_string()))?;
    Ok(c)
}

fn train_config(s: &Settings, steps_key: &str) -> Result<TrainConfig> {
    Ok(TrainConfig {
        steps: s.get(steps_key)?,
        batch_size: s.positive("batch_size")?,
        adam: AdamConfig {
            lr: s.get("lr")?,
            weight_decay: s.get("weight_decay")?,
            ..AdamConfig::default()
        },
        log_every: s.positive("log_every")?,
    })
}

fn eval_config(s: &Settings) -> Result<EvalConfig> {
    Ok(EvalConfig {
        batch_size: s.positive("eval_batch_size")?,
        mask_seed: s.get("mask_seed")?,
        mask_passes: s.positive("mask_passes")?,
    })
}

fn preference_mode(s: &Settings) -> Result<PreferenceMode> {
    match s.raw("mode") {
        "target" => Ok(PreferenceMode::TargetPositions),
        "all" => Ok(PreferenceMode::AllPositions),
        other => Err(usage(format!("--mode must be target or all, not {other:?}"))),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn build_vocab(s: &Settings) -> Result<()> {
    let out = s.out()?;
    let text = read_corpus(s)?;
    let vocab = Vocabulary::build(&text, s.get("max_vocab")?, s.get("min_count")?)?;
    ensure_parent(&out)?;
    vocab.save(&out).with_context(|| format!("writing {}", out.display()))?;
    info!("{} entries written to {}", vocab.len(), out.display());
    finish(s, "build-vocab", &log_dir(&out), &["corpus", "max_vocab", "min_count", "out"])
}

pub fn train(s: &Settings) -> Result<()> {
    let out = s.out()?;
    let vocab = read_vocab(s)?;
    let config = model_config(s, &vocab)?;
    let (train, _) = split_streams(s, &vocab)?;
    let tc = train_config(s, "steps")?;
    let mut ckpt = train_joint(&config, &train, s.get("seed")?, &tc)?;
    ckpt.vocab_id = vocab.fingerprint();
    if let (Some(first), Some(last)) = (ckpt.loss_history.first(), ckpt.loss_history.last()) {
        info!("joint loss {first:.4} -> {last:.4}");
    }
    ensure_parent(&out)?;
    ckpt.save(&out).with_context(|| format!("writing {}", out.display()))?;
    let hashed = keys(&[MODEL_KEYS, SPLIT_KEYS, OPT_KEYS, &["seed", "steps", "out"]]);
    finish(s, "train", &log_dir(&out), &hashed)
}

pub fn train_heads_cmd(s: &Settings) -> Result<()> {
    let out = s.out()?;
    let vocab = read_vocab(s)?;
    let ckpt = read_checkpoint(&s.path("checkpoint")?, &vocab)?;
    let (train, eval) = split_streams(s, &vocab)?;
    let init: HeadInit = s.get("head_init")?;
    let retrained = train_heads(&ckpt, &train, s.get("seed")?, &train_config(s, "head_steps")?, init)?;
    let ordered = order_towers(&retrained, &eval, &eval_config(s)?)?;
    let order = ordered.tower_order.expect("just ordered");
    info!(
        "tower {} is primary (mean correct-token probability {:?}{})",
        order.primary,
        order.mean_p,
        if order.tie { ", exact tie" } else { "" }
    );
    ensure_parent(&out)?;
    ordered.save(&out).with_context(|| format!("writing {}", out.display()))?;
    let hashed = keys(&[SPLIT_KEYS, OPT_KEYS, EVAL_KEYS, &["checkpoint", "seed", "head_steps", "head_init", "out"]]);
    finish(s, "train-heads", &log_dir(&out), &hashed)
}

pub fn score(s: &Settings) -> Result<()> {
    let out = s.out()?;
    let vocab = read_vocab(s)?;
    let ckpt = read_checkpoint(&s.path("checkpoint")?, &vocab)?;
    let (_, eval) = split_streams(s, &vocab)?;
    let v = compute_preference(&ckpt, &vocab, &eval, &eval_config(s)?, preference_mode(s)?)?;
    info!("{} tokens scored", v.num_defined());
    ensure_parent(&out)?;
    v.save(&out).with_context(|| format!("writing {}", out.display()))?;
    let hashed = keys(&[SPLIT_KEYS, EVAL_KEYS, &["checkpoint", "mode", "out"]]);
    finish(s, "score", &log_dir(&out), &hashed)
}

/// Pairwise statistic over all vectors; the matrix is filled symmetrically.
fn matrix(
    vs: &[PreferenceVector],
    k: usize,
    stat: fn(&PreferenceVector, &PreferenceVector, usize) -> twintower::Result<f64>,
) -> Result<Vec<Vec<f64>>> {
    let n = vs.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let r = stat(&vs[i], &vs[j], k)?;
            m[i][j] = r;
            m[j][i] = r;
        }
    }
    Ok(m)
}

#[derive(Serialize)]
struct CorrelationJson {
    top_k: usize,
    files: Vec<String>,
    checkpoints: Vec<String>,
    pearson: Vec<Vec<f64>>,
    spearman: Vec<Vec<f64>>,
}

pub fn correlate(s: &Settings) -> Result<()> {
    let out = s.out()?;
    let vocab = read_vocab(s)?;
    let paths = s.paths("prefs")?;
    if paths.len() < 2 {
        return Err(usage("--prefs needs at least two preference files"));
    }
    let vs: Vec<PreferenceVector> = paths.iter().map(|p| read_prefs(p, &vocab)).collect::<Result<_>>()?;
    let k = s.positive("top_k")?;
    let json = CorrelationJson {
        top_k: k,
        files: paths.iter().map(|p| p.display().to_string()).collect(),
        checkpoints: vs.iter().map(|v| v.checkpoint_id.clone()).collect(),
        pearson: matrix(&vs, k, correlate_topk)?,
        spearman: matrix(&vs, k, rank_correlate_topk)?,
    };
    ensure_parent(&out)?;
    write_json(&out, &json)?;
    finish(s, "correlate", &log_dir(&out), &["vocab", "prefs", "top_k", "out"])
}

fn pos_table(s: &Settings, vocab: &Vocabulary) -> Result<PosTable> {
    match s.raw("pos") {
        "" => Ok(PosTable::uniform(vocab, UdTag::X)),
        _ => {
            let path = s.path("pos")?;
            load_pos_table(&path, vocab).with_context(|| format!("reading POS table {}", path.display()))
        }
    }
}

fn tags(s: &Settings) -> Result<Vec<UdTag>> {
    s.required("tags")?
        .split(',')
        .map(|t| t.trim().parse::<UdTag>().map_err(|e| usage(e.to_string())))
        .collect()
}

fn pos_analysis(s: &Settings, v: &PreferenceVector) -> Result<PosReport> {
    Ok(pos_report(v, &pos_table(s, &v.vocab)?, &tags(s)?, s.positive("bins")?)?)
}

pub fn pos_report_cmd(s: &Settings) -> Result<()> {
    let out = s.out()?;
    let vocab = read_vocab(s)?;
    let v = read_prefs(&s.path("prefs")?, &vocab)?;
    let report = pos_analysis(s, &v)?;
    ensure_parent(&out)?;
    write_json(&out, &report)?;
    let hashed = keys(&[POS_KEYS, &["vocab", "prefs", "out"]]);
    finish(s, "pos-report", &log_dir(&out), &hashed)
}

#[derive(Clone, Debug, Serialize)]
pub struct ClusterAnalysis {
    pub checkpoint: String,
    pub pca_dim: usize,
    pub samples: usize,
    pub scaling: PcaScaling,
    pub eigenvalues: Vec<f64>,
    pub ica_iterations: usize,
    pub ica_converged: bool,
    pub ica_update_norm: f64,
    pub threshold: f64,
    /// Share of component values inside (-1, 1).
    pub fraction_within_one: f64,
    pub mean_clusters_per_token: f64,
    /// Tokens by the number of clusters they belong to.
    pub cluster_count_histogram: Vec<usize>,
    pub nonempty_clusters: usize,
    pub ranked: Option<ClusterPreferenceTable>,
}

/// PCA, ICA and clustering of one checkpoint's embeddings; also returns the
/// component matrix for dumping.
fn cluster_analysis(
    s: &Settings,
    ckpt: &Checkpoint,
    vocab: &Vocabulary,
    prefs: Option<&PreferenceVector>,
) -> Result<(ClusterAnalysis, twintower::substrate::Tensor)> {
    let stream = encode(&read_corpus(s)?, vocab);
    let e = &ckpt.params.embedding;
    let sample = sample_embeddings(&stream, e, s.positive("max_samples")?, s.get("sample_seed")?)?;
    let dim = s.positive("dim")?.min(e.cols());
    let scaling = if s.get::<bool>("paper_literal_pca")? {
        PcaScaling::SqrtEigen
    } else {
        PcaScaling::Whiten
    };
    let (basis, p) = pca_reduce(&sample, dim, scaling)?;
    let ica = ica_fit(
        &p,
        &IcaConfig {
            lr: s.get("ica_lr")?,
            max_iter: s.get("ica_max_iter")?,
            tol: s.get("ica_tol")?,
        },
    )?;
    info!(
        "ICA: {} iterations, update norm {:.3e}{}",
        ica.iterations,
        ica.final_update_norm,
        if ica.converged { "" } else { " (not converged)" }
    );
    let y = token_components(e, &basis, &ica)?;
    let table = extract_clusters(&y, s.get("threshold")?)?;
    let ranked = prefs.map(|v| cluster_preference(&table, v)).transpose()?;
    Ok((
        ClusterAnalysis {
            checkpoint: ckpt.id(),
            pca_dim: dim,
            samples: sample.ids.len(),
            scaling,
            eigenvalues: basis.s_d.clone(),
            ica_iterations: ica.iterations,
            ica_converged: ica.converged,
            ica_update_norm: ica.final_update_norm,
            threshold: table.threshold,
            fraction_within_one: fraction_within(&y, 1.0),
            mean_clusters_per_token: table.mean_clusters_per_token(),
            cluster_count_histogram: table.count_histogram(),
            nonempty_clusters: table.clusters.iter().filter(|c| !c.members.is_empty()).count(),
            ranked,
        },
        y,
    ))
}

pub fn ica(s: &Settings) -> Result<()> {
    let out = s.out()?;
    let vocab = read_vocab(s)?;
    let ckpt = read_checkpoint(&s.path("checkpoint")?, &vocab)?;
    let prefs = match s.raw("prefs") {
        "" => None,
        _ => Some(read_prefs(&s.path("prefs")?, &vocab)?),
    };
    let (analysis, y) = cluster_analysis(s, &ckpt, &vocab, prefs.as_ref())?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("clusters.json"), &analysis)?;
    fs::write(out.join("components.tsv"), components_to_tsv(&vocab, &y))
        .with_context(|| format!("writing {}", out.join("components.tsv").display()))?;
    let hashed = keys(&[ICA_KEYS, &["corpus", "vocab", "checkpoint", "prefs", "out"]]);
    finish(s, "ica", &out, &hashed)
}

pub fn report(s: &Settings) -> Result<()> {
    let out = s.out()?;
    let vocab = read_vocab(s)?;
    let ckpt_paths = s.paths("checkpoint")?;
    let pref_paths = s.paths("prefs")?;
    if ckpt_paths.len() != pref_paths.len() {
        return Err(usage(format!(
            "--checkpoint lists {} files but --prefs lists {}",
            ckpt_paths.len(),
            pref_paths.len()
        )));
    }
    let ckpts: Vec<Checkpoint> = ckpt_paths.iter().map(|p| read_checkpoint(p, &vocab)).collect::<Result<_>>()?;
    let prefs: Vec<PreferenceVector> = pref_paths.iter().map(|p| read_prefs(p, &vocab)).collect::<Result<_>>()?;
    for (c, v) in ckpts.iter().zip(&prefs) {
        if c.tower_order.is_none() {
            bail!("checkpoint {} has no tower order; run train-heads first", c.id());
        }
        if v.checkpoint_id != c.id() {
            log::warn!("preference file was scored with checkpoint {}, not {}", v.checkpoint_id, c.id());
        }
    }
    let pos = prefs.iter().map(|v| pos_analysis(s, v)).collect::<Result<Vec<_>>>()?;
    let (clusters, _) = cluster_analysis(s, &ckpts[0], &vocab, Some(&prefs[0]))?;
    let report = crate::report::Report::assemble(&ckpts, &prefs, s.positive("top_k")?, pos, clusters);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("report.json"), &report)?;
    fs::write(out.join("report.txt"), report.to_text()).with_context(|| format!("writing {}", out.display()))?;
    let hashed = keys(&[ICA_KEYS, POS_KEYS, &["corpus", "vocab", "checkpoint", "prefs", "top_k", "out"]]);
    finish(s, "report", &out, &hashed)
}
