//! Run settings: built-in defaults, then a `key=value` config file, then
//! `--key value` flags. Every command accepts the same keys so that one
//! config file can drive a whole pipeline.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use clap::Args;
use sha2::{Digest, Sha256};

/// A problem with how the program was invoked (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn help_text(help: &str, default: &str) -> String {
    match default {
        "" => help.to_string(),
        d => format!("{help} [default: {d}]"),
    }
}

macro_rules! settings {
    ($($field:ident = $default:expr, $help:literal;)*) => {
        /// Flags shared by every command. Values are validated when a
        /// command reads them.
        #[derive(Args, Debug, Default, Clone)]
        pub struct Flags {
            /// key=value config file; flags given on the command line win
            #[arg(long, global = true, value_name = "PATH")]
            pub config: Option<PathBuf>,
            $(
                #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true", value_name = "VALUE",
                      help = help_text($help, $default))]
                pub $field: Option<String>,
            )*
        }

        impl Flags {
            fn given(&self) -> Vec<(&'static str, Option<&String>)> {
                vec![$((stringify!($field), self.$field.as_ref()),)*]
            }
        }

        const DEFAULTS: &[(&str, &str)] = &[$((stringify!($field), $default),)*];
    };
}

settings! {
    corpus = "", "Corpus text file(s), comma-separated; blank lines separate documents";
    vocab = "", "Vocabulary TSV";
    out = "", "Output file or directory";
    max_vocab = "4000", "Vocabulary size including [PAD], [UNK], [MASK]";
    min_count = "1", "Minimum corpus count for a vocabulary entry";
    preset = "tiny-bert", "Model preset: elmo, gpt, bert-base, bert-large, tiny-elmo, tiny-gpt, tiny-bert";
    scale = "8", "Width divisor for the full-size presets";
    seq_len = "32", "Tokens per training sequence";
    mask_rate = "0.15", "MLM mask rate";
    layers = "", "Override the preset's layer count";
    hidden_size = "", "Override the preset's hidden width";
    embed_size = "", "Override the preset's embedding width";
    heads = "", "Override the preset's attention head count";
    intermediate_size = "", "Override the preset's feed-forward width";
    seed = "1", "Training seed";
    steps = "2000", "Phase-1 (joint) optimizer steps";
    head_steps = "1000", "Phase-2 (per-tower head) optimizer steps";
    head_init = "fresh", "Phase-2 head initialization: fresh or copy";
    batch_size = "32", "Sequences per optimizer step";
    lr = "0.001", "Adam learning rate";
    weight_decay = "0.01", "Decoupled weight decay";
    log_every = "100", "Steps per loss-history entry";
    eval_fraction = "0.1", "Fraction of documents held out for ordering and scoring";
    split_seed = "0", "Seed choosing the held-out documents";
    eval_batch_size = "64", "Sequences per evaluation batch";
    mask_seed = "0", "Seed of the evaluation masks (MLM)";
    mask_passes = "1", "Independent evaluation mask draws (MLM)";
    checkpoint = "", "Checkpoint file(s), comma-separated";
    prefs = "", "Preference TSV file(s), comma-separated";
    mode = "target", "Positions averaged per token: target or all";
    top_k = "5000", "Most frequent tokens entering the run-vs-run and frequency correlations";
    pos = "", "token<TAB>UD-tag file; tokens not listed are X";
    tags = "PROPN,NOUN,ADJ,AUX,ADP,ADV,VERB", "POS tags reported";
    bins = "41", "Histogram bins over [-max|s|, max|s|]";
    dim = "128", "PCA dimension (capped at the embedding width)";
    max_samples = "200000", "Token occurrences sampled for PCA/ICA";
    sample_seed = "0", "Seed of the occurrence sample";
    ica_lr = "0.01", "ICA learning rate";
    ica_max_iter = "5000", "ICA iteration cap";
    ica_tol = "0.0001", "ICA stopping tolerance on the update norm";
    threshold = "2.5", "Cluster threshold on |y|";
    paper_literal_pca = "false", "Scale PCA coordinates by sqrt(S) instead of whitening";
}

/// Resolved settings for one command.
#[derive(Clone, Debug)]
pub struct Settings {
    values: BTreeMap<&'static str, String>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

fn known(key: &str) -> Option<&'static str> {
    DEFAULTS.iter().map(|(k, _)| *k).find(|k| *k == key)
}

/// Parses `key=value` lines; `#` starts a comment line.
pub fn parse_config(text: &str) -> Result<Vec<(&'static str, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected key=value", i + 1)))?;
        let key = normalize(k);
        let key = known(&key).ok_or_else(|| usage(format!("config line {}: unknown key {key:?}", i + 1)))?;
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

impl Settings {
    pub fn resolve(flags: &Flags) -> Result<Self> {
        let mut values: BTreeMap<&'static str, String> = DEFAULTS.iter().map(|(k, v)| (*k, v.to_string())).collect();
        if let Some(path) = &flags.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            for (k, v) in parse_config(&text)? {
                values.insert(k, v);
            }
        }
        for (k, v) in flags.given() {
            if let Some(v) = v {
                values.insert(k, v.clone());
            }
        }
        Ok(Settings { values })
    }

    #[cfg(test)]
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        let key = known(&normalize(key)).expect("known key");
        self.values.insert(key, value.into());
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| usage(format!("--{}: cannot use {raw:?}: {e}", key.replace('_', "-"))))
    }

    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn positive(&self, key: &str) -> Result<usize> {
        let v: usize = self.get(key)?;
        if v == 0 {
            return Err(usage(format!("--{} must be positive", key.replace('_', "-"))));
        }
        Ok(v)
    }

    pub fn required(&self, key: &str) -> Result<&str> {
        match self.raw(key) {
            "" => Err(usage(format!("--{} is required", key.replace('_', "-")))),
            v => Ok(v),
        }
    }

    /// A comma-separated list of existing files.
    pub fn paths(&self, key: &str) -> Result<Vec<PathBuf>> {
        let paths: Vec<PathBuf> = self
            .required(key)?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(PathBuf::from)
            .collect();
        for p in &paths {
            if !p.is_file() {
                anyhow::bail!("input file {} does not exist", p.display());
            }
        }
        Ok(paths)
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        let mut paths = self.paths(key)?;
        if paths.len() != 1 {
            return Err(usage(format!("--{} takes exactly one file", key.replace('_', "-"))));
        }
        Ok(paths.remove(0))
    }

    pub fn out(&self) -> Result<PathBuf> {
        Ok(PathBuf::from(self.required("out")?))
    }

    /// Hash of the given keys' resolved values.
    pub fn hash(&self, keys: &[&str]) -> String {
        let mut h = Sha256::new();
        let mut keys = keys.to_vec();
        keys.sort_unstable();
        for k in keys {
            h.update(format!("{k}={}\n", self.raw(k)));
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Appends one manifest line to `run.log` in `dir`.
pub fn append_manifest(dir: &Path, command: &str, config_hash: &str, seed: &str) -> Result<()> {
    use std::io::Write;
    let stamp = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
    let path = dir.join("run.log");
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .with_context(|| format!("opening {}", path.display()))?;
    writeln!(f, "{stamp}\tcommand={command}\tconfig={config_hash}\tseed={seed}")?;
    Ok(())
}
