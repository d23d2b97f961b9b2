//! Sparse word components: PCA of occurrence-sampled embedding rows, ICA by
//! Amari's natural-gradient rule, signed threshold clusters, and the mean
//! preference score of each cluster.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenStream, Vocabulary};
use crate::error::{Error, Result};
use crate::preference::PreferenceVector;
use crate::substrate::{gemm, Tensor};

pub const DEFAULT_DIM: usize = 128;
pub const DEFAULT_MAX_SAMPLES: usize = 200_000;
pub const DEFAULT_ICA_LR: f64 = 0.01;
pub const DEFAULT_ICA_TOL: f64 = 1e-4;
pub const DEFAULT_ICA_MAX_ITER: usize = 5000;
pub const DEFAULT_THRESHOLD: f64 = 2.5;
pub const LABEL_SIZE: usize = 5;
/// Update norm above which the ICA iteration is declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e6;
/// Eigenvalues below this fraction of the largest count as zero.
const RANK_TOL: f64 = 1e-10;

/// Mean-centered embedding rows gathered from token occurrences.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSample {
    /// `n × d_e`, rows centered.
    pub x: Tensor,
    pub mean: Vec<f64>,
    /// Token id of every row.
    pub ids: Vec<u32>,
}

/// Draws up to `max_samples` occurrences of the stream uniformly without
/// replacement and collects their embedding rows. With `max_samples` at or
/// above the stream length every position contributes exactly once.
pub fn sample_embeddings(stream: &TokenStream, embedding: &Tensor, max_samples: usize, seed: u64) -> Result<EmbeddingSample> {
    if stream.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if max_samples == 0 {
        return Err(Error::InvalidArgument("max_samples must be positive".into()));
    }
    let (vocab, width) = (embedding.rows(), embedding.cols());
    if let Some(&bad) = stream.ids.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::VocabMismatch(format!("token id {bad} outside an embedding of {vocab} rows")));
    }
    let ids: Vec<u32> = if max_samples >= stream.len() {
        stream.ids.clone()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut positions = index::sample(&mut rng, stream.len(), max_samples).into_vec();
        positions.sort_unstable();
        positions.into_iter().map(|i| stream.ids[i]).collect()
    };
    let n = ids.len();
    let mut mean = vec![0.0; width];
    for &t in &ids {
        for (m, e) in mean.iter_mut().zip(embedding.row(t as usize)) {
            *m += e;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut data = Vec::with_capacity(n * width);
    for &t in &ids {
        data.extend(embedding.row(t as usize).iter().zip(&mean).map(|(e, m)| e - m));
    }
    Ok(EmbeddingSample {
        x: Tensor::from_vec(&[n, width], data)?,
        mean,
        ids,
    })
}

/// How projected coordinates are scaled by the eigenvalues.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PcaScaling {
    /// `X·V_d·diag(1/√S_d)`: unit variance per component.
    #[default]
    Whiten,
    /// `X·V_d·diag(√S_d)`: the formula taken literally.
    SqrtEigen,
}

impl PcaScaling {
    fn factors(self, eigenvalues: &[f64]) -> Vec<f64> {
        eigenvalues
            .iter()
            .map(|s| match self {
                PcaScaling::Whiten => 1.0 / s.sqrt(),
                PcaScaling::SqrtEigen => s.sqrt(),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    /// `d_e × d`, orthonormal columns.
    pub v_d: Tensor,
    /// Top `d` eigenvalues of `XᵀX/n`, non-increasing.
    pub s_d: Vec<f64>,
    pub d: usize,
    pub mean: Vec<f64>,
    pub scaling: PcaScaling,
}

impl PcaBasis {
    /// Projects rows that are already centered.
    pub fn project(&self, centered: &Tensor) -> Result<Tensor> {
        if centered.cols() != self.v_d.rows() {
            return Err(Error::ShapeMismatch {
                left: centered.shape().to_vec(),
                right: self.v_d.shape().to_vec(),
                context: "PCA projection",
            });
        }
        let mut p = centered.matmul(&self.v_d)?;
        let factors = self.scaling.factors(&self.s_d);
        for r in 0..p.rows() {
            for (v, f) in p.row_mut(r).iter_mut().zip(&factors) {
                *v *= f;
            }
        }
        Ok(p)
    }
}

/// The PCA dimension used for an embedding width: `DEFAULT_DIM` or the width
/// itself when narrower.
pub fn default_dim(embed_size: usize) -> usize {
    DEFAULT_DIM.min(embed_size)
}

/// Eigendecomposition of the sample covariance `XᵀX/n` and the projection of
/// the sample onto its top `d` eigenvectors.
pub fn pca_reduce(sample: &EmbeddingSample, d: usize, scaling: PcaScaling) -> Result<(PcaBasis, Tensor)> {
    let x = &sample.x;
    let (n, width) = (x.rows(), x.cols());
    if d == 0 || d > width {
        return Err(Error::InvalidArgument(format!("PCA dimension {d} must be in 1..={width}")));
    }
    if n <= d {
        return Err(Error::InvalidArgument(format!("{n} samples cannot support a {d}-dimensional PCA")));
    }
    let mut cov = vec![0.0; width * width];
    gemm(width, n, width, x.data(), true, x.data(), false, &mut cov, false);
    cov.iter_mut().for_each(|c| *c /= n as f64);
    let svd = DMatrix::from_row_slice(width, width, &cov).svd(true, false);
    let u = svd.u.expect("requested U");
    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let top = svd.singular_values[order[0]];
    let rank = order
        .iter()
        .filter(|&&i| top > 0.0 && svd.singular_values[i] > top * RANK_TOL)
        .count();
    if rank < d {
        return Err(Error::RankDeficient { rank, requested: d });
    }
    let mut v_d = Tensor::zeros(&[width, d]);
    let mut s_d = Vec::with_capacity(d);
    for (j, &i) in order.iter().take(d).enumerate() {
        let col = u.column(i);
        // Fix the sign so the largest-magnitude entry is positive.
        let pivot = (0..width).fold(0, |best, r| if col[r].abs() > col[best].abs() { r } else { best });
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..width {
            v_d.row_mut(r)[j] = sign * col[r];
        }
        s_d.push(svd.singular_values[i]);
    }
    let basis = PcaBasis {
        v_d,
        s_d,
        d,
        mean: sample.mean.clone(),
        scaling,
    };
    let p = basis.project(x)?;
    Ok((basis, p))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IcaConfig {
    pub lr: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for IcaConfig {
    fn default() -> Self {
        IcaConfig {
            lr: DEFAULT_ICA_LR,
            max_iter: DEFAULT_ICA_MAX_ITER,
            tol: DEFAULT_ICA_TOL,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcaModel {
    /// `d × d` unmixing matrix; `y = W·p`.
    pub w: Tensor,
    pub lr: f64,
    /// Updates applied.
    pub iterations: usize,
    /// Frobenius norm of `I − g(Y)Yᵀ/n` at the last evaluation.
    pub final_update_norm: f64,
    pub converged: bool,
}

/// The bounded odd nonlinearity `sgn(y)·(1 − exp(−√2·|y|))/2`.
pub fn ica_nonlinearity(y: f64) -> f64 {
    y.signum() * (1.0 - (-std::f64::consts::SQRT_2 * y.abs()).exp()) / 2.0
}

/// Fits `W` by `W ← W + lr·(I − g(Y)Yᵀ/n)·W` with `Y = W·Pᵀ`, starting from the
/// identity. Stops once the update term's norm is below `tol` (checked before
/// each update) or after `max_iter` updates.
pub fn ica_fit(p: &Tensor, config: &IcaConfig) -> Result<IcaModel> {
    let (n, d) = (p.rows(), p.cols());
    if n == 0 || d == 0 {
        return Err(Error::DegenerateInput("ICA needs a non-empty sample".into()));
    }
    if !(config.lr >= 0.0 && config.lr.is_finite()) {
        return Err(Error::InvalidArgument("ICA learning rate must be finite and non-negative".into()));
    }
    if !p.is_finite() {
        return Err(Error::DegenerateInput("ICA input has non-finite values".into()));
    }
    let mut w = vec![0.0; d * d];
    for i in 0..d {
        w[i * d + i] = 1.0;
    }
    let mut y = vec![0.0; d * n];
    let mut g = vec![0.0; d * n];
    let mut m = vec![0.0; d * d];
    let mut mw = vec![0.0; d * d];
    let mut iterations = 0;
    loop {
        gemm(d, d, n, &w, false, p.data(), true, &mut y, false);
        for (gv, yv) in g.iter_mut().zip(&y) {
            *gv = ica_nonlinearity(*yv);
        }
        gemm(d, n, d, &g, false, &y, true, &mut m, false);
        for i in 0..d {
            for j in 0..d {
                let v = &mut m[i * d + j];
                *v = f64::from(u8::from(i == j)) - *v / n as f64;
            }
        }
        let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm > DIVERGENCE_NORM {
            return Err(Error::IcaDiverged { iteration: iterations, norm });
        }
        let converged = norm < config.tol;
        if converged || iterations == config.max_iter {
            return Ok(IcaModel {
                w: Tensor::from_vec(&[d, d], w)?,
                lr: config.lr,
                iterations,
                final_update_norm: norm,
                converged,
            });
        }
        gemm(d, d, d, &m, false, &w, false, &mut mw, false);
        for (wv, u) in w.iter_mut().zip(&mw) {
            *wv += config.lr * u;
        }
        iterations += 1;
        if iterations % 500 == 0 {
            log::debug!("ICA iteration {iterations}: update norm {norm:.3e}");
        }
    }
}

/// Per-token component values: every embedding row centered with the sample
/// mean, projected through the basis and unmixed. Returns `V × d`.
pub fn token_components(embedding: &Tensor, basis: &PcaBasis, ica: &IcaModel) -> Result<Tensor> {
    if embedding.cols() != basis.mean.len() {
        return Err(Error::ShapeMismatch {
            left: embedding.shape().to_vec(),
            right: vec![basis.mean.len()],
            context: "embedding width vs PCA mean",
        });
    }
    if ica.w.shape() != [basis.d, basis.d] {
        return Err(Error::ShapeMismatch {
            left: ica.w.shape().to_vec(),
            right: vec![basis.d, basis.d],
            context: "ICA unmixing vs PCA dimension",
        });
    }
    let mut centered = embedding.clone();
    for r in 0..centered.rows() {
        for (v, m) in centered.row_mut(r).iter_mut().zip(&basis.mean) {
            *v -= m;
        }
    }
    let p = basis.project(&centered)?;
    let mut y = vec![0.0; p.rows() * basis.d];
    gemm(p.rows(), basis.d, basis.d, p.data(), false, ica.w.data(), true, &mut y, false);
    Tensor::from_vec(&[p.rows(), basis.d], y)
}

/// Fraction of entries with `|y| < bound`.
pub fn fraction_within(y: &Tensor, bound: f64) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    y.data().iter().filter(|v| v.abs() < bound).count() as f64 / y.len() as f64
}

/// Tab-separated component values, one token per line.
pub fn components_to_tsv(vocab: &Vocabulary, y: &Tensor) -> String {
    let mut out = String::from("token\tid");
    for k in 0..y.cols() {
        let _ = write!(out, "\ty{k}");
    }
    out.push('\n');
    for id in 0..y.rows() {
        out.push_str(vocab.token(id as u32));
        let _ = write!(out, "\t{id}");
        for v in y.row(id) {
            let _ = write!(out, "\t{v:?}");
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sign {
    #[serde(rename = "+")]
    Positive,
    #[serde(rename = "-")]
    Negative,
}

impl Sign {
    pub fn as_char(self) -> char {
        match self {
            Sign::Positive => '+',
            Sign::Negative => '-',
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub dim: usize,
    pub sign: Sign,
    /// Member ids in increasing order.
    pub members: Vec<u32>,
}

/// Signed threshold clusters: one per (dimension, sign), in the order
/// `(0,+), (0,−), (1,+), …`, possibly empty.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterTable {
    pub threshold: f64,
    pub clusters: Vec<Cluster>,
    /// Indices into `clusters` for every token.
    pub token_clusters: Vec<Vec<usize>>,
}

/// Token `t` joins cluster `(k, +)` when `y[t][k] > threshold` and `(k, −)`
/// when `y[t][k] < −threshold`.
pub fn extract_clusters(y: &Tensor, threshold: f64) -> Result<ClusterTable> {
    if !y.is_finite() {
        return Err(Error::DegenerateInput("component values must be finite".into()));
    }
    if !(threshold >= 0.0) {
        return Err(Error::InvalidArgument("cluster threshold must be non-negative".into()));
    }
    let d = y.cols();
    let mut clusters: Vec<Cluster> = (0..d)
        .flat_map(|dim| {
            [Sign::Positive, Sign::Negative].map(|sign| Cluster {
                dim,
                sign,
                members: Vec::new(),
            })
        })
        .collect();
    let mut token_clusters = vec![Vec::new(); y.rows()];
    for (t, memberships) in token_clusters.iter_mut().enumerate() {
        for (k, &v) in y.row(t).iter().enumerate() {
            let idx = if v > threshold {
                2 * k
            } else if v < -threshold {
                2 * k + 1
            } else {
                continue;
            };
            clusters[idx].members.push(t as u32);
            memberships.push(idx);
        }
    }
    Ok(ClusterTable {
        threshold,
        clusters,
        token_clusters,
    })
}

impl ClusterTable {
    /// `hist[c]` = number of tokens belonging to exactly `c` clusters.
    pub fn count_histogram(&self) -> Vec<usize> {
        let max = self.token_clusters.iter().map(Vec::len).max().unwrap_or(0);
        let mut hist = vec![0; max + 1];
        for m in &self.token_clusters {
            hist[m.len()] += 1;
        }
        hist
    }

    pub fn mean_clusters_per_token(&self) -> f64 {
        if self.token_clusters.is_empty() {
            return 0.0;
        }
        let total: usize = self.token_clusters.iter().map(Vec::len).sum();
        total as f64 / self.token_clusters.len() as f64
    }

    /// The `n` most frequent members of a cluster (ties by id).
    pub fn top_members(&self, cluster: usize, vocab: &Vocabulary, n: usize) -> Vec<u32> {
        let mut members = self.clusters[cluster].members.clone();
        members.sort_by(|&a, &b| vocab.freq(b).cmp(&vocab.freq(a)).then(a.cmp(&b)));
        members.truncate(n);
        members
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterPreference {
    pub dim: usize,
    pub sign: Sign,
    pub members: usize,
    /// Members with a defined preference score.
    pub scored: usize,
    pub mean_score: f64,
    /// The most frequent members.
    pub label: Vec<String>,
    /// 1-based, by descending mean score.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterPreferenceTable {
    pub rows: Vec<ClusterPreference>,
    /// Non-empty clusters without a scored member, as `(dim, sign)`.
    pub excluded: Vec<(usize, Sign)>,
}

/// Mean preference score of every non-empty cluster, ranked descending.
pub fn cluster_preference(table: &ClusterTable, v: &PreferenceVector) -> Result<ClusterPreferenceTable> {
    if table.token_clusters.len() != v.vocab.len() {
        return Err(Error::VocabMismatch(format!(
            "clusters cover {} tokens, preference vocabulary has {}",
            table.token_clusters.len(),
            v.vocab.len()
        )));
    }
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for (idx, c) in table.clusters.iter().enumerate() {
        if c.members.is_empty() {
            continue;
        }
        let scores: Vec<f64> = c.members.iter().filter_map(|&t| v.score(t)).collect();
        if scores.is_empty() {
            log::info!("cluster ({}, {}) has no scored member; excluded", c.dim, c.sign.as_char());
            excluded.push((c.dim, c.sign));
            continue;
        }
        rows.push(ClusterPreference {
            dim: c.dim,
            sign: c.sign,
            members: c.members.len(),
            scored: scores.len(),
            mean_score: scores.iter().sum::<f64>() / scores.len() as f64,
            label: table
                .top_members(idx, &v.vocab, LABEL_SIZE)
                .into_iter()
                .map(|t| v.vocab.token(t).to_string())
                .collect(),
            rank: 0,
        });
    }
    rows.sort_by(|a, b| b.mean_score.total_cmp(&a.mean_score));
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(ClusterPreferenceTable { rows, excluded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preference::TokenPreference;

    fn stream(ids: Vec<u32>) -> TokenStream {
        TokenStream {
            doc_boundaries: vec![ids.len()],
            ids,
        }
    }

    fn gram(t: &Tensor) -> Tensor {
        t.transpose().matmul(t).unwrap()
    }

    #[test]
    fn repeated_token_centers_to_zero() {
        let e = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 2.0], vec![3.0, -1.0]]);
        let s = sample_embeddings(&stream(vec![2; 10]), &e, 100, 0).unwrap();
        assert_eq!(s.x.rows(), 10);
        assert!(s.x.data().iter().all(|&v| v == 0.0));
        assert_eq!(s.mean, vec![3.0, -1.0]);
    }

    #[test]
    fn full_sample_takes_every_position() {
        let e = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![5.0]]);
        let s = sample_embeddings(&stream(vec![1, 2, 2, 1]), &e, 4, 9).unwrap();
        assert_eq!(s.ids, vec![1, 2, 2, 1]);
        assert_eq!(s.mean, vec![3.0]);
    }

    #[test]
    fn empty_stream_is_an_error() {
        let e = Tensor::zeros(&[3, 2]);
        assert!(matches!(sample_embeddings(&stream(vec![]), &e, 5, 0), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn axis_aligned_variances() {
        // Rows ±2 on the first axis and ±1 on the second, balanced.
        let mut rows = Vec::new();
        for a in [-2.0, 2.0] {
            for b in [-1.0, 1.0] {
                rows.push(vec![a, b]);
            }
        }
        let sample = EmbeddingSample {
            x: Tensor::from_rows(&rows),
            mean: vec![0.0, 0.0],
            ids: vec![0; 4],
        };
        let (basis, p) = pca_reduce(&sample, 2, PcaScaling::Whiten).unwrap();
        assert!((basis.s_d[0] - 4.0).abs() < 1e-12 && (basis.s_d[1] - 1.0).abs() < 1e-12);
        let g = gram(&p);
        assert!((g.at(0, 0) / 4.0 - 1.0).abs() < 1e-12 && (g.at(1, 1) / 4.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_deficiency_names_the_rank() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 - 2.5, 2.0 * (i as f64 - 2.5), 0.0]).collect();
        let sample = EmbeddingSample {
            x: Tensor::from_rows(&rows),
            mean: vec![0.0; 3],
            ids: vec![0; 6],
        };
        match pca_reduce(&sample, 2, PcaScaling::Whiten) {
            Err(Error::RankDeficient { rank: 1, requested: 2 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nonlinearity_is_bounded_and_odd() {
        for y in [-50.0, -1.0, -1e-3, 0.0, 0.3, 2.0, 80.0] {
            let g = ica_nonlinearity(y);
            assert!(g.abs() <= 0.5);
            assert_eq!(g, -ica_nonlinearity(-y));
        }
        assert_eq!(ica_nonlinearity(0.0), 0.0);
    }

    #[test]
    fn zero_learning_rate_keeps_identity() {
        let p = Tensor::from_rows(&[vec![1.0, -0.5], vec![-1.0, 0.5], vec![0.2, 1.0], vec![-0.2, -1.0]]);
        let m = ica_fit(
            &p,
            &IcaConfig {
                lr: 0.0,
                max_iter: 10,
                tol: 1e-12,
            },
        )
        .unwrap();
        assert_eq!(m.w, Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        assert_eq!(m.iterations, 10);
        assert!(!m.converged);
    }

    #[test]
    fn divergence_is_reported() {
        let p = Tensor::from_rows(&[vec![1e-4, 0.0], vec![-1e-4, 0.0], vec![0.0, 1e-4], vec![0.0, -1e-4]]);
        let r = ica_fit(
            &p,
            &IcaConfig {
                lr: 1e9,
                max_iter: 100,
                tol: 0.0,
            },
        );
        assert!(matches!(r, Err(Error::IcaDiverged { .. })), "{r:?}");
    }

    #[test]
    fn thresholds_are_strict_and_signed() {
        let y = Tensor::from_rows(&[vec![3.0, -2.6, 1.0], vec![2.5, -2.5, 0.0]]);
        let t = extract_clusters(&y, DEFAULT_THRESHOLD).unwrap();
        let names: Vec<(usize, Sign)> = t.token_clusters[0].iter().map(|&i| (t.clusters[i].dim, t.clusters[i].sign)).collect();
        assert_eq!(names, vec![(0, Sign::Positive), (1, Sign::Negative)]);
        assert!(t.token_clusters[1].is_empty());
        assert_eq!(t.count_histogram(), vec![1, 0, 1]);
        assert_eq!(t.mean_clusters_per_token(), 1.0);
    }

    fn vocab_with(tokens: &[(&str, u64)]) -> Vocabulary {
        let mut tsv = String::from("#twintower-vocab v1\n");
        for (t, f) in tokens {
            tsv.push_str(&format!("{t}\t{f}\n"));
        }
        Vocabulary::from_tsv(&tsv).unwrap()
    }

    fn preference(vocab: &Vocabulary, scores: &[Option<f64>]) -> PreferenceVector {
        PreferenceVector {
            vocab: vocab.clone(),
            entries: scores
                .iter()
                .map(|s| {
                    s.map(|score| TokenPreference {
                        count: 1,
                        p1_mean: score.exp(),
                        p2_mean: 1.0,
                        score,
                    })
                })
                .collect(),
            checkpoint_id: String::new(),
            eval_id: String::new(),
        }
    }

    #[test]
    fn clusters_rank_by_mean_score() {
        let vocab = vocab_with(&[("[PAD]", 0), ("[UNK]", 0), ("[MASK]", 0), ("a", 9), ("b", 7), ("c", 5), ("d", 3)]);
        let y = Tensor::from_rows(&[
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![-3.0, 0.0],
            vec![-3.0, 0.0],
            vec![0.0, 3.0],
            vec![0.0, 0.0],
        ]);
        let v = preference(&vocab, &[None, None, None, Some(-0.4), Some(-0.2), Some(0.7), Some(5.0)]);
        let table = extract_clusters(&y, DEFAULT_THRESHOLD).unwrap();
        let ranked = cluster_preference(&table, &v).unwrap();
        assert_eq!(ranked.rows.len(), 2);
        assert_eq!((ranked.rows[0].dim, ranked.rows[0].sign, ranked.rows[0].rank), (1, Sign::Positive, 1));
        assert_eq!(ranked.rows[0].mean_score, 0.7);
        assert!((ranked.rows[1].mean_score + 0.3).abs() < 1e-15);
        assert_eq!(ranked.rows[1].label, vec!["a", "b"]);
        assert!(ranked.excluded.is_empty());
    }

    #[test]
    fn unscored_cluster_is_excluded() {
        let vocab = vocab_with(&[("[PAD]", 0), ("[UNK]", 0), ("[MASK]", 0), ("a", 2)]);
        let y = Tensor::from_rows(&[vec![0.0], vec![0.0], vec![0.0], vec![4.0]]);
        let v = preference(&vocab, &[None; 4]);
        let ranked = cluster_preference(&extract_clusters(&y, 2.5).unwrap(), &v).unwrap();
        assert!(ranked.rows.is_empty());
        assert_eq!(ranked.excluded, vec![(0, Sign::Positive)]);
    }
}
