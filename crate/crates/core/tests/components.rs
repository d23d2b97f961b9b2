//! PCA, ICA and cluster extraction against synthetic ground truth.

use std::time::Instant;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use twintower::components::{
    extract_clusters, ica_fit, ica_nonlinearity, pca_reduce, sample_embeddings, token_components, EmbeddingSample,
    IcaConfig, PcaScaling, Sign, DEFAULT_THRESHOLD,
};
use twintower::corpus::TokenStream;
use twintower::substrate::Tensor;

fn centered(rows: Vec<Vec<f64>>) -> EmbeddingSample {
    let x = Tensor::from_rows(&rows);
    let (n, w) = (x.rows(), x.cols());
    let mean: Vec<f64> = (0..w).map(|c| (0..n).map(|r| x.at(r, c)).sum::<f64>() / n as f64).collect();
    let data = (0..n).flat_map(|r| (0..w).map(|c| x.at(r, c) - mean[c]).collect::<Vec<_>>()).collect();
    EmbeddingSample {
        x: Tensor::from_vec(&[n, w], data).unwrap(),
        mean,
        ids: vec![0; n],
    }
}

fn column_variances(p: &Tensor) -> Vec<f64> {
    let n = p.rows() as f64;
    (0..p.cols()).map(|c| (0..p.rows()).map(|r| p.at(r, c).powi(2)).sum::<f64>() / n).collect()
}

fn random_orthogonal(rng: &mut impl Rng, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

/// Rows with correlated, unequal variances along a random rotation.
fn correlated_sample(seed: u64, n: usize, width: usize) -> EmbeddingSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = random_orthogonal(&mut rng, width);
    let scales: Vec<f64> = (0..width).map(|i| 3.0 / (i + 1) as f64).collect();
    let rows = (0..n)
        .map(|_| {
            let z: Vec<f64> = scales.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect();
            (0..width).map(|r| (0..width).map(|c| q[(r, c)] * z[c]).sum()).collect()
        })
        .collect();
    centered(rows)
}

#[test]
fn pca_basis_is_orthonormal_and_whitens() {
    let sample = correlated_sample(1, 600, 6);
    for d in [1, 3, 6] {
        let (basis, p) = pca_reduce(&sample, d, PcaScaling::Whiten).unwrap();
        let gram = basis.v_d.transpose().matmul(&basis.v_d).unwrap();
        for i in 0..d {
            for j in 0..d {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((gram.at(i, j) - expected).abs() < 1e-8);
            }
        }
        assert!(basis.s_d.windows(2).all(|w| w[0] >= w[1]) && basis.s_d.iter().all(|&s| s >= 0.0));
        for v in column_variances(&p) {
            assert!((v - 1.0).abs() < 1e-6, "variance {v}");
        }
    }
}

#[test]
fn sqrt_eigen_scaling_gives_squared_eigenvalue_variances() {
    let sample = correlated_sample(2, 600, 5);
    let (basis, p) = pca_reduce(&sample, 4, PcaScaling::SqrtEigen).unwrap();
    for (v, s) in column_variances(&p).iter().zip(&basis.s_d) {
        assert!((v / (s * s) - 1.0).abs() < 1e-9, "{v} vs {}", s * s);
    }
}

#[test]
fn full_dimension_pca_reconstructs_the_sample() {
    let sample = correlated_sample(3, 200, 4);
    let (basis, p) = pca_reduce(&sample, 4, PcaScaling::Whiten).unwrap();
    for r in 0..sample.x.rows() {
        for c in 0..4 {
            let rebuilt: f64 = (0..4).map(|k| p.at(r, k) * basis.s_d[k].sqrt() * basis.v_d.at(c, k)).sum();
            assert!((rebuilt - sample.x.at(r, c)).abs() < 1e-8);
        }
    }
}

/// Unit-variance Laplace draw by inverting the CDF.
fn laplace(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.gen_range(-0.5..0.5);
    -u.signum() * (1.0 - 2.0 * u.abs()).ln() / std::f64::consts::SQRT_2
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn ica_unmixes_laplace_sources() {
    let (d, n) = (8, 20_000);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let sources: Vec<Vec<f64>> = (0..d).map(|_| (0..n).map(|_| laplace(&mut rng)).collect()).collect();
    let a = random_orthogonal(&mut rng, d);
    let rows = (0..n)
        .map(|t| (0..d).map(|r| (0..d).map(|c| a[(r, c)] * sources[c][t]).sum()).collect())
        .collect();
    let start = Instant::now();
    let (_, p) = pca_reduce(&centered(rows), d, PcaScaling::Whiten).unwrap();
    let model = ica_fit(&p, &IcaConfig::default()).unwrap();
    let y = p.matmul(&model.w.transpose()).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let mut worst: f64 = 1.0;
    for i in 0..d {
        let recovered: Vec<f64> = (0..n).map(|t| y.at(t, i)).collect();
        let best = sources.iter().map(|s| correlation(&recovered, s).abs()).fold(0.0, f64::max);
        worst = worst.min(best);
    }
    println!(
        "ICA: {} iterations, converged {}, update norm {:.2e}, worst row {worst:.4}, {elapsed:.1}s",
        model.iterations, model.converged, model.final_update_norm
    );
    assert!(worst > 0.95, "worst row max |corr| {worst}");
    assert!(elapsed < 60.0);
}

#[test]
fn ica_is_deterministic() {
    let sample = correlated_sample(4, 300, 3);
    let (_, p) = pca_reduce(&sample, 3, PcaScaling::Whiten).unwrap();
    let cfg = IcaConfig {
        max_iter: 200,
        ..IcaConfig::default()
    };
    let a = ica_fit(&p, &cfg).unwrap();
    let b = ica_fit(&p, &cfg).unwrap();
    assert_eq!(a.w.data(), b.w.data());
    assert_eq!(a.iterations, b.iterations);
}

/// Sources on the grid `S × S` for a symmetric value set `S` have exactly zero
/// cross terms; `S` is scaled so that `mean g(s)·s = 1`, which makes the
/// update term vanish at `W = I`.
#[test]
fn ica_fixed_point_leaves_identity() {
    let base: Vec<f64> = (1..=40).flat_map(|k| [k as f64 / 10.0, -(k as f64) / 10.0]).collect();
    let moment = |c: f64| base.iter().map(|s| ica_nonlinearity(c * s) * c * s).sum::<f64>() / base.len() as f64;
    let (mut lo, mut hi) = (0.1, 100.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if moment(mid) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s: Vec<f64> = base.iter().map(|v| v * lo).collect();
    let rows: Vec<Vec<f64>> = s.iter().flat_map(|&a| s.iter().map(move |&b| vec![a, b])).collect();
    let model = ica_fit(&Tensor::from_rows(&rows), &IcaConfig::default()).unwrap();
    assert_eq!(model.iterations, 0);
    assert!(model.converged && model.final_update_norm < 1e-4);
    assert_eq!(model.w.data(), &[1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn occurrence_sampling_tracks_frequencies() {
    // Token 3 fills 60% of the stream, token 4 the rest.
    let ids: Vec<u32> = (0..50_000).map(|i| if i % 5 < 3 { 3 } else { 4 }).collect();
    let stream = TokenStream {
        doc_boundaries: vec![ids.len()],
        ids,
    };
    let e = Tensor::from_rows(&[vec![0.0], vec![0.0], vec![0.0], vec![1.0], vec![-1.0]]);
    let n = 10_000;
    let s = sample_embeddings(&stream, &e, n, 5).unwrap();
    let hits = s.ids.iter().filter(|&&t| t == 3).count() as f64;
    // Without replacement the spread is below the binomial one.
    let sigma = (n as f64 * 0.6 * 0.4).sqrt();
    assert!((hits - 0.6 * n as f64).abs() < 3.0 * sigma, "{hits}");
    let again = sample_embeddings(&stream, &e, n, 5).unwrap();
    assert_eq!(s, again);
}

#[test]
fn token_components_are_affine_in_the_embedding() {
    let sample = correlated_sample(6, 400, 4);
    let (basis, p) = pca_reduce(&sample, 3, PcaScaling::Whiten).unwrap();
    let ica = ica_fit(&p, &IcaConfig { max_iter: 50, ..IcaConfig::default() }).unwrap();
    let mean = basis.mean.clone();
    let dir = [0.3, -1.2, 0.5, 2.0];
    let rows: Vec<Vec<f64>> = [0.0, 1.0, 2.5]
        .iter()
        .map(|alpha| mean.iter().zip(dir).map(|(m, v)| m + alpha * v).collect())
        .collect();
    let y = token_components(&Tensor::from_rows(&rows), &basis, &ica).unwrap();
    for k in 0..3 {
        assert_eq!(y.at(0, k), 0.0);
        assert!((y.at(2, k) - 2.5 * y.at(1, k)).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn clusters_match_naive_rescan(
        rows in 1usize..30,
        cols in 1usize..6,
        seed in any::<u64>(),
        spread in 0.5f64..6.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| {
                // Some exact threshold hits to probe strictness.
                if rng.gen_bool(0.05) {
                    if rng.gen_bool(0.5) { DEFAULT_THRESHOLD } else { -DEFAULT_THRESHOLD }
                } else {
                    rng.gen_range(-spread..spread)
                }
            })
            .collect();
        let y = Tensor::from_vec(&[rows, cols], data).unwrap();
        let table = extract_clusters(&y, DEFAULT_THRESHOLD).unwrap();
        for c in &table.clusters {
            let naive: Vec<u32> = (0..rows)
                .filter(|&t| match c.sign {
                    Sign::Positive => y.at(t, c.dim) > 2.5,
                    Sign::Negative => y.at(t, c.dim) < -2.5,
                })
                .map(|t| t as u32)
                .collect();
            prop_assert_eq!(&c.members, &naive);
        }
        for (t, memberships) in table.token_clusters.iter().enumerate() {
            let naive = (0..cols).filter(|&k| y.at(t, k).abs() > 2.5).count();
            prop_assert_eq!(memberships.len(), naive);
        }
        prop_assert_eq!(table.count_histogram().iter().sum::<usize>(), rows);
    }
}
