//! The combined report: tower ordering, run-vs-run correlations, POS
//! histograms, frequency correlations and word clusters.

use std::fmt::Write as _;

use serde::Serialize;
use twintower::preference::{correlate_topk, frequency_correlation, rank_correlate_topk, PosReport, PreferenceVector};
use twintower::training::Checkpoint;

use crate::commands::ClusterAnalysis;

/// The fixed cutoff used alongside the configured top-K.
const SHORT_K: usize = 500;

#[derive(Serialize)]
pub struct RunOrdering {
    pub checkpoint: String,
    pub model_type: String,
    pub seed: u64,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub primary: u8,
    pub tie: bool,
    /// Mean correct-token probability of tower 1 and tower 2.
    pub mean_p: [f64; 2],
    pub final_joint_loss: Option<f64>,
    pub final_head_losses: Option<[f64; 2]>,
    pub scored_tokens: usize,
}

#[derive(Serialize)]
pub struct Correlations {
    pub k: usize,
    /// Pearson over the top-k scores; `null` where undefined.
    pub pearson: Vec<Vec<Option<f64>>>,
}

#[derive(Serialize)]
pub struct Frequency {
    pub top_k: usize,
    /// Per run: Spearman between score and corpus frequency.
    pub score_vs_frequency: Vec<Option<f64>>,
    /// Spearman between runs' scores over the same top-k.
    pub run_vs_run: Vec<Vec<Option<f64>>>,
}

#[derive(Serialize)]
pub struct Report {
    pub ordering: Vec<RunOrdering>,
    pub correlations: Vec<Correlations>,
    pub pos: Vec<PosReport>,
    pub frequency: Frequency,
    pub clusters: ClusterAnalysis,
}

fn pairwise(
    vs: &[PreferenceVector],
    k: usize,
    stat: fn(&PreferenceVector, &PreferenceVector, usize) -> twintower::Result<f64>,
) -> Vec<Vec<Option<f64>>> {
    let n = vs.len();
    let mut m = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let r = stat(&vs[i], &vs[j], k).ok();
            m[i][j] = r;
            m[j][i] = r;
        }
    }
    m
}

impl Report {
    pub fn assemble(
        ckpts: &[Checkpoint],
        prefs: &[PreferenceVector],
        top_k: usize,
        pos: Vec<PosReport>,
        clusters: ClusterAnalysis,
    ) -> Self {
        let ordering = ckpts
            .iter()
            .zip(prefs)
            .map(|(c, v)| {
                let o = c.tower_order.expect("checked by caller");
                RunOrdering {
                    checkpoint: c.id(),
                    model_type: c.config.model_type.to_string(),
                    seed: c.seed,
                    phase1_steps: c.phase1_steps,
                    phase2_steps: c.phase2_steps,
                    primary: o.primary,
                    tie: o.tie,
                    mean_p: o.mean_p,
                    final_joint_loss: c.loss_history.last().copied(),
                    final_head_losses: c.head_loss_history.last().copied(),
                    scored_tokens: v.num_defined(),
                }
            })
            .collect();
        let mut ks = vec![SHORT_K, top_k];
        ks.sort_unstable();
        ks.dedup();
        let correlations = ks
            .into_iter()
            .map(|k| Correlations {
                k,
                pearson: pairwise(prefs, k, correlate_topk),
            })
            .collect();
        let frequency = Frequency {
            top_k,
            score_vs_frequency: prefs.iter().map(|v| frequency_correlation(v, top_k).ok()).collect(),
            run_vs_run: pairwise(prefs, top_k, rank_correlate_topk),
        };
        Report {
            ordering,
            correlations,
            pos,
            frequency,
            clusters,
        }
    }

    pub fn to_text(&self) -> String {
        let fmt = |v: &Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:+.3}"));
        let mut t = String::new();
        let _ = writeln!(t, "== ordering");
        for (i, o) in self.ordering.iter().enumerate() {
            let _ = writeln!(
                t,
                "run {i}: {} seed {} ({} + {} steps), primary tower {}{}, mean p {:.5} / {:.5}, {} tokens scored",
                o.model_type,
                o.seed,
                o.phase1_steps,
                o.phase2_steps,
                o.primary,
                if o.tie { " (tie)" } else { "" },
                o.mean_p[0],
                o.mean_p[1],
                o.scored_tokens
            );
        }
        let _ = writeln!(t, "\n== correlations (Pearson of preference scores)");
        for c in &self.correlations {
            let _ = writeln!(t, "top {}:", c.k);
            for row in &c.pearson {
                let _ = writeln!(t, "  {}", row.iter().map(fmt).collect::<Vec<_>>().join("  "));
            }
        }
        let _ = writeln!(t, "\n== pos (run 0 first)");
        for (i, p) in self.pos.iter().enumerate() {
            let _ = writeln!(t, "run {i}:");
            for g in &p.groups {
                let _ = writeln!(
                    t,
                    "  {:<6} {:>5} tokens  mean {}  median {}",
                    g.tag.to_string(),
                    g.tokens,
                    fmt(&g.mean),
                    fmt(&g.median)
                );
            }
        }
        let _ = writeln!(t, "\n== frequency (Spearman, top {})", self.frequency.top_k);
        for (i, r) in self.frequency.score_vs_frequency.iter().enumerate() {
            let _ = writeln!(t, "run {i}: score vs frequency {}", fmt(r));
        }
        let _ = writeln!(t, "run vs run:");
        for row in &self.frequency.run_vs_run {
            let _ = writeln!(t, "  {}", row.iter().map(fmt).collect::<Vec<_>>().join("  "));
        }
        let c = &self.clusters;
        let _ = writeln!(t, "\n== clusters (run 0)");
        let _ = writeln!(
            t,
            "PCA d={} on {} samples; ICA {} iterations ({}), update norm {:.2e}",
            c.pca_dim,
            c.samples,
            c.ica_iterations,
            if c.ica_converged { "converged" } else { "not converged" },
            c.ica_update_norm
        );
        let _ = writeln!(
            t,
            "{:.1}% of values in (-1, 1); {:.2} clusters per token; {} non-empty clusters at |y| > {}",
            100.0 * c.fraction_within_one,
            c.mean_clusters_per_token,
            c.nonempty_clusters,
            c.threshold
        );
        if let Some(ranked) = &c.ranked {
            for r in &ranked.rows {
                let _ = writeln!(
                    t,
                    "  #{:<3} ({}{}) {:+.3}  {} members: {}",
                    r.rank,
                    r.dim,
                    r.sign.as_char(),
                    r.mean_score,
                    r.members,
                    r.label.join(" ")
                );
            }
            if !ranked.excluded.is_empty() {
                let _ = writeln!(t, "  {} clusters without scored members", ranked.excluded.len());
            }
        }
        t
    }
}
