//! Visibility, normalization, ordering and antisymmetry invariants.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twintower::corpus::{encode, make_batches, Batch, BatchConfig, Task, TokenStream, Vocabulary, PAD};
use twintower::preference::{compute_preference, correlate_topk, PreferenceMode};
use twintower::substrate::{Parameters, Tensor};
use twintower::towers::{encode_both, tower_head_forward, two_tower_forward, ModelConfig, ModelType, TowerHeads, TwoTowerParams};
use twintower::training::{
    for_each_scored, order_towers, train_heads, train_joint, Checkpoint, EvalConfig, HeadInit, TowerOrder, TrainConfig,
};

const PERTURBATIONS: usize = 100;

fn config(model_type: ModelType) -> ModelConfig {
    ModelConfig {
        model_type,
        layers: 2,
        hidden_size: 16,
        embed_size: 12,
        heads: 2,
        intermediate_size: 24,
        vocab_size: 30,
        seq_len: 8,
        mask_rate: 0.25,
    }
}

fn random_params(config: &ModelConfig, seed: u64, scale: f64) -> (TwoTowerParams, TowerHeads) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = TwoTowerParams::init(config, seed).unwrap();
    let mut heads = TowerHeads::init(config, seed + 1);
    for t in params.tensors_mut().into_iter().chain(heads.tensors_mut()) {
        for v in t.data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
    (params, heads)
}

/// Hiddens of both towers and the joint and per-head distributions at every
/// position of `batch`, regardless of its score mask.
struct Outputs {
    h: [Tensor; 2],
    joint: Tensor,
    heads: [Tensor; 2],
}

fn outputs(params: &TwoTowerParams, heads: &TowerHeads, batch: &Batch, config: &ModelConfig) -> Outputs {
    let all = Batch {
        targets: vec![3; batch.inputs.len()],
        score_mask: vec![true; batch.inputs.len()],
        ..batch.clone()
    };
    let (h1, h2) = encode_both(params, &all, config).unwrap();
    let joint = two_tower_forward(params, &all, config).unwrap().probs;
    let (p1, p2) = tower_head_forward(heads, &h1, &h2, &params.embedding, &all).unwrap();
    Outputs {
        h: [h1, h2],
        joint,
        heads: [p1, p2],
    }
}

fn same_row(a: &Tensor, b: &Tensor, row: usize) -> bool {
    a.row(row).iter().zip(b.row(row)).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn same_at(a: &Outputs, b: &Outputs, pos: usize) -> bool {
    same_row(&a.h[0], &b.h[0], pos)
        && same_row(&a.h[1], &b.h[1], pos)
        && same_row(&a.joint, &b.joint, pos)
        && same_row(&a.heads[0], &b.heads[0], pos)
        && same_row(&a.heads[1], &b.heads[1], pos)
}

/// Replaces the input at `pos` by a different non-special token.
fn perturb(batch: &Batch, pos: usize, rng: &mut impl Rng, vocab: u32) -> Batch {
    let mut b = batch.clone();
    loop {
        let t = rng.gen_range(3..vocab);
        if t != batch.inputs[pos] {
            b.inputs[pos] = t;
            return b;
        }
    }
}

#[test]
fn causal_outputs_ignore_later_inputs() {
    let config = config(ModelType::CausalTfm);
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let (params, heads) = random_params(&config, 41, 0.5);
    let len = config.seq_len;
    for _ in 0..PERTURBATIONS {
        let batch = common::random_batch(&mut rng, &config, 2);
        let base = outputs(&params, &heads, &batch, &config);
        let pos = rng.gen_range(0..batch.inputs.len());
        let changed = outputs(&params, &heads, &perturb(&batch, pos, &mut rng, 30), &config);
        for p in 0..batch.inputs.len() {
            let same_row_earlier = p / len == pos / len && p % len < pos % len;
            if same_row_earlier || p / len != pos / len {
                assert!(same_at(&base, &changed, p), "position {p} saw input {pos}");
            }
        }
        assert!(!same_at(&base, &changed, pos));
    }
}

#[test]
fn cloze_outputs_never_see_their_own_input() {
    let config = config(ModelType::ClozeLstm);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (params, heads) = random_params(&config, 43, 0.5);
    for _ in 0..PERTURBATIONS {
        let batch = common::random_batch(&mut rng, &config, 2);
        let base = outputs(&params, &heads, &batch, &config);
        let pos = rng.gen_range(0..batch.inputs.len());
        let changed = outputs(&params, &heads, &perturb(&batch, pos, &mut rng, 30), &config);
        assert!(same_at(&base, &changed, pos), "position {pos} saw its own input");
        let row = pos / config.seq_len * config.seq_len;
        assert!((row..row + config.seq_len).any(|p| !same_at(&base, &changed, p)));
    }
}

#[test]
fn mlm_outputs_ignore_the_masked_original() {
    let config = config(ModelType::MlmTfm);
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let (params, heads) = random_params(&config, 45, 0.5);
    let rows = 3;
    for trial in 0..PERTURBATIONS {
        let ids: Vec<u32> = (0..rows * config.seq_len).map(|_| rng.gen_range(3..30)).collect();
        let stream = TokenStream {
            doc_boundaries: vec![ids.len()],
            ids,
        };
        let cfg = BatchConfig {
            task: Task::Mlm,
            seq_len: config.seq_len,
            batch_size: rows,
            mask_rate: config.mask_rate,
            seed: trial as u64,
            shuffle: false,
        };
        let batch = make_batches(&stream, &cfg).unwrap().next().unwrap();
        let masked = batch.scored_positions();
        let pos = masked[rng.gen_range(0..masked.len())];
        let mut edited = stream.clone();
        edited.ids[pos] = if stream.ids[pos] == 3 { 4 } else { 3 };
        let rebuilt = make_batches(&edited, &cfg).unwrap().next().unwrap();
        assert_eq!(rebuilt.inputs, batch.inputs);
        assert_eq!(rebuilt.score_mask, batch.score_mask);
        let (a, b) = (outputs(&params, &heads, &batch, &config), outputs(&params, &heads, &rebuilt, &config));
        for p in 0..batch.inputs.len() {
            assert!(same_at(&a, &b, p));
        }
    }
}

#[test]
fn every_probability_row_is_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    for mt in [ModelType::ClozeLstm, ModelType::CausalTfm, ModelType::MlmTfm] {
        let config = config(mt);
        for seed in 0..5 {
            let (params, heads) = random_params(&config, 50 + seed, 1.0);
            let batch = common::random_batch(&mut rng, &config, 3);
            let out = outputs(&params, &heads, &batch, &config);
            for probs in [&out.joint, &out.heads[0], &out.heads[1]] {
                for r in 0..probs.rows() {
                    let row = probs.row(r);
                    let total: f64 = row.iter().sum();
                    assert!((total - 1.0).abs() < 1e-9, "{mt}: row sums to {total}");
                    assert_eq!(row[PAD as usize], 0.0);
                    assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
                }
            }
        }
    }
}

fn toy_run(model_type: ModelType, seed: u64) -> (Vocabulary, TokenStream, Checkpoint) {
    let text = common::toy_corpus(7, 600);
    let vocab = Vocabulary::build(&text, 100, 1).unwrap();
    let (train, eval) = encode(&text, &vocab).split(0.2, 1);
    let config = ModelConfig {
        vocab_size: vocab.len(),
        ..config(model_type)
    };
    let steps = TrainConfig {
        steps: 40,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let ckpt = train_joint(&config, &train, seed, &steps).unwrap();
    let ckpt = train_heads(&ckpt, &train, seed, &steps, HeadInit::Fresh).unwrap();
    let ckpt = order_towers(&ckpt, &eval, &EvalConfig::default()).unwrap();
    (vocab, eval, ckpt)
}

#[test]
fn primary_tower_wins_on_the_ordering_stream() {
    for mt in [ModelType::ClozeLstm, ModelType::CausalTfm, ModelType::MlmTfm] {
        let (_, eval, ckpt) = toy_run(mt, 3);
        let order = ckpt.tower_order.unwrap();
        let mut dumps: Vec<(u32, f64, f64)> = Vec::new();
        for_each_scored(&ckpt, &eval, &EvalConfig::default(), |t, p1, p2| {
            dumps.push((t, p1[t as usize], p2[t as usize]));
        })
        .unwrap();
        let n = dumps.len() as f64;
        let means = [
            dumps.iter().map(|d| d.1).sum::<f64>() / n,
            dumps.iter().map(|d| d.2).sum::<f64>() / n,
        ];
        let (primary, secondary) = match order.primary {
            1 => (means[0], means[1]),
            _ => (means[1], means[0]),
        };
        assert!(primary >= secondary, "{mt}: {means:?} with primary {}", order.primary);
        assert_eq!(order.mean_p, means);
    }
}

#[test]
fn swapping_the_order_negates_every_score() {
    let eval_cfg = EvalConfig::default();
    let (vocab, eval, ckpt) = toy_run(ModelType::MlmTfm, 3);
    let (_, _, other) = toy_run(ModelType::MlmTfm, 4);
    let mode = PreferenceMode::TargetPositions;
    let v = compute_preference(&ckpt, &vocab, &eval, &eval_cfg, mode).unwrap();
    let w = compute_preference(&other, &vocab, &eval, &eval_cfg, mode).unwrap();

    let order = ckpt.tower_order.unwrap();
    let flipped_ckpt = Checkpoint {
        tower_order: Some(TowerOrder {
            primary: order.secondary(),
            ..order
        }),
        ..ckpt.clone()
    };
    let flipped = compute_preference(&flipped_ckpt, &vocab, &eval, &eval_cfg, mode).unwrap();
    assert!(v.num_defined() > 10);
    for id in v.defined_ids() {
        assert_eq!(flipped.score(id).unwrap(), -v.score(id).unwrap());
    }
    assert_eq!(flipped.num_defined(), v.num_defined());
    let r = correlate_topk(&v, &w, 500).unwrap();
    assert_eq!(correlate_topk(&flipped, &w, 500).unwrap(), -r);

    // Physically exchanging the towers keeps the same tower primary.
    let exchanged = compute_preference(&ckpt.swapped(), &vocab, &eval, &eval_cfg, mode).unwrap();
    assert_eq!(exchanged.entries, v.entries);
}
