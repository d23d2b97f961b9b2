//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use twintower::corpus::{Batch, Task, MASK, PAD};
use twintower::towers::{ModelConfig, ModelType};

pub fn tiny_config(model_type: ModelType) -> ModelConfig {
    ModelConfig {
        model_type,
        layers: 2,
        hidden_size: 8,
        embed_size: 6,
        heads: 2,
        intermediate_size: 12,
        vocab_size: 20,
        seq_len: 5,
        mask_rate: 0.4,
    }
}

pub fn random_batch(rng: &mut impl Rng, config: &ModelConfig, rows: usize) -> Batch {
    let len = config.seq_len;
    let inputs: Vec<u32> = (0..rows * len)
        .map(|_| rng.gen_range(3..config.vocab_size as u32))
        .collect();
    let mut batch = Batch {
        task: config.task(),
        batch_size: rows,
        seq_len: len,
        targets: inputs.clone(),
        score_mask: vec![true; inputs.len()],
        inputs,
    };
    match config.task() {
        Task::Cloze => {}
        Task::Causal => {
            for r in 0..rows {
                for i in 0..len {
                    let k = r * len + i;
                    if i + 1 < len {
                        batch.targets[k] = batch.inputs[k + 1];
                    } else {
                        batch.targets[k] = PAD;
                        batch.score_mask[k] = false;
                    }
                }
            }
        }
        Task::Mlm => {
            for r in 0..rows {
                for i in 0..len {
                    let k = r * len + i;
                    let masked = i % 2 == r % 2;
                    batch.score_mask[k] = masked;
                    if masked {
                        batch.inputs[k] = MASK;
                    }
                }
            }
        }
    }
    batch
}


/// A small synthetic corpus with enough regularity to learn from: sentences
/// drawn from a fixed template over short word lists, ten per document.
pub fn toy_corpus(seed: u64, sentences: usize) -> String {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dets = ["the", "a", "every", "this"];
    let adjs = ["small", "red", "old", "quiet", "bright"];
    let nouns = ["cat", "dog", "bird", "house", "river", "tree", "king", "ship"];
    let verbs = ["sees", "likes", "finds", "follows", "hears"];
    let mut out = String::new();
    for i in 0..sentences {
        let mut pick = |words: &[&'static str]| words[rng.gen_range(0..words.len())];
        let line = format!(
            "{} {} {} {} {} {} .\n",
            pick(&dets),
            pick(&adjs),
            pick(&nouns),
            pick(&verbs),
            pick(&dets),
            pick(&nouns)
        );
        out.push_str(&line);
        if i % 10 == 9 {
            out.push('\n');
        }
    }
    out
}
