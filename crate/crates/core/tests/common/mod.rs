//! Fixtures shared by several test targets.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use soda_core::quantizer::CodeSequence;
use soda_core::seqmodel::{tokenize_history, ModelConfig, Recommender, VocabLayout};

pub fn tiny_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ff_dim: 32,
        max_items: 6,
        disambiguation_capacity: 4,
        seed,
        ..ModelConfig::default()
    }
}

/// `n` distinct semantic IDs over `layers` codebooks of size `k`, shuffled.
pub fn random_id_map(n: usize, layers: usize, k: usize, capacity: usize, seed: u64) -> Vec<CodeSequence> {
    let combos = k.pow(layers as u32);
    assert!(n <= combos * capacity, "not enough distinct IDs");
    let mut all: Vec<CodeSequence> = (0..combos * capacity)
        .map(|x| {
            let mut rest = x / capacity;
            let mut codes = vec![0; layers];
            for c in codes.iter_mut().rev() {
                *c = rest % k;
                rest /= k;
            }
            CodeSequence { codes, disambiguation: x % capacity }
        })
        .collect();
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    all.truncate(n);
    all
}

/// Scores every item separately with per-prefix logits and sorts by score
/// descending, then item ascending.
pub fn exhaustive_ranking(
    model: &Recommender,
    id_map: &[CodeSequence],
    history: &[usize],
) -> Vec<(usize, f64)> {
    let x = tokenize_history(history, id_map, model.vocab(), model.config().max_items).unwrap();
    let mut scored: Vec<(usize, f64)> = id_map
        .iter()
        .enumerate()
        .map(|(item, seq)| {
            let tokens = model.vocab().item_tokens(seq).unwrap();
            let mut score = 0.0;
            for t in 0..tokens.len() {
                let logits = model.next_token_logits(&x, &tokens[..t]).unwrap();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
                score += logits[tokens[t]] - lse;
            }
            (item, score)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored
}

pub fn model_for(layers: usize, k: usize, seed: u64) -> Recommender {
    let vocab = VocabLayout::new(layers, k, 4);
    Recommender::new(tiny_model_config(seed), vocab, 8).unwrap()
}

pub fn tiny_train_config(seed: u64) -> soda_core::pipeline::TrainConfig {
    let mut c = soda_core::pipeline::TrainConfig {
        seed,
        ..Default::default()
    };
    c.tokenizer.layers = 2;
    c.tokenizer.codebook_size = 4;
    c.tokenizer.code_dim = 8;
    c.tokenizer.encoder_hidden = vec![16];
    c.tokenizer.decoder_hidden = vec![16];
    c.tokenizer.kmeans_iterations = 20;
    c.model = ModelConfig {
        max_items: 6,
        disambiguation_capacity: 16,
        ..tiny_model_config(0)
    };
    c.optimizer.batch_size = 16;
    c.optimizer.pretrain_epochs = 3;
    c.optimizer.recommender_lr = 3e-3;
    c.schedule.recommender_epochs = 1;
    c.schedule.tokenizer_epochs = 1;
    c.schedule.cycles = 2;
    c.data.max_len = 6;
    c.data.k_core = 2;
    c.eval.beam = 10;
    c.eval.ks = vec![5, 10];
    c
}

pub fn tiny_data(users: usize, items: usize, seed: u64) -> soda_core::corpus::PreparedData {
    let synth = soda_core::corpus::synth_corpus(&soda_core::corpus::SynthConfig {
        users,
        items,
        clusters: 4,
        dim: 8,
        min_interactions: 4,
        max_interactions: 7,
        seed,
        ..Default::default()
    })
    .unwrap();
    soda_core::corpus::prepare(&synth.corpus, 2, 6).unwrap()
}

/// k-core by whole rounds: drop every record touching a user or item below
/// degree `k`, repeat until nothing changes.
pub fn peel_oracle(
    records: &[soda_core::corpus::Interaction],
    k: usize,
) -> Vec<soda_core::corpus::Interaction> {
    use std::collections::HashMap;
    let mut alive = records.to_vec();
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for r in &alive {
            *users.entry(&r.user).or_default() += 1;
            *items.entry(&r.item).or_default() += 1;
        }
        let next: Vec<_> = alive
            .iter()
            .filter(|r| users[r.user.as_str()] >= k && items[r.item.as_str()] >= k)
            .cloned()
            .collect();
        if next.len() == alive.len() {
            return next;
        }
        alive = next;
    }
}

pub fn interaction(user: usize, item: usize, t: i64) -> soda_core::corpus::Interaction {
    soda_core::corpus::Interaction {
        user: format!("u{user}"),
        item: format!("i{item}"),
        timestamp: t,
    }
}

/// 50 records: a dense 4 × 4 block seen twice plus a sparse tail.
pub fn fifty_interaction_log() -> Vec<soda_core::corpus::Interaction> {
    let mut records = Vec::new();
    let mut t = 0;
    for u in 0..4 {
        for i in 0..4 {
            for _ in 0..2 {
                records.push(interaction(u, i, t));
                t += 1;
            }
        }
    }
    for j in 0..18 {
        records.push(interaction(4 + j % 5, 4 + j % 7, t));
        t += 1;
    }
    records
}
