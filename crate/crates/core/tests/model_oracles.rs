mod support;

use attribot_core::model::{embedding_gradients, score_continuation, Session};
use attribot_core::{tokenize, ModelConfig, ModelWeights};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(layers: usize, heads: usize, d_model: usize) -> ModelConfig {
    ModelConfig { layers, heads, d_model, d_ff: 2 * d_model, vocab: 258, max_seq: 128 }
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

#[test]
fn forward_matches_naive_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..6 {
        let model = ModelWeights::init(config(1 + seed as usize % 3, 2, 16), seed).unwrap();
        let mut prefix = vec![256];
        prefix.extend(tokenize(&support::random_text(&mut rng, 20)).0);
        let cont = tokenize(&support::random_text(&mut rng, 6));
        let fast = score_continuation(&model, &prefix, &cont).unwrap();
        let slow = support::naive_score(&model, &prefix, &cont);
        assert!((fast - slow).abs() <= 1e-4 * slow.abs().max(1.0), "{fast} vs {slow}");
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..4 {
        let model = ModelWeights::init(config(2, 2, 8), 100 + seed).unwrap();
        let mut tokens = vec![256];
        tokens.extend(tokenize(&support::random_text(&mut rng, 8)).0);
        let from = tokens.len();
        tokens.extend(tokenize(&support::random_text(&mut rng, 3)).0);
        let analytic = embedding_gradients(&model, &tokens, from..tokens.len()).unwrap();
        let fd = support::finite_difference_gradients(&model, &tokens, from, 1..from, 1e-5);
        let a: Vec<f64> = analytic[1..from].iter().flatten().copied().collect();
        let b: Vec<f64> = fd.iter().flatten().copied().collect();
        assert!(relative_error(&a, &b) <= 2e-2, "seed {seed}: {}", relative_error(&a, &b));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forked_sessions_match_fresh_ones(seed in 0u64..1000, fork in 1usize..20, len in 20usize..40) {
        let model = ModelWeights::init(config(2, 2, 16), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..256)).collect();
        let fork = fork.min(len - 1);
        let full = Session::create(&model, &tokens).unwrap();
        let mut forked = full.fork(fork).unwrap();
        let tail: Vec<u32> = (0..5).map(|_| rng.random_range(0..256)).collect();
        forked.extend(&model, &tail).unwrap();
        let cont = [97u32, 98];
        let mut prefix = tokens[..fork].to_vec();
        prefix.extend(&tail);
        let a = forked.score(&model, &cont).unwrap();
        let b = score_continuation(&model, &prefix, &cont).unwrap();
        prop_assert!((a - b).abs() <= 1e-4);
    }
}
