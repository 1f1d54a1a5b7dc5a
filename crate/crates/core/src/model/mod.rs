//! Deterministic decoder-only reference transformer.
//!
//! Pre-norm blocks, learned positional embeddings, GELU feed-forward, and an
//! output projection tied to the token embedding. Logits are restricted to the
//! byte tokens, so the specials can condition but are never predicted.

mod format;
mod forward;
mod grad;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tokenizer::MIN_VOCAB;

pub use format::{read_model, write_model, MODEL_MAGIC};
pub use forward::{forward_attentions, greedy_generate, score_continuation, AttentionMaps, Session};
pub use grad::embedding_gradients;

pub(crate) const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_seq: usize,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self { layers: 2, heads: 2, d_model: 16, d_ff: 32, vocab: MIN_VOCAB, max_seq: 256 }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidConfig(msg.to_owned()));
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return fail("dimensions must be positive");
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return fail("d_model must be divisible by heads");
        }
        if self.vocab < MIN_VOCAB {
            return fail("vocab must hold 256 bytes plus BOS/EOS");
        }
        if self.max_seq == 0 {
            return fail("max_seq must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Total number of stored parameters.
    pub fn param_count(&self) -> u64 {
        let (d, f) = (self.d_model as u64, self.d_ff as u64);
        let per_layer = 2 * d + 4 * d * d + 2 * d + d * f + f + f * d + d;
        (self.vocab as u64 + self.max_seq as u64) * d + self.layers as u64 * per_layer + 2 * d
    }
}

/// Weights of one block. Matrices are stored input-major (`[in][out]`).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
}

impl LayerWeights {
    fn arrays(&self) -> [&Vec<f32>; 12] {
        [
            &self.ln1_gain, &self.ln1_bias, &self.wq, &self.wk, &self.wv, &self.wo,
            &self.ln2_gain, &self.ln2_bias, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn arrays_mut(&mut self) -> [&mut Vec<f32>; 12] {
        [
            &mut self.ln1_gain, &mut self.ln1_bias, &mut self.wq, &mut self.wk, &mut self.wv,
            &mut self.wo, &mut self.ln2_gain, &mut self.ln2_bias, &mut self.w1, &mut self.b1,
            &mut self.w2, &mut self.b2,
        ]
    }

    fn zeros(config: &ModelConfig) -> Self {
        let (d, f) = (config.d_model, config.d_ff);
        Self {
            ln1_gain: vec![0.0; d],
            ln1_bias: vec![0.0; d],
            wq: vec![0.0; d * d],
            wk: vec![0.0; d * d],
            wv: vec![0.0; d * d],
            wo: vec![0.0; d * d],
            ln2_gain: vec![0.0; d],
            ln2_bias: vec![0.0; d],
            w1: vec![0.0; d * f],
            b1: vec![0.0; f],
            w2: vec![0.0; f * d],
            b2: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub token_embedding: Vec<f32>,
    pub position_embedding: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Vec<f32>,
    pub final_bias: Vec<f32>,
}

impl ModelWeights {
    /// All parameters zero, including layer-norm gains: every prediction is uniform.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        Ok(Self {
            config,
            token_embedding: vec![0.0; config.vocab * d],
            position_embedding: vec![0.0; config.max_seq * d],
            layers: (0..config.layers).map(|_| LayerWeights::zeros(&config)).collect(),
            final_gain: vec![0.0; d],
            final_bias: vec![0.0; d],
        })
    }

    /// Random weights, a pure function of `(config, seed)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut weights = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |values: &mut [f32], std: f32| {
            let normal = Normal::new(0.0f32, std).expect("positive std");
            for v in values {
                *v = normal.sample(&mut rng);
            }
        };
        let d = config.d_model as f32;
        let f = config.d_ff as f32;
        fill(&mut weights.token_embedding, 0.3);
        fill(&mut weights.position_embedding, 0.3);
        for layer in &mut weights.layers {
            fill(&mut layer.wq, 1.0 / d.sqrt());
            fill(&mut layer.wk, 1.0 / d.sqrt());
            fill(&mut layer.wv, 1.0 / d.sqrt());
            fill(&mut layer.wo, 1.0 / d.sqrt());
            fill(&mut layer.w1, 1.0 / d.sqrt());
            fill(&mut layer.w2, 1.0 / f.sqrt());
            layer.ln1_gain.fill(1.0);
            layer.ln2_gain.fill(1.0);
        }
        weights.final_gain.fill(1.0);
        Ok(weights)
    }

    pub fn param_count(&self) -> u64 {
        self.config.param_count()
    }

    /// Every array in serialization order.
    pub(crate) fn arrays(&self) -> Vec<&Vec<f32>> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for layer in &self.layers {
            out.extend(layer.arrays());
        }
        out.push(&self.final_gain);
        out.push(&self.final_bias);
        out
    }

    pub(crate) fn arrays_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            out.extend(layer.arrays_mut());
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// Short content hash identifying these weights.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for array in self.arrays() {
            for v in array {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn name(&self) -> String {
        let c = &self.config;
        format!("ref-L{}-h{}-d{}-{}", c.layers, c.heads, c.d_model, self.fingerprint())
    }

    /// Input embedding (token plus position) at `position`.
    pub(crate) fn input_embedding(&self, token: u32, position: usize) -> Vec<f32> {
        let d = self.config.d_model;
        let t = &self.token_embedding[token as usize * d..(token as usize + 1) * d];
        let p = &self.position_embedding[position * d..(position + 1) * d];
        t.iter().zip(p).map(|(a, b)| a + b).collect()
    }

    pub fn token_embedding_row(&self, token: u32) -> &[f32] {
        let d = self.config.d_model;
        &self.token_embedding[token as usize * d..(token as usize + 1) * d]
    }
}
