//! Comparison methods: attention mass, gradient norm, embedding similarity,
//! and a sparse linear surrogate fitted on random ablations.

mod contextcite;
mod lasso;

use std::time::Instant;

use serde_json::json;

use crate::attribution::{stage_cost, AttributionScores};
use crate::backend::LikelihoodBackend;
use crate::context::PromptLayout;
use crate::cost::{CostRecord, PassTokens};
use crate::error::{Error, Result};
use crate::model::ModelWeights;
use crate::tokenizer::{tokenize, TokenSeq};

pub use contextcite::{contextcite, sample_masks, ContextCiteParams, TargetScale};
pub use lasso::{default_lambda, lasso_fit, lasso_objective, SurrogateFit, LASSO_MAX_SWEEPS, LASSO_TOLERANCE};

fn full_sequence(layout: &PromptLayout, response: &TokenSeq) -> Result<Vec<u32>> {
    if layout.num_sources() == 0 {
        return Err(Error::EmptyContext);
    }
    if response.is_empty() {
        return Err(Error::EmptyResponse);
    }
    let mut tokens = layout.tokens().to_vec();
    tokens.extend_from_slice(response);
    Ok(tokens)
}

fn single_pass_cost<B: LikelihoodBackend>(stage: &str, backend: &B, tokens: usize, start: Instant) -> CostRecord {
    let mut s = stage_cost(stage, backend);
    s.record_base(PassTokens { uncached: tokens as u64, cached: 0, uncached_context: 0 });
    let mut cost = CostRecord::single(s);
    cost.wall_ns = start.elapsed().as_nanos() as u64;
    cost
}

/// Attention mass that the response tokens put on each source, summed over
/// layers and heads.
pub fn attention_attribution<B: LikelihoodBackend>(
    backend: &B,
    layout: &PromptLayout,
    response: &TokenSeq,
) -> Result<AttributionScores> {
    if !backend.capabilities().attention_export {
        return Err(Error::CapabilityMissing("attention export"));
    }
    let start = Instant::now();
    let tokens = full_sequence(layout, response)?;
    let maps = backend.attentions(&tokens)?;
    let mut scores = vec![0.0f64; layout.num_sources()];
    for layer in 0..maps.layers {
        for head in 0..maps.heads {
            for query in layout.len()..tokens.len() {
                let row = maps.row(layer, head, query);
                for (score, span) in scores.iter_mut().zip(layout.spans()) {
                    *score += row[span.clone()].iter().map(|&a| a as f64).sum::<f64>();
                }
            }
        }
    }
    Ok(AttributionScores {
        scores,
        method: "attention".into(),
        params: json!({}),
        cost: single_pass_cost("attention", backend, tokens.len(), start),
    })
}

/// Frobenius norm of the gradient of `log p(R | prompt)` with respect to each
/// source's input embeddings.
pub fn gradnorm_attribution<B: LikelihoodBackend>(
    backend: &B,
    layout: &PromptLayout,
    response: &TokenSeq,
) -> Result<AttributionScores> {
    if !backend.capabilities().embedding_gradients {
        return Err(Error::CapabilityMissing("embedding gradients"));
    }
    let start = Instant::now();
    let tokens = full_sequence(layout, response)?;
    let grads = backend.embedding_gradients(&tokens, layout.len()..tokens.len())?;
    let scores = layout
        .spans()
        .iter()
        .map(|span| grads[span.clone()].iter().flatten().map(|g| g * g).sum::<f64>().sqrt())
        .collect();
    Ok(AttributionScores {
        scores,
        method: "gradnorm".into(),
        params: json!({}),
        cost: single_pass_cost("gradnorm", backend, tokens.len(), start),
    })
}

/// Maps text to a fixed-dimension vector.
pub trait Embedder: Sync {
    fn name(&self) -> String;
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Mean of a reference model's token embeddings over the text's bytes.
pub struct ReferenceEmbedder<'a>(pub &'a ModelWeights);

impl Embedder for ReferenceEmbedder<'_> {
    fn name(&self) -> String {
        format!("mean-embedding:{}", self.0.name())
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let d = self.0.config.d_model;
        let tokens = tokenize(text);
        let mut sum = vec![0.0f64; d];
        for &t in tokens.iter() {
            for (s, &v) in sum.iter_mut().zip(self.0.token_embedding_row(t)) {
                *s += v as f64;
            }
        }
        if !tokens.is_empty() {
            sum.iter_mut().for_each(|s| *s /= tokens.len() as f64);
        }
        sum
    }
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Cosine similarity between each source and the response.
pub fn embed_sim_attribution<E: Embedder>(embedder: &E, layout: &PromptLayout, response_text: &str) -> AttributionScores {
    let start = Instant::now();
    let target = embedder.embed(response_text);
    let scores = (0..layout.num_sources()).map(|i| cosine(&embedder.embed(layout.source_text(i)), &target)).collect();
    AttributionScores {
        scores,
        method: "embedsim".into(),
        params: json!({ "embedder": embedder.name() }),
        cost: CostRecord { stages: vec![], wall_ns: start.elapsed().as_nanos() as u64 },
    }
}
