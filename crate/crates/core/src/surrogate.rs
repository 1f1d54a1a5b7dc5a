//! A backend defined directly by a value function over kept-source subsets.
//!
//! Used for exact brute-force checks of the attribution engines. It keeps the
//! same token accounting as a real model, so pass and FLOPs counts can be
//! checked through the engines as well.

use crate::backend::{forked_tokens, uncached_tokens, BackendCapabilities, Likelihood, LikelihoodBackend};
use crate::context::PromptLayout;
use crate::error::{Error, Result};
use crate::tokenizer::{TokenSeq, TOKENIZER_ID};

pub const MAX_SURROGATE_SOURCES: usize = 20;

/// `v(S)` for every subset `S` of kept sources, indexed by bitmask (bit `i` set
/// when source `i` is kept).
#[derive(Debug, Clone)]
pub struct SurrogateBackend {
    num_sources: usize,
    values: Vec<f64>,
    name: String,
    tokenizer: String,
    param_count: u64,
}

impl SurrogateBackend {
    pub fn from_fn(num_sources: usize, v: impl Fn(&[bool]) -> f64) -> Result<Self> {
        if num_sources == 0 || num_sources > MAX_SURROGATE_SOURCES {
            return Err(Error::InvalidParameter(format!(
                "surrogate supports 1..={MAX_SURROGATE_SOURCES} sources, got {num_sources}"
            )));
        }
        let mut kept = vec![false; num_sources];
        let values = (0..1usize << num_sources)
            .map(|mask| {
                for (i, k) in kept.iter_mut().enumerate() {
                    *k = mask >> i & 1 == 1;
                }
                v(&kept)
            })
            .collect();
        Ok(Self { num_sources, values, name: "surrogate".into(), tokenizer: TOKENIZER_ID.into(), param_count: 1 })
    }

    /// `v(S) = bias + Σ_{i∈S} w_i`.
    pub fn additive(weights: &[f64], bias: f64) -> Result<Self> {
        Self::from_fn(weights.len(), |kept| {
            bias + weights.iter().zip(kept).filter(|(_, &k)| k).map(|(w, _)| w).sum::<f64>()
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_param_count(mut self, param_count: u64) -> Self {
        self.param_count = param_count;
        self
    }

    pub fn with_tokenizer(mut self, tokenizer: impl Into<String>) -> Self {
        self.tokenizer = tokenizer.into();
        self
    }

    pub fn num_sources(&self) -> usize {
        self.num_sources
    }

    /// `v` of the subset left after deleting `removed`.
    pub fn value_without(&self, removed: &[usize]) -> f64 {
        let mut mask = (1usize << self.num_sources) - 1;
        for &i in removed {
            mask &= !(1 << i);
        }
        self.values[mask]
    }

    pub fn value(&self, kept: &[bool]) -> f64 {
        let mask = kept.iter().enumerate().filter(|(_, &k)| k).fold(0usize, |m, (i, _)| m | 1 << i);
        self.values[mask]
    }

    /// A copy with every value multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// `v` of the layout's sources (mapped to their origins) minus `removed`.
    fn evaluate(&self, layout: &PromptLayout, removed: &[usize], response: &TokenSeq) -> Result<f64> {
        if response.is_empty() {
            return Err(Error::EmptyResponse);
        }
        if let Some(&o) = layout.origin().iter().find(|&&o| o >= self.num_sources) {
            return Err(Error::InvalidParameter(format!(
                "surrogate defined over {} sources, layout refers to source {o}",
                self.num_sources
            )));
        }
        let mut mask = layout.origin().iter().fold(0usize, |m, &o| m | 1 << o);
        for &i in removed {
            let &o = layout.origin().get(i).ok_or(Error::SourceIndex { index: i, len: layout.num_sources() })?;
            mask &= !(1 << o);
        }
        Ok(self.values[mask])
    }
}

impl LikelihoodBackend for SurrogateBackend {
    type Cache = ();

    fn name(&self) -> String {
        self.name.clone()
    }

    fn tokenizer_id(&self) -> &str {
        &self.tokenizer
    }

    fn param_count(&self) -> u64 {
        self.param_count
    }

    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities { kv_sessions: true, attention_export: false, embedding_gradients: false, generation: false }
    }

    fn ablated_likelihood(&self, layout: &PromptLayout, removed: &[usize], response: &TokenSeq) -> Result<Likelihood> {
        let log_likelihood = self.evaluate(layout, removed, response)?;
        let ablated = layout.ablate(removed)?;
        Ok(Likelihood { log_likelihood, tokens: uncached_tokens(&ablated, response) })
    }

    fn cached_base(&self, layout: &PromptLayout, response: &TokenSeq) -> Result<(Likelihood, ())> {
        Ok((self.ablated_likelihood(layout, &[], response)?, ()))
    }

    fn ablated_likelihood_cached(
        &self,
        _cache: &(),
        layout: &PromptLayout,
        removed: &[usize],
        response: &TokenSeq,
    ) -> Result<Likelihood> {
        let log_likelihood = self.evaluate(layout, removed, response)?;
        let ablated = layout.ablate(removed)?;
        Ok(Likelihood { log_likelihood, tokens: forked_tokens(&ablated, response) })
    }
}
