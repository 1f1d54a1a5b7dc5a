//! What the attribution engines need from a language model.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::context::{AblatedPrompt, PromptLayout};
use crate::cost::PassTokens;
use crate::error::{Error, Result};
use crate::model::{self, AttentionMaps, ModelWeights, Session};
use crate::tokenizer::{TokenId, TokenSeq, TOKENIZER_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCapabilities {
    pub kv_sessions: bool,
    pub attention_export: bool,
    pub embedding_gradients: bool,
    pub generation: bool,
}

/// A response log-likelihood and the tokens it cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Likelihood {
    pub log_likelihood: f64,
    pub tokens: PassTokens,
}

pub(crate) fn uncached_tokens(ablated: &AblatedPrompt, response: &TokenSeq) -> PassTokens {
    PassTokens {
        uncached: (ablated.tokens.len() + response.len()) as u64,
        cached: 0,
        uncached_context: ablated.context_tokens as u64,
    }
}

pub(crate) fn forked_tokens(ablated: &AblatedPrompt, response: &TokenSeq) -> PassTokens {
    PassTokens {
        uncached: (ablated.tokens.len() - ablated.shared_prefix + response.len()) as u64,
        cached: ablated.shared_prefix as u64,
        uncached_context: ablated.context_tokens_after_prefix as u64,
    }
}

/// A model that scores a fixed response under ablated versions of a prompt.
///
/// `removed` always names source indices of `layout`. Only the uncached
/// evaluation is mandatory; the rest degrade to [`Error::CapabilityMissing`].
pub trait LikelihoodBackend: Sync {
    /// Handle over the full prompt plus response, shared by all cached passes.
    type Cache: Sync;

    fn name(&self) -> String;

    fn tokenizer_id(&self) -> &str {
        TOKENIZER_ID
    }

    fn param_count(&self) -> u64;

    fn capabilities(&self) -> BackendCapabilities;

    /// `log p(response | prompt without removed)`, computed from scratch.
    fn ablated_likelihood(&self, layout: &PromptLayout, removed: &[usize], response: &TokenSeq)
        -> Result<Likelihood>;

    /// Full-prompt likelihood, keeping a cache for later forks.
    fn cached_base(&self, _layout: &PromptLayout, _response: &TokenSeq) -> Result<(Likelihood, Self::Cache)> {
        Err(Error::CapabilityMissing("kv sessions"))
    }

    /// Same value as [`Self::ablated_likelihood`], reusing the cached prefix
    /// that precedes the first removed source.
    fn ablated_likelihood_cached(
        &self,
        _cache: &Self::Cache,
        _layout: &PromptLayout,
        _removed: &[usize],
        _response: &TokenSeq,
    ) -> Result<Likelihood> {
        Err(Error::CapabilityMissing("kv sessions"))
    }

    fn attentions(&self, _tokens: &[TokenId]) -> Result<AttentionMaps> {
        Err(Error::CapabilityMissing("attention export"))
    }

    fn embedding_gradients(&self, _tokens: &[TokenId], _scored: Range<usize>) -> Result<Vec<Vec<f64>>> {
        Err(Error::CapabilityMissing("embedding gradients"))
    }

    fn generate(&self, _prompt: &[TokenId], _max_new: usize) -> Result<TokenSeq> {
        Err(Error::CapabilityMissing("generation"))
    }
}

fn check_response(response: &TokenSeq) -> Result<()> {
    if response.is_empty() {
        Err(Error::EmptyResponse)
    } else {
        Ok(())
    }
}

impl LikelihoodBackend for ModelWeights {
    type Cache = Session;

    fn name(&self) -> String {
        ModelWeights::name(self)
    }

    fn param_count(&self) -> u64 {
        self.config.param_count()
    }

    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities { kv_sessions: true, attention_export: true, embedding_gradients: true, generation: true }
    }

    fn ablated_likelihood(&self, layout: &PromptLayout, removed: &[usize], response: &TokenSeq) -> Result<Likelihood> {
        check_response(response)?;
        let ablated = layout.ablate(removed)?;
        let log_likelihood = model::score_continuation(self, &ablated.tokens, response)?;
        Ok(Likelihood { log_likelihood, tokens: uncached_tokens(&ablated, response) })
    }

    fn cached_base(&self, layout: &PromptLayout, response: &TokenSeq) -> Result<(Likelihood, Session)> {
        check_response(response)?;
        let total = layout.len() + response.len();
        if total > self.config.max_seq {
            return Err(Error::SequenceTooLong { len: total, max: self.config.max_seq });
        }
        let mut session = Session::create(self, layout.tokens())?;
        let log_likelihood = session.score(self, response)?;
        let full = layout.ablate(&[])?;
        Ok((Likelihood { log_likelihood, tokens: uncached_tokens(&full, response) }, session))
    }

    fn ablated_likelihood_cached(
        &self,
        cache: &Session,
        layout: &PromptLayout,
        removed: &[usize],
        response: &TokenSeq,
    ) -> Result<Likelihood> {
        check_response(response)?;
        let ablated = layout.ablate(removed)?;
        let mut session = cache.fork(ablated.shared_prefix)?;
        session.extend(self, &ablated.tokens[ablated.shared_prefix..])?;
        let log_likelihood = session.score(self, response)?;
        Ok(Likelihood { log_likelihood, tokens: forked_tokens(&ablated, response) })
    }

    fn attentions(&self, tokens: &[TokenId]) -> Result<AttentionMaps> {
        model::forward_attentions(self, tokens)
    }

    fn embedding_gradients(&self, tokens: &[TokenId], scored: Range<usize>) -> Result<Vec<Vec<f64>>> {
        model::embedding_gradients(self, tokens, scored)
    }

    fn generate(&self, prompt: &[TokenId], max_new: usize) -> Result<TokenSeq> {
        model::greedy_generate(self, prompt, max_new)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::{build_prompt, ContextPartition, PromptTemplate};
    use crate::model::ModelConfig;
    use crate::tokenizer::tokenize;

    #[test]
    fn forked_pass_reports_reused_prefix() {
        let model = ModelWeights::init(ModelConfig { max_seq: 200, ..ModelConfig::tiny() }, 2).unwrap();
        let partition = ContextPartition::flat(vec!["alpha".into(), "beta".into(), "gamma".into()]).unwrap();
        let layout = build_prompt(&PromptTemplate::qa(), &partition, "which?");
        let response = tokenize("beta");
        let (base, cache) = model.cached_base(&layout, &response).unwrap();
        assert_eq!(base.tokens.uncached as usize, layout.len() + response.len());

        let fork = layout.span(1).start;
        let cached = model.ablated_likelihood_cached(&cache, &layout, &[1], &response).unwrap();
        let ablated_len = layout.len() - layout.span(1).len();
        assert_eq!(cached.tokens.cached as usize, fork);
        assert_eq!(cached.tokens.uncached as usize, response.len() + (ablated_len - fork));
        assert_eq!(cached.tokens.uncached_context as usize, layout.span(2).len());

        let uncached = model.ablated_likelihood(&layout, &[1], &response).unwrap();
        assert!((cached.log_likelihood - uncached.log_likelihood).abs() <= 1e-4);
        assert_eq!(uncached.tokens.cached, 0);
    }

    #[test]
    fn empty_response_is_rejected() {
        let model = ModelWeights::init(ModelConfig::tiny(), 2).unwrap();
        let partition = ContextPartition::flat(vec!["x".into()]).unwrap();
        let layout = build_prompt(&PromptTemplate::qa(), &partition, "q");
        assert!(matches!(model.ablated_likelihood(&layout, &[], &TokenSeq::default()), Err(Error::EmptyResponse)));
    }
}
