//! Leave-one-out attribution: exact, KV-cached, and leave-group-out.
//!
//! A score is `log p(R | Q, C) - log p(R | Q, C without the source)` in nats;
//! higher means the source contributed more to the response.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backend::{Likelihood, LikelihoodBackend};
use crate::context::PromptLayout;
use crate::cost::{CostRecord, StageCost};
use crate::error::{Error, Result};
use crate::tokenizer::TokenSeq;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionScores {
    /// One score per source, in context order.
    pub scores: Vec<f64>,
    pub method: String,
    pub params: serde_json::Value,
    pub cost: CostRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupScores {
    pub scores: Vec<f64>,
    pub cost: CostRecord,
}

/// Base likelihood of one context, optionally with its KV cache, shared by
/// every ablation of that context.
pub(crate) struct Evaluator<'a, B: LikelihoodBackend> {
    backend: &'a B,
    layout: &'a PromptLayout,
    response: &'a TokenSeq,
    cache: Option<B::Cache>,
    base: f64,
}

impl<'a, B: LikelihoodBackend> Evaluator<'a, B> {
    /// Runs the base pass and records it in `cost`.
    pub(crate) fn open(
        backend: &'a B,
        layout: &'a PromptLayout,
        response: &'a TokenSeq,
        use_kv: bool,
        cost: &mut StageCost,
    ) -> Result<Self> {
        if layout.num_sources() == 0 {
            return Err(Error::EmptyContext);
        }
        if response.is_empty() {
            return Err(Error::EmptyResponse);
        }
        let (base, cache) = if use_kv {
            let (base, cache) = backend.cached_base(layout, response)?;
            (base, Some(cache))
        } else {
            (backend.ablated_likelihood(layout, &[], response)?, None)
        };
        cost.record_base(base.tokens);
        Ok(Self { backend, layout, response, cache, base: base.log_likelihood })
    }

    fn ablated(&self, removed: &[usize]) -> Result<Likelihood> {
        match &self.cache {
            Some(cache) => self.backend.ablated_likelihood_cached(cache, self.layout, removed, self.response),
            None => self.backend.ablated_likelihood(self.layout, removed, self.response),
        }
    }

    /// `base - log p(R | context without removal)` for each removal set.
    /// Passes run in parallel; results and accounting follow input order.
    pub(crate) fn drops(&self, removals: &[Vec<usize>], cost: &mut StageCost) -> Result<Vec<f64>> {
        let results: Vec<Likelihood> = removals.par_iter().map(|r| self.ablated(r)).collect::<Result<_>>()?;
        Ok(results
            .into_iter()
            .map(|l| {
                cost.record_pass(l.tokens);
                self.base - l.log_likelihood
            })
            .collect())
    }
}

pub(crate) fn stage_cost<B: LikelihoodBackend>(stage: &str, backend: &B) -> StageCost {
    StageCost::new(stage, backend.name(), backend.param_count())
}

pub(crate) fn resolve_kv<B: LikelihoodBackend>(backend: &B, wanted: bool) -> bool {
    wanted && backend.capabilities().kv_sessions
}

/// LOO scores of every source of `layout`.
pub(crate) fn loo_scores<B: LikelihoodBackend>(
    backend: &B,
    layout: &PromptLayout,
    response: &TokenSeq,
    use_kv: bool,
    cost: &mut StageCost,
) -> Result<Vec<f64>> {
    let eval = Evaluator::open(backend, layout, response, use_kv, cost)?;
    let removals: Vec<Vec<usize>> = (0..layout.num_sources()).map(|i| vec![i]).collect();
    eval.drops(&removals, cost)
}

pub(crate) fn check_grouping(grouping: &[Vec<usize>], num_sources: usize) -> Result<()> {
    let mut seen = vec![false; num_sources];
    for group in grouping {
        if group.is_empty() {
            return Err(Error::InvalidGrouping("empty group".into()));
        }
        for &i in group {
            if i >= num_sources {
                return Err(Error::SourceIndex { index: i, len: num_sources });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidGrouping(format!("source {i} appears in more than one group")));
            }
        }
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::InvalidGrouping(format!("source {missing} is not in any group")));
    }
    Ok(())
}

fn loo<B: LikelihoodBackend>(
    backend: &B,
    layout: &PromptLayout,
    response: &TokenSeq,
    use_kv: bool,
    method: &str,
) -> Result<AttributionScores> {
    let start = Instant::now();
    let mut stage = stage_cost(method, backend);
    let scores = loo_scores(backend, layout, response, use_kv, &mut stage)?;
    let mut cost = CostRecord::single(stage);
    cost.wall_ns = start.elapsed().as_nanos() as u64;
    Ok(AttributionScores { scores, method: method.into(), params: json!({ "kv": use_kv }), cost })
}

/// Exact LOO: one base pass plus one uncached pass per source.
pub fn loo_exact<B: LikelihoodBackend>(backend: &B, layout: &PromptLayout, response: &TokenSeq) -> Result<AttributionScores> {
    loo(backend, layout, response, false, "loo")
}

/// LOO where the pass removing source `i` reuses the cached keys and values of
/// everything before source `i`.
pub fn loo_kv<B: LikelihoodBackend>(backend: &B, layout: &PromptLayout, response: &TokenSeq) -> Result<AttributionScores> {
    if !backend.capabilities().kv_sessions {
        return Err(Error::CapabilityMissing("kv sessions"));
    }
    loo(backend, layout, response, true, "kv")
}

/// Drop in response log-likelihood when each group of sources is removed as a whole.
pub fn leave_group_out<B: LikelihoodBackend>(
    backend: &B,
    layout: &PromptLayout,
    response: &TokenSeq,
    grouping: &[Vec<usize>],
    use_kv: bool,
) -> Result<GroupScores> {
    check_grouping(grouping, layout.num_sources())?;
    let start = Instant::now();
    let use_kv = resolve_kv(backend, use_kv);
    let mut stage = stage_cost("groups", backend);
    let eval = Evaluator::open(backend, layout, response, use_kv, &mut stage)?;
    let scores = eval.drops(grouping, &mut stage)?;
    let mut cost = CostRecord::single(stage);
    cost.wall_ns = start.elapsed().as_nanos() as u64;
    Ok(GroupScores { scores, cost })
}
