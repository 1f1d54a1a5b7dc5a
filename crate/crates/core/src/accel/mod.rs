//! Hierarchical attribution, proxy attribution, and proxy pruning.
//!
//! The pruning methods score only a subset of sources with the final model.
//! Everything else gets a sentinel score below every retained score, so the
//! output is still a full ranking of the context.

mod pipeline;

use std::cmp::Ordering;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attribution::{check_grouping, loo_scores, resolve_kv, stage_cost, AttributionScores, Evaluator};
use crate::backend::LikelihoodBackend;
use crate::context::PromptLayout;
use crate::cost::{CostRecord, StageCost};
use crate::error::{Error, Result};
use crate::tokenizer::TokenSeq;

pub use pipeline::{run_pipeline, PipelineSpec, Stage};

/// Keeps `max(min_keep, ⌈fraction·total⌉)` items, capped at `total`.
fn keep_count(fraction: f64, min_keep: usize, total: usize) -> usize {
    // Guards ceil against products like 0.3 * 10 = 3.0000000000000004.
    let by_fraction = (fraction * total as f64 - 1e-9).ceil().max(0.0) as usize;
    by_fraction.max(min_keep).min(total)
}

fn check_fraction(name: &str, value: f64) -> Result<()> {
    if value > 0.0 && value <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must lie in (0, 1], got {value}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HierParams {
    /// Fraction of groups kept after group scoring.
    pub beta: f64,
    pub min_keep: usize,
}

impl HierParams {
    pub fn new(beta: f64) -> Self {
        Self { beta, min_keep: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        check_fraction("beta", self.beta)
    }

    pub fn kept(&self, groups: usize) -> usize {
        keep_count(self.beta, self.min_keep, groups)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneParams {
    /// Fraction of sources kept after proxy scoring.
    pub alpha: f64,
    pub min_keep: usize,
}

impl PruneParams {
    pub fn new(alpha: f64) -> Self {
        Self { alpha, min_keep: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        check_fraction("alpha", self.alpha)
    }

    pub fn kept(&self, sources: usize) -> usize {
        keep_count(self.alpha, self.min_keep, sources)
    }
}

/// Indices sorted by descending score; ties keep the earlier index first.
pub(crate) fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order
}

/// Outcome of a selection stage, in the selected layout's source indices.
pub(crate) struct Selection {
    /// Retained sources, ascending.
    pub kept: Vec<usize>,
    /// Pruned sources, most promising first.
    pub pruned: Vec<usize>,
}

/// Scores groups by leave-group-out and keeps the best `params.kept(M)`.
pub(crate) fn select_groups<B: LikelihoodBackend>(
    backend: &B,
    layout: &PromptLayout,
    response: &TokenSeq,
    params: &HierParams,
    use_kv: bool,
    cost: &mut StageCost,
) -> Result<(Selection, Vec<f64>)> {
    let groups = layout.groups();
    if groups.is_empty() {
        return Err(Error::InvalidGrouping("context has no groups".into()));
    }
    check_grouping(&groups, layout.num_sources())?;
    let eval = Evaluator::open(backend, layout, response, use_kv, cost)?;
    let group_scores = eval.drops(&groups, cost)?;
    let order = rank_desc(&group_scores);
    let keep = params.kept(groups.len());

    let mut kept: Vec<usize> = order[..keep].iter().flat_map(|&g| groups[g].iter().copied()).collect();
    kept.sort_unstable();
    let pruned = order[keep..].iter().flat_map(|&g| groups[g].iter().copied()).collect();
    Ok((Selection { kept, pruned }, group_scores))
}

/// Scores sources by LOO and keeps the best `params.kept(|C|)`.
pub(crate) fn select_sources<B: LikelihoodBackend>(
    backend: &B,
    layout: &PromptLayout,
    response: &TokenSeq,
    params: &PruneParams,
    use_kv: bool,
    cost: &mut StageCost,
) -> Result<(Selection, Vec<f64>)> {
    let scores = loo_scores(backend, layout, response, use_kv, cost)?;
    let order = rank_desc(&scores);
    let keep = params.kept(scores.len());
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok((Selection { kept, pruned: order[keep..].to_vec() }, scores))
}

/// Strictly decreasing scores, all below `retained_min`.
pub fn sentinel_ladder(retained_min: f64, count: usize) -> Vec<f64> {
    let step = f64::max(1.0, retained_min.abs() * 1e-3);
    (1..=count).map(|j| retained_min - j as f64 * step).collect()
}

/// Full score vector from retained scores and a priority order of pruned sources.
pub(crate) fn assemble(num_sources: usize, retained: &[(usize, f64)], pruned: &[usize]) -> Vec<f64> {
    let mut scores = vec![f64::NAN; num_sources];
    let min = retained.iter().map(|&(_, s)| s).fold(f64::INFINITY, f64::min);
    for &(i, s) in retained {
        scores[i] = s;
    }
    for (&i, s) in pruned.iter().zip(sentinel_ladder(min, pruned.len())) {
        scores[i] = s;
    }
    debug_assert!(scores.iter().all(|s| s.is_finite()));
    scores
}

pub(crate) fn check_tokenizers<T: LikelihoodBackend, P: LikelihoodBackend>(target: &T, proxy: &P) -> Result<()> {
    if target.tokenizer_id() != proxy.tokenizer_id() {
        return Err(Error::TokenizerMismatch {
            target: target.tokenizer_id().into(),
            proxy: proxy.tokenizer_id().into(),
        });
    }
    Ok(())
}

/// Group-level LOO, then source-level LOO inside the retained groups.
pub fn hierarchical<B: LikelihoodBackend>(
    backend: &B,
    layout: &PromptLayout,
    response: &TokenSeq,
    params: &HierParams,
    use_kv: bool,
) -> Result<AttributionScores> {
    params.validate()?;
    let start = Instant::now();
    let use_kv = resolve_kv(backend, use_kv);

    let mut groups_cost = stage_cost("hier-groups", backend);
    let (selection, _) = select_groups(backend, layout, response, params, use_kv, &mut groups_cost)?;

    let shortened = layout.restrict(&selection.kept)?;
    let mut sources_cost = stage_cost("hier-sources", backend);
    let stage2 = loo_scores(backend, &shortened, response, use_kv, &mut sources_cost)?;

    let retained: Vec<(usize, f64)> = selection.kept.iter().copied().zip(stage2).collect();
    let scores = assemble(layout.num_sources(), &retained, &selection.pruned);
    let cost = CostRecord { stages: vec![groups_cost, sources_cost], wall_ns: start.elapsed().as_nanos() as u64 };
    Ok(AttributionScores {
        scores,
        method: "hier".into(),
        params: json!({ "beta": params.beta, "min_keep": params.min_keep, "kv": use_kv }),
        cost,
    })
}

/// LOO under the proxy, scoring the target's response.
pub fn proxy_attribute<T: LikelihoodBackend, P: LikelihoodBackend>(
    target: &T,
    proxy: &P,
    layout: &PromptLayout,
    target_response: &TokenSeq,
    use_kv: bool,
) -> Result<AttributionScores> {
    check_tokenizers(target, proxy)?;
    let start = Instant::now();
    let use_kv = resolve_kv(proxy, use_kv);
    let mut stage = stage_cost("proxy", proxy);
    let scores = loo_scores(proxy, layout, target_response, use_kv, &mut stage)?;
    let mut cost = CostRecord::single(stage);
    cost.wall_ns = start.elapsed().as_nanos() as u64;
    Ok(AttributionScores {
        scores,
        method: "proxy".into(),
        params: json!({ "proxy": proxy.name(), "kv": use_kv }),
        cost,
    })
}

/// Proxy LOO picks the top sources; the target re-scores them on the shortened context.
pub fn proxy_prune<T: LikelihoodBackend, P: LikelihoodBackend>(
    target: &T,
    proxy: &P,
    layout: &PromptLayout,
    response: &TokenSeq,
    params: &PruneParams,
    use_kv: bool,
) -> Result<AttributionScores> {
    params.validate()?;
    check_tokenizers(target, proxy)?;
    let start = Instant::now();

    let mut proxy_cost = stage_cost("prune-proxy", proxy);
    let (selection, _) =
        select_sources(proxy, layout, response, params, resolve_kv(proxy, use_kv), &mut proxy_cost)?;

    let shortened = layout.restrict(&selection.kept)?;
    let mut target_cost = stage_cost("prune-target", target);
    let rescored = loo_scores(target, &shortened, response, resolve_kv(target, use_kv), &mut target_cost)?;

    let retained: Vec<(usize, f64)> = selection.kept.iter().copied().zip(rescored).collect();
    let scores = assemble(layout.num_sources(), &retained, &selection.pruned);
    let cost = CostRecord { stages: vec![proxy_cost, target_cost], wall_ns: start.elapsed().as_nanos() as u64 };
    Ok(AttributionScores {
        scores,
        method: "prune".into(),
        params: json!({ "alpha": params.alpha, "min_keep": params.min_keep, "proxy": proxy.name(), "kv": use_kv }),
        cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::loo_exact;
    use crate::context::{build_prompt, ContextPartition, PromptTemplate};
    use crate::surrogate::SurrogateBackend;
    use crate::tokenizer::tokenize;

    fn grouped(groups: &[usize]) -> PromptLayout {
        let mut n = 0;
        let groups = groups
            .iter()
            .map(|&size| {
                (0..size)
                    .map(|_| {
                        n += 1;
                        format!("s{n}")
                    })
                    .collect()
            })
            .collect();
        build_prompt(&PromptTemplate::qa(), &ContextPartition::new(groups).unwrap(), "q")
    }

    #[test]
    fn keep_counts() {
        assert_eq!(HierParams::new(0.2).kept(10), 2);
        assert_eq!(PruneParams::new(0.3).kept(10), 3);
        assert_eq!(HierParams::new(0.01).kept(10), 1);
        assert_eq!(PruneParams { alpha: 0.1, min_keep: 3 }.kept(10), 3);
        assert_eq!(PruneParams { alpha: 0.1, min_keep: 3 }.kept(2), 2);
        assert!(HierParams::new(0.0).validate().is_err());
        assert!(PruneParams::new(1.5).validate().is_err());
    }

    #[test]
    fn ranking_breaks_ties_toward_earlier() {
        assert_eq!(rank_desc(&[1.0, 3.0, 1.0, 3.0]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn ladder_is_strictly_below() {
        let ladder = sentinel_ladder(-0.5, 3);
        assert!(ladder.windows(2).all(|w| w[0] > w[1]));
        assert!(ladder[0] < -0.5);
        let big = sentinel_ladder(-1e18, 2);
        assert!(big[0] < -1e18 && big[1] < big[0]);
    }

    #[test]
    fn hierarchical_keeps_strong_group() {
        let backend = SurrogateBackend::additive(&[5.0, 0.0, 0.0, 0.0], -1.0).unwrap();
        let layout = grouped(&[2, 2]);
        let r = hierarchical(&backend, &layout, &tokenize("r"), &HierParams::new(0.5), false).unwrap();
        assert_eq!(&r.scores[..2], &[5.0, 0.0]);
        assert!(r.scores[2] < 0.0 && r.scores[3] < 0.0);
        // M group passes + kept source passes, one base per context.
        assert_eq!(r.cost.passes(), 2 + 2);
        assert_eq!(r.cost.base_passes(), 2);
    }

    #[test]
    fn hierarchical_with_all_groups_is_loo() {
        let backend = SurrogateBackend::additive(&[0.5, 1.5, -2.0, 3.0, 0.25], 0.0).unwrap();
        let layout = grouped(&[2, 1, 2]);
        let r = tokenize("r");
        let h = hierarchical(&backend, &layout, &r, &HierParams::new(1.0), true).unwrap();
        assert_eq!(h.scores, loo_exact(&backend, &layout, &r).unwrap().scores);
    }

    #[test]
    fn pruned_groups_ordered_by_group_score() {
        let backend = SurrogateBackend::additive(&[0.0, 1.0, 3.0, 2.0], 0.0).unwrap();
        let layout = grouped(&[1, 1, 1, 1]);
        let h = hierarchical(&backend, &layout, &tokenize("r"), &HierParams::new(0.25), false).unwrap();
        assert_eq!(rank_desc(&h.scores), vec![2, 3, 1, 0]);
    }

    #[test]
    fn prune_keeps_top_sources() {
        let target = SurrogateBackend::additive(&[3.0, 1.0, 0.0, 0.0], 0.0).unwrap();
        let layout = grouped(&[1, 1, 1, 1]);
        let r = proxy_prune(&target, &target, &layout, &tokenize("r"), &PruneParams::new(0.5), true).unwrap();
        assert_eq!(&r.scores[..2], &[3.0, 1.0]);
        assert!(r.scores[2] < 1.0 && r.scores[3] < r.scores[2]);
        assert_eq!(r.cost.passes(), 4 + 2);
    }

    #[test]
    fn tokenizer_mismatch_is_rejected() {
        let target = SurrogateBackend::additive(&[1.0, 2.0], 0.0).unwrap();
        let proxy = target.clone().with_tokenizer("other");
        let layout = grouped(&[1, 1]);
        let r = tokenize("r");
        assert!(matches!(proxy_attribute(&target, &proxy, &layout, &r, true), Err(Error::TokenizerMismatch { .. })));
        assert!(matches!(
            proxy_prune(&target, &proxy, &layout, &r, &PruneParams::new(0.5), true),
            Err(Error::TokenizerMismatch { .. })
        ));
    }

    #[test]
    fn scaled_proxy_scales_scores() {
        let target = SurrogateBackend::from_fn(4, |k| {
            let n = k.iter().filter(|&&x| x).count() as f64;
            -(5.0 - n).powi(2) + if k[1] { 0.7 } else { 0.0 }
        })
        .unwrap();
        let proxy = target.scaled(2.0);
        let layout = grouped(&[1, 1, 1, 1]);
        let r = tokenize("r");
        let t = loo_exact(&target, &layout, &r).unwrap();
        let p = proxy_attribute(&target, &proxy, &layout, &r, true).unwrap();
        for (a, b) in t.scores.iter().zip(&p.scores) {
            assert_eq!(2.0 * a, *b);
        }
        assert_eq!(rank_desc(&t.scores), rank_desc(&p.scores));
    }
}
