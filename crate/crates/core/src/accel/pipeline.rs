use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{assemble, check_tokenizers, select_groups, select_sources, HierParams, PruneParams};
use crate::attribution::{loo_scores, resolve_kv, stage_cost, AttributionScores};
use crate::backend::LikelihoodBackend;
use crate::context::PromptLayout;
use crate::cost::CostRecord;
use crate::error::{Error, Result};
use crate::tokenizer::TokenSeq;

fn default_min_keep() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "lowercase")]
pub enum Stage {
    Kv,
    Proxy,
    Prune {
        alpha: f64,
        #[serde(default = "default_min_keep")]
        min_keep: usize,
    },
    #[serde(alias = "hier")]
    Hierarchical {
        beta: f64,
        #[serde(default = "default_min_keep")]
        min_keep: usize,
    },
}

impl Stage {
    fn name(&self) -> &'static str {
        match self {
            Stage::Kv => "kv",
            Stage::Proxy => "proxy",
            Stage::Prune { .. } => "prune",
            Stage::Hierarchical { .. } => "hier",
        }
    }
}

/// A set of composable acceleration stages. Stage order in the list is kept
/// for reporting; execution always follows the canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub stages: Vec<Stage>,
}

impl PipelineSpec {
    pub fn new(stages: Vec<Stage>) -> Result<Self> {
        let spec = Self { stages };
        spec.validate()?;
        Ok(spec)
    }

    /// Parses `kv,proxy,hier` style lists; `alpha` and `beta` fill in the
    /// parameters of prune and hierarchical stages.
    pub fn parse_list(list: &str, alpha: Option<f64>, beta: Option<f64>, min_keep: usize) -> Result<Self> {
        let mut stages = Vec::new();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            stages.push(match name {
                "kv" => Stage::Kv,
                "proxy" => Stage::Proxy,
                "prune" => Stage::Prune {
                    alpha: alpha.ok_or_else(|| Error::InvalidPipeline("prune stage needs alpha".into()))?,
                    min_keep,
                },
                "hier" | "hierarchical" => Stage::Hierarchical {
                    beta: beta.ok_or_else(|| Error::InvalidPipeline("hierarchical stage needs beta".into()))?,
                    min_keep,
                },
                other => return Err(Error::InvalidPipeline(format!("unknown stage {other:?}"))),
            });
        }
        Self::new(stages)
    }

    pub fn validate(&self) -> Result<()> {
        let count = |name: &str| self.stages.iter().filter(|s| s.name() == name).count();
        for name in ["kv", "proxy", "prune", "hier"] {
            if count(name) > 1 {
                return Err(Error::InvalidPipeline(format!("stage {name} appears more than once")));
            }
        }
        if self.uses_proxy() && self.prune().is_some() {
            return Err(Error::InvalidPipeline(
                "proxy and prune cannot be combined: prune already re-scores with the target".into(),
            ));
        }
        if let Some(p) = self.prune() {
            p.validate().map_err(|e| Error::InvalidPipeline(e.to_string()))?;
        }
        if let Some(h) = self.hierarchical() {
            h.validate().map_err(|e| Error::InvalidPipeline(e.to_string()))?;
        }
        Ok(())
    }

    pub fn uses_kv(&self) -> bool {
        self.stages.contains(&Stage::Kv)
    }

    pub fn uses_proxy(&self) -> bool {
        self.stages.contains(&Stage::Proxy)
    }

    /// Whether a proxy model must be supplied.
    pub fn needs_proxy(&self) -> bool {
        self.uses_proxy() || self.prune().is_some()
    }

    pub fn prune(&self) -> Option<PruneParams> {
        self.stages.iter().find_map(|s| match *s {
            Stage::Prune { alpha, min_keep } => Some(PruneParams { alpha, min_keep }),
            _ => None,
        })
    }

    pub fn hierarchical(&self) -> Option<HierParams> {
        self.stages.iter().find_map(|s| match *s {
            Stage::Hierarchical { beta, min_keep } => Some(HierParams { beta, min_keep }),
            _ => None,
        })
    }

    /// `kv+proxy+hier` style label; `loo` when empty.
    pub fn label(&self) -> String {
        if self.stages.is_empty() {
            return "loo".into();
        }
        self.stages.iter().map(Stage::name).collect::<Vec<_>>().join("+")
    }
}

/// Runs the stages of `spec`: hierarchical selection, then proxy pruning, then
/// LOO on what is left. Selection runs on the proxy whenever one is used; the
/// final scoring runs on the proxy only for the `proxy` stage.
pub fn run_pipeline<T: LikelihoodBackend, P: LikelihoodBackend>(
    spec: &PipelineSpec,
    target: &T,
    proxy: Option<&P>,
    layout: &PromptLayout,
    response: &TokenSeq,
) -> Result<AttributionScores> {
    spec.validate()?;
    let proxy = match (spec.needs_proxy(), proxy) {
        (true, None) => return Err(Error::InvalidPipeline("pipeline needs a proxy model".into())),
        (true, Some(p)) => {
            check_tokenizers(target, p)?;
            Some(p)
        }
        (false, _) => None,
    };
    let start = Instant::now();
    let kv = spec.uses_kv();
    let mut stages = Vec::new();

    // Indices into `layout` of the sources still in play, and the pruned ones
    // per stage in priority order (mapped back to `layout`).
    let mut current: Vec<usize> = (0..layout.num_sources()).collect();
    let mut pruned_by_stage: Vec<Vec<usize>> = Vec::new();
    let mut working = layout.clone();

    if let Some(params) = spec.hierarchical() {
        let (selection, mut cost) = match proxy {
            Some(p) => {
                let mut c = stage_cost("hier-groups", p);
                (select_groups(p, &working, response, &params, resolve_kv(p, kv), &mut c)?.0, c)
            }
            None => {
                let mut c = stage_cost("hier-groups", target);
                (select_groups(target, &working, response, &params, resolve_kv(target, kv), &mut c)?.0, c)
            }
        };
        cost.stage = "hier-groups".into();
        stages.push(cost);
        pruned_by_stage.push(selection.pruned.iter().map(|&i| current[i]).collect());
        working = working.restrict(&selection.kept)?;
        current = selection.kept.iter().map(|&i| current[i]).collect();
    }

    if let (Some(params), Some(p)) = (spec.prune(), proxy) {
        let mut cost = stage_cost("prune-proxy", p);
        let (selection, _) = select_sources(p, &working, response, &params, resolve_kv(p, kv), &mut cost)?;
        stages.push(cost);
        pruned_by_stage.push(selection.pruned.iter().map(|&i| current[i]).collect());
        working = working.restrict(&selection.kept)?;
        current = selection.kept.iter().map(|&i| current[i]).collect();
    }

    let final_scores = match proxy {
        Some(p) if spec.uses_proxy() => {
            let mut cost = stage_cost("proxy-sources", p);
            let s = loo_scores(p, &working, response, resolve_kv(p, kv), &mut cost)?;
            stages.push(cost);
            s
        }
        _ => {
            let mut cost = stage_cost("target-sources", target);
            let s = loo_scores(target, &working, response, resolve_kv(target, kv), &mut cost)?;
            stages.push(cost);
            s
        }
    };

    let retained: Vec<(usize, f64)> = current.iter().copied().zip(final_scores).collect();
    let pruned: Vec<usize> = pruned_by_stage.into_iter().rev().flatten().collect();
    let scores = assemble(layout.num_sources(), &retained, &pruned);
    Ok(AttributionScores {
        scores,
        method: spec.label(),
        params: serde_json::to_value(spec)?,
        cost: CostRecord { stages, wall_ns: start.elapsed().as_nanos() as u64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accel::{hierarchical, proxy_attribute, proxy_prune};
    use crate::attribution::{loo_exact, loo_kv};
    use crate::context::{build_prompt, ContextPartition, PromptTemplate};
    use crate::surrogate::SurrogateBackend;
    use crate::tokenizer::tokenize;

    fn layout(groups: &[usize]) -> PromptLayout {
        let mut n = 0;
        let groups = groups
            .iter()
            .map(|&size| {
                (0..size)
                    .map(|_| {
                        n += 1;
                        format!("source {n}")
                    })
                    .collect()
            })
            .collect();
        build_prompt(&PromptTemplate::qa(), &ContextPartition::new(groups).unwrap(), "q")
    }

    fn backends() -> (SurrogateBackend, SurrogateBackend) {
        let weights = [0.3, -1.0, 2.5, 0.0, 1.25, 0.75];
        let target = SurrogateBackend::from_fn(6, |k| {
            let sum: f64 = weights.iter().zip(k).filter(|(_, &x)| x).map(|(w, _)| w).sum();
            sum + if k[0] && k[4] { 0.5 } else { 0.0 }
        })
        .unwrap()
        .with_name("target")
        .with_param_count(100);
        let proxy = SurrogateBackend::additive(&[0.1, 0.2, 3.0, -0.5, 1.0, 0.9], 0.0)
            .unwrap()
            .with_name("proxy")
            .with_param_count(10);
        (target, proxy)
    }

    #[test]
    fn json_shape() {
        let spec: PipelineSpec = serde_json::from_str(
            r#"{"stages":[{"stage":"kv"},{"stage":"proxy"},{"stage":"hier","beta":0.5}]}"#,
        )
        .unwrap();
        assert_eq!(spec.stages[2], Stage::Hierarchical { beta: 0.5, min_keep: 1 });
        assert_eq!(spec.label(), "kv+proxy+hier");
        let back: PipelineSpec = serde_json::from_value(serde_json::to_value(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn invalid_specs() {
        assert!(PipelineSpec::new(vec![Stage::Kv, Stage::Kv]).is_err());
        assert!(PipelineSpec::new(vec![Stage::Proxy, Stage::Prune { alpha: 0.5, min_keep: 1 }]).is_err());
        assert!(PipelineSpec::new(vec![Stage::Hierarchical { beta: 0.0, min_keep: 1 }]).is_err());
        assert!(PipelineSpec::parse_list("kv,prune", None, None, 1).is_err());
        assert!(PipelineSpec::parse_list("kv,warp", None, None, 1).is_err());
        let (target, _) = backends();
        let spec = PipelineSpec::parse_list("proxy", None, None, 1).unwrap();
        let r = run_pipeline::<_, SurrogateBackend>(&spec, &target, None, &layout(&[2, 2, 2]), &tokenize("r"));
        assert!(matches!(r, Err(Error::InvalidPipeline(_))));
    }

    #[test]
    fn kv_only_is_loo_kv() {
        let (target, proxy) = backends();
        let l = layout(&[2, 2, 2]);
        let r = tokenize("r");
        let spec = PipelineSpec::parse_list("kv", None, None, 1).unwrap();
        let p = run_pipeline(&spec, &target, Some(&proxy), &l, &r).unwrap();
        let direct = loo_kv(&target, &l, &r).unwrap();
        assert_eq!(p.scores, direct.scores);
        assert_eq!(p.cost.evaluations(), direct.cost.evaluations());
        assert_eq!(p.cost.cached_tokens(), direct.cost.cached_tokens());
        let empty = run_pipeline::<_, SurrogateBackend>(&PipelineSpec::new(vec![]).unwrap(), &target, None, &l, &r);
        assert_eq!(empty.unwrap().scores, loo_exact(&target, &l, &r).unwrap().scores);
    }

    #[test]
    fn proxy_hierarchical_matches_direct_composition() {
        let (target, proxy) = backends();
        let l = layout(&[2, 2, 2]);
        let r = tokenize("r");
        let spec = PipelineSpec::parse_list("kv,proxy,hier", None, Some(0.5), 1).unwrap();
        let p = run_pipeline(&spec, &target, Some(&proxy), &l, &r).unwrap();
        let direct = hierarchical(&proxy, &l, &r, &HierParams::new(0.5), true).unwrap();
        assert_eq!(p.scores, direct.scores);
        assert_eq!(p.cost.passes(), direct.cost.passes());
        assert!(p.cost.stages.iter().all(|s| s.model == "proxy"));
    }

    #[test]
    fn prune_matches_direct_call() {
        let (target, proxy) = backends();
        let l = layout(&[1, 1, 1, 1, 1, 1]);
        let r = tokenize("r");
        let spec = PipelineSpec::parse_list("kv,prune", Some(0.5), None, 1).unwrap();
        let p = run_pipeline(&spec, &target, Some(&proxy), &l, &r).unwrap();
        let direct = proxy_prune(&target, &proxy, &l, &r, &PruneParams::new(0.5), true).unwrap();
        assert_eq!(p.scores, direct.scores);
        assert_eq!(p.cost.stages, direct.cost.stages.iter().cloned().map(|mut s| {
            s.stage = if s.model == "proxy" { "prune-proxy".into() } else { "target-sources".into() };
            s
        }).collect::<Vec<_>>());
    }

    #[test]
    fn proxy_only_matches_proxy_attribute() {
        let (target, proxy) = backends();
        let l = layout(&[3, 3]);
        let r = tokenize("r");
        let spec = PipelineSpec::parse_list("kv,proxy", None, None, 1).unwrap();
        let p = run_pipeline(&spec, &target, Some(&proxy), &l, &r).unwrap();
        assert_eq!(p.scores, proxy_attribute(&target, &proxy, &l, &r, true).unwrap().scores);
    }

    #[test]
    fn hier_then_prune_orders_pruned_sources() {
        let (target, proxy) = backends();
        let l = layout(&[2, 2, 2]);
        let r = tokenize("r");
        let spec = PipelineSpec::parse_list("kv,hier,prune", Some(0.5), Some(0.6), 1).unwrap();
        let p = run_pipeline(&spec, &target, Some(&proxy), &l, &r).unwrap();
        // Proxy groups: {0,1}=0.3, {2,3}=2.5, {4,5}=1.9 -> keep groups 2 and 3.
        // Proxy LOO on those: [3.0, -0.5, 1.0, 0.9] -> keep sources 2 and 4.
        assert!(p.scores[2] > p.scores[5] && p.scores[4] > p.scores[5]);
        // Prune-stage leftovers (5, then 3) precede the hierarchical leftovers (0, 1).
        let order = super::super::rank_desc(&p.scores);
        assert_eq!(&order[2..], &[5, 3, 0, 1]);
        assert_eq!(p.cost.stages.len(), 3);
        assert_eq!(p.cost.stages[2].model, "target");
    }
}
