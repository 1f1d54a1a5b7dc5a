use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::lasso::{default_lambda, lasso_fit, SurrogateFit};
use crate::attribution::{stage_cost, AttributionScores};
use crate::backend::{Likelihood, LikelihoodBackend};
use crate::context::PromptLayout;
use crate::cost::CostRecord;
use crate::error::{Error, Result};
use crate::tokenizer::TokenSeq;

const MAX_MASK_ATTEMPTS: usize = 10;
const LOG_LIKELIHOOD_FLOOR: f64 = -30.0;
const LOG_LIKELIHOOD_CEIL: f64 = -1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetScale {
    /// `logit(p(R))` of the whole response.
    Logit,
    /// `log p(R)`.
    Log,
}

impl TargetScale {
    pub fn apply(self, log_likelihood: f64) -> f64 {
        match self {
            TargetScale::Log => log_likelihood,
            TargetScale::Logit => {
                let l = log_likelihood.clamp(LOG_LIKELIHOOD_FLOOR, LOG_LIKELIHOOD_CEIL);
                l - (-l.exp_m1()).ln()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextCiteParams {
    /// Number of ablation masks.
    pub n: usize,
    /// Probability of keeping each source.
    pub p: f64,
    /// Lasso penalty; `None` picks a data-dependent default.
    pub lambda: Option<f64>,
    pub scale: TargetScale,
    pub seed: u64,
}

impl Default for ContextCiteParams {
    fn default() -> Self {
        Self { n: 256, p: 0.5, lambda: None, scale: TargetScale::Logit, seed: 0 }
    }
}

impl ContextCiteParams {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidParameter(format!("need at least 2 masks, got {}", self.n)));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::InvalidParameter(format!("keep probability must lie in (0, 1), got {}", self.p)));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::InvalidParameter(format!("lambda must be non-negative, got {l}")));
            }
        }
        Ok(())
    }
}

/// `n` keep-masks over `d` sources, resampled while every mask is identical.
pub fn sample_masks(d: usize, params: &ContextCiteParams) -> Result<Vec<Vec<bool>>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    for _ in 0..MAX_MASK_ATTEMPTS {
        let masks: Vec<Vec<bool>> =
            (0..params.n).map(|_| (0..d).map(|_| rng.random_bool(params.p)).collect()).collect();
        if masks.iter().any(|m| m != &masks[0]) {
            return Ok(masks);
        }
    }
    Err(Error::DegenerateDesign(format!(
        "all {} masks were identical in {MAX_MASK_ATTEMPTS} attempts; use more masks",
        params.n
    )))
}

/// Fits a sparse linear surrogate from random source ablations; the weights are the scores.
pub fn contextcite<B: LikelihoodBackend>(
    backend: &B,
    layout: &PromptLayout,
    response: &TokenSeq,
    params: &ContextCiteParams,
) -> Result<(AttributionScores, SurrogateFit)> {
    let start = Instant::now();
    let d = layout.num_sources();
    if d == 0 {
        return Err(Error::EmptyContext);
    }
    let masks = sample_masks(d, params)?;
    let results: Vec<Likelihood> = masks
        .par_iter()
        .map(|mask| {
            let removed: Vec<usize> = (0..d).filter(|&i| !mask[i]).collect();
            backend.ablated_likelihood(layout, &removed, response)
        })
        .collect::<Result<_>>()?;

    let mut stage = stage_cost("contextcite", backend);
    for r in &results {
        stage.record_pass(r.tokens);
    }
    let x = Array2::from_shape_fn((params.n, d), |(i, j)| if masks[i][j] { 1.0 } else { 0.0 });
    let y = Array1::from_iter(results.iter().map(|r| params.scale.apply(r.log_likelihood)));
    let lambda = params.lambda.unwrap_or_else(|| default_lambda(x.view(), y.view()));
    let fit = lasso_fit(x.view(), y.view(), lambda)?;

    let mut cost = CostRecord::single(stage);
    cost.wall_ns = start.elapsed().as_nanos() as u64;
    let scores = AttributionScores {
        scores: fit.weights.clone(),
        method: "contextcite".into(),
        params: json!({
            "n": params.n,
            "p": params.p,
            "lambda": lambda,
            "scale": params.scale,
            "seed": params.seed,
        }),
        cost,
    };
    Ok((scores, fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::{build_prompt, ContextPartition, PromptTemplate};
    use crate::surrogate::SurrogateBackend;
    use crate::tokenizer::tokenize;

    fn layout(n: usize) -> PromptLayout {
        let sources = (0..n).map(|i| format!("s{i}")).collect();
        build_prompt(&PromptTemplate::qa(), &ContextPartition::flat(sources).unwrap(), "q")
    }

    fn log_params(seed: u64) -> ContextCiteParams {
        ContextCiteParams { n: 256, p: 0.5, lambda: Some(1e-6), scale: TargetScale::Log, seed }
    }

    #[test]
    fn logit_scale() {
        // logit(1/2) = 0
        assert!(TargetScale::Logit.apply(0.5f64.ln()).abs() < 1e-15);
        assert!(TargetScale::Logit.apply(0.0).is_finite());
        assert!(TargetScale::Logit.apply(-1e6).is_finite());
        let p: f64 = 0.2;
        assert!((TargetScale::Logit.apply(p.ln()) - (p / (1.0 - p)).ln()).abs() < 1e-12);
    }

    #[test]
    fn recovers_additive_weights() {
        let backend = SurrogateBackend::additive(&[2.0, 0.0, 1.0], -4.0).unwrap();
        let (scores, fit) = contextcite(&backend, &layout(3), &tokenize("r"), &log_params(3)).unwrap();
        for (w, t) in scores.scores.iter().zip([2.0, 0.0, 1.0]) {
            assert!((w - t).abs() < 0.05, "{:?}", scores.scores);
        }
        assert!((fit.intercept + 4.0).abs() < 0.05);
        assert_eq!(scores.cost.passes(), 256);
        assert_eq!(scores.cost.base_passes(), 0);
    }

    #[test]
    fn constant_value_gives_zero_weights() {
        let backend = SurrogateBackend::from_fn(4, |_| -2.0).unwrap();
        let (scores, _) = contextcite(&backend, &layout(4), &tokenize("r"), &log_params(1)).unwrap();
        assert!(scores.scores.iter().all(|w| w.abs() <= 1e-6));
    }

    #[test]
    fn deterministic_per_seed() {
        let backend = SurrogateBackend::from_fn(5, |k| -(k.iter().filter(|&&x| x).count() as f64 - 2.0).powi(2) - 1.0)
            .unwrap();
        let params = ContextCiteParams { n: 64, seed: 9, ..Default::default() };
        let a = contextcite(&backend, &layout(5), &tokenize("r"), &params).unwrap();
        let b = contextcite(&backend, &layout(5), &tokenize("r"), &params).unwrap();
        assert_eq!(a.0.scores, b.0.scores);
        let c = contextcite(&backend, &layout(5), &tokenize("r"), &ContextCiteParams { seed: 10, ..params }).unwrap();
        assert_ne!(a.0.scores, c.0.scores);
    }

    #[test]
    fn degenerate_design_is_reported() {
        // One source with p close to 1 and two masks: identical masks are near certain.
        let params = ContextCiteParams { n: 2, p: 1.0 - 1e-12, ..Default::default() };
        assert!(matches!(sample_masks(1, &params), Err(Error::DegenerateDesign(_))));
        assert!(ContextCiteParams { n: 1, ..Default::default() }.validate().is_err());
        assert!(ContextCiteParams { p: 1.0, ..Default::default() }.validate().is_err());
    }
}
