use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cost::CostRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlopsMethod {
    Loo,
    Kv,
    Proxy,
    Pruning,
    Hierarchical,
}

impl FlopsMethod {
    pub const ALL: [FlopsMethod; 5] =
        [FlopsMethod::Loo, FlopsMethod::Kv, FlopsMethod::Proxy, FlopsMethod::Pruning, FlopsMethod::Hierarchical];
}

impl fmt::Display for FlopsMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlopsMethod::Loo => "loo",
            FlopsMethod::Kv => "kv",
            FlopsMethod::Proxy => "proxy",
            FlopsMethod::Pruning => "pruning",
            FlopsMethod::Hierarchical => "hierarchical",
        })
    }
}

impl FromStr for FlopsMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "loo" => FlopsMethod::Loo,
            "kv" => FlopsMethod::Kv,
            "proxy" => FlopsMethod::Proxy,
            "prune" | "pruning" => FlopsMethod::Pruning,
            "hier" | "hierarchical" => FlopsMethod::Hierarchical,
            other => return Err(Error::InvalidParameter(format!("unknown method {other:?}"))),
        })
    }
}

/// Cost-model inputs: model sizes, tokens per source, and context shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsParams {
    /// Target parameters.
    pub p: f64,
    /// Proxy parameters.
    pub p_prime: f64,
    /// Tokens per source.
    pub t: f64,
    /// Number of sources.
    pub c: f64,
    /// Sources per group.
    pub h: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl FlopsParams {
    pub fn validate(&self, method: FlopsMethod) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")))
            }
        };
        let fraction = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must lie in (0, 1], got {v}")))
            }
        };
        positive("P", self.p)?;
        positive("T", self.t)?;
        positive("|C|", self.c)?;
        match method {
            FlopsMethod::Proxy => positive("P'", self.p_prime),
            FlopsMethod::Pruning => positive("P'", self.p_prime).and(fraction("alpha", self.alpha)),
            FlopsMethod::Hierarchical => positive("H", self.h).and(fraction("beta", self.beta)),
            FlopsMethod::Loo | FlopsMethod::Kv => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub flops: f64,
    pub speedup: f64,
}

/// Closed-form forward-pass FLOPs of attributing a `|C|`-source context and
/// the speedup over exact leave-one-out.
pub fn theoretical_flops(method: FlopsMethod, params: &FlopsParams) -> Result<FlopsEstimate> {
    params.validate(method)?;
    let FlopsParams { p, p_prime, t, c, h, alpha, beta } = *params;
    let loo = 2.0 * p * t * c * (c - 1.0);
    let (flops, speedup) = match method {
        FlopsMethod::Loo => (loo, 1.0),
        FlopsMethod::Kv => (p * t * c * (c - 1.0), 2.0),
        FlopsMethod::Proxy => (2.0 * p_prime * t * c * (c - 1.0), p / p_prime),
        FlopsMethod::Pruning => {
            let r = p_prime / p;
            (
                2.0 * p * t * c * ((alpha * alpha + r) * c - alpha - r),
                p * (c - 1.0) / ((alpha * alpha * p + p_prime) * c - alpha * p - p_prime),
            )
        }
        FlopsMethod::Hierarchical => (
            2.0 * p * t * c * ((beta * beta + 1.0 / h) * c - beta - 1.0),
            h * (c - 1.0) / ((beta * beta * h + 1.0) * c - beta * h - h),
        ),
    };
    Ok(FlopsEstimate { flops, speedup })
}

/// `Σ 2 · P_stage · uncached tokens` over every pass.
pub fn counted_flops(cost: &CostRecord) -> f64 {
    cost.stages.iter().map(|s| 2.0 * s.param_count as f64 * s.uncached_tokens as f64).sum()
}

/// Counted FLOPs restricted to the context tokens of the ablation passes,
/// the quantity the closed forms model.
pub fn counted_context_flops(cost: &CostRecord) -> f64 {
    cost.stages.iter().map(|s| 2.0 * s.param_count as f64 * s.ablation_context_tokens as f64).sum()
}
