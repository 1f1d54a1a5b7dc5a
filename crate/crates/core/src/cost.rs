//! Forward-pass and token accounting.

use serde::{Deserialize, Serialize};

/// Tokens processed by one likelihood evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassTokens {
    /// Tokens run through the model.
    pub uncached: u64,
    /// Tokens whose keys and values came from a cache.
    pub cached: u64,
    /// Uncached tokens that belong to context sources.
    pub uncached_context: u64,
}

/// Counters for one stage, executed by one model.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCost {
    pub stage: String,
    pub model: String,
    pub param_count: u64,
    /// Ablated-context likelihood evaluations.
    pub passes: u64,
    /// Full-context likelihood evaluations (one per distinct context).
    pub base_passes: u64,
    /// All uncached tokens, base passes included.
    pub uncached_tokens: u64,
    pub cached_tokens: u64,
    /// Uncached context-source tokens of the ablation passes only.
    pub ablation_context_tokens: u64,
}

impl StageCost {
    pub fn new(stage: impl Into<String>, model: impl Into<String>, param_count: u64) -> Self {
        Self { stage: stage.into(), model: model.into(), param_count, ..Default::default() }
    }

    pub fn record_base(&mut self, tokens: PassTokens) {
        self.base_passes += 1;
        self.uncached_tokens += tokens.uncached;
        self.cached_tokens += tokens.cached;
    }

    pub fn record_pass(&mut self, tokens: PassTokens) {
        self.passes += 1;
        self.uncached_tokens += tokens.uncached;
        self.cached_tokens += tokens.cached;
        self.ablation_context_tokens += tokens.uncached_context;
    }

    pub fn total_tokens(&self) -> u64 {
        self.uncached_tokens + self.cached_tokens
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRecord {
    pub stages: Vec<StageCost>,
    /// Wall-clock nanoseconds. Not serialized so result streams stay reproducible.
    #[serde(skip)]
    pub wall_ns: u64,
}

impl CostRecord {
    pub fn single(stage: StageCost) -> Self {
        Self { stages: vec![stage], wall_ns: 0 }
    }

    pub fn merge(&mut self, other: CostRecord) {
        self.stages.extend(other.stages);
        self.wall_ns += other.wall_ns;
    }

    pub fn passes(&self) -> u64 {
        self.stages.iter().map(|s| s.passes).sum()
    }

    pub fn base_passes(&self) -> u64 {
        self.stages.iter().map(|s| s.base_passes).sum()
    }

    /// Every likelihood evaluation, base passes included.
    pub fn evaluations(&self) -> u64 {
        self.passes() + self.base_passes()
    }

    pub fn uncached_tokens(&self) -> u64 {
        self.stages.iter().map(|s| s.uncached_tokens).sum()
    }

    pub fn cached_tokens(&self) -> u64 {
        self.stages.iter().map(|s| s.cached_tokens).sum()
    }

    pub fn ablation_context_tokens(&self) -> u64 {
        self.stages.iter().map(|s| s.ablation_context_tokens).sum()
    }
}
