//! Fixtures shared by the benchmarks.

use attribot_core::{build_prompt, tokenize, ContextPartition, ModelConfig, ModelWeights, PromptLayout, PromptTemplate, TokenSeq};

/// A reference model of the given depth and width, sized for `max_seq` tokens.
pub fn model(layers: usize, heads: usize, d_model: usize, max_seq: usize) -> ModelWeights {
    let config = ModelConfig { layers, heads, d_model, d_ff: 4 * d_model, vocab: 258, max_seq };
    ModelWeights::init(config, 7).expect("valid config")
}

/// `groups` groups of `per_group` short sentences each.
pub fn layout(groups: usize, per_group: usize) -> PromptLayout {
    let groups = (0..groups)
        .map(|g| (0..per_group).map(|s| format!("fact {g}.{s} holds")).collect())
        .collect();
    let partition = ContextPartition::new(groups).expect("non-empty context");
    build_prompt(&PromptTemplate::qa(), &partition, "which fact holds?")
}

pub fn response() -> TokenSeq {
    tokenize("fact 1.0")
}
