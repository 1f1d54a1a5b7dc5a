//! Leave-one-out context attribution for language models, with KV-cache
//! reuse, hierarchical attribution, proxy models, and proxy pruning.

pub mod accel;
pub mod attribution;
pub mod backend;
pub mod baselines;
pub mod context;
pub mod cost;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod surrogate;
pub mod tokenizer;

pub use accel::{hierarchical, proxy_attribute, proxy_prune, run_pipeline, HierParams, PipelineSpec, PruneParams, Stage};
pub use attribution::{leave_group_out, loo_exact, loo_kv, AttributionScores, GroupScores};
pub use backend::{BackendCapabilities, Likelihood, LikelihoodBackend};
pub use context::{build_prompt, ContextPartition, Example, PromptLayout, PromptTemplate};
pub use cost::{CostRecord, PassTokens, StageCost};
pub use error::{Error, Result};
pub use model::{ModelConfig, ModelWeights};
pub use surrogate::SurrogateBackend;
pub use tokenizer::{tokenize, TokenId, TokenSeq};
