use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::dataset::load_dataset;
use super::results::{meta_path, write_results, RunResult};
use crate::accel::{hierarchical, proxy_attribute, proxy_prune, run_pipeline, HierParams, PipelineSpec, PruneParams};
use crate::attribution::{loo_exact, loo_kv, AttributionScores};
use crate::backend::LikelihoodBackend;
use crate::baselines::{
    attention_attribution, contextcite, embed_sim_attribution, gradnorm_attribution, ContextCiteParams,
    ReferenceEmbedder,
};
use crate::context::{build_prompt, Example, PromptTemplate};
use crate::error::{Error, Result};
use crate::eval::{counted_flops, esd_outliers, theoretical_flops, EsdConfig, FlopsEstimate, FlopsMethod, FlopsParams};
use crate::model::ModelWeights;
use crate::tokenizer::{detokenize, tokenize};

/// Environment variable that sets the number of worker threads.
pub const WORKERS_ENV: &str = "ATTRIBOT_WORKERS";

#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Loo,
    Kv,
    Hier(HierParams),
    Proxy,
    Prune(PruneParams),
    /// A pipeline and the JSON it was read from.
    Pipeline(PipelineSpec, serde_json::Value),
    Attention,
    GradNorm,
    EmbedSim,
    ContextCite(ContextCiteParams),
}

impl Method {
    pub const NAMES: [&'static str; 10] =
        ["loo", "kv", "hier", "proxy", "prune", "pipeline", "attention", "gradnorm", "embedsim", "contextcite"];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Loo => "loo",
            Method::Kv => "kv",
            Method::Hier(_) => "hier",
            Method::Proxy => "proxy",
            Method::Prune(_) => "prune",
            Method::Pipeline(..) => "pipeline",
            Method::Attention => "attention",
            Method::GradNorm => "gradnorm",
            Method::EmbedSim => "embedsim",
            Method::ContextCite(_) => "contextcite",
        }
    }

    pub fn needs_proxy(&self) -> bool {
        match self {
            Method::Proxy | Method::Prune(_) => true,
            Method::Pipeline(spec, _) => spec.needs_proxy(),
            _ => false,
        }
    }

    fn is_exact_loo(&self) -> bool {
        matches!(self, Method::Loo | Method::Kv)
    }

    fn flops_method(&self) -> Option<FlopsMethod> {
        Some(match self {
            Method::Loo => FlopsMethod::Loo,
            Method::Kv => FlopsMethod::Kv,
            Method::Hier(_) => FlopsMethod::Hierarchical,
            Method::Proxy => FlopsMethod::Proxy,
            Method::Prune(_) => FlopsMethod::Pruning,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct AttributeConfig {
    pub method: Method,
    pub out: PathBuf,
    pub template: PromptTemplate,
    pub seed: u64,
    pub max_new: usize,
    pub keep_going: bool,
    /// Worker threads; `None` reads [`WORKERS_ENV`] and falls back to all cores.
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Failure {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
struct ExampleTiming {
    id: String,
    wall_ns: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub examples: usize,
    pub written: usize,
    pub failures: Vec<Failure>,
    pub warnings: Vec<String>,
    pub workers: usize,
    pub wall_ns: u64,
}

#[derive(Serialize)]
struct Meta<'a> {
    #[serde(flatten)]
    summary: &'a RunSummary,
    timings: Vec<ExampleTiming>,
}

pub fn worker_count(requested: Option<usize>) -> Result<usize> {
    if let Some(n) = requested {
        return Ok(n.max(1));
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(|n| n.max(1))
            .map_err(|_| Error::InvalidParameter(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

fn flops_params(example: &Example, layout_tokens: usize, target: &ModelWeights, proxy: Option<&ModelWeights>, method: &Method) -> FlopsParams {
    let c = example.partition.num_sources() as f64;
    FlopsParams {
        p: target.param_count() as f64,
        p_prime: proxy.map_or(0.0, |p| p.param_count() as f64),
        t: layout_tokens as f64 / c,
        c,
        h: c / example.partition.num_groups() as f64,
        alpha: if let Method::Prune(p) = method { p.alpha } else { 1.0 },
        beta: if let Method::Hier(h) = method { h.beta } else { 1.0 },
    }
}

/// Attributes one example: builds the prompt, fixes the response, and scores the sources.
pub fn attribute_example(
    example: &Example,
    method: &Method,
    target: &ModelWeights,
    proxy: Option<&ModelWeights>,
    template: &PromptTemplate,
    seed: u64,
    max_new: usize,
) -> Result<RunResult> {
    let layout = build_prompt(template, &example.partition, &example.query);
    let (response, decoding) = match &example.response {
        Some(text) => (tokenize(text), "given"),
        None => (target.generate(layout.tokens(), max_new)?, "greedy"),
    };
    if response.is_empty() {
        return Err(Error::EmptyResponse);
    }
    let proxy_needed = || proxy.ok_or_else(|| Error::InvalidParameter(format!("method {} needs a proxy model", method.name())));

    let scores: AttributionScores = match method {
        Method::Loo => loo_exact(target, &layout, &response)?,
        Method::Kv => loo_kv(target, &layout, &response)?,
        Method::Hier(params) => hierarchical(target, &layout, &response, params, false)?,
        Method::Proxy => proxy_attribute(target, proxy_needed()?, &layout, &response, false)?,
        Method::Prune(params) => proxy_prune(target, proxy_needed()?, &layout, &response, params, false)?,
        Method::Pipeline(spec, raw) => {
            let mut s = run_pipeline(spec, target, proxy, &layout, &response)?;
            s.params = raw.clone();
            s
        }
        Method::Attention => attention_attribution(target, &layout, &response)?,
        Method::GradNorm => gradnorm_attribution(target, &layout, &response)?,
        Method::EmbedSim => embed_sim_attribution(&ReferenceEmbedder(target), &layout, &detokenize(&response)),
        Method::ContextCite(params) => contextcite(target, &layout, &response, &ContextCiteParams { seed, ..*params })?.0,
    };

    let outliers = if method.is_exact_loo() {
        Some(esd_outliers(&scores.scores, &EsdConfig::default())?.outliers)
    } else {
        None
    };
    let theoretical: Option<FlopsEstimate> = method.flops_method().and_then(|m| {
        let params = flops_params(example, layout.context_token_count(), target, proxy, method);
        theoretical_flops(m, &params).ok()
    });
    let method_name = match method {
        Method::Pipeline(spec, _) => format!("pipeline:{}", spec.label()),
        other => other.name().to_owned(),
    };
    Ok(RunResult {
        id: example.id.clone(),
        method: method_name,
        params: scores.params,
        counted_flops: counted_flops(&scores.cost),
        scores: scores.scores,
        response: detokenize(&response),
        response_tokens: response.0,
        decoding: decoding.into(),
        outliers,
        cost: scores.cost,
        theoretical_flops: theoretical,
        seed,
        target_model: target.name(),
        proxy_model: proxy.filter(|_| method.needs_proxy()).map(|p| p.name()),
    })
}

/// Attributes every example of `dataset` and writes the result stream plus a
/// `<out>.meta.json` sidecar with timings and failures.
pub fn run_attribute(
    dataset: impl AsRef<std::path::Path>,
    config: &AttributeConfig,
    target: &ModelWeights,
    proxy: Option<&ModelWeights>,
) -> Result<RunSummary> {
    if config.method.needs_proxy() && proxy.is_none() {
        return Err(Error::InvalidParameter(format!("method {} needs a proxy model", config.method.name())));
    }
    let start = Instant::now();
    let data = load_dataset(dataset)?;
    let workers = worker_count(config.workers)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;

    let outcomes: Vec<(Result<RunResult>, u64)> = pool.install(|| {
        data.examples
            .par_iter()
            .enumerate()
            .map(|(i, example)| {
                let t = Instant::now();
                let seed = config.seed.wrapping_add(i as u64);
                let r = attribute_example(example, &config.method, target, proxy, &config.template, seed, config.max_new);
                (r, t.elapsed().as_nanos() as u64)
            })
            .collect()
    });

    let mut results = Vec::new();
    let mut failures = Vec::new();
    let mut timings = Vec::new();
    for (example, (outcome, wall_ns)) in data.examples.iter().zip(outcomes) {
        timings.push(ExampleTiming { id: example.id.clone(), wall_ns });
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => {
                log::error!("example {}: {e}", example.id);
                failures.push(Failure { id: example.id.clone(), error: e.to_string() });
            }
        }
    }
    if let (false, Some(first)) = (config.keep_going, failures.first()) {
        return Err(Error::Evaluation(format!(
            "{} of {} examples failed; first ({}): {}",
            failures.len(),
            data.examples.len(),
            first.id,
            first.error
        )));
    }

    write_results(&config.out, &results)?;
    let summary = RunSummary {
        examples: data.examples.len(),
        written: results.len(),
        failures,
        warnings: data.warnings,
        workers,
        wall_ns: start.elapsed().as_nanos() as u64,
    };
    let meta = serde_json::to_string_pretty(&Meta { summary: &summary, timings })?;
    std::fs::write(meta_path(&config.out), meta)?;
    Ok(summary)
}
