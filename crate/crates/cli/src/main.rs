use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use attribot_core::baselines::ContextCiteParams;
use attribot_core::eval::{theoretical_flops, EsdConfig, FlopsMethod, FlopsParams};
use attribot_core::io::{evaluate, read_results, run_attribute, AttributeConfig, Method};
use attribot_core::model::{read_model, write_model};
use attribot_core::{HierParams, ModelConfig, ModelWeights, PipelineSpec, PromptTemplate, PruneParams};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "attribot", version, about = "Leave-one-out context attribution for language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a randomly initialized reference model.
    GenModel(GenModel),
    /// Score every context source of every dataset example.
    Attribute(Attribute),
    /// Compare candidate scores against exact leave-one-out scores.
    Evaluate(Evaluate),
    /// Closed-form FLOPs and speedup of an attribution method.
    Flops(Flops),
}

#[derive(Args)]
struct GenModel {
    #[arg(long)]
    layers: usize,
    #[arg(long)]
    heads: usize,
    #[arg(long)]
    dmodel: usize,
    #[arg(long)]
    dff: usize,
    #[arg(long, default_value_t = 258)]
    vocab: usize,
    #[arg(long, default_value_t = 1024)]
    max_seq: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Attribute {
    #[arg(long)]
    model: PathBuf,
    /// loo, kv, hier, proxy, prune, pipeline, attention, gradnorm, embedsim, or contextcite.
    #[arg(long)]
    method: String,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    proxy_model: Option<PathBuf>,
    /// Fraction of sources kept by pruning.
    #[arg(long)]
    alpha: Option<f64>,
    /// Fraction of groups kept by hierarchical attribution.
    #[arg(long)]
    beta: Option<f64>,
    /// Minimum number of groups or sources kept by pruning stages.
    #[arg(long, default_value_t = 3)]
    min_keep: usize,
    /// Pipeline as a JSON file, inline JSON, or a list such as `kv,proxy,hier`.
    #[arg(long)]
    pipeline: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tokens to generate when an example has no response.
    #[arg(long, default_value_t = 16)]
    max_new: usize,
    /// Prompt template file with `{context}` and `{question}` placeholders.
    #[arg(long)]
    template: Option<PathBuf>,
    /// Number of ablation masks for contextcite.
    #[arg(long, default_value_t = 256)]
    masks: usize,
    /// Write successful examples and exit zero even if some fail.
    #[arg(long)]
    keep_going: bool,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Significance of the outlier test defining relevant sources.
    #[arg(long, default_value_t = 0.05)]
    significance: f64,
    #[arg(long, default_value_t = 50)]
    k_max: usize,
}

#[derive(Args)]
struct Flops {
    #[arg(long)]
    method: String,
    /// Target model parameters.
    #[arg(long = "P")]
    p: f64,
    /// Proxy model parameters.
    #[arg(long = "Pprime", default_value_t = 1.0)]
    p_prime: f64,
    /// Tokens per source.
    #[arg(long = "T")]
    t: f64,
    /// Number of sources.
    #[arg(long = "C")]
    c: f64,
    /// Sources per group.
    #[arg(long = "H", default_value_t = 1.0)]
    h: f64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
}

fn load_model(path: &Path) -> Result<ModelWeights> {
    let file = File::open(path).with_context(|| format!("opening model {}", path.display()))?;
    read_model(BufReader::new(file)).with_context(|| format!("reading model {}", path.display()))
}

fn parse_pipeline(arg: &str, alpha: Option<f64>, beta: Option<f64>, min_keep: usize) -> Result<(PipelineSpec, serde_json::Value)> {
    let text = if Path::new(arg).is_file() {
        std::fs::read_to_string(arg).with_context(|| format!("reading pipeline {arg}"))?
    } else {
        arg.to_owned()
    };
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') || trimmed.starts_with('[') {
        let raw: serde_json::Value = serde_json::from_str(&text).context("parsing pipeline JSON")?;
        let wrapped = match &raw {
            serde_json::Value::Array(_) => serde_json::json!({ "stages": raw }),
            _ => raw.clone(),
        };
        let spec: PipelineSpec = serde_json::from_value(wrapped).context("invalid pipeline")?;
        spec.validate()?;
        Ok((spec, raw))
    } else {
        let spec = PipelineSpec::parse_list(&text, alpha, beta, min_keep)?;
        let raw = serde_json::to_value(&spec)?;
        Ok((spec, raw))
    }
}

fn parse_method(args: &Attribute) -> Result<Method> {
    let need = |v: Option<f64>, flag: &str| v.with_context(|| format!("method {} needs --{flag}", args.method));
    Ok(match args.method.as_str() {
        "loo" => Method::Loo,
        "kv" => Method::Kv,
        "hier" | "hierarchical" => Method::Hier(HierParams { beta: need(args.beta, "beta")?, min_keep: args.min_keep }),
        "proxy" => Method::Proxy,
        "prune" => Method::Prune(PruneParams { alpha: need(args.alpha, "alpha")?, min_keep: args.min_keep }),
        "pipeline" => {
            let arg = args.pipeline.as_deref().context("method pipeline needs --pipeline")?;
            let (spec, raw) = parse_pipeline(arg, args.alpha, args.beta, args.min_keep)?;
            Method::Pipeline(spec, raw)
        }
        "attention" => Method::Attention,
        "gradnorm" => Method::GradNorm,
        "embedsim" => Method::EmbedSim,
        "contextcite" => Method::ContextCite(ContextCiteParams { n: args.masks, seed: args.seed, ..Default::default() }),
        other => bail!("unknown method {other:?}; expected one of {}", Method::NAMES.join(", ")),
    })
}

fn gen_model(args: GenModel) -> Result<()> {
    let config = ModelConfig {
        layers: args.layers,
        heads: args.heads,
        d_model: args.dmodel,
        d_ff: args.dff,
        vocab: args.vocab,
        max_seq: args.max_seq,
    };
    let model = ModelWeights::init(config, args.seed)?;
    let mut out = BufWriter::new(File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?);
    write_model(&model, &mut out)?;
    println!("{} ({} parameters) -> {}", model.name(), model.param_count(), args.out.display());
    Ok(())
}

fn attribute(args: Attribute) -> Result<()> {
    let method = parse_method(&args)?;
    let target = load_model(&args.model)?;
    let proxy = args.proxy_model.as_deref().map(load_model).transpose()?;
    if method.needs_proxy() && proxy.is_none() {
        bail!("method {} needs --proxy-model", args.method);
    }
    let template = match &args.template {
        Some(path) => PromptTemplate::new(
            std::fs::read_to_string(path).with_context(|| format!("reading template {}", path.display()))?,
        )?,
        None => PromptTemplate::qa(),
    };
    let config = AttributeConfig {
        method,
        out: args.out.clone(),
        template,
        seed: args.seed,
        max_new: args.max_new,
        keep_going: args.keep_going,
        workers: None,
    };
    let summary = run_attribute(&args.dataset, &config, &target, proxy.as_ref())?;
    eprintln!(
        "{} of {} examples written to {} ({} failed, {} workers)",
        summary.written,
        summary.examples,
        args.out.display(),
        summary.failures.len(),
        summary.workers
    );
    Ok(())
}

fn evaluate_cmd(args: Evaluate) -> Result<()> {
    let truth = read_results(&args.truth).with_context(|| format!("reading {}", args.truth.display()))?;
    let pred = read_results(&args.pred).with_context(|| format!("reading {}", args.pred.display()))?;
    let esd = EsdConfig { alpha: args.significance, k_max: args.k_max };
    let report = evaluate(&truth, &pred, &esd)?;
    print!("{}", report.table());
    std::fs::write(&args.out, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

fn flops(args: Flops) -> Result<()> {
    let method: FlopsMethod = args.method.parse()?;
    let params = FlopsParams { p: args.p, p_prime: args.p_prime, t: args.t, c: args.c, h: args.h, alpha: args.alpha, beta: args.beta };
    let estimate = theoretical_flops(method, &params)?;
    println!(
        "{}",
        serde_json::json!({ "method": method, "params": params, "flops": estimate.flops, "speedup": estimate.speedup })
    );
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::GenModel(args) => gen_model(args),
        Command::Attribute(args) => attribute(args),
        Command::Evaluate(args) => evaluate_cmd(args),
        Command::Flops(args) => flops(args),
    }
}
