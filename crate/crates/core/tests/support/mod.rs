//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use attribot_core::context::{build_prompt, ContextPartition, PromptLayout, PromptTemplate};
use attribot_core::eval::{FlopsMethod, FlopsParams};
use attribot_core::model::ModelWeights;
use rand::Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

const BYTES: usize = 256;

fn layer_norm(x: &[f64], gain: &[f32], bias: &[f32]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let rstd = 1.0 / (var + 1e-5).sqrt();
    x.iter().zip(gain).zip(bias).map(|((v, g), b)| (v - mean) * rstd * *g as f64 + *b as f64).collect()
}

fn project(rows: &[Vec<f64>], w: &[f32], cols: usize) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|x| (0..cols).map(|j| x.iter().enumerate().map(|(i, xi)| xi * w[i * cols + j] as f64).sum()).collect())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Input embeddings (token plus position) of `tokens`.
pub fn input_embeddings(model: &ModelWeights, tokens: &[u32]) -> Vec<Vec<f64>> {
    let d = model.config.d_model;
    tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| {
            (0..d)
                .map(|j| model.token_embedding[t as usize * d + j] as f64 + model.position_embedding[p * d + j] as f64)
                .collect()
        })
        .collect()
}

/// Whole-sequence f64 forward pass from explicit input embeddings; returns
/// `Σ_{t ≥ from} log p(tokens[t] | tokens[..t])`.
pub fn log_likelihood_from_embeddings(model: &ModelWeights, inputs: &[Vec<f64>], tokens: &[u32], from: usize) -> f64 {
    let c = &model.config;
    let (d, heads) = (c.d_model, c.heads);
    let dh = d / heads;
    let n = inputs.len();
    let mut x: Vec<Vec<f64>> = inputs.to_vec();
    for layer in &model.layers {
        let normed: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, &layer.ln1_gain, &layer.ln1_bias)).collect();
        let q = project(&normed, &layer.wq, d);
        let k = project(&normed, &layer.wk, d);
        let v = project(&normed, &layer.wv, d);
        let mut attn = vec![vec![0.0; d]; n];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for t in 0..n {
                let scores: Vec<f64> = (0..=t)
                    .map(|j| cols.clone().map(|i| q[t][i] * k[j][i]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let p = (s - max).exp() / z;
                    for i in cols.clone() {
                        attn[t][i] += p * v[j][i];
                    }
                }
            }
        }
        let proj = project(&attn, &layer.wo, d);
        for (row, p) in x.iter_mut().zip(&proj) {
            row.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        let normed: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, &layer.ln2_gain, &layer.ln2_bias)).collect();
        let hidden: Vec<Vec<f64>> = project(&normed, &layer.w1, c.d_ff)
            .into_iter()
            .map(|r| r.iter().zip(&layer.b1).map(|(a, b)| gelu(a + *b as f64)).collect())
            .collect();
        let out = project(&hidden, &layer.w2, d);
        for (row, o) in x.iter_mut().zip(&out) {
            row.iter_mut().zip(o).zip(&layer.b2).for_each(|((a, b), c)| *a += b + *c as f64);
        }
    }
    let mut total = 0.0;
    for t in from.max(1)..n {
        let hidden = layer_norm(&x[t - 1], &model.final_gain, &model.final_bias);
        let logits: Vec<f64> = (0..BYTES)
            .map(|b| hidden.iter().enumerate().map(|(j, h)| h * model.token_embedding[b * d + j] as f64).sum())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += logits[tokens[t] as usize] - lse;
    }
    total
}

/// `log p(continuation | prefix)` by a full f64 recomputation.
pub fn naive_score(model: &ModelWeights, prefix: &[u32], continuation: &[u32]) -> f64 {
    let tokens: Vec<u32> = prefix.iter().chain(continuation).copied().collect();
    log_likelihood_from_embeddings(model, &input_embeddings(model, &tokens), &tokens, prefix.len())
}

/// Central finite-difference gradient of the scored log-likelihood with
/// respect to the input embeddings at `positions`.
pub fn finite_difference_gradients(
    model: &ModelWeights,
    tokens: &[u32],
    from: usize,
    positions: std::ops::Range<usize>,
    step: f64,
) -> Vec<Vec<f64>> {
    let base = input_embeddings(model, tokens);
    positions
        .map(|p| {
            (0..model.config.d_model)
                .map(|j| {
                    let mut plus = base.clone();
                    plus[p][j] += step;
                    let mut minus = base.clone();
                    minus[p][j] -= step;
                    (log_likelihood_from_embeddings(model, &plus, tokens, from)
                        - log_likelihood_from_embeddings(model, &minus, tokens, from))
                        / (2.0 * step)
                })
                .collect()
        })
        .collect()
}

/// One-sided sequential Grubbs procedure using a library t quantile.
pub fn brute_force_esd(values: &[f64], alpha: f64, k_max: usize) -> Vec<usize> {
    let mut remaining: Vec<(usize, f64)> = values.iter().copied().enumerate().collect();
    let mut outliers = Vec::new();
    while outliers.len() < k_max && remaining.len() >= 3 {
        let n = remaining.len() as f64;
        // Stable sort puts the earliest of equal maxima first.
        let mut sorted = remaining.clone();
        sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let (index, max) = sorted[0];
        if max == sorted[sorted.len() - 1].1 {
            break;
        }
        let mean = remaining.iter().map(|r| r.1).sum::<f64>() / n;
        let sd = (remaining.iter().map(|r| (r.1 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        if sd == 0.0 {
            break;
        }
        let g = (max - mean) / sd;
        let t = StudentsT::new(0.0, 1.0, n - 2.0).unwrap().inverse_cdf(1.0 - alpha / (2.0 * n));
        let critical = (n - 1.0) * t / (n.sqrt() * (n - 2.0 + t * t).sqrt());
        if g <= critical {
            break;
        }
        outliers.push(index);
        remaining.retain(|r| r.0 != index);
    }
    outliers
}

/// FLOPs of a method by enumerating its forward passes over context tokens.
/// Keeps `β·M` groups and `α·|C|` sources without rounding.
pub fn simulate_flops(method: FlopsMethod, p: &FlopsParams) -> f64 {
    let pass = |params: f64, sources: f64| 2.0 * params * p.t * sources;
    let loo = |params: f64, c: f64| -> f64 {
        let whole = c.floor();
        let mut total = 0.0;
        for _ in 0..whole as usize {
            total += pass(params, c - 1.0);
        }
        total + (c - whole) * pass(params, c - 1.0)
    };
    match method {
        FlopsMethod::Loo => loo(p.p, p.c),
        FlopsMethod::Kv => {
            let mut total = 0.0;
            for i in 1..=p.c as usize {
                // Removing source i reuses the cache of sources 1..i.
                total += pass(p.p, p.c - i as f64);
            }
            total
        }
        FlopsMethod::Proxy => loo(p.p_prime, p.c),
        FlopsMethod::Pruning => loo(p.p_prime, p.c) + loo(p.p, p.alpha * p.c),
        FlopsMethod::Hierarchical => {
            let groups = p.c / p.h;
            let mut stage1 = 0.0;
            for _ in 0..groups as usize {
                stage1 += pass(p.p, p.c - p.h);
            }
            stage1 += (groups - groups.floor()) * pass(p.p, p.c - p.h);
            stage1 + loo(p.p, p.beta * groups * p.h)
        }
    }
}

/// A layout whose sources are exactly `t` tokens each (text plus separator),
/// in groups of `h`.
pub fn uniform_layout(c: usize, t: usize, h: usize) -> PromptLayout {
    assert!(t >= 2 && c.is_multiple_of(h));
    let groups = (0..c / h)
        .map(|g| {
            (0..h)
                .map(|s| {
                    let label = format!("{g}.{s}:");
                    let mut text: String = label.chars().take(t - 1).collect();
                    while text.len() < t - 1 {
                        text.push('x');
                    }
                    text
                })
                .collect()
        })
        .collect();
    build_prompt(&PromptTemplate::qa(), &ContextPartition::new(groups).unwrap(), "q")
}

/// Random sources of `1..=max_len` lowercase letters in random groups.
pub fn random_layout(rng: &mut impl Rng, sources: usize, max_len: usize) -> PromptLayout {
    let mut groups: Vec<Vec<String>> = vec![Vec::new()];
    for i in 0..sources {
        if i > 0 && rng.random_bool(0.4) {
            groups.push(Vec::new());
        }
        let len = rng.random_range(1..=max_len);
        let text: String = (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
        groups.last_mut().unwrap().push(text);
    }
    build_prompt(&PromptTemplate::qa(), &ContextPartition::new(groups).unwrap(), "what?")
}

pub fn random_text(rng: &mut impl Rng, len: usize) -> String {
    (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
}
