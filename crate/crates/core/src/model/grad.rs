//! Backpropagation of a scored span's log-likelihood to the input embeddings.
//!
//! Runs in f64 on widened copies of the weights so the result can be checked
//! against finite differences without f32 rounding swamping the difference.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, BYTE_VOCAB};

use super::{ModelWeights, LN_EPS};

const GELU_C: f64 = 0.797_884_560_802_865_4;

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

struct Layer {
    ln1_gain: Vec<f64>,
    ln1_bias: Vec<f64>,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    ln2_gain: Vec<f64>,
    ln2_bias: Vec<f64>,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

struct Norm {
    xhat: Vec<f64>,
    rstd: f64,
}

struct LayerTrace {
    ln1: Vec<Norm>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// probs[h][t][j] for j <= t
    probs: Vec<Vec<Vec<f64>>>,
    ln2: Vec<Norm>,
    pre_act: Vec<Vec<f64>>,
}

fn matvec(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
            *o += xi * wij;
        }
    }
    out
}

/// `dy · wᵀ` for `w` stored `[in][out]`.
fn matvec_t(dy: &[f64], w: &[f64], rows: usize) -> Vec<f64> {
    let cols = dy.len();
    (0..rows)
        .map(|i| w[i * cols..(i + 1) * cols].iter().zip(dy).map(|(a, b)| a * b).sum())
        .collect()
}

fn norm_forward(x: &[f64], gain: &[f64], bias: &[f64]) -> (Norm, Vec<f64>) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS as f64).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * rstd).collect();
    let out = xhat.iter().zip(gain).zip(bias).map(|((h, g), b)| h * g + b).collect();
    (Norm { xhat, rstd }, out)
}

fn norm_backward(norm: &Norm, gain: &[f64], dout: &[f64]) -> Vec<f64> {
    let n = dout.len() as f64;
    let dxhat: Vec<f64> = dout.iter().zip(gain).map(|(d, g)| d * g).collect();
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dx = dxhat.iter().zip(&norm.xhat).map(|(d, h)| d * h).sum::<f64>() / n;
    dxhat
        .iter()
        .zip(&norm.xhat)
        .map(|(d, h)| norm.rstd * (d - mean_d - h * mean_dx))
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x.powi(3))).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x.powi(3))).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn add(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Gradient of `Σ_{t ∈ scored} log p(tokens[t] | tokens[..t])` with respect to
/// the input embedding (token plus position) at every position.
///
/// Returns one `d_model` vector per input token. Positions at or after the
/// end of `scored` always get zero gradient.
pub fn embedding_gradients(model: &ModelWeights, tokens: &[TokenId], scored: Range<usize>) -> Result<Vec<Vec<f64>>> {
    let c = &model.config;
    let n = tokens.len();
    if n > c.max_seq {
        return Err(Error::SequenceTooLong { len: n, max: c.max_seq });
    }
    if scored.start == 0 || scored.end > n || scored.is_empty() {
        return Err(Error::InvalidParameter(format!("scored span {scored:?} invalid for {n} tokens")));
    }
    if let Some(&t) = tokens[scored.clone()].iter().find(|&&t| t as usize >= BYTE_VOCAB) {
        return Err(Error::UnscorableToken(t));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= c.vocab) {
        return Err(Error::UnscorableToken(t));
    }

    let (d, heads, dh, dff) = (c.d_model, c.heads, c.head_dim(), c.d_ff);
    let scale = 1.0 / (dh as f64).sqrt();
    let layers: Vec<Layer> = model
        .layers
        .iter()
        .map(|l| Layer {
            ln1_gain: widen(&l.ln1_gain),
            ln1_bias: widen(&l.ln1_bias),
            wq: widen(&l.wq),
            wk: widen(&l.wk),
            wv: widen(&l.wv),
            wo: widen(&l.wo),
            ln2_gain: widen(&l.ln2_gain),
            ln2_bias: widen(&l.ln2_bias),
            w1: widen(&l.w1),
            b1: widen(&l.b1),
            w2: widen(&l.w2),
            b2: widen(&l.b2),
        })
        .collect();
    let final_gain = widen(&model.final_gain);
    let final_bias = widen(&model.final_bias);

    // Forward, keeping what the backward pass needs.
    let mut x: Vec<Vec<f64>> =
        tokens.iter().enumerate().map(|(t, &tok)| model.input_embedding(tok, t).iter().map(|&v| v as f64).collect()).collect();
    let mut traces = Vec::with_capacity(layers.len());
    for layer in &layers {
        let mut ln1 = Vec::with_capacity(n);
        let (mut q, mut k, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for xt in &x {
            let (norm, normed) = norm_forward(xt, &layer.ln1_gain, &layer.ln1_bias);
            q.push(matvec(&normed, &layer.wq, d));
            k.push(matvec(&normed, &layer.wk, d));
            v.push(matvec(&normed, &layer.wv, d));
            ln1.push(norm);
        }
        let mut probs = vec![Vec::with_capacity(n); heads];
        let mut attn = vec![vec![0.0; d]; n];
        for (h, head_probs) in probs.iter_mut().enumerate() {
            let hs = h * dh..(h + 1) * dh;
            for t in 0..n {
                let scores: Vec<f64> = (0..=t)
                    .map(|j| q[t][hs.clone()].iter().zip(&k[j][hs.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                let p: Vec<f64> = exps.iter().map(|e| e / sum).collect();
                for (j, pj) in p.iter().enumerate() {
                    for (o, vv) in attn[t][hs.clone()].iter_mut().zip(&v[j][hs.clone()]) {
                        *o += pj * vv;
                    }
                }
                head_probs.push(p);
            }
        }
        let mut ln2 = Vec::with_capacity(n);
        let mut pre_act = Vec::with_capacity(n);
        for t in 0..n {
            add(&mut x[t], &matvec(&attn[t], &layer.wo, d));
            let (norm, normed) = norm_forward(&x[t], &layer.ln2_gain, &layer.ln2_bias);
            let mut u = matvec(&normed, &layer.w1, dff);
            add(&mut u, &layer.b1);
            let f: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
            let mut out = matvec(&f, &layer.w2, d);
            add(&mut out, &layer.b2);
            add(&mut x[t], &out);
            ln2.push(norm);
            pre_act.push(u);
        }
        traces.push(LayerTrace { ln1, q, k, v, probs, ln2, pre_act });
    }

    // Output head: d log p(y | z) / dz = E[y] - Σ_j p_j E[j].
    let embed = |t: usize| -> Vec<f64> { widen(model.token_embedding_row(t as u32)) };
    let table: Vec<Vec<f64>> = (0..BYTE_VOCAB).map(embed).collect();
    let mut dx = vec![vec![0.0; d]; n];
    for t in scored.clone() {
        let (norm, z) = norm_forward(&x[t - 1], &final_gain, &final_bias);
        let logits: Vec<f64> = table.iter().map(|e| e.iter().zip(&z).map(|(a, b)| a * b).sum()).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let mut dz = table[tokens[t] as usize].clone();
        for (e, w) in table.iter().zip(&exps) {
            let p = w / sum;
            for (g, ev) in dz.iter_mut().zip(e) {
                *g -= p * ev;
            }
        }
        add(&mut dx[t - 1], &norm_backward(&norm, &final_gain, &dz));
    }

    for (layer, trace) in layers.iter().zip(&traces).rev() {
        // Feed-forward branch; the residual passes dx through unchanged.
        for (t, g) in dx.iter_mut().enumerate() {
            let df = matvec_t(g, &layer.w2, dff);
            let du: Vec<f64> = df.iter().zip(&trace.pre_act[t]).map(|(g, &u)| g * gelu_grad(u)).collect();
            let dn2 = matvec_t(&du, &layer.w1, d);
            let back = norm_backward(&trace.ln2[t], &layer.ln2_gain, &dn2);
            add(g, &back);
        }
        // Attention branch.
        let da: Vec<Vec<f64>> = dx.iter().map(|g| matvec_t(g, &layer.wo, d)).collect();
        let mut dq = vec![vec![0.0; d]; n];
        let mut dk = vec![vec![0.0; d]; n];
        let mut dv = vec![vec![0.0; d]; n];
        for h in 0..heads {
            let hs = h * dh..(h + 1) * dh;
            for t in 0..n {
                let p = &trace.probs[h][t];
                let dat = &da[t][hs.clone()];
                let dp: Vec<f64> =
                    (0..=t).map(|j| dat.iter().zip(&trace.v[j][hs.clone()]).map(|(a, b)| a * b).sum()).collect();
                let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..=t {
                    for (g, a) in dv[j][hs.clone()].iter_mut().zip(dat) {
                        *g += p[j] * a;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    for i in hs.clone() {
                        dq[t][i] += ds * trace.k[j][i];
                        dk[j][i] += ds * trace.q[t][i];
                    }
                }
            }
        }
        for t in 0..n {
            let mut dn1 = matvec_t(&dq[t], &layer.wq, d);
            add(&mut dn1, &matvec_t(&dk[t], &layer.wk, d));
            add(&mut dn1, &matvec_t(&dv[t], &layer.wv, d));
            let back = norm_backward(&trace.ln1[t], &layer.ln1_gain, &dn1);
            add(&mut dx[t], &back);
        }
    }
    Ok(dx)
}
