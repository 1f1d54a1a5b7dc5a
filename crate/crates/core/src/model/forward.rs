use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, TokenSeq, BYTE_VOCAB, EOS};

use super::{ModelWeights, LN_EPS};

/// Per-layer key/value cache over a token prefix, plus the final normalized
/// hidden state at every cached position (needed to score the next token
/// after a fork).
#[derive(Debug, Clone)]
pub struct Session {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    hidden: Vec<f32>,
    tokens: Vec<TokenId>,
    d_model: usize,
}

/// Attention probabilities for every layer, head, and query position.
/// Row `q` covers key positions `0..=q`; entries above the diagonal are zero.
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    pub layers: usize,
    pub heads: usize,
    pub len: usize,
    data: Vec<f32>,
}

impl AttentionMaps {
    fn new(layers: usize, heads: usize, len: usize) -> Self {
        Self { layers, heads, len, data: vec![0.0; layers * heads * len * len] }
    }

    pub fn row(&self, layer: usize, head: usize, query: usize) -> &[f32] {
        let start = ((layer * self.heads + head) * self.len + query) * self.len;
        &self.data[start..start + self.len]
    }

    fn row_mut(&mut self, layer: usize, head: usize, query: usize) -> &mut [f32] {
        let start = ((layer * self.heads + head) * self.len + query) * self.len;
        &mut self.data[start..start + self.len]
    }
}

struct Scratch {
    x: Vec<f32>,
    normed: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    attn: Vec<f32>,
    proj: Vec<f32>,
    ff: Vec<f32>,
    probs: Vec<f32>,
}

impl Scratch {
    fn new(model: &ModelWeights) -> Self {
        let c = &model.config;
        Self {
            x: vec![0.0; c.d_model],
            normed: vec![0.0; c.d_model],
            q: vec![0.0; c.d_model],
            k: vec![0.0; c.d_model],
            v: vec![0.0; c.d_model],
            attn: vec![0.0; c.d_model],
            proj: vec![0.0; c.d_model],
            ff: vec![0.0; c.d_ff],
            probs: Vec::with_capacity(c.max_seq),
        }
    }
}

pub(crate) fn layer_norm(x: &[f32], gain: &[f32], bias: &[f32], out: &mut [f32]) {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
}

/// `out = x · w` with `w` stored `[in][out]`.
pub(crate) fn matvec(x: &[f32], w: &[f32], out: &mut [f32]) {
    let cols = out.len();
    out.fill(0.0);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * cols..(i + 1) * cols];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

pub(crate) fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Log-probability of `token` given a final normalized hidden state.
pub(crate) fn log_prob(model: &ModelWeights, hidden: &[f32], token: TokenId) -> Result<f64> {
    if token as usize >= BYTE_VOCAB {
        return Err(Error::UnscorableToken(token));
    }
    let logits = byte_logits(model, hidden);
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let sum: f64 = logits.iter().map(|&l| ((l - max) as f64).exp()).sum();
    Ok((logits[token as usize] - max) as f64 - sum.ln())
}

fn byte_logits(model: &ModelWeights, hidden: &[f32]) -> Vec<f32> {
    (0..BYTE_VOCAB as u32)
        .map(|t| model.token_embedding_row(t).iter().zip(hidden).map(|(a, b)| a * b).sum())
        .collect()
}

impl Session {
    pub fn new(model: &ModelWeights) -> Self {
        let layers = model.config.layers;
        Self {
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            hidden: Vec::new(),
            tokens: Vec::new(),
            d_model: model.config.d_model,
        }
    }

    /// A session whose cache covers `prefix`.
    pub fn create(model: &ModelWeights, prefix: &[TokenId]) -> Result<Self> {
        let mut session = Self::new(model);
        session.extend(model, prefix)?;
        Ok(session)
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// A copy of this session truncated to its first `position` tokens.
    pub fn fork(&self, position: usize) -> Result<Self> {
        if position > self.len() {
            return Err(Error::ForkBeyondCache { position, cached: self.len() });
        }
        let d = self.d_model;
        Ok(Self {
            keys: self.keys.iter().map(|k| k[..position * d].to_vec()).collect(),
            values: self.values.iter().map(|v| v[..position * d].to_vec()).collect(),
            hidden: self.hidden[..position * d].to_vec(),
            tokens: self.tokens[..position].to_vec(),
            d_model: d,
        })
    }

    /// Feeds `tokens` through the model, growing the cache.
    pub fn extend(&mut self, model: &ModelWeights, tokens: &[TokenId]) -> Result<()> {
        self.extend_inner(model, tokens, None)
    }

    fn extend_inner(
        &mut self,
        model: &ModelWeights,
        tokens: &[TokenId],
        mut maps: Option<&mut AttentionMaps>,
    ) -> Result<()> {
        let total = self.len() + tokens.len();
        if total > model.config.max_seq {
            return Err(Error::SequenceTooLong { len: total, max: model.config.max_seq });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= model.config.vocab) {
            return Err(Error::UnscorableToken(bad));
        }
        let mut scratch = Scratch::new(model);
        for &token in tokens {
            self.step(model, token, &mut scratch, maps.as_deref_mut());
        }
        Ok(())
    }

    fn step(&mut self, model: &ModelWeights, token: TokenId, s: &mut Scratch, mut maps: Option<&mut AttentionMaps>) {
        let c = &model.config;
        let (d, heads, dh) = (c.d_model, c.heads, c.head_dim());
        let pos = self.len();
        let scale = 1.0 / (dh as f32).sqrt();
        s.x.copy_from_slice(&model.input_embedding(token, pos));

        for (l, layer) in model.layers.iter().enumerate() {
            layer_norm(&s.x, &layer.ln1_gain, &layer.ln1_bias, &mut s.normed);
            matvec(&s.normed, &layer.wq, &mut s.q);
            matvec(&s.normed, &layer.wk, &mut s.k);
            matvec(&s.normed, &layer.wv, &mut s.v);
            self.keys[l].extend_from_slice(&s.k);
            self.values[l].extend_from_slice(&s.v);
            let keys = &self.keys[l];
            let values = &self.values[l];

            for h in 0..heads {
                let q = &s.q[h * dh..(h + 1) * dh];
                s.probs.clear();
                let mut max = f32::NEG_INFINITY;
                for j in 0..=pos {
                    let k = &keys[j * d + h * dh..j * d + (h + 1) * dh];
                    let score = q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale;
                    max = max.max(score);
                    s.probs.push(score);
                }
                let mut sum = 0.0f32;
                for p in s.probs.iter_mut() {
                    *p = (*p - max).exp();
                    sum += *p;
                }
                let out = &mut s.attn[h * dh..(h + 1) * dh];
                out.fill(0.0);
                for (j, p) in s.probs.iter_mut().enumerate() {
                    *p /= sum;
                    let v = &values[j * d + h * dh..j * d + (h + 1) * dh];
                    for (o, &vv) in out.iter_mut().zip(v) {
                        *o += *p * vv;
                    }
                }
                if let Some(maps) = maps.as_deref_mut() {
                    maps.row_mut(l, h, pos)[..=pos].copy_from_slice(&s.probs);
                }
            }
            matvec(&s.attn, &layer.wo, &mut s.proj);
            for (x, p) in s.x.iter_mut().zip(&s.proj) {
                *x += p;
            }

            layer_norm(&s.x, &layer.ln2_gain, &layer.ln2_bias, &mut s.normed);
            matvec(&s.normed, &layer.w1, &mut s.ff);
            for (f, b) in s.ff.iter_mut().zip(&layer.b1) {
                *f = gelu(*f + b);
            }
            matvec(&s.ff, &layer.w2, &mut s.proj);
            for ((x, p), b) in s.x.iter_mut().zip(&s.proj).zip(&layer.b2) {
                *x += p + b;
            }
        }

        layer_norm(&s.x, &model.final_gain, &model.final_bias, &mut s.normed);
        self.hidden.extend_from_slice(&s.normed);
        self.tokens.push(token);
    }

    fn last_hidden(&self) -> Option<&[f32]> {
        let n = self.len();
        (n > 0).then(|| &self.hidden[(n - 1) * self.d_model..n * self.d_model])
    }

    /// Log-probability of `continuation` following the cached prefix. The
    /// continuation is appended to the cache.
    pub fn score(&mut self, model: &ModelWeights, continuation: &[TokenId]) -> Result<f64> {
        if continuation.is_empty() {
            return Err(Error::EmptyResponse);
        }
        if self.is_empty() {
            return Err(Error::InvalidParameter("cannot score without a conditioning prefix".into()));
        }
        let total = self.len() + continuation.len();
        if total > model.config.max_seq {
            return Err(Error::SequenceTooLong { len: total, max: model.config.max_seq });
        }
        let mut scratch = Scratch::new(model);
        let mut total_lp = 0.0;
        for &token in continuation {
            total_lp += log_prob(model, self.last_hidden().expect("non-empty"), token)?;
            self.step(model, token, &mut scratch, None);
        }
        Ok(total_lp)
    }

    /// Log-probabilities over the byte vocabulary for the next token.
    pub fn next_log_probs(&self, model: &ModelWeights) -> Result<Vec<f64>> {
        let hidden = self
            .last_hidden()
            .ok_or_else(|| Error::InvalidParameter("empty session".into()))?;
        let logits = byte_logits(model, hidden);
        let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let lse = logits.iter().map(|&l| ((l - max) as f64).exp()).sum::<f64>().ln();
        Ok(logits.iter().map(|&l| (l - max) as f64 - lse).collect())
    }
}

/// `Σ_t log p(continuation_t | prefix ⧺ continuation_<t)`, computed without any cache reuse.
pub fn score_continuation(model: &ModelWeights, prefix: &[TokenId], continuation: &[TokenId]) -> Result<f64> {
    if continuation.is_empty() {
        return Err(Error::EmptyResponse);
    }
    let total = prefix.len() + continuation.len();
    if total > model.config.max_seq {
        return Err(Error::SequenceTooLong { len: total, max: model.config.max_seq });
    }
    let mut session = Session::create(model, prefix)?;
    session.score(model, continuation)
}

/// Attention maps for a full forward pass over `tokens`.
pub fn forward_attentions(model: &ModelWeights, tokens: &[TokenId]) -> Result<AttentionMaps> {
    let mut maps = AttentionMaps::new(model.config.layers, model.config.heads, tokens.len());
    let mut session = Session::new(model);
    session.extend_inner(model, tokens, Some(&mut maps))?;
    Ok(maps)
}

/// Argmax decoding; ties go to the lowest token id. Stops at EOS or after `max_new` tokens.
pub fn greedy_generate(model: &ModelWeights, prompt: &[TokenId], max_new: usize) -> Result<TokenSeq> {
    let total = prompt.len() + max_new;
    if total > model.config.max_seq {
        return Err(Error::SequenceTooLong { len: total, max: model.config.max_seq });
    }
    let mut out = Vec::with_capacity(max_new);
    if max_new == 0 {
        return Ok(TokenSeq(out));
    }
    let mut session = Session::create(model, prompt)?;
    for step in 0..max_new {
        let log_probs = session.next_log_probs(model)?;
        let mut best = 0;
        for (t, &lp) in log_probs.iter().enumerate() {
            if lp > log_probs[best] {
                best = t;
            }
        }
        let token = best as TokenId;
        if token == EOS {
            break;
        }
        out.push(token);
        if step + 1 < max_new {
            session.extend(model, &[token])?;
        }
    }
    Ok(TokenSeq(out))
}
