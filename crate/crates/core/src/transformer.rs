//! Decoder-only forward pass with a per-layer KV cache and an attention
//! hook seam.
//!
//! Architecture: pre-norm blocks, multi-head causal self-attention, GELU
//! feed-forward of width `4 * d_model`, learned absolute position
//! embeddings, no biases, parameter-free layer normalization. Activations
//! are `f64` end to end so that hook-identity runs reproduce baseline
//! logits to full precision.
//!
//! The hook sees each generating position's post-softmax attention row at
//! every layer, before the value product: once per layer for the final
//! prefill position (step 1) and once per layer per decoded position.

use crate::attention::{softmax_row, AttentionRow, ImageSpan};
use crate::error::{Error, Result};
use crate::model::Weights;

/// Observes and optionally rewrites the current position's attention row.
pub trait AttentionHook {
    fn on_attention_row(
        &mut self,
        layer: usize,
        row: &mut AttentionRow,
        span: ImageSpan,
        step: usize,
    ) -> Result<()>;
}

/// Leaves every row untouched.
pub struct IdentityHook;

impl AttentionHook for IdentityHook {
    fn on_attention_row(
        &mut self,
        _layer: usize,
        _row: &mut AttentionRow,
        _span: ImageSpan,
        _step: usize,
    ) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
struct HeadKv {
    k: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerKv {
    heads: Vec<HeadKv>,
}

/// Cached keys and values for every processed position, per layer and head.
#[derive(Debug, Clone)]
pub struct KvCache {
    layers: Vec<LayerKv>,
    d_head: usize,
    max_seq_len: usize,
    len: usize,
}

impl KvCache {
    pub fn new(n_layers: usize, n_heads: usize, d_head: usize, max_seq_len: usize) -> Self {
        Self {
            layers: (0..n_layers)
                .map(|_| LayerKv {
                    heads: vec![HeadKv::default(); n_heads],
                })
                .collect(),
            d_head,
            max_seq_len,
            len: 0,
        }
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Cached positions in layer `l`, for verifying the uniform-length
    /// invariant from outside.
    pub fn layer_len(&self, layer: usize) -> usize {
        self.layers[layer].heads[0].k.len() / self.d_head
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    fn push(&mut self, layer: usize, head: usize, k: &[f64], v: &[f64]) {
        let slot = &mut self.layers[layer].heads[head];
        slot.k.extend_from_slice(k);
        slot.v.extend_from_slice(v);
    }
}

/// Parameter-free layer normalization over the model dimension.
fn layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter().map(|v| (v - mean) * inv).collect()
}

/// GELU, tanh approximation.
fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

/// `out[i] = sum_j w[i * din + j] * x[j]` with `f64` accumulation.
fn matvec(w: &[f32], x: &[f64], d_out: usize, d_in: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), d_out * d_in);
    debug_assert_eq!(x.len(), d_in);
    let mut out = Vec::with_capacity(d_out);
    for i in 0..d_out {
        let row = &w[i * d_in..(i + 1) * d_in];
        let mut acc = 0.0;
        for (wv, xv) in row.iter().zip(x) {
            acc += f64::from(*wv) * xv;
        }
        out.push(acc);
    }
    out
}

fn embed(weights: &Weights, token: u32, position: usize) -> Result<Vec<f64>> {
    let config = &weights.config;
    if token as usize >= config.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "token id {} outside vocabulary of {}",
            token, config.vocab_size
        )));
    }
    let d = config.d_model;
    let tok = &weights.token_embedding[token as usize * d..(token as usize + 1) * d];
    let pos = &weights.pos_embedding[position * d..(position + 1) * d];
    Ok(tok.iter().zip(pos).map(|(t, p)| f64::from(*t) + f64::from(*p)).collect())
}

fn feed_forward(weights: &Weights, layer: usize, x: &mut [f64]) {
    let config = &weights.config;
    let lw = &weights.layers[layer];
    let h = layer_norm(x);
    let mut hidden = matvec(&lw.ff_in, &h, config.d_ff(), config.d_model);
    for v in &mut hidden {
        *v = gelu(*v);
    }
    let out = matvec(&lw.ff_out, &hidden, config.d_model, config.d_ff());
    for (xv, ov) in x.iter_mut().zip(out) {
        *xv += ov;
    }
}

fn final_logits(weights: &Weights, x: &[f64]) -> Vec<f64> {
    let config = &weights.config;
    let h = layer_norm(x);
    matvec(&weights.lm_head, &h, config.vocab_size, config.d_model)
}

/// Mix cached values under `row` and project back to the residual stream.
fn attend_and_project(
    weights: &Weights,
    cache: &KvCache,
    layer: usize,
    row: &AttentionRow,
    x: &mut [f64],
) {
    let config = &weights.config;
    let d_head = config.d_head;
    let n = row.n_positions();
    let mut concat = vec![0.0; config.d_model];
    for h in 0..config.n_heads {
        let probs = row.head(h);
        let values = &cache.layers[layer].heads[h].v;
        let out = &mut concat[h * d_head..(h + 1) * d_head];
        for p in 0..n {
            let w = probs[p];
            let v = &values[p * d_head..(p + 1) * d_head];
            for (o, vv) in out.iter_mut().zip(v) {
                *o += w * vv;
            }
        }
    }
    let projected = matvec(
        &weights.layers[layer].attn_out,
        &concat,
        config.d_model,
        config.d_model,
    );
    for (xv, pv) in x.iter_mut().zip(projected) {
        *xv += pv;
    }
}

/// Process the whole prompt, filling the cache layer by layer.
///
/// Returns the cache, the next-token logits, and the final position's
/// post-hook attention rows per layer (the rows that predict the first
/// generated token). The hook runs only for the final position, with
/// step 1, exactly as it would in a decode step.
pub fn prefill(
    weights: &Weights,
    tokens: &[u32],
    span: ImageSpan,
    hook: &mut dyn AttentionHook,
) -> Result<(KvCache, Vec<f64>, Vec<AttentionRow>)> {
    let config = &weights.config;
    if tokens.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::SequenceOverflow {
            requested: tokens.len(),
            max: config.max_seq_len,
        });
    }

    let n = tokens.len();
    let d = config.d_model;
    let d_head = config.d_head;
    let scale = 1.0 / (d_head as f64).sqrt();
    let last = n - 1;

    let mut cache = KvCache::new(config.n_layers, config.n_heads, d_head, config.max_seq_len);
    let mut final_rows = Vec::with_capacity(config.n_layers);

    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(p, t)| embed(weights, *t, p))
        .collect::<Result<_>>()?;

    for layer in 0..config.n_layers {
        let lw = &weights.layers[layer];
        let mut queries = Vec::with_capacity(n);
        for xp in x.iter() {
            let h = layer_norm(xp);
            queries.push(matvec(&lw.attn_q, &h, d, d));
            let k = matvec(&lw.attn_k, &h, d, d);
            let v = matvec(&lw.attn_v, &h, d, d);
            for head in 0..config.n_heads {
                cache.push(
                    layer,
                    head,
                    &k[head * d_head..(head + 1) * d_head],
                    &v[head * d_head..(head + 1) * d_head],
                );
            }
        }

        for p in 0..n {
            let mut heads = Vec::with_capacity(config.n_heads);
            for head in 0..config.n_heads {
                let q = &queries[p][head * d_head..(head + 1) * d_head];
                // Causal: only the prefix up to and including p participates.
                let keys = &cache.layers[layer].heads[head].k[..(p + 1) * d_head];
                let mut scores = Vec::with_capacity(p + 1);
                for kp in 0..=p {
                    let key = &keys[kp * d_head..(kp + 1) * d_head];
                    let dot: f64 = q.iter().zip(key).map(|(a, b)| a * b).sum();
                    scores.push(dot * scale);
                }
                heads.push(softmax_row(&scores)?);
            }
            let mut row = AttentionRow::from_heads(heads)?;
            if p == last {
                hook.on_attention_row(layer, &mut row, span, 1)?;
            }
            // The row spans only the prefix, so mixing stops at position p.
            attend_and_project(weights, &cache, layer, &row, &mut x[p]);
            if p == last {
                final_rows.push(row);
            }
        }

        for xp in x.iter_mut() {
            feed_forward(weights, layer, xp);
        }
    }
    cache.len = n;

    let logits = final_logits(weights, &x[last]);
    Ok((cache, logits, final_rows))
}

/// Decode one token: append its key/value to every layer, compute its
/// attention row over all cached positions, pass the row through the hook,
/// mix values, and return next-token logits with the per-layer rows.
pub fn forward_token(
    weights: &Weights,
    cache: &mut KvCache,
    token: u32,
    span: ImageSpan,
    step: usize,
    hook: &mut dyn AttentionHook,
) -> Result<(Vec<f64>, Vec<AttentionRow>)> {
    let config = &weights.config;
    if cache.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    if cache.len() + 1 > cache.max_seq_len {
        return Err(Error::SequenceOverflow {
            requested: cache.len() + 1,
            max: cache.max_seq_len,
        });
    }

    let d = config.d_model;
    let d_head = config.d_head;
    let scale = 1.0 / (d_head as f64).sqrt();
    let position = cache.len();

    let mut x = embed(weights, token, position)?;
    let mut rows = Vec::with_capacity(config.n_layers);

    for layer in 0..config.n_layers {
        let lw = &weights.layers[layer];
        let h = layer_norm(&x);
        let q = matvec(&lw.attn_q, &h, d, d);
        let k = matvec(&lw.attn_k, &h, d, d);
        let v = matvec(&lw.attn_v, &h, d, d);
        for head in 0..config.n_heads {
            cache.push(
                layer,
                head,
                &k[head * d_head..(head + 1) * d_head],
                &v[head * d_head..(head + 1) * d_head],
            );
        }

        let mut heads = Vec::with_capacity(config.n_heads);
        for head in 0..config.n_heads {
            let q_head = &q[head * d_head..(head + 1) * d_head];
            let keys = &cache.layers[layer].heads[head].k;
            let mut scores = Vec::with_capacity(position + 1);
            for kp in 0..=position {
                let key = &keys[kp * d_head..(kp + 1) * d_head];
                let dot: f64 = q_head.iter().zip(key).map(|(a, b)| a * b).sum();
                scores.push(dot * scale);
            }
            heads.push(softmax_row(&scores)?);
        }
        let mut row = AttentionRow::from_heads(heads)?;
        hook.on_attention_row(layer, &mut row, span, step)?;
        attend_and_project(weights, cache, layer, &row, &mut x);
        rows.push(row);

        feed_forward(weights, layer, &mut x);
    }
    cache.len = position + 1;

    let logits = final_logits(weights, &x);
    Ok((logits, rows))
}
