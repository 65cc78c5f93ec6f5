//! Independent reference paths for the acceptance suite.
//!
//! `recompute_generate` re-derives every step from scratch: no KV cache,
//! full forward over the whole sequence per generated token, with the
//! attention math and the intervention pipeline re-implemented as plain
//! loops. It shares only the weight data and parameter values with the
//! library, never its kernels.

use tarac_core::model::Weights;
use tarac_core::tarac::{TaracConfig, UpdateRule};

pub struct RecomputeRun {
    pub tokens: Vec<u32>,
    /// Next-token logits observed at each generated step.
    pub step_logits: Vec<Vec<f64>>,
}

fn norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter().map(|v| (v - mean) * inv).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x * x * x)).tanh())
}

fn mv(w: &[f32], x: &[f64], d_out: usize, d_in: usize) -> Vec<f64> {
    let mut out = vec![0.0; d_out];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..d_in {
            acc += w[i * d_in + j] as f64 * x[j];
        }
        *o = acc;
    }
    out
}

fn stable_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

/// One full cache-free forward over `tokens`; returns the last position's
/// next-token logits. The intervention replays inline at every generating
/// position (the final prompt position and everything after it), with the
/// per-layer accumulator rebuilt during the sweep.
fn full_forward(
    weights: &Weights,
    tokens: &[u32],
    span: (usize, usize),
    prompt_len: usize,
    tarac: Option<&TaracConfig>,
) -> Vec<f64> {
    let config = &weights.config;
    let d = config.d_model;
    let d_head = config.d_head;
    let n_heads = config.n_heads;
    let d_ff = config.d_ff();
    let scale = 1.0 / (d_head as f64).sqrt();
    let n = tokens.len();
    let (span_start, span_end) = span;
    let span_len = span_end - span_start;

    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(p, t)| {
            let tok = &weights.token_embedding[*t as usize * d..(*t as usize + 1) * d];
            let pos = &weights.pos_embedding[p * d..(p + 1) * d];
            tok.iter().zip(pos).map(|(a, b)| *a as f64 + *b as f64).collect()
        })
        .collect();

    for layer in 0..config.n_layers {
        let lw = &weights.layers[layer];
        let mut q = Vec::with_capacity(n);
        let mut k = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for xp in &x {
            let h = norm(xp);
            q.push(mv(&lw.attn_q, &h, d, d));
            k.push(mv(&lw.attn_k, &h, d, d));
            v.push(mv(&lw.attn_v, &h, d, d));
        }

        let intervene = tarac
            .map(|c| layer >= c.layer_range.0 && layer < c.layer_range.1 && span_len > 0)
            .unwrap_or(false);
        let mut acc: Vec<f64> = Vec::new();
        let mut prev: Vec<f64> = Vec::new();
        let mut t_layer = 0u64;

        for p in 0..n {
            let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n_heads);
            for head in 0..n_heads {
                let qh = &q[p][head * d_head..(head + 1) * d_head];
                let mut scores = Vec::with_capacity(p + 1);
                for j in 0..=p {
                    let kh = &k[j][head * d_head..(head + 1) * d_head];
                    let dot: f64 = qh.iter().zip(kh).map(|(a, b)| a * b).sum();
                    scores.push(dot * scale);
                }
                rows.push(stable_softmax(&scores));
            }

            if intervene && p >= prompt_len - 1 {
                let cfg = tarac.unwrap();
                let mut captured = vec![f64::NEG_INFINITY; span_len];
                for row in &rows {
                    for (i, c) in captured.iter_mut().enumerate() {
                        *c = c.max(row[span_start + i]);
                    }
                }
                t_layer += 1;
                if t_layer == 1 {
                    acc = captured.clone();
                } else {
                    let history = match cfg.update_rule {
                        UpdateRule::Ema => &acc,
                        UpdateRule::Literal => &prev,
                    };
                    acc = captured
                        .iter()
                        .zip(history)
                        .map(|(new, old)| cfg.alpha * new + (1.0 - cfg.alpha) * old)
                        .collect();
                }
                prev = captured;
                for row in &mut rows {
                    if cfg.beta != 0.0 {
                        for (i, a) in acc.iter().enumerate() {
                            row[span_start + i] += cfg.beta * a;
                        }
                    }
                    let sum: f64 = row.iter().sum();
                    for w in row.iter_mut() {
                        *w /= sum;
                    }
                }
            }

            let mut concat = vec![0.0; d];
            for (head, row) in rows.iter().enumerate() {
                let out = &mut concat[head * d_head..(head + 1) * d_head];
                for (j, w) in row.iter().enumerate() {
                    let vh = &v[j][head * d_head..(head + 1) * d_head];
                    for (o, vv) in out.iter_mut().zip(vh) {
                        *o += w * vv;
                    }
                }
            }
            let projected = mv(&lw.attn_out, &concat, d, d);
            for (xv, pv) in x[p].iter_mut().zip(projected) {
                *xv += pv;
            }
        }

        for xp in x.iter_mut() {
            let h = norm(xp);
            let mut hidden = mv(&lw.ff_in, &h, d_ff, d);
            for hv in &mut hidden {
                *hv = gelu(*hv);
            }
            let out = mv(&lw.ff_out, &hidden, d, d_ff);
            for (xv, ov) in xp.iter_mut().zip(out) {
                *xv += ov;
            }
        }
    }

    let h = norm(&x[n - 1]);
    mv(&weights.lm_head, &h, config.vocab_size, d)
}

/// Greedy-decode `steps` tokens, recomputing the full sequence from
/// scratch at every step.
pub fn recompute_generate(
    weights: &Weights,
    prompt: &[u32],
    span: (usize, usize),
    tarac: Option<&TaracConfig>,
    steps: usize,
) -> RecomputeRun {
    let mut tokens: Vec<u32> = prompt.to_vec();
    let mut generated = Vec::with_capacity(steps);
    let mut step_logits = Vec::with_capacity(steps);
    for _ in 0..steps {
        let logits = full_forward(weights, &tokens, span, prompt.len(), tarac);
        let next = argmax(&logits) as u32;
        step_logits.push(logits);
        generated.push(next);
        tokens.push(next);
    }
    RecomputeRun {
        tokens: generated,
        step_logits,
    }
}
