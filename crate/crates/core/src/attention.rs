//! Attention row kernels: numerically stable softmax, scaled dot-product
//! rows against cached keys, head reduction, post-injection renormalization,
//! and span mass measurements.
//!
//! Everything here is a pure function over plain slices; rows are stored in
//! `f64` and sums are accumulated in `f64` so that renormalizing an
//! already-normalized row is an identity to well below 1e-12.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open `[start, end)` span of image-token positions in a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSpan {
    pub start: usize,
    pub end: usize,
}

impl ImageSpan {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(Error::InvalidConfig(format!(
                "image span start {start} exceeds end {end}"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn empty() -> Self {
        Self { start: 0, end: 0 }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    /// Error unless the span fits inside a row of `len` positions.
    pub fn check_within(&self, len: usize) -> Result<()> {
        if self.end > len {
            return Err(Error::SpanOutOfBounds {
                start: self.start,
                end: self.end,
                len,
            });
        }
        Ok(())
    }
}

/// How to collapse the head axis when capturing image-token attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadReducer {
    /// Elementwise maximum across heads: keeps the prominent per-token
    /// values that only a few heads carry.
    #[default]
    Max,
    /// Elementwise mean across heads.
    Mean,
}

/// How to restore the probability property of a row after injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenormMode {
    /// Divide each head's row by its sum. Preserves the ratios between
    /// entries; the production choice.
    #[default]
    RowSum,
    /// Re-apply softmax to the row. Post-softmax rows are mostly near
    /// zero, so this drives every entry toward 1/N and flattens the
    /// distribution. Kept for tests and analysis only; never used on the
    /// default decode path.
    #[serde(alias = "softmax-diagnostic")]
    Softmax,
}

/// One generating position's per-head attention distribution over all
/// cached positions. Stored flat, head-major: `weights[h * n_positions + p]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow {
    weights: Vec<f64>,
    n_heads: usize,
    n_positions: usize,
}

impl AttentionRow {
    pub fn from_flat(n_heads: usize, n_positions: usize, weights: Vec<f64>) -> Result<Self> {
        if n_heads == 0 {
            return Err(Error::DimensionMismatch("attention row needs >= 1 head".into()));
        }
        if weights.len() != n_heads * n_positions {
            return Err(Error::DimensionMismatch(format!(
                "expected {} weights for {} heads x {} positions, got {}",
                n_heads * n_positions,
                n_heads,
                n_positions,
                weights.len()
            )));
        }
        Ok(Self {
            weights,
            n_heads,
            n_positions,
        })
    }

    pub fn from_heads(heads: Vec<Vec<f64>>) -> Result<Self> {
        let n_heads = heads.len();
        if n_heads == 0 {
            return Err(Error::DimensionMismatch("attention row needs >= 1 head".into()));
        }
        let n_positions = heads[0].len();
        if heads.iter().any(|h| h.len() != n_positions) {
            return Err(Error::DimensionMismatch(
                "heads have differing position counts".into(),
            ));
        }
        let mut weights = Vec::with_capacity(n_heads * n_positions);
        for head in heads {
            weights.extend(head);
        }
        Ok(Self {
            weights,
            n_heads,
            n_positions,
        })
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn n_positions(&self) -> usize {
        self.n_positions
    }

    pub fn head(&self, h: usize) -> &[f64] {
        &self.weights[h * self.n_positions..(h + 1) * self.n_positions]
    }

    pub fn head_mut(&mut self, h: usize) -> &mut [f64] {
        &mut self.weights[h * self.n_positions..(h + 1) * self.n_positions]
    }

    pub fn head_sum(&self, h: usize) -> f64 {
        self.head(h).iter().sum()
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.weights
    }

    /// Mean over heads of the attention mass on `span`.
    pub fn mean_image_mass(&self, span: ImageSpan) -> Result<f64> {
        span.check_within(self.n_positions)?;
        let total: f64 = (0..self.n_heads)
            .map(|h| self.head(h)[span.start..span.end].iter().sum::<f64>())
            .sum();
        Ok(total / self.n_heads as f64)
    }

    /// Mean over heads of the attention on each span position; length
    /// equals the span length.
    pub fn image_profile(&self, span: ImageSpan) -> Result<Vec<f64>> {
        span.check_within(self.n_positions)?;
        let mut profile = vec![0.0; span.len()];
        for h in 0..self.n_heads {
            let slice = &self.head(h)[span.start..span.end];
            for (acc, w) in profile.iter_mut().zip(slice) {
                *acc += w;
            }
        }
        for v in &mut profile {
            *v /= self.n_heads as f64;
        }
        Ok(profile)
    }
}

/// Stable softmax: subtracts the max score before exponentiation.
pub fn softmax_row(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyRow);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFiniteScore);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Attention probabilities of one query over the cached prefix keys.
///
/// `keys` holds `n` key vectors of `d_head` entries, flattened
/// position-major. Causality is the caller's responsibility: only the
/// cached prefix participates.
pub fn causal_attention_row(query: &[f64], keys: &[f64], d_head: usize, scale: f64) -> Result<Vec<f64>> {
    if query.len() != d_head {
        return Err(Error::DimensionMismatch(format!(
            "query has {} entries, expected d_head {}",
            query.len(),
            d_head
        )));
    }
    if d_head == 0 || keys.is_empty() || keys.len() % d_head != 0 {
        return Err(Error::DimensionMismatch(format!(
            "key buffer of {} entries is not a multiple of d_head {}",
            keys.len(),
            d_head
        )));
    }
    let n = keys.len() / d_head;
    let mut scores = Vec::with_capacity(n);
    for p in 0..n {
        let key = &keys[p * d_head..(p + 1) * d_head];
        let dot: f64 = query.iter().zip(key).map(|(q, k)| q * k).sum();
        scores.push(dot * scale);
    }
    softmax_row(&scores)
}

/// Collapse an `n_heads x width` head-major matrix to one row of `width`.
pub fn reduce_heads(heads: &[f64], n_heads: usize, mode: HeadReducer) -> Result<Vec<f64>> {
    if n_heads == 0 {
        return Err(Error::DimensionMismatch("reduce_heads over zero heads".into()));
    }
    if heads.len() % n_heads != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{} entries do not split into {} heads",
            heads.len(),
            n_heads
        )));
    }
    let width = heads.len() / n_heads;
    let mut out = heads[..width].to_vec();
    for h in 1..n_heads {
        let row = &heads[h * width..(h + 1) * width];
        match mode {
            HeadReducer::Max => {
                for (acc, v) in out.iter_mut().zip(row) {
                    if *v > *acc {
                        *acc = *v;
                    }
                }
            }
            HeadReducer::Mean => {
                for (acc, v) in out.iter_mut().zip(row) {
                    *acc += *v;
                }
            }
        }
    }
    if mode == HeadReducer::Mean {
        for v in &mut out {
            *v /= n_heads as f64;
        }
    }
    Ok(out)
}

/// Renormalize each head of the current position's row in place.
pub fn renormalize_last_row(row: &mut AttentionRow, mode: RenormMode) -> Result<()> {
    for h in 0..row.n_heads() {
        match mode {
            RenormMode::RowSum => {
                let sum = row.head_sum(h);
                if sum <= 0.0 {
                    return Err(Error::ZeroAttentionMass);
                }
                for v in row.head_mut(h) {
                    *v /= sum;
                }
            }
            RenormMode::Softmax => {
                let replaced = softmax_row(row.head(h))?;
                row.head_mut(h).copy_from_slice(&replaced);
            }
        }
    }
    Ok(())
}

/// Total attention mass a single-head probability vector puts on `span`.
pub fn image_mass(row: &[f64], span: ImageSpan) -> Result<f64> {
    span.check_within(row.len())?;
    Ok(row[span.start..span.end].iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Frozen from an extended-precision (30-digit) evaluation of
    // exp(x - max)/sum for scores [1, 2, 3].
    const SOFTMAX_123: [f64; 3] = [
        0.090030573170380458,
        0.244728471054797652,
        0.665240955774821890,
    ];

    #[test]
    fn softmax_symmetric_inputs() {
        let out = softmax_row(&[0.0, 0.0, 0.0]).unwrap();
        for v in out {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_single_element() {
        for x in [-1e5, -3.0, 0.0, 7.5, 1e5] {
            let out = softmax_row(&[x]).unwrap();
            assert_eq!(out, vec![1.0]);
        }
    }

    #[test]
    fn softmax_matches_extended_precision_oracle() {
        let out = softmax_row(&[1.0, 2.0, 3.0]).unwrap();
        for (got, want) in out.iter().zip(SOFTMAX_123) {
            assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
        }
    }

    #[test]
    fn softmax_large_scores_do_not_overflow() {
        let out = softmax_row(&[1000.0, 1001.0, 1002.0]).unwrap();
        let sum: f64 = out.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(out.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn softmax_rejects_empty_and_non_finite() {
        assert!(matches!(softmax_row(&[]), Err(Error::EmptyRow)));
        assert!(matches!(
            softmax_row(&[1.0, f64::NAN]),
            Err(Error::NonFiniteScore)
        ));
        assert!(matches!(
            softmax_row(&[f64::INFINITY, 0.0]),
            Err(Error::NonFiniteScore)
        ));
    }

    #[test]
    fn causal_row_zero_query_is_uniform() {
        let keys = vec![0.3, -0.1, 2.0, 0.7, -0.4, 0.9]; // 3 keys, d_head 2
        let out = causal_attention_row(&[0.0, 0.0], &keys, 2, 0.5).unwrap();
        for v in out {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_row_single_key() {
        let out = causal_attention_row(&[0.4, -0.2], &[1.0, 2.0], 2, 0.7).unwrap();
        assert_eq!(out, vec![1.0]);
    }

    #[test]
    fn causal_row_matches_brute_force() {
        // d_head = 4, three keys; oracle recomputes the dot products and
        // the unstabilized exp/sum directly.
        let query = [0.11, -0.52, 0.83, 0.29];
        let keys = [
            0.5, 0.1, -0.3, 0.9, //
            -0.7, 0.2, 0.4, -0.1, //
            0.0, 0.6, -0.8, 0.3,
        ];
        let scale = 0.5;
        let got = causal_attention_row(&query, &keys, 4, scale).unwrap();

        let mut scores = [0.0f64; 3];
        for (p, score) in scores.iter_mut().enumerate() {
            let mut dot = 0.0;
            for i in 0..4 {
                dot += query[i] * keys[p * 4 + i];
            }
            *score = dot * scale;
        }
        let exps: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let total: f64 = exps.iter().sum();
        for (g, e) in got.iter().zip(&exps) {
            assert!((g - e / total).abs() < 1e-9);
        }
    }

    #[test]
    fn causal_row_rejects_mismatched_dims() {
        assert!(causal_attention_row(&[1.0], &[1.0, 2.0], 2, 1.0).is_err());
        assert!(causal_attention_row(&[1.0, 2.0], &[1.0, 2.0, 3.0], 2, 1.0).is_err());
        assert!(causal_attention_row(&[1.0, 2.0], &[], 2, 1.0).is_err());
    }

    #[test]
    fn reduce_heads_max_and_mean() {
        let heads = [0.1, 0.2, 0.3, 0.3, 0.1, 0.2];
        let max = reduce_heads(&heads, 2, HeadReducer::Max).unwrap();
        assert_eq!(max, vec![0.3, 0.2, 0.3]);
        let mean = reduce_heads(&heads, 2, HeadReducer::Mean).unwrap();
        for (g, w) in mean.iter().zip([0.2, 0.15, 0.25]) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn reduce_heads_single_head_is_identity() {
        let heads = [0.4, 0.1, 0.5];
        for mode in [HeadReducer::Max, HeadReducer::Mean] {
            assert_eq!(reduce_heads(&heads, 1, mode).unwrap(), heads.to_vec());
        }
    }

    #[test]
    fn reduce_heads_zero_heads_errors() {
        assert!(reduce_heads(&[], 0, HeadReducer::Max).is_err());
    }

    #[test]
    fn renormalize_rowsum_basic() {
        let mut row = AttentionRow::from_flat(1, 3, vec![1.0, 2.0, 1.0]).unwrap();
        renormalize_last_row(&mut row, RenormMode::RowSum).unwrap();
        assert_eq!(row.head(0), &[0.25, 0.5, 0.25]);
    }

    #[test]
    fn renormalize_rowsum_zero_mass_errors() {
        let mut row = AttentionRow::from_flat(2, 2, vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!(matches!(
            renormalize_last_row(&mut row, RenormMode::RowSum),
            Err(Error::ZeroAttentionMass)
        ));
    }

    #[test]
    fn renormalize_softmax_flattens_peaked_row() {
        // Frozen oracle: softmax([0.9, 0.05, 0.05]) =
        // [0.539133005924, 0.230433497038, 0.230433497038]; every entry
        // lands within 0.25 of 1/3, the flattening failure mode.
        let mut row = AttentionRow::from_flat(1, 3, vec![0.9, 0.05, 0.05]).unwrap();
        renormalize_last_row(&mut row, RenormMode::Softmax).unwrap();
        let want = [0.539133005924, 0.230433497038, 0.230433497038];
        for (g, w) in row.head(0).iter().zip(want) {
            assert!((g - w).abs() < 1e-9);
            assert!((g - 1.0 / 3.0).abs() < 0.25);
        }
    }

    #[test]
    fn image_mass_examples() {
        let row = [0.3, 0.2, 0.4, 0.1];
        assert!((image_mass(&row, ImageSpan::new(0, 2).unwrap()).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(image_mass(&row, ImageSpan::new(2, 2).unwrap()).unwrap(), 0.0);
        assert!((image_mass(&row, ImageSpan::new(0, 4).unwrap()).unwrap() - 1.0).abs() < 1e-6);
        assert!(matches!(
            image_mass(&row, ImageSpan::new(2, 5).unwrap()),
            Err(Error::SpanOutOfBounds { .. })
        ));
    }

    #[test]
    fn row_accessors_and_profile() {
        let row = AttentionRow::from_heads(vec![vec![0.2, 0.3, 0.5], vec![0.6, 0.1, 0.3]]).unwrap();
        assert_eq!(row.n_heads(), 2);
        assert_eq!(row.n_positions(), 3);
        assert_eq!(row.head(1), &[0.6, 0.1, 0.3]);
        let span = ImageSpan::new(0, 2).unwrap();
        assert!((row.mean_image_mass(span).unwrap() - 0.6).abs() < 1e-12);
        let profile = row.image_profile(span).unwrap();
        assert!((profile[0] - 0.4).abs() < 1e-12);
        assert!((profile[1] - 0.2).abs() < 1e-12);
    }

    fn finite_scores() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-50.0f64..50.0, 1..64)
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_shift_invariant(scores in finite_scores(), shift in -30.0f64..30.0) {
            let base = softmax_row(&scores).unwrap();
            let sum: f64 = base.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(base.iter().all(|v| *v >= 0.0));

            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let moved = softmax_row(&shifted).unwrap();
            for (a, b) in base.iter().zip(&moved) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn reduce_max_dominates_every_head(
            heads in proptest::collection::vec(0.0f64..1.0, 2 * 5..=2 * 5)
        ) {
            let reduced = reduce_heads(&heads, 2, HeadReducer::Max).unwrap();
            for h in 0..2 {
                for (r, v) in reduced.iter().zip(&heads[h * 5..(h + 1) * 5]) {
                    prop_assert!(r >= v);
                }
            }
        }

        #[test]
        fn rowsum_renormalization_is_idempotent(
            raw in proptest::collection::vec(1e-6f64..1.0, 2..48)
        ) {
            let n = raw.len();
            let mut row = AttentionRow::from_flat(1, n, raw).unwrap();
            renormalize_last_row(&mut row, RenormMode::RowSum).unwrap();
            let once = row.clone();
            renormalize_last_row(&mut row, RenormMode::RowSum).unwrap();
            for (a, b) in once.head(0).iter().zip(row.head(0)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!((row.head_sum(0) - 1.0).abs() < 1e-6);
        }

        #[test]
        fn span_mass_and_complement_sum_to_one(
            scores in finite_scores(),
            cut in 0usize..64
        ) {
            let row = softmax_row(&scores).unwrap();
            let cut = cut.min(row.len());
            let left = image_mass(&row, ImageSpan::new(0, cut).unwrap()).unwrap();
            let right = image_mass(&row, ImageSpan::new(cut, row.len()).unwrap()).unwrap();
            prop_assert!((left + right - 1.0).abs() < 1e-6);
        }
    }
}
