//! Decode-time attention accumulation and injection.
//!
//! For each generated position, at every gated layer, in order: capture the
//! row's image-span attention reduced across heads, fold it into the
//! running per-layer accumulator, add the `beta`-scaled accumulator onto
//! every head's span slice, and renormalize the row. Everything else in the
//! forward pass is untouched.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::{
    reduce_heads, renormalize_last_row, AttentionRow, HeadReducer, ImageSpan, RenormMode,
};
use crate::error::{Error, Result};
use crate::transformer::AttentionHook;

/// How the accumulator folds in each newly captured vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateRule {
    /// Recursive accumulation: `acc = alpha * new + (1 - alpha) * acc`.
    /// History decays geometrically; entries stay bounded by the largest
    /// captured value.
    #[default]
    Ema,
    /// Two-step blend of only the last two captured vectors:
    /// `acc = alpha * new + (1 - alpha) * previous`.
    #[serde(alias = "two-step-literal")]
    Literal,
}

/// Intervention parameters for one generation session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaracConfig {
    /// Memory update factor in [0, 1]; weight of the newest capture.
    pub alpha: f64,
    /// Injection coefficient, >= 0; scales the accumulator added to the row.
    pub beta: f64,
    /// Zero-based half-open `[lo, hi)` range of intervened layers.
    pub layer_range: (usize, usize),
    pub head_reducer: HeadReducer,
    pub renorm_mode: RenormMode,
    pub update_rule: UpdateRule,
}

impl TaracConfig {
    pub fn new(alpha: f64, beta: f64, layer_range: (usize, usize)) -> Result<Self> {
        let config = Self {
            alpha,
            beta,
            layer_range,
            head_reducer: HeadReducer::default(),
            renorm_mode: RenormMode::default(),
            update_rule: UpdateRule::default(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "beta {} must be >= 0",
                self.beta
            )));
        }
        if self.beta > 2.0 {
            log::warn!(
                "beta {} is large; dominant injected attention tends toward repetitive output",
                self.beta
            );
        }
        if self.layer_range.0 > self.layer_range.1 {
            return Err(Error::InvalidConfig(format!(
                "layer range {}:{} has lo > hi",
                self.layer_range.0, self.layer_range.1
            )));
        }
        Ok(())
    }

    /// Validate against a concrete model depth (`hi <= n_layers`).
    pub fn validate_for(&self, n_layers: usize) -> Result<()> {
        self.validate()?;
        if self.layer_range.1 > n_layers {
            return Err(Error::InvalidConfig(format!(
                "layer range {}:{} exceeds model depth {}",
                self.layer_range.0, self.layer_range.1, n_layers
            )));
        }
        Ok(())
    }

    pub fn applies_to(&self, layer: usize) -> bool {
        layer >= self.layer_range.0 && layer < self.layer_range.1
    }

    pub fn layer_range_len(&self) -> usize {
        self.layer_range.1 - self.layer_range.0
    }
}

#[derive(Debug, Clone, Default)]
struct LayerState {
    /// Running accumulator over the image span.
    acc: Vec<f64>,
    /// Last captured vector, kept for the two-step rule.
    prev: Vec<f64>,
    /// Captures folded into this layer so far.
    t: u64,
}

/// Per-layer accumulation state owned by one generation session.
///
/// Only intervened layers hold vectors; untouched layers cost nothing.
#[derive(Debug, Clone, Default)]
pub struct AccumulatedAttention {
    layers: BTreeMap<usize, LayerState>,
}

impl AccumulatedAttention {
    pub fn new() -> Self {
        Self::default()
    }

    /// Generated positions folded in so far (0 after reset).
    pub fn step_count(&self) -> u64 {
        self.layers.values().map(|s| s.t).max().unwrap_or(0)
    }

    pub fn layer_step(&self, layer: usize) -> u64 {
        self.layers.get(&layer).map_or(0, |s| s.t)
    }

    pub fn layer_accumulator(&self, layer: usize) -> Option<&[f64]> {
        self.layers.get(&layer).map(|s| s.acc.as_slice())
    }

    pub fn intervened_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.keys().copied()
    }

    /// Bytes held by the per-layer vectors; the benchmark's accounting
    /// reads this.
    pub fn state_bytes(&self) -> usize {
        self.layers
            .values()
            .map(|s| (s.acc.len() + s.prev.len()) * std::mem::size_of::<f64>())
            .sum()
    }
}

/// Reduce the row's image-span slice across heads. The row is not modified.
pub fn capture_image_attention(
    row: &AttentionRow,
    span: ImageSpan,
    reducer: HeadReducer,
) -> Result<Vec<f64>> {
    span.check_within(row.n_positions())?;
    let mut slice = Vec::with_capacity(row.n_heads() * span.len());
    for h in 0..row.n_heads() {
        slice.extend_from_slice(&row.head(h)[span.start..span.end]);
    }
    reduce_heads(&slice, row.n_heads(), reducer)
}

/// Fold a captured vector into the layer's accumulator.
///
/// The first capture of a layer becomes the accumulator unchanged; later
/// captures blend per the update rule. The captured vector is always
/// recorded for the two-step rule, and the layer's step counter advances.
pub fn update_accumulated(
    state: &mut AccumulatedAttention,
    layer: usize,
    captured: Vec<f64>,
    alpha: f64,
    rule: UpdateRule,
) -> Result<()> {
    let entry = state.layers.entry(layer).or_default();
    if entry.t > 0 && entry.acc.len() != captured.len() {
        return Err(Error::DimensionMismatch(format!(
            "captured vector of {} entries vs accumulator of {}",
            captured.len(),
            entry.acc.len()
        )));
    }
    if entry.t == 0 {
        entry.acc = captured.clone();
    } else {
        let history: &[f64] = match rule {
            UpdateRule::Ema => &entry.acc,
            UpdateRule::Literal => &entry.prev,
        };
        entry.acc = captured
            .iter()
            .zip(history)
            .map(|(new, old)| alpha * new + (1.0 - alpha) * old)
            .collect();
    }
    entry.prev = captured;
    entry.t += 1;
    Ok(())
}

/// Add `beta * acc` onto every head's span slice. Positions outside the
/// span are untouched; no renormalization happens here. `beta = 0` leaves
/// the row bit-for-bit unchanged.
pub fn inject_accumulated(
    row: &mut AttentionRow,
    acc: &[f64],
    beta: f64,
    span: ImageSpan,
) -> Result<()> {
    span.check_within(row.n_positions())?;
    if acc.len() != span.len() {
        return Err(Error::DimensionMismatch(format!(
            "accumulator of {} entries vs span of {}",
            acc.len(),
            span.len()
        )));
    }
    if beta == 0.0 {
        return Ok(());
    }
    for h in 0..row.n_heads() {
        let slice = &mut row.head_mut(h)[span.start..span.end];
        for (w, a) in slice.iter_mut().zip(acc) {
            *w += beta * a;
        }
    }
    Ok(())
}

/// The full per-layer pipeline: gate, capture, update, inject, renormalize.
///
/// Layers outside the range and empty spans return the row unchanged with
/// the state untouched. Capture reads the raw row; injection uses the
/// accumulator that already includes this step's capture.
pub fn apply_layer_intervention(
    layer: usize,
    row: &mut AttentionRow,
    state: &mut AccumulatedAttention,
    config: &TaracConfig,
    span: ImageSpan,
) -> Result<()> {
    if !config.applies_to(layer) || span.is_empty() {
        return Ok(());
    }
    let captured = capture_image_attention(row, span, config.head_reducer)?;
    update_accumulated(state, layer, captured, config.alpha, config.update_rule)?;
    let acc = state
        .layers
        .get(&layer)
        .expect("layer state created by update")
        .acc
        .as_slice();
    inject_accumulated(row, acc, config.beta, span)?;
    renormalize_last_row(row, config.renorm_mode)
}

/// Drop all per-layer vectors and counters.
pub fn reset(state: &mut AccumulatedAttention) {
    state.layers.clear();
}

/// Attention hook wiring the intervention into a generation session.
pub struct TaracHook {
    config: TaracConfig,
    state: AccumulatedAttention,
}

impl TaracHook {
    pub fn new(config: TaracConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: AccumulatedAttention::new(),
        })
    }

    pub fn config(&self) -> &TaracConfig {
        &self.config
    }

    pub fn state(&self) -> &AccumulatedAttention {
        &self.state
    }

    pub fn reset(&mut self) {
        reset(&mut self.state);
    }
}

impl AttentionHook for TaracHook {
    fn on_attention_row(
        &mut self,
        layer: usize,
        row: &mut AttentionRow,
        span: ImageSpan,
        _step: usize,
    ) -> Result<()> {
        apply_layer_intervention(layer, row, &mut self.state, &self.config, span)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::image_mass;
    use proptest::prelude::*;

    fn cfg(alpha: f64, beta: f64, range: (usize, usize)) -> TaracConfig {
        TaracConfig::new(alpha, beta, range).unwrap()
    }

    #[test]
    fn capture_reduces_across_heads() {
        let row =
            AttentionRow::from_heads(vec![vec![0.1, 0.2, 0.3], vec![0.3, 0.1, 0.2]]).unwrap();
        let span = ImageSpan::new(0, 3).unwrap();
        let captured = capture_image_attention(&row, span, HeadReducer::Max).unwrap();
        assert_eq!(captured, vec![0.3, 0.2, 0.3]);
    }

    #[test]
    fn capture_empty_span_is_empty() {
        let row = AttentionRow::from_heads(vec![vec![0.5, 0.5]]).unwrap();
        let captured =
            capture_image_attention(&row, ImageSpan::empty(), HeadReducer::Max).unwrap();
        assert!(captured.is_empty());
    }

    #[test]
    fn capture_does_not_modify_row_and_matches_brute_force() {
        let heads = vec![
            vec![0.05, 0.30, 0.10, 0.55],
            vec![0.20, 0.25, 0.25, 0.30],
            vec![0.40, 0.10, 0.15, 0.35],
            vec![0.15, 0.45, 0.05, 0.35],
        ];
        let row = AttentionRow::from_heads(heads.clone()).unwrap();
        let before = row.clone();
        let span = ImageSpan::new(1, 4).unwrap();
        let captured = capture_image_attention(&row, span, HeadReducer::Max).unwrap();
        assert_eq!(row, before);
        for (i, pos) in (span.start..span.end).enumerate() {
            let want = heads.iter().map(|h| h[pos]).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(captured[i], want);
        }
    }

    #[test]
    fn capture_rejects_oversized_span() {
        let row = AttentionRow::from_heads(vec![vec![1.0, 0.0]]).unwrap();
        assert!(capture_image_attention(&row, ImageSpan::new(0, 3).unwrap(), HeadReducer::Max)
            .is_err());
    }

    #[test]
    fn first_update_records_capture_directly() {
        let mut state = AccumulatedAttention::new();
        update_accumulated(&mut state, 0, vec![0.2, 0.4], 0.3, UpdateRule::Ema).unwrap();
        assert_eq!(state.layer_accumulator(0).unwrap(), &[0.2, 0.4]);
        assert_eq!(state.layer_step(0), 1);
    }

    #[test]
    fn alpha_one_ignores_history() {
        for rule in [UpdateRule::Ema, UpdateRule::Literal] {
            let mut state = AccumulatedAttention::new();
            update_accumulated(&mut state, 2, vec![0.9, 0.1], 1.0, rule).unwrap();
            update_accumulated(&mut state, 2, vec![0.3, 0.6], 1.0, rule).unwrap();
            assert_eq!(state.layer_accumulator(2).unwrap(), &[0.3, 0.6]);
        }
    }

    #[test]
    fn ema_blends_accumulator() {
        let mut state = AccumulatedAttention::new();
        update_accumulated(&mut state, 0, vec![0.4, 0.0], 0.5, UpdateRule::Ema).unwrap();
        update_accumulated(&mut state, 0, vec![0.2, 0.4], 0.5, UpdateRule::Ema).unwrap();
        let acc = state.layer_accumulator(0).unwrap();
        assert!((acc[0] - 0.3).abs() < 1e-12);
        assert!((acc[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn literal_rule_blends_last_two_captures() {
        let mut state = AccumulatedAttention::new();
        for captured in [vec![1.0], vec![0.0], vec![0.0]] {
            update_accumulated(&mut state, 0, captured, 0.5, UpdateRule::Literal).unwrap();
        }
        // Third step blends captures 2 and 3 (both zero); the first capture
        // no longer contributes, unlike under the recursive rule.
        assert_eq!(state.layer_accumulator(0).unwrap(), &[0.0]);

        let mut ema = AccumulatedAttention::new();
        for captured in [vec![1.0], vec![0.0], vec![0.0]] {
            update_accumulated(&mut ema, 0, captured, 0.5, UpdateRule::Ema).unwrap();
        }
        assert!((ema.layer_accumulator(0).unwrap()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn update_rejects_length_changes() {
        let mut state = AccumulatedAttention::new();
        update_accumulated(&mut state, 0, vec![0.1, 0.2], 0.5, UpdateRule::Ema).unwrap();
        assert!(update_accumulated(&mut state, 0, vec![0.1], 0.5, UpdateRule::Ema).is_err());
    }

    #[test]
    fn inject_zero_beta_is_bitwise_identity() {
        let mut row =
            AttentionRow::from_heads(vec![vec![0.1, 0.2, 0.7], vec![0.3, 0.3, 0.4]]).unwrap();
        let before = row.clone();
        inject_accumulated(&mut row, &[5.0, 5.0], 0.0, ImageSpan::new(0, 2).unwrap()).unwrap();
        assert_eq!(row, before);
    }

    #[test]
    fn inject_broadcasts_to_every_head() {
        let mut row =
            AttentionRow::from_heads(vec![vec![0.1, 0.2, 0.7], vec![0.0, 0.3, 0.7]]).unwrap();
        inject_accumulated(&mut row, &[0.1, 0.1], 1.0, ImageSpan::new(0, 2).unwrap()).unwrap();
        let h0: Vec<f64> = row.head(0).to_vec();
        let h1: Vec<f64> = row.head(1).to_vec();
        for (got, want) in h0.iter().zip([0.2, 0.3, 0.7]) {
            assert!((got - want).abs() < 1e-12);
        }
        for (got, want) in h1.iter().zip([0.1, 0.4, 0.7]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn inject_rejects_length_mismatch() {
        let mut row = AttentionRow::from_heads(vec![vec![0.5, 0.5]]).unwrap();
        assert!(
            inject_accumulated(&mut row, &[0.1], 1.0, ImageSpan::new(0, 2).unwrap()).is_err()
        );
    }

    #[test]
    fn pipeline_hand_example() {
        // H=1, row [0.3, 0.2, 0.4, 0.1], span [0, 2), first step, beta 0.5:
        // captured = acc = [0.3, 0.2]; injected [0.45, 0.3, 0.4, 0.1];
        // row sum 1.25; renormalized [0.36, 0.24, 0.32, 0.08].
        let mut row = AttentionRow::from_heads(vec![vec![0.3, 0.2, 0.4, 0.1]]).unwrap();
        let mut state = AccumulatedAttention::new();
        let config = cfg(0.7, 0.5, (0, 1));
        let span = ImageSpan::new(0, 2).unwrap();
        apply_layer_intervention(0, &mut row, &mut state, &config, span).unwrap();
        for (got, want) in row.head(0).iter().zip([0.36, 0.24, 0.32, 0.08]) {
            assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
        }
    }

    #[test]
    fn out_of_range_layer_is_untouched() {
        let mut row = AttentionRow::from_heads(vec![vec![0.3, 0.7]]).unwrap();
        let before = row.clone();
        let mut state = AccumulatedAttention::new();
        let config = cfg(0.5, 0.5, (1, 3));
        apply_layer_intervention(0, &mut row, &mut state, &config, ImageSpan::new(0, 1).unwrap())
            .unwrap();
        assert_eq!(row, before);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn empty_span_disables_intervention() {
        let mut row = AttentionRow::from_heads(vec![vec![0.3, 0.7]]).unwrap();
        let before = row.clone();
        let mut state = AccumulatedAttention::new();
        let config = cfg(0.5, 0.5, (0, 1));
        apply_layer_intervention(0, &mut row, &mut state, &config, ImageSpan::empty()).unwrap();
        assert_eq!(row, before);
        assert_eq!(state.step_count(), 0);
        assert_eq!(state.state_bytes(), 0);
    }

    #[test]
    fn zero_beta_advances_state_but_not_row() {
        let mut row =
            AttentionRow::from_heads(vec![vec![0.25, 0.25, 0.5], vec![0.1, 0.6, 0.3]]).unwrap();
        let before = row.clone();
        let mut state = AccumulatedAttention::new();
        let config = cfg(0.5, 0.0, (0, 4));
        let span = ImageSpan::new(0, 2).unwrap();
        apply_layer_intervention(1, &mut row, &mut state, &config, span).unwrap();
        for h in 0..row.n_heads() {
            for (a, b) in row.head(h).iter().zip(before.head(h)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(state.layer_step(1), 1);
        assert_eq!(state.layer_accumulator(1).unwrap(), &[0.25, 0.6]);
    }

    #[test]
    fn reset_clears_and_is_idempotent() {
        let mut state = AccumulatedAttention::new();
        update_accumulated(&mut state, 3, vec![0.5], 0.5, UpdateRule::Ema).unwrap();
        reset(&mut state);
        assert_eq!(state.step_count(), 0);
        assert_eq!(state.state_bytes(), 0);
        reset(&mut state);
        assert_eq!(state.step_count(), 0);
        // First update after reset takes the t=1 branch again.
        update_accumulated(&mut state, 3, vec![0.9], 0.1, UpdateRule::Ema).unwrap();
        assert_eq!(state.layer_accumulator(3).unwrap(), &[0.9]);
    }

    #[test]
    fn state_isolation_across_layers() {
        let mut state = AccumulatedAttention::new();
        update_accumulated(&mut state, 2, vec![0.1], 0.5, UpdateRule::Ema).unwrap();
        update_accumulated(&mut state, 5, vec![0.9], 0.5, UpdateRule::Ema).unwrap();
        assert_eq!(state.layer_accumulator(2).unwrap(), &[0.1]);
        assert_eq!(state.layer_accumulator(5).unwrap(), &[0.9]);
        assert_eq!(state.layer_step(2), 1);
        update_accumulated(&mut state, 5, vec![0.5], 0.5, UpdateRule::Ema).unwrap();
        assert_eq!(state.layer_accumulator(2).unwrap(), &[0.1]);
        assert_eq!(state.layer_step(2), 1);
        assert_eq!(state.layer_step(5), 2);
    }

    #[test]
    fn config_validation() {
        assert!(TaracConfig::new(-0.1, 0.5, (0, 1)).is_err());
        assert!(TaracConfig::new(1.1, 0.5, (0, 1)).is_err());
        assert!(TaracConfig::new(0.5, -0.5, (0, 1)).is_err());
        assert!(TaracConfig::new(0.5, 0.5, (3, 1)).is_err());
        assert!(cfg(0.5, 0.5, (0, 4)).validate_for(3).is_err());
        assert!(cfg(0.5, 0.5, (0, 3)).validate_for(3).is_ok());
    }

    proptest! {
        #[test]
        fn injection_matches_elementwise_oracle(
            base in proptest::collection::vec(1e-4f64..1.0, 6..=6),
            acc in proptest::collection::vec(0.0f64..1.0, 2..=2),
            beta in 0.0f64..3.0
        ) {
            let heads = vec![base[..3].to_vec(), base[3..].to_vec()];
            let mut row = AttentionRow::from_heads(heads.clone()).unwrap();
            let span = ImageSpan::new(1, 3).unwrap();
            inject_accumulated(&mut row, &acc, beta, span).unwrap();
            for h in 0..2 {
                for p in 0..3 {
                    let want = if p >= 1 { heads[h][p] + beta * acc[p - 1] } else { heads[h][p] };
                    prop_assert!((row.head(h)[p] - want).abs() < 1e-7);
                }
            }
        }

        #[test]
        fn ema_stays_within_capture_bounds(
            captures in proptest::collection::vec(
                proptest::collection::vec(0.0f64..1.0, 3..=3), 1..20),
            alpha in 0.0f64..=1.0
        ) {
            let mut state = AccumulatedAttention::new();
            let mut max_inf = 0.0f64;
            for c in &captures {
                let inf = c.iter().cloned().fold(0.0, f64::max);
                max_inf = max_inf.max(inf);
                update_accumulated(&mut state, 0, c.clone(), alpha, UpdateRule::Ema).unwrap();
            }
            for v in state.layer_accumulator(0).unwrap() {
                prop_assert!(*v <= max_inf + 1e-12);
                prop_assert!(*v >= 0.0);
            }
        }

        #[test]
        fn ema_matches_explicit_expansion(
            captures in proptest::collection::vec(0.0f64..1.0, 1..32),
            alpha in 0.0f64..=1.0
        ) {
            let mut state = AccumulatedAttention::new();
            for c in &captures {
                update_accumulated(&mut state, 0, vec![*c], alpha, UpdateRule::Ema).unwrap();
            }
            let t = captures.len();
            // acc_t = alpha * sum_{k=2..t} (1-alpha)^(t-k) a_k + (1-alpha)^(t-1) a_1
            let mut expanded = (1.0 - alpha).powi(t as i32 - 1) * captures[0];
            for (k, c) in captures.iter().enumerate().skip(1) {
                expanded += alpha * (1.0 - alpha).powi((t - 1 - k) as i32) * c;
            }
            let got = state.layer_accumulator(0).unwrap()[0];
            prop_assert!((got - expanded).abs() < 1e-10, "got {}, expanded {}", got, expanded);
        }

        #[test]
        fn rowsum_uplift_matches_closed_form(
            scores in proptest::collection::vec(-2.0f64..2.0, 8..=8),
            acc in proptest::collection::vec(0.0f64..0.5, 3..=3),
            beta in 0.0f64..2.0
        ) {
            // Pre-injection head row with image mass m and s = sum(acc):
            // post-pipeline image mass must be (m + beta*s) / (1 + beta*s).
            let probs = crate::attention::softmax_row(&scores).unwrap();
            let span = ImageSpan::new(2, 5).unwrap();
            let m = image_mass(&probs, span).unwrap();
            let s: f64 = acc.iter().sum();

            let mut row = AttentionRow::from_heads(vec![probs]).unwrap();
            inject_accumulated(&mut row, &acc, beta, span).unwrap();
            renormalize_last_row(&mut row, RenormMode::RowSum).unwrap();
            let post = image_mass(row.head(0), span).unwrap();
            let want = (m + beta * s) / (1.0 + beta * s);
            prop_assert!((post - want).abs() < 1e-6);
            prop_assert!(post >= m - 1e-12);
            if beta * s > 1e-9 && m < 1.0 - 1e-9 {
                prop_assert!(post > m);
            }
        }
    }
}
