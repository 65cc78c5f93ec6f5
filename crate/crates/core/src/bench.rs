//! Decode overhead measurement: paired timed generation arms and direct
//! accounting of the intervention state.

use crate::decode::{generate, GenerateOptions, RecordLayers, Sampler, SequenceLayout};
use crate::error::{Error, Result};
use crate::model::Weights;
use crate::tarac::{TaracConfig, TaracHook};
use crate::transformer::prefill;

/// Outcome of [`run_bench`].
#[derive(Debug, Clone)]
pub struct BenchReport {
    pub repeats: usize,
    pub tokens_per_run: usize,
    /// Per-repeat decode time per output token, seconds.
    pub baseline_tpots: Vec<f64>,
    pub intervened_tpots: Vec<f64>,
    /// Medians of the per-repeat values.
    pub baseline_tpot: f64,
    pub intervened_tpot: f64,
    /// `intervened_tpot / baseline_tpot`.
    pub tpot_ratio: f64,
    /// Bytes the accumulation state actually holds after a run.
    pub state_bytes_measured: usize,
    /// Analytic accounting: intervened layers x span length x 2 vectors.
    pub state_bytes_expected: usize,
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Time `repeats` baseline and intervened generations of the same prompt
/// and report the decode TPOT ratio plus the intervention state footprint.
///
/// One warmup run per arm is excluded from timing; trace recording is off
/// in the timed arms. With `tarac` absent both arms run the baseline,
/// which calibrates measurement noise (ratio near 1).
pub fn run_bench(
    weights: &Weights,
    layout: &SequenceLayout,
    prompt: &[u32],
    tarac: Option<&TaracConfig>,
    max_new_tokens: usize,
    repeats: usize,
) -> Result<BenchReport> {
    if repeats < 1 {
        return Err(Error::InvalidConfig("repeats must be >= 1".into()));
    }
    if max_new_tokens == 0 {
        return Err(Error::InvalidConfig(
            "bench needs max_new_tokens >= 1".into(),
        ));
    }

    let options = GenerateOptions {
        max_new_tokens,
        sampler: Sampler::Greedy,
        record_layers: RecordLayers::None,
        record_profiles: false,
        run_id: "bench".into(),
    };

    let arm = |cfg: Option<&TaracConfig>| -> Result<Vec<f64>> {
        generate(weights, layout, prompt, cfg, &options)?; // warmup
        let mut tpots = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let result = generate(weights, layout, prompt, cfg, &options)?;
            tpots.push(result.decode_tpot().unwrap_or(0.0));
        }
        Ok(tpots)
    };

    let baseline_tpots = arm(None)?;
    let intervened_tpots = arm(tarac)?;
    let baseline_tpot = median(&baseline_tpots);
    let intervened_tpot = median(&intervened_tpots);

    // State accounting: drive the hook through the prompt forward once
    // (the per-layer vectors are allocated at the first capture and never
    // grow) and measure what it holds.
    let (state_bytes_measured, state_bytes_expected) = match tarac {
        Some(cfg) => {
            let mut hook = TaracHook::new(*cfg)?;
            prefill(weights, prompt, layout.image_span, &mut hook)?;
            let layers = cfg
                .layer_range
                .1
                .min(weights.config.n_layers)
                .saturating_sub(cfg.layer_range.0);
            let expected = layers * layout.n_image() * 2 * std::mem::size_of::<f64>();
            (hook.state().state_bytes(), expected)
        }
        None => (0, 0),
    };

    Ok(BenchReport {
        repeats,
        tokens_per_run: max_new_tokens,
        tpot_ratio: intervened_tpot / baseline_tpot,
        baseline_tpot,
        intervened_tpot,
        baseline_tpots,
        intervened_tpots,
        state_bytes_measured,
        state_bytes_expected,
    })
}
