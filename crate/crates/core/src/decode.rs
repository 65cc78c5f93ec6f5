//! Autoregressive generation sessions: prompt assembly around an image
//! span, greedy/temperature decoding with per-token timing, intervention
//! wiring, trace recording, and paired baseline-vs-intervened runs.

use serde::{Deserialize, Serialize};

use crate::attention::{softmax_row, AttentionRow, ImageSpan};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Weights};
use crate::rng::SplitMix64;
use crate::tarac::{TaracConfig, TaracHook};
use crate::trace::{TraceRecord, TraceHeader};
use crate::transformer::{forward_token, prefill, AttentionHook, IdentityHook};

// Substream tags far above any per-tensor init stream.
const PROMPT_STREAM: u64 = 1 << 40;
const SAMPLER_STREAM: u64 = (1 << 40) + 1;

/// Where the image span sits inside the prompt and how long the prompt is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub image_span: ImageSpan,
    /// Count of non-image prompt tokens (leading offset included).
    pub n_prompt: usize,
}

impl SequenceLayout {
    pub fn n_image(&self) -> usize {
        self.image_span.len()
    }

    pub fn prompt_len(&self) -> usize {
        self.n_image() + self.n_prompt
    }

    /// Total positions visible when generating token `step` (1-based).
    pub fn total_at_step(&self, step: usize) -> usize {
        self.n_image() + self.n_prompt + step - 1
    }
}

/// Deterministically assemble a prompt: `image_offset` leading text tokens,
/// the image ids, then the remaining text tokens.
///
/// Text ids are drawn from `[0, image_token_base)` (end token excluded)
/// using the run seed's prompt substream; image ids walk the reserved
/// range.
pub fn build_prompt(
    config: &ModelConfig,
    n_image: usize,
    n_prompt: usize,
    image_offset: usize,
    seed: u64,
) -> Result<(Vec<u32>, SequenceLayout)> {
    if image_offset > n_prompt {
        return Err(Error::InvalidConfig(format!(
            "image_offset {image_offset} exceeds n_prompt_tokens {n_prompt}"
        )));
    }
    if n_image + n_prompt == 0 {
        return Err(Error::EmptyPrompt);
    }
    let base = config.image_token_base;
    if n_prompt > 0 && (base < 2 || (base == 2 && config.eos_token_id < 2)) {
        return Err(Error::InvalidConfig(
            "text id range too small to avoid the end token".into(),
        ));
    }
    if n_image > 0 && (base as usize) >= config.vocab_size {
        return Err(Error::InvalidConfig(
            "no reserved image id range in the vocabulary".into(),
        ));
    }

    let mut rng = SplitMix64::stream(seed, PROMPT_STREAM);
    let mut text_id = || {
        let mut id = rng.next_below(u64::from(base)) as u32;
        if id == config.eos_token_id {
            id = (id + 1) % base;
        }
        id
    };

    let image_range = config.vocab_size as u32 - base;
    let mut tokens = Vec::with_capacity(n_image + n_prompt);
    for _ in 0..image_offset {
        tokens.push(text_id());
    }
    for k in 0..n_image {
        tokens.push(base + (k as u32 % image_range));
    }
    for _ in 0..(n_prompt - image_offset) {
        tokens.push(text_id());
    }

    let layout = SequenceLayout {
        image_span: ImageSpan::new(image_offset, image_offset + n_image)?,
        n_prompt,
    };
    Ok((tokens, layout))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Sampler {
    Greedy,
    /// Softmax sampling at temperature `tau` from a dedicated substream of
    /// `seed` (independent of weight init).
    Temperature { tau: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    MaxNewTokens,
    EndToken,
}

/// Which layers feed the trace during generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordLayers {
    /// No recording (the benchmark's timed arms).
    None,
    /// Intervened layers only; everything when no intervention is active.
    Default,
    All,
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub max_new_tokens: usize,
    pub sampler: Sampler,
    pub record_layers: RecordLayers,
    /// Also record per-image-token attention vectors.
    pub record_profiles: bool,
    pub run_id: String,
}

impl GenerateOptions {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            max_new_tokens,
            sampler: Sampler::Greedy,
            record_layers: RecordLayers::Default,
            record_profiles: false,
            run_id: "run".into(),
        }
    }
}

/// Everything one generation run produced.
#[derive(Debug, Clone)]
pub struct GenerationResult {
    pub tokens: Vec<u32>,
    pub records: Vec<TraceRecord>,
    /// Wall-clock seconds per generated token. The first entry covers the
    /// prompt forward pass that yields token one.
    pub timings: Vec<f64>,
    pub termination: Termination,
    /// Mean over recorded rows of (post-intervention - pre-intervention)
    /// image mass. Zero when no intervention ran; rounding dust away from
    /// zero when beta = 0 (renormalization still divides by a sum of 1).
    pub mean_injection_uplift: f64,
}

impl GenerationResult {
    /// Mean over all recorded (step, layer) masses.
    pub fn mean_image_mass(&self) -> Option<f64> {
        if self.records.is_empty() {
            return None;
        }
        Some(self.records.iter().map(|r| r.mass).sum::<f64>() / self.records.len() as f64)
    }

    /// Decode-phase time per output token: mean of the per-token timings
    /// excluding the prefill-bound first token when possible.
    pub fn decode_tpot(&self) -> Option<f64> {
        match self.timings.len() {
            0 => None,
            1 => Some(self.timings[0]),
            n => Some(self.timings[1..].iter().sum::<f64>() / (n - 1) as f64),
        }
    }

    pub fn trace_header(&self, tarac: Option<&TaracConfig>, seed: u64, layout: &SequenceLayout) -> TraceHeader {
        match tarac {
            Some(cfg) => TraceHeader {
                alpha: cfg.alpha,
                beta: cfg.beta,
                layers: format!("{}:{}", cfg.layer_range.0, cfg.layer_range.1),
                seed,
                n_image: layout.n_image(),
                n_prompt: layout.n_prompt,
            },
            None => TraceHeader::disabled(seed, layout.n_image(), layout.n_prompt),
        }
    }
}

#[cfg(not(target_arch = "wasm32"))]
fn now_seconds() -> f64 {
    use std::sync::OnceLock;
    use std::time::Instant;
    static ORIGIN: OnceLock<Instant> = OnceLock::new();
    ORIGIN.get_or_init(Instant::now).elapsed().as_secs_f64()
}

#[cfg(target_arch = "wasm32")]
fn now_seconds() -> f64 {
    js_sys::Date::now() / 1000.0
}

/// Index of the maximum logit; ties break toward the lowest index.
pub fn greedy_pick(logits: &[f64]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in logits.iter().enumerate() {
        if v == f64::NEG_INFINITY {
            continue;
        }
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i).ok_or(Error::NoSelectableLogit)
}

fn sample_token(logits: &[f64], sampler: &Sampler, rng: &mut Option<SplitMix64>) -> Result<u32> {
    match sampler {
        Sampler::Greedy => Ok(greedy_pick(logits)? as u32),
        Sampler::Temperature { tau, .. } => {
            let scaled: Vec<f64> = logits.iter().map(|l| l / tau).collect();
            let probs = softmax_row(&scaled)?;
            let rng = rng.as_mut().expect("sampler rng initialized");
            let draw = rng.next_f64();
            let mut cumulative = 0.0;
            for (i, p) in probs.iter().enumerate() {
                cumulative += p;
                if draw < cumulative {
                    return Ok(i as u32);
                }
            }
            Ok((probs.len() - 1) as u32)
        }
    }
}

struct Recorder {
    layers: RecordLayers,
    range: Option<(usize, usize)>,
    profiles: bool,
    run_id: String,
    span: ImageSpan,
    records: Vec<TraceRecord>,
    uplift_sum: f64,
    uplift_count: usize,
}

impl Recorder {
    fn wants(&self, layer: usize) -> bool {
        match self.layers {
            RecordLayers::None => false,
            RecordLayers::All => true,
            RecordLayers::Default => match self.range {
                Some((lo, hi)) => layer >= lo && layer < hi,
                None => true,
            },
        }
    }

    /// Record post-hook rows; `pre_masses` pairs each layer with the mass
    /// the probe saw before the hook touched the row.
    fn observe(
        &mut self,
        step: usize,
        rows: &[AttentionRow],
        pre_masses: &[(usize, f64)],
    ) -> Result<()> {
        if matches!(self.layers, RecordLayers::None) || self.span.is_empty() {
            return Ok(());
        }
        for (layer, row) in rows.iter().enumerate() {
            if !self.wants(layer) {
                continue;
            }
            let mass = row.mean_image_mass(self.span)?;
            if let Some((_, pre)) = pre_masses.iter().find(|(l, _)| *l == layer) {
                self.uplift_sum += mass - pre;
                self.uplift_count += 1;
            }
            let profile = if self.profiles {
                Some(row.image_profile(self.span)?)
            } else {
                None
            };
            self.records.push(TraceRecord {
                step,
                layer,
                mass,
                profile,
                run_id: self.run_id.clone(),
            });
        }
        Ok(())
    }

    fn mean_uplift(&self) -> f64 {
        if self.uplift_count == 0 {
            0.0
        } else {
            self.uplift_sum / self.uplift_count as f64
        }
    }
}

/// Captures each row's image mass before delegating to the wrapped hook,
/// so runs can report how much mass the intervention itself moved.
struct PreMassProbe<'a> {
    inner: &'a mut dyn AttentionHook,
    enabled: bool,
    pre: Vec<(usize, f64)>,
}

impl AttentionHook for PreMassProbe<'_> {
    fn on_attention_row(
        &mut self,
        layer: usize,
        row: &mut AttentionRow,
        span: ImageSpan,
        step: usize,
    ) -> Result<()> {
        if self.enabled && !span.is_empty() {
            self.pre.push((layer, row.mean_image_mass(span)?));
        }
        self.inner.on_attention_row(layer, row, span, step)
    }
}

/// Run one generation session.
///
/// When `tarac` is present a fresh intervention hook is installed; its
/// state lives and dies with this call. Per-step, per-layer image masses
/// are recorded per `options.record_layers`.
pub fn generate(
    weights: &Weights,
    layout: &SequenceLayout,
    prompt: &[u32],
    tarac: Option<&TaracConfig>,
    options: &GenerateOptions,
) -> Result<GenerationResult> {
    let config = &weights.config;
    if prompt.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    if prompt.len() != layout.prompt_len() {
        return Err(Error::InvalidConfig(format!(
            "prompt of {} tokens does not match layout expecting {}",
            prompt.len(),
            layout.prompt_len()
        )));
    }
    layout.image_span.check_within(prompt.len())?;
    if let Some(cfg) = tarac {
        cfg.validate_for(config.n_layers)?;
    }
    let needed = layout.prompt_len() + options.max_new_tokens.saturating_sub(1);
    if needed > config.max_seq_len {
        return Err(Error::SequenceOverflow {
            requested: needed,
            max: config.max_seq_len,
        });
    }

    let mut result = GenerationResult {
        tokens: Vec::new(),
        records: Vec::new(),
        timings: Vec::new(),
        termination: Termination::MaxNewTokens,
        mean_injection_uplift: 0.0,
    };
    if options.max_new_tokens == 0 {
        return Ok(result);
    }

    let mut tarac_hook = match tarac {
        Some(cfg) => Some(TaracHook::new(*cfg)?),
        None => None,
    };
    let mut identity = IdentityHook;
    let probe_enabled =
        tarac.is_some() && !matches!(options.record_layers, RecordLayers::None);
    let inner: &mut dyn AttentionHook = match tarac_hook.as_mut() {
        Some(h) => h,
        None => &mut identity,
    };
    let mut probe = PreMassProbe {
        inner,
        enabled: probe_enabled,
        pre: Vec::new(),
    };
    let hook: &mut PreMassProbe = &mut probe;

    let mut recorder = Recorder {
        layers: options.record_layers,
        range: tarac.map(|c| c.layer_range),
        profiles: options.record_profiles,
        run_id: options.run_id.clone(),
        span: layout.image_span,
        records: Vec::new(),
        uplift_sum: 0.0,
        uplift_count: 0,
    };
    let mut sampler_rng = match options.sampler {
        Sampler::Temperature { tau, seed } => {
            if !(tau > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "temperature {tau} must be > 0"
                )));
            }
            Some(SplitMix64::stream(seed, SAMPLER_STREAM))
        }
        Sampler::Greedy => None,
    };

    let span = layout.image_span;
    let start = now_seconds();
    let (mut cache, logits, rows) = prefill(weights, prompt, span, hook)?;
    recorder.observe(1, &rows, &hook.pre)?;
    hook.pre.clear();
    let mut token = sample_token(&logits, &options.sampler, &mut sampler_rng)?;
    result.timings.push(now_seconds() - start);
    result.tokens.push(token);

    if token == config.eos_token_id {
        result.termination = Termination::EndToken;
    } else {
        for step in 2..=options.max_new_tokens {
            let start = now_seconds();
            let (logits, rows) = forward_token(weights, &mut cache, token, span, step, hook)?;
            recorder.observe(step, &rows, &hook.pre)?;
            hook.pre.clear();
            token = sample_token(&logits, &options.sampler, &mut sampler_rng)?;
            result.timings.push(now_seconds() - start);
            result.tokens.push(token);
            if token == config.eos_token_id {
                result.termination = Termination::EndToken;
                break;
            }
        }
    }

    result.mean_injection_uplift = recorder.mean_uplift();
    result.records = recorder.records;
    Ok(result)
}

/// Paired baseline and intervened runs plus their divergence summary.
#[derive(Debug, Clone)]
pub struct CompareReport {
    pub baseline: GenerationResult,
    pub intervened: GenerationResult,
    /// 1-based step of the first differing token, when any.
    pub first_divergence: Option<usize>,
    pub baseline_mean_mass: f64,
    pub intervened_mean_mass: f64,
    /// `intervened_mean_mass - baseline_mean_mass`.
    pub mean_uplift: f64,
}

/// Run the same prompt with and without the intervention.
///
/// Both runs share the sampler seed; the baseline records the intervened
/// layer range so masses stay comparable.
pub fn compare_runs(
    weights: &Weights,
    layout: &SequenceLayout,
    prompt: &[u32],
    tarac: &TaracConfig,
    options: &GenerateOptions,
) -> Result<CompareReport> {
    let mut baseline_options = options.clone();
    baseline_options.run_id = "baseline".into();
    // Matching the record set requires the range gate even without a hook.
    let mut baseline = generate(weights, layout, prompt, None, &baseline_options)?;
    baseline
        .records
        .retain(|r| r.layer >= tarac.layer_range.0 && r.layer < tarac.layer_range.1);

    let mut intervened_options = options.clone();
    intervened_options.run_id = "tarac".into();
    let intervened = generate(weights, layout, prompt, Some(tarac), &intervened_options)?;

    let first_divergence = baseline
        .tokens
        .iter()
        .zip(&intervened.tokens)
        .position(|(a, b)| a != b)
        .map(|i| i + 1)
        .or_else(|| {
            (baseline.tokens.len() != intervened.tokens.len())
                .then(|| baseline.tokens.len().min(intervened.tokens.len()) + 1)
        });

    let baseline_mean_mass = baseline.mean_image_mass().unwrap_or(0.0);
    let intervened_mean_mass = intervened.mean_image_mass().unwrap_or(0.0);
    Ok(CompareReport {
        mean_uplift: intervened_mean_mass - baseline_mean_mass,
        baseline,
        intervened,
        first_divergence,
        baseline_mean_mass,
        intervened_mean_mass,
    })
}
