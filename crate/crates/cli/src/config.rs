//! Run configuration: TOML file with flat dotted keys, named-flag and
//! generic `--set key=value` overrides, and session materialization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tarac_core::decode::{build_prompt, Sampler, SequenceLayout};
use tarac_core::model::{init_weights, load_weights, ModelConfig, Weights};
use tarac_core::tarac::TaracConfig;
use tarac_core::{HeadReducer, RenormMode, UpdateRule};

/// Errors split by exit code: 2 for configuration, 3 for runtime.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(msg) | CliError::Runtime(msg) => msg,
        }
    }
}

pub fn config_err(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {msg}"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Load weights from this file instead of seed initialization.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Weight-initialization seed; excludes `weights`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub eos_token_id: u32,
    pub image_token_base: u32,
}

impl Default for ModelSection {
    fn default() -> Self {
        let reference = ModelConfig::reference(0);
        Self {
            weights: None,
            n_layers: reference.n_layers,
            n_heads: reference.n_heads,
            d_model: reference.d_model,
            d_head: reference.d_head,
            vocab_size: reference.vocab_size,
            max_seq_len: reference.max_seq_len,
            seed: Some(42),
            eos_token_id: reference.eos_token_id,
            image_token_base: reference.image_token_base,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutSection {
    pub n_image_tokens: usize,
    pub n_prompt_tokens: usize,
    /// Non-image tokens placed before the image span (e.g. 1 for a
    /// begin-of-sequence token).
    pub image_offset: usize,
}

impl Default for LayoutSection {
    fn default() -> Self {
        Self {
            n_image_tokens: 64,
            n_prompt_tokens: 16,
            image_offset: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaracSection {
    pub enabled: bool,
    pub alpha: f64,
    pub beta: f64,
    /// Zero-based half-open range, `"lo:hi"`.
    pub layers: String,
    pub head_reducer: HeadReducer,
    pub renorm_mode: RenormMode,
    pub update_rule: UpdateRule,
}

impl Default for TaracSection {
    fn default() -> Self {
        Self {
            enabled: true,
            alpha: 0.5,
            beta: 0.5,
            layers: "2:6".into(),
            head_reducer: HeadReducer::Max,
            renorm_mode: RenormMode::RowSum,
            update_rule: UpdateRule::Ema,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub max_new_tokens: usize,
    /// `"greedy"` or `"temperature"`.
    pub sampler: String,
    pub temperature: f64,
    /// Run seed: prompt assembly and temperature sampling.
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_out: Option<PathBuf>,
    /// Record every layer's image mass instead of intervened layers only.
    pub record_all_layers: bool,
    /// Also record per-image-token attention vectors into the trace.
    pub record_profiles: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            max_new_tokens: 64,
            sampler: "greedy".into(),
            temperature: 1.0,
            seed: 1,
            trace_out: None,
            record_all_layers: false,
            record_profiles: false,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub layout: LayoutSection,
    pub tarac: TaracSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(&format!("--config {}", path.display()), e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Parse the `"lo:hi"` layer range.
    pub fn layer_range(&self) -> Result<(usize, usize), CliError> {
        parse_layer_range(&self.tarac.layers).map_err(|e| config_err("tarac.layers", e))
    }

    pub fn sampler(&self) -> Result<Sampler, CliError> {
        match self.run.sampler.as_str() {
            "greedy" => Ok(Sampler::Greedy),
            "temperature" => Ok(Sampler::Temperature {
                tau: self.run.temperature,
                seed: self.run.seed,
            }),
            other => Err(config_err(
                "run.sampler",
                format!("expected \"greedy\" or \"temperature\", got {other:?}"),
            )),
        }
    }

    pub fn tarac_config(&self) -> Result<Option<TaracConfig>, CliError> {
        if !self.tarac.enabled {
            return Ok(None);
        }
        let config = TaracConfig {
            alpha: self.tarac.alpha,
            beta: self.tarac.beta,
            layer_range: self.layer_range()?,
            head_reducer: self.tarac.head_reducer,
            renorm_mode: self.tarac.renorm_mode,
            update_rule: self.tarac.update_rule,
        };
        config
            .validate()
            .map_err(|e| config_err("tarac", e))?;
        Ok(Some(config))
    }

    /// The inline model section as a core config (seed-init path).
    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let seed = self
            .model
            .seed
            .ok_or_else(|| config_err("model.seed", "required when model.weights is unset"))?;
        let config = ModelConfig {
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            d_model: self.model.d_model,
            d_head: self.model.d_head,
            vocab_size: self.model.vocab_size,
            max_seq_len: self.model.max_seq_len,
            seed,
            eos_token_id: self.model.eos_token_id,
            image_token_base: self.model.image_token_base,
        };
        config.validate().map_err(|e| config_err("model", e))?;
        Ok(config)
    }

    /// Initialize or load the weights per the exactly-one rule.
    pub fn materialize_weights(&self) -> Result<Weights, CliError> {
        match (&self.model.weights, self.model.seed) {
            (Some(_), Some(_)) => Err(config_err(
                "model.weights",
                "set either model.weights or model.seed, not both",
            )),
            (None, None) => Err(config_err(
                "model.seed",
                "set exactly one of model.weights or model.seed",
            )),
            (Some(path), None) => {
                load_weights(path).map_err(|e| config_err("model.weights", e))
            }
            (None, Some(_)) => {
                let config = self.model_config()?;
                init_weights(&config).map_err(|e| config_err("model", e))
            }
        }
    }

    /// Weights, prompt, and layout for one run.
    pub fn build_session(&self) -> Result<(Weights, Vec<u32>, SequenceLayout), CliError> {
        let weights = self.materialize_weights()?;
        let (prompt, layout) = build_prompt(
            &weights.config,
            self.layout.n_image_tokens,
            self.layout.n_prompt_tokens,
            self.layout.image_offset,
            self.run.seed,
        )
        .map_err(|e| config_err("layout", e))?;
        Ok((weights, prompt, layout))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_default()
    }
}

pub fn parse_layer_range(text: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = text
        .split_once(':')
        .ok_or_else(|| format!("expected \"lo:hi\", got {text:?}"))?;
    let lo: usize = lo
        .trim()
        .parse()
        .map_err(|_| format!("bad lower bound {lo:?}"))?;
    let hi: usize = hi
        .trim()
        .parse()
        .map_err(|_| format!("bad upper bound {hi:?}"))?;
    if lo > hi {
        return Err(format!("lo {lo} exceeds hi {hi}"));
    }
    Ok((lo, hi))
}

/// Named override flags shared by the run subcommands.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Memory update factor in [0, 1].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Injection coefficient, >= 0.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Intervened layer range "lo:hi" (zero-based, half-open).
    #[arg(long)]
    pub layers: Option<String>,
    /// Sets both model.seed (when seed-init) and run.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// Image-token count (layout.n_image_tokens).
    #[arg(long)]
    pub image_tokens: Option<usize>,
    /// Non-image prompt token count (layout.n_prompt_tokens).
    #[arg(long)]
    pub prompt_tokens: Option<usize>,
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    /// Accumulator update rule: ema | literal.
    #[arg(long)]
    pub update_rule: Option<String>,
    /// Head reduction for capture: max | mean.
    #[arg(long)]
    pub head_reducer: Option<String>,
    /// Renormalization mode: rowsum | softmax.
    #[arg(long)]
    pub renorm: Option<String>,
    /// Record every layer instead of the intervened range.
    #[arg(long)]
    pub record_all_layers: bool,
    /// Generic override for any config key, e.g. --set model.n_layers=4.
    #[arg(long, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Overrides {
    pub fn apply(&self, config: &mut RunConfig) -> Result<(), CliError> {
        for entry in &self.set {
            apply_set(config, entry)?;
        }
        if let Some(alpha) = self.alpha {
            config.tarac.alpha = alpha;
        }
        if let Some(beta) = self.beta {
            config.tarac.beta = beta;
        }
        if let Some(layers) = &self.layers {
            parse_layer_range(layers).map_err(|e| config_err("--layers", e))?;
            config.tarac.layers = layers.clone();
        }
        if let Some(seed) = self.seed {
            if config.model.weights.is_none() {
                config.model.seed = Some(seed);
            }
            config.run.seed = seed;
        }
        if let Some(n) = self.max_new_tokens {
            config.run.max_new_tokens = n;
        }
        if let Some(n) = self.image_tokens {
            config.layout.n_image_tokens = n;
        }
        if let Some(n) = self.prompt_tokens {
            config.layout.n_prompt_tokens = n;
        }
        if let Some(path) = &self.trace_out {
            config.run.trace_out = Some(path.clone());
        }
        if let Some(rule) = &self.update_rule {
            config.tarac.update_rule = match rule.as_str() {
                "ema" => UpdateRule::Ema,
                "literal" => UpdateRule::Literal,
                other => {
                    return Err(config_err(
                        "--update-rule",
                        format!("expected ema or literal, got {other:?}"),
                    ))
                }
            };
        }
        if let Some(reducer) = &self.head_reducer {
            config.tarac.head_reducer = match reducer.as_str() {
                "max" => HeadReducer::Max,
                "mean" => HeadReducer::Mean,
                other => {
                    return Err(config_err(
                        "--head-reducer",
                        format!("expected max or mean, got {other:?}"),
                    ))
                }
            };
        }
        if let Some(renorm) = &self.renorm {
            config.tarac.renorm_mode = match renorm.as_str() {
                "rowsum" => RenormMode::RowSum,
                "softmax" | "softmax-diagnostic" => RenormMode::Softmax,
                other => {
                    return Err(config_err(
                        "--renorm",
                        format!("expected rowsum or softmax, got {other:?}"),
                    ))
                }
            };
        }
        if self.record_all_layers {
            config.run.record_all_layers = true;
        }
        Ok(())
    }
}

/// Apply one `key=value` override by editing the config's TOML value tree.
fn apply_set(config: &mut RunConfig, entry: &str) -> Result<(), CliError> {
    let (key, value) = entry
        .split_once('=')
        .ok_or_else(|| config_err("--set", format!("expected KEY=VALUE, got {entry:?}")))?;
    let mut table: toml::Table = toml::Table::try_from(&*config)
        .map_err(|e| CliError::Config(format!("config serialization failed: {e}")))?;

    let parts: Vec<&str> = key.split('.').collect();
    let mut node = &mut table;
    for part in &parts[..parts.len().saturating_sub(1)] {
        node = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| config_err(key, "path passes through a non-table value"))?;
    }
    let leaf = parts
        .last()
        .ok_or_else(|| config_err("--set", "empty key"))?;

    // Infer the value type: bool, integer, float, then string.
    let parsed = if let Ok(b) = value.parse::<bool>() {
        toml::Value::Boolean(b)
    } else if let Ok(i) = value.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = value.parse::<f64>() {
        toml::Value::Float(f)
    } else {
        toml::Value::String(value.to_string())
    };
    node.insert(leaf.to_string(), parsed);

    *config = table
        .try_into()
        .map_err(|e| CliError::Config(format!("{key}: {e}")))?;
    Ok(())
}

/// Commented configuration template emitted by `init-config`.
pub const CONFIG_TEMPLATE: &str = r#"# Generation sandbox configuration. Flat dotted keys; every key can be
# overridden on the command line with --set key=value (run subcommands also
# expose the common keys as named flags).

[model]
# Exactly one of: seed (deterministic initialization) or weights (file path).
seed = 42
# weights = "model.ttwt"
n_layers = 8
n_heads = 8
d_model = 256
d_head = 32
vocab_size = 1024
max_seq_len = 256
eos_token_id = 1
# Vocabulary ids at or above this value are image tokens.
image_token_base = 512

[layout]
n_image_tokens = 64
n_prompt_tokens = 16
# Non-image tokens placed before the image span (1 = leading BOS-like token).
image_offset = 0

[tarac]
enabled = true
# Memory update factor in [0, 1]: weight of the newest captured attention.
alpha = 0.5
# Injection coefficient (>= 0). Values above 2 risk repetitive output.
beta = 0.5
# Zero-based half-open range of intervened layers.
layers = "2:6"
# max | mean
head_reducer = "max"
# rowsum | softmax (softmax is a diagnostic mode, not for production decoding)
renorm_mode = "rowsum"
# ema | literal (literal blends only the last two captured vectors)
update_rule = "ema"

[run]
max_new_tokens = 64
# greedy | temperature
sampler = "greedy"
temperature = 1.0
# Run seed: prompt assembly and temperature sampling.
seed = 1
# trace_out = "trace.jsonl"
record_all_layers = false
record_profiles = false
"#;
