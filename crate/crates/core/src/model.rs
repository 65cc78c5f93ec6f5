//! Toy decoder-only model definition: configuration, deterministically
//! initialized weights, and the on-disk weight format.
//!
//! Weights are stored as `f32` (matching the file payload); all forward
//! arithmetic happens in `f64` (see `transformer`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Magic bytes opening a weight file.
pub const WEIGHT_MAGIC: [u8; 4] = *b"TTWT";
/// Current weight format version.
pub const WEIGHT_VERSION: u16 = 1;

/// Dimensions and seeds of the toy decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    /// Reserved end-of-sequence token id.
    pub eos_token_id: u32,
    /// Vocabulary ids at or above this value are image tokens; their
    /// embeddings come from a distinct init stream so image and text
    /// positions are statistically distinguishable.
    pub image_token_base: u32,
}

impl ModelConfig {
    /// Desk-scale reference model: large enough for measurable decode
    /// timings and layer-range effects, small enough for sub-second runs.
    pub fn reference(seed: u64) -> Self {
        Self {
            n_layers: 8,
            n_heads: 8,
            d_model: 256,
            d_head: 32,
            vocab_size: 1024,
            max_seq_len: 256,
            seed,
            eos_token_id: 1,
            image_token_base: 512,
        }
    }

    /// Feed-forward hidden width.
    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::InvalidConfig("n_layers must be >= 1".into()));
        }
        if self.n_heads == 0 {
            return Err(Error::InvalidConfig("n_heads must be >= 1".into()));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::InvalidConfig(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig("vocab_size must be >= 2".into()));
        }
        if self.max_seq_len == 0 {
            return Err(Error::InvalidConfig("max_seq_len must be >= 1".into()));
        }
        if self.eos_token_id as usize >= self.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "eos_token_id {} outside vocabulary of {}",
                self.eos_token_id, self.vocab_size
            )));
        }
        if self.image_token_base as usize > self.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "image_token_base {} outside vocabulary of {}",
                self.image_token_base, self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Per-layer projection matrices, row-major `[out][in]`, no biases.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_q: Vec<f32>,
    pub attn_k: Vec<f32>,
    pub attn_v: Vec<f32>,
    pub attn_out: Vec<f32>,
    pub ff_in: Vec<f32>,
    pub ff_out: Vec<f32>,
}

/// Full parameter set of the toy decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub config: ModelConfig,
    /// `vocab_size x d_model`.
    pub token_embedding: Vec<f32>,
    /// `max_seq_len x d_model` learned absolute position table.
    pub pos_embedding: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    /// `vocab_size x d_model` final logits projection.
    pub lm_head: Vec<f32>,
}

// Stream ids for per-tensor init substreams. Layer tensors use
// LAYER_BASE + layer * TENSORS_PER_LAYER + k.
const STREAM_TEXT_EMBED: u64 = 0;
const STREAM_IMAGE_EMBED: u64 = 1;
const STREAM_POS_EMBED: u64 = 2;
const LAYER_BASE: u64 = 3;
const TENSORS_PER_LAYER: u64 = 6;

fn fill_uniform(rng: &mut SplitMix64, n: usize, scale: f64) -> Vec<f32> {
    (0..n).map(|_| (rng.next_symmetric() * scale) as f32).collect()
}

/// Deterministic weight initialization.
///
/// Every tensor entry is drawn uniformly from `[-s, s)` with
/// `s = 1/sqrt(d_model)` (mean 0, standard deviation `s/sqrt(3)`), from a
/// SplitMix64 substream keyed by `(config.seed, tensor index)`. Embedding
/// rows in the image id range come from their own stream. The same config
/// yields bit-identical weights on every platform.
pub fn init_weights(config: &ModelConfig) -> Result<Weights> {
    config.validate()?;
    let d = config.d_model;
    let scale = 1.0 / (d as f64).sqrt();

    let image_base = config.image_token_base as usize;
    let mut token_embedding = Vec::with_capacity(config.vocab_size * d);
    let mut text_rng = SplitMix64::stream(config.seed, STREAM_TEXT_EMBED);
    token_embedding.extend(fill_uniform(&mut text_rng, image_base * d, scale));
    let mut image_rng = SplitMix64::stream(config.seed, STREAM_IMAGE_EMBED);
    token_embedding.extend(fill_uniform(
        &mut image_rng,
        (config.vocab_size - image_base) * d,
        scale,
    ));

    let mut pos_rng = SplitMix64::stream(config.seed, STREAM_POS_EMBED);
    let pos_embedding = fill_uniform(&mut pos_rng, config.max_seq_len * d, scale);

    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let base = LAYER_BASE + l as u64 * TENSORS_PER_LAYER;
        let tensor = |k: u64, n: usize| {
            let mut rng = SplitMix64::stream(config.seed, base + k);
            fill_uniform(&mut rng, n, scale)
        };
        layers.push(LayerWeights {
            attn_q: tensor(0, d * d),
            attn_k: tensor(1, d * d),
            attn_v: tensor(2, d * d),
            attn_out: tensor(3, d * d),
            ff_in: tensor(4, config.d_ff() * d),
            ff_out: tensor(5, d * config.d_ff()),
        });
    }

    let head_stream = LAYER_BASE + config.n_layers as u64 * TENSORS_PER_LAYER;
    let mut head_rng = SplitMix64::stream(config.seed, head_stream);
    let lm_head = fill_uniform(&mut head_rng, config.vocab_size * d, scale);

    Ok(Weights {
        config: *config,
        token_embedding,
        pos_embedding,
        layers,
        lm_head,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorDesc {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightHeader {
    config: ModelConfig,
    tensors: Vec<TensorDesc>,
}

/// Tensor names and shapes in payload order, derived from the config.
fn tensor_layout(config: &ModelConfig) -> Vec<TensorDesc> {
    let d = config.d_model;
    let mut tensors = vec![
        TensorDesc {
            name: "token_embedding".into(),
            shape: vec![config.vocab_size, d],
        },
        TensorDesc {
            name: "pos_embedding".into(),
            shape: vec![config.max_seq_len, d],
        },
    ];
    for l in 0..config.n_layers {
        for (suffix, shape) in [
            ("attn_q", vec![d, d]),
            ("attn_k", vec![d, d]),
            ("attn_v", vec![d, d]),
            ("attn_out", vec![d, d]),
            ("ff_in", vec![config.d_ff(), d]),
            ("ff_out", vec![d, config.d_ff()]),
        ] {
            tensors.push(TensorDesc {
                name: format!("layers.{l}.{suffix}"),
                shape,
            });
        }
    }
    tensors.push(TensorDesc {
        name: "lm_head".into(),
        shape: vec![config.vocab_size, d],
    });
    tensors
}

fn tensor_refs(weights: &Weights) -> Vec<&[f32]> {
    let mut refs: Vec<&[f32]> = vec![&weights.token_embedding, &weights.pos_embedding];
    for layer in &weights.layers {
        refs.push(&layer.attn_q);
        refs.push(&layer.attn_k);
        refs.push(&layer.attn_v);
        refs.push(&layer.attn_out);
        refs.push(&layer.ff_in);
        refs.push(&layer.ff_out);
    }
    refs.push(&weights.lm_head);
    refs
}

/// Write weights: magic, version (u16 LE), u32 LE header length, UTF-8
/// JSON header (config + tensor order), then each tensor as raw
/// little-endian `f32` in header order.
pub fn save_weights(weights: &Weights, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&WEIGHT_MAGIC)?;
    out.write_all(&WEIGHT_VERSION.to_le_bytes())?;

    let header = WeightHeader {
        config: weights.config,
        tensors: tensor_layout(&weights.config),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::CorruptFile(format!("header serialization failed: {e}")))?;
    out.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    out.write_all(&header_bytes)?;

    for tensor in tensor_refs(weights) {
        for v in tensor {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_exact_or_corrupt(reader: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    reader.read_exact(buf).map_err(|_| Error::CorruptFile(format!("truncated {what}")))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Weights> {
    let mut reader = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    reader
        .read_exact(&mut magic)
        .map_err(|_| Error::UnrecognizedFormat("file shorter than magic".into()))?;
    if magic != WEIGHT_MAGIC {
        return Err(Error::UnrecognizedFormat("bad magic bytes".into()));
    }
    let mut version = [0u8; 2];
    read_exact_or_corrupt(&mut reader, &mut version, "version field")?;
    let version = u16::from_le_bytes(version);
    if version != WEIGHT_VERSION {
        return Err(Error::UnrecognizedFormat(format!(
            "unsupported version {version}"
        )));
    }

    let mut len = [0u8; 4];
    read_exact_or_corrupt(&mut reader, &mut len, "header length")?;
    let header_len = u32::from_le_bytes(len) as usize;
    // 16 MiB cap guards against a corrupted length field allocating wildly.
    if header_len == 0 || header_len > 16 << 20 {
        return Err(Error::CorruptFile(format!(
            "implausible header length {header_len}"
        )));
    }
    let mut header_bytes = vec![0u8; header_len];
    read_exact_or_corrupt(&mut reader, &mut header_bytes, "header")?;
    let header: WeightHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::CorruptFile(format!("unparseable header: {e}")))?;
    header.config.validate()?;

    let expected = tensor_layout(&header.config);
    if header.tensors.len() != expected.len() {
        return Err(Error::CorruptFile(format!(
            "header lists {} tensors, config implies {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for (declared, implied) in header.tensors.iter().zip(&expected) {
        if declared.name != implied.name || declared.shape != implied.shape {
            return Err(Error::CorruptFile(format!(
                "tensor {} with shape {:?} does not match config-implied {} {:?}",
                declared.name, declared.shape, implied.name, implied.shape
            )));
        }
    }

    let mut read_tensor = |desc: &TensorDesc| -> Result<Vec<f32>> {
        let n: usize = desc.shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        read_exact_or_corrupt(&mut reader, &mut bytes, &format!("payload of {}", desc.name))?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    };

    let token_embedding = read_tensor(&expected[0])?;
    let pos_embedding = read_tensor(&expected[1])?;
    let mut layers = Vec::with_capacity(header.config.n_layers);
    for l in 0..header.config.n_layers {
        let base = 2 + l * 6;
        layers.push(LayerWeights {
            attn_q: read_tensor(&expected[base])?,
            attn_k: read_tensor(&expected[base + 1])?,
            attn_v: read_tensor(&expected[base + 2])?,
            attn_out: read_tensor(&expected[base + 3])?,
            ff_in: read_tensor(&expected[base + 4])?,
            ff_out: read_tensor(&expected[base + 5])?,
        });
    }
    let lm_head = read_tensor(expected.last().unwrap())?;

    let mut trailing = [0u8; 1];
    match reader.read(&mut trailing)? {
        0 => {}
        _ => return Err(Error::CorruptFile("trailing bytes after payload".into())),
    }

    Ok(Weights {
        config: header.config,
        token_embedding,
        pos_embedding,
        layers,
        lm_head,
    })
}
