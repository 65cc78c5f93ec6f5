//! Deterministic, portable pseudo-random generation.
//!
//! All randomness in this crate (weight initialization, prompt assembly,
//! temperature sampling) flows through SplitMix64: 64-bit additive state
//! with a multiply-xorshift finalizer. The sequence is fully determined
//! by the seed and identical on every platform, which the reproducibility
//! guarantees depend on. Substreams derived from a root seed and a stream
//! id keep per-tensor and per-purpose randomness independent.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output finalizer (Stafford mix13).
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Generator for substream `stream_id` of `root_seed`. Distinct ids
    /// (tensor indices, sampling vs. init) give decorrelated sequences.
    pub fn stream(root_seed: u64, stream_id: u64) -> Self {
        Self::new(mix64(root_seed ^ mix64(stream_id.wrapping_add(GAMMA))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix64(self.state)
    }

    /// Uniform in [0, 1): top 53 bits scaled by 2^-53.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [-1, 1).
    pub fn next_symmetric(&mut self) -> f64 {
        2.0 * self.next_f64() - 1.0
    }

    /// Uniform integer in [0, bound), bound > 0 (Lemire multiply-shift).
    pub fn next_below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        ((u128::from(self.next_u64()) * u128::from(bound)) >> 64) as u64
    }
}
