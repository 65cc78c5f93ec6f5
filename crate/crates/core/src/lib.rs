pub mod analytics;
pub mod attention;
pub mod bench;
pub mod decode;
pub mod error;
pub mod model;
pub mod rng;
pub mod tarac;
pub mod trace;
pub mod transformer;

pub use analytics::{
    class_attention_densities, first_occurrence_filter, gaussian_kde, image_token_profile,
    visual_attention_series, Bandwidth, ClassDensities, GaussianKde,
};
pub use attention::{AttentionRow, HeadReducer, ImageSpan, RenormMode};
pub use bench::{run_bench, BenchReport};
pub use decode::{
    build_prompt, compare_runs, generate, greedy_pick, CompareReport, GenerateOptions,
    GenerationResult, RecordLayers, Sampler, SequenceLayout, Termination,
};
pub use trace::{LabeledToken, TokenClass, TraceHeader, TraceReader, TraceRecord};
pub use error::{Error, Result};
pub use model::{init_weights, load_weights, save_weights, ModelConfig, Weights};
pub use tarac::{AccumulatedAttention, TaracConfig, TaracHook, UpdateRule};
pub use transformer::{forward_token, prefill, AttentionHook, IdentityHook, KvCache};
