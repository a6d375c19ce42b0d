//! Query-aware mixed-precision KV-cache quantization.
//!
//! Key channels are scored by the product of their mean query magnitude
//! (importance) and their quantization step size (sensitivity), then stored
//! at one of three precisions: full precision, 4-bit, or 2-bit. Values use
//! uniform per-token low-bit quantization. Tokens are staged in a
//! full-precision residual buffer and quantized in blocks.
//!
//! Module map:
//!
//! - [`quant`]: asymmetric group quantization and bit packing.
//! - [`salience`]: importance / sensitivity / salience scores, tier assignment, RoPE.
//! - [`cache`]: the streaming mixed-precision KV cache.
//! - [`baselines`]: allocation policies (salience, error-only, fixed uniform, full precision).
//! - [`attention`]: exact attention, pre-softmax error, and the decode simulator.
//! - [`search`]: Pareto search over the two salience thresholds.
//! - [`io`]: tensor dump container, experiment configs, and report emission.

pub mod attention;
pub mod baselines;
pub mod cache;
mod error;
pub mod io;
pub mod quant;
pub mod salience;
pub mod search;
mod stats;

pub use attention::{
    attention_error, attention_exact, decode_simulation, generate_planted_instance, AttentionInstance,
    DecodeSource, FidelityReport, PlantedSpec,
};
pub use baselines::{
    error_only_assignment, fixed_uniform_assignment, salience_topk_assignment, AllocationPolicy, PolicyKind,
    TierBudget,
};
pub use cache::{CacheConfig, MixedKvCache};
pub use error::{Error, Result};
pub use quant::{
    dequantize_group, pack_codes, quantization_error_bound, quantize_group, unpack_codes, BitWidth, PackedBuffer,
    QuantizedGroup,
};
pub use salience::{
    aggregate_gqa_importance, apply_rope, assign_precision, importance_score, salience_score, sensitivity_score,
    ChannelSalience, PrecisionAssignment, PrecisionTier, QueryAccumulator, Thresholds,
};
pub use search::{evaluate_candidate, pareto_frontier, pareto_search, select_under_budget, ParetoPoint, SearchSpec};
pub use stats::pearson;
