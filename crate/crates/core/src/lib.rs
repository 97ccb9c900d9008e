//! Outlier-suppressed vector quantization for attention KV caches.
//!
//! The pipeline: calibrate per-channel smoothing factors, rotate keys with an
//! orthonormal Walsh-Hadamard transform (queries get the inverse scaling and
//! the same rotation, so scores are preserved), train product-quantization
//! codebooks on the transformed keys and raw values, and serve decode-step
//! attention straight from the code rows through a lookup-table engine with
//! tiled online softmax. Everything is verifiable against exact
//! full-precision oracles at desk scale.

pub mod analysis;
pub mod attention;
pub mod error;
pub mod io;
pub mod kvcache;
pub mod matrix;
pub mod synth;
pub mod transform;
pub mod vq;

pub use analysis::{
    distribution_report, lemma1_check, transform_ablation, AblationOutcome, DistributionReport,
    RotationStats, TransformMode,
};
pub use attention::{
    build_lut, fused_decode_attention, reference_attention, split_reduce, traffic_report,
    AttentionOutput, LookupTable, SoftmaxPartial, TileConfig, Traffic, TrafficReport,
};
pub use error::{Error, Result};
pub use kvcache::{
    append, materialize, prefill, CacheBytes, CacheConfig, PackedCodes, QuantizedKVCache,
    DEFAULT_RESIDUAL_LEN,
};
pub use matrix::{rel_err, HeadMatrix};
pub use synth::{generate, gaussian_matrix, GenSpec, Tail};
pub use transform::{
    calibrate_smoothing, hadamard_apply, transform_keys, transform_query, walsh_hadamard_matrix,
    SmoothingFactors, TransformConfig, DEFAULT_EPSILON_FLOOR,
};
pub use vq::{
    avg_bits_pair, decode, encode, kmeans_objective, kmeans_train, memory_footprint,
    parse_config_pair, quantization_mse, subvectors_of, CodeMatrix, Codebook, MemoryFootprint,
    VQConfig,
};
