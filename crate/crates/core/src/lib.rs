//! KV-cache compression laboratory.
//!
//! A seeded toy transformer produces per-layer, per-head Q/K/V; eviction
//! policies (ChunkKV and token-level baselines) pick which positions to keep;
//! layer-wise index reuse shares those picks across groups of layers; and the
//! metrics module measures what each policy loses.
//!
//! Modules, bottom up: [`numerics`], [`cache`], [`model`], [`policies`],
//! [`reuse`], [`metrics`].

pub mod cache;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod policies;
pub mod reuse;

pub use cache::{
    apply_kept, compression_ratio, memory_bytes, BudgetLimit, BudgetSpec, CompressedCacheSet,
    KeptIndices, LayerKV, MemoryParams,
};
pub use error::{Error, Result};
pub use model::{init_model, ModelConfig, PrefillTrace, ToyModel};
pub use numerics::TensorView;
pub use policies::{PolicyKind, PolicySpec, ScoreMode, ScoreSource};
pub use reuse::{ReusePlan, SimilarityMatrix};
