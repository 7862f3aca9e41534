//! Trace-driven analysis of KV-cache access under dynamic sparse attention.
//!
//! The crate covers the full pipeline: top-k selection traces and their file
//! formats ([`trace`], [`format`]), a synthetic indexer-driven generator
//! ([`synth`]), access-pattern statistics ([`metrics`]), a token-granular
//! reserved last-level cache simulator ([`cache`]) and closed-form roofline
//! utilization estimates ([`roofline`]).

pub mod cache;
pub mod format;
pub mod kv;
pub mod metrics;
pub mod par;
pub mod roofline;
pub mod synth;
pub mod trace;

pub use cache::{simulate, sweep, CacheConfig, CacheKey, LruState, SimResult};
pub use format::{read_trace, write_trace, FormatError, TraceFormat};
pub use par::Exec;
pub use synth::{generate_trace, indexer_score, top_k_select, GenConfig, IndexerParams};
pub use trace::{validate_trace, DecodeStep, TopKSet, Trace, TraceMeta, ValidationReport, Violation, ViolationKind};
