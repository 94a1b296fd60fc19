//! Bit-exact functional simulator and analytic performance model of a
//! block-sparse W8A8 prefill accelerator for long-context transformer
//! inference.
//!
//! The crate executes the full prefill dataflow — INT8 QKV projection,
//! streaming sparse-index generation, liveness-cached block-sparse attention
//! with online softmax, and the SiLU feed-forward network — entirely in
//! deterministic fixed-point arithmetic, and converts the resulting compute
//! and traffic tallies into per-stage cycle counts and a time-to-first-token
//! estimate.

pub mod attention;
pub mod config;
pub mod fixed;
pub mod index_gen;
pub mod kv_cache;
pub mod mpu;
pub mod perf;
pub mod pipeline;
pub mod quant;
pub mod sfu;
pub mod trace;
pub mod verify;

pub use quant::{AccTile, FixedVec, FxMat, QTensor};
