//! Step-based parallel I/O for simulation output.
//!
//! Ranks write through a [`Writer`] into one of two engines:
//!
//! * the file engine ([`aggregation`]), which groups N ranks under M
//!   aggregators that stream blocks into their own sub-files, optionally on a
//!   node-local burst buffer drained in the background ([`burst`]);
//! * the staging engine ([`staging`]), which buffers completed steps in memory
//!   and serves them to a consumer over TCP.
//!
//! Blocks pass through an in-line operator chain ([`ops`]) before storage or
//! transport. Readers ([`reader`]) reconstruct global arrays or hyperslabs
//! from the [`format`] index and sub-files, or directly from a staging
//! producer, through the same [`StepReader`] surface.

pub mod aggregation;
pub mod burst;
pub mod error;
pub mod format;
mod le;
pub mod model;
pub mod ops;
pub mod reader;
pub mod shim;
pub mod staging;

pub use error::{Error, Result};
pub use model::{DType, DataBlock, RankEngine, Selection, StepToken, VariableDef, Writer};
pub use ops::{CodecId, OperatorSpec, OperatorTable};
pub use reader::{FileReader, StepReader};
