//! Synthetic weather-model workloads and experiment drivers for `stagecoach`.

pub mod config;
pub mod driver;
pub mod error;
pub mod pipeline;
pub mod workload;

pub use config::{Backend, EngineConfig, EngineKind, RunFile, ShimRates};
pub use driver::{run_workload, sweep, RunOptions, RunReport, StepReport, SweepParam};
pub use error::{BenchError, BenchResult};
pub use pipeline::{pipeline_compare, Analysis, PipelineReport};
pub use workload::{Generator, WorkloadSpec};
