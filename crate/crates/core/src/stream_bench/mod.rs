//! Synthetic continual test-time adaptation benchmark.

pub mod corruption;
pub mod dataset;
pub mod pretrain;
pub mod runner;
pub mod scenario;

pub use corruption::{CorruptionKind, DomainSpec};
pub use dataset::{DatasetSpec, Split, SyntheticDataset};
pub use pretrain::{evaluate, pretrain_source, PretrainOptions, PretrainReport};
pub use runner::{run_method, Method, ProbeCadence, RunMetrics, RunSetup};
pub use scenario::{build_gradual_scenario, Scenario, ScenarioSpec, Stream, StreamBatch};
