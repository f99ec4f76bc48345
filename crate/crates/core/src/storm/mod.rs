//! Procedural segmentation benchmark with graded corruption and deployment schedules.

pub mod corrupt;
pub mod metrics;
pub mod scene;
pub mod schedule;
pub mod streams;

pub use corrupt::{corrupt, CorruptionKind};
pub use metrics::{hmean, miou, ConfusionMatrix, HMean, MetricsRecord, MiouReport, Pass};
pub use scene::{render, SceneSample, CLASS_NAMES, NUM_CLASSES};
pub use schedule::{Boundary, DomainSchedule, LEVELS};
pub use streams::{batch_of, make_streams, BatchTruth, Benchmark, StreamConfig, TargetBatch};
