//! Online domain adaptation for semantic segmentation on a procedural storm benchmark.

pub mod autodiff;
pub mod detector;
pub mod error;
pub mod harness;
pub mod policy;
pub mod proto;
pub mod replay;
pub mod segnet;
pub mod self_training;
pub mod storm;
pub mod tensor;

pub use detector::{DetectorConfig, DetectorState, Direction, SwitchEvent};
pub use error::{OndaError, Result};
pub use harness::{Mode, Pretrained, ResultTable, RunConfig};
pub use policy::{PolicyConfig, PolicyKind};
pub use proto::PrototypeBank;
pub use replay::ReplayBuffer;
pub use segnet::{ArchConfig, ModelCheckpoint};
pub use self_training::{adapt_step, Hyperparams, OndaModels};
pub use storm::{Benchmark, DomainSchedule, Pass};
pub use tensor::Tensor;
