//! Training and evaluation pipeline for identity-aware attribute transfer:
//! supervised pretraining, alternating adversarial training of the
//! transform network, enhancement networks, transfer and metrics.

pub mod batch;
pub mod config;
pub mod enhance;
pub mod error;
pub mod eval;
pub mod nets;
pub mod phases;
pub mod report;
pub mod train;
pub mod transfer;
pub mod workflow;

pub use config::{EnhanceMode, TrainConfig, Variant};
pub use error::{Error, Result};
pub use eval::{Evaluator, Metrics};
pub use nets::{Role, Shapes};
pub use phases::{PhaseReport, Regularizer, Schedule};
pub use report::{ReportRow, ReportWriter, StopReason, TrainReport};
pub use train::{Auxiliary, TransformTrainer};
pub use transfer::run_transfer;
pub use workflow::{Pretrained, PretrainSummary};
