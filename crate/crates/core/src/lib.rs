//! Hybrid online knowledge distillation: a compact dense/inverted-residual
//! student trained jointly with a residual teacher, plus the supporting
//! autodiff engine, data pipeline and model analysis.

pub mod analysis;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod network;
pub mod nn;
pub mod rng;
pub mod student;
pub mod teacher;
pub mod tensor;
pub mod train;

pub use config::{DataSource, RunConfig};
pub use distill::{FeatureLoss, KlDirection, LossBreakdown, LossWeights, ObjectiveConfig};
pub use error::{Error, Result};
pub use network::{BundleValues, ForwardBundle, Head, NetKind, Network};
pub use student::{Student, StudentConfig};
pub use teacher::{Teacher, TeacherConfig};
pub use tensor::{Tensor, TensorShape};
pub use train::{CheckpointRecord, TrainConfig};
