//! Minimal differentiable layer substrate shared by the student and
//! teacher networks.

pub mod graph;
pub mod kernels;
pub mod layers;
pub mod param;
mod softmax;

pub use graph::{Gradients, Graph, Mode, TraceRecord, Var};
pub use layers::LayerSpec;
pub use param::{ParamId, ParamKey, ParamStore, Parameter};
pub use softmax::{log_softmax_tau, softmax_tau};
