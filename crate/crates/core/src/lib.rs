//! Light-weight encoder–decoder segmentation with a from-scratch autodiff
//! engine, two-stage knowledge distillation, metrics and complexity counts.

pub mod checkpoint;
pub mod complexity;
pub mod data;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use kernels::ConvParams;
pub use model::{build_student, build_teacher, ModelConfig, Network, NetworkPlan};
pub use params::ModelParams;
pub use tensor::{Shape, Tensor};
