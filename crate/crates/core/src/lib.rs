//! The PHN click-through-rate model: cross, field interaction and feed-forward
//! towers running side by side over a gated field embedding.
//!
//! The crate is generic over the scalar type (`f32` or `f64`) through
//! [`Scalar`]; the aliases at the crate root fix it to `f64`, with `…F32`
//! variants for single precision.

pub mod baseline;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod ssg;
pub mod tensor;
pub mod towers;
pub mod train;

pub use error::{PhnError, Result};
pub use model::{BnMode, CtrModel, Mode, ModelConfig};
pub use scalar::Scalar;
pub use ssg::SelectionPattern;
pub use towers::{ResidualMode, TowerKind};
pub use train::TrainSpec;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = graph::Graph<f64>;
pub type ParameterStore = tensor::ParameterStore<f64>;
pub type PhnModel = model::PhnModel<f64>;
pub type LinearModel = baseline::LinearModel<f64>;
pub type Optimizer = optim::Optimizer<f64>;

pub type TensorF32 = tensor::Tensor<f32>;
pub type GraphF32 = graph::Graph<f32>;
pub type ParameterStoreF32 = tensor::ParameterStore<f32>;
pub type PhnModelF32 = model::PhnModel<f32>;
pub type LinearModelF32 = baseline::LinearModel<f32>;
pub type OptimizerF32 = optim::Optimizer<f32>;
