//! Spatio-temporal traffic-flow forecasting.
//!
//! A graph-convolution stack captures spatial structure of the road network,
//! a transformer encoder captures each node's temporal history, and an
//! embedding of external context (weather, holidays, incidents) is fused with
//! both before a linear multi-horizon head. All of it runs on a small
//! reverse-mode autodiff engine over dense `f64` tensors.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod model;
pub mod serve;
pub mod temporal;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::RoadGraph;
pub use model::{Ablation, Forecast, ModelConfig, ModelParams, ObservationWindow};
pub use tensor::{Tape, Tensor, Var};
