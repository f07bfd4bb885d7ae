//! Task blocking for small models.
//!
//! The numeric core ([`autodiff`], [`models`], [`calibration`], [`mlac`]) is
//! generic over the scalar type; the aliases below fix it to `f64` (the
//! default everywhere else in the crate) or `f32`.

pub mod adversary;
pub mod autodiff;
pub mod calibration;
pub mod data;
pub mod error;
pub mod metrics;
pub mod mlac;
pub mod models;
pub mod optim;
pub mod scalar;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type ParameterSet64 = models::ParameterSet<f64>;
pub type ParameterSet32 = models::ParameterSet<f32>;
pub type Head64 = models::Head<f64>;
pub type Head32 = models::Head<f32>;
