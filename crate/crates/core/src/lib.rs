//! Two-group mixture of smoothing-spline mixed-effects models with an
//! L1-penalized logistic model for group membership.

pub mod bootstrap;
pub mod config;
pub mod covariance;
pub mod data;
pub mod em;
pub mod error;
pub mod kernel;
pub mod lasso;
pub mod lbfgsb;
pub mod linalg;
pub mod scalar;
pub mod score;
pub mod simulate;
pub mod spline;
pub mod variance;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type MatrixF64 = linalg::Matrix<f64>;
pub type MatrixF32 = linalg::Matrix<f32>;
pub type SplineBasisF64 = kernel::SplineBasis<f64>;
pub type SplineBasisF32 = kernel::SplineBasis<f32>;
pub type VarianceComponentsF64 = covariance::VarianceComponents<f64>;
pub type VarianceComponentsF32 = covariance::VarianceComponents<f32>;
pub type TransformedVarianceVectorF64 = covariance::TransformedVarianceVector<f64>;
pub type TransformedVarianceVectorF32 = covariance::TransformedVarianceVector<f32>;
pub type SplineFitF64 = spline::SplineFit<f64>;
pub type SplineFitF32 = spline::SplineFit<f32>;
