//! IMU bias-prior pipeline: preintegration with bias Jacobians, per-sequence
//! bias labeling from ground truth, a fixed-lag estimator with a bias prior
//! factor, and trajectory metrics.
//!
//! The geometric and preintegration layers are generic over [`Real`] (`f32`
//! or `f64`); the solvers work in `f64`. Concrete aliases are exported below.

pub mod error;
pub mod geom;
pub mod imu_model;
pub mod preintegration;
pub mod scalar;
pub mod bias_labeler;
pub mod dataset;
pub mod eval;
pub mod fusion;

pub use error::{Error, Result};
pub use scalar::Real;

pub type UnitQuaternion = geom::UnitQuat<f64>;
pub type ImuSample = imu_model::ImuSample<f64>;
pub type ImuBias = imu_model::ImuBias<f64>;
pub type NavState = imu_model::NavState<f64>;
pub type GtState = imu_model::GtState<f64>;
pub type GravityConfig = imu_model::GravityConfig<f64>;
pub type Preintegration = preintegration::Preintegration<f64>;
pub type DeltaTerms = preintegration::DeltaTerms<f64>;
