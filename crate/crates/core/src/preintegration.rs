//! Discrete IMU preintegration with first-order bias Jacobians.
//!
//! Midpoint rule: each step rotates with the bias-corrected mean of adjacent
//! gyro samples and translates with the mean of the two rotated,
//! bias-corrected accelerometer samples. The Jacobians are the exact
//! derivatives of that same discrete recursion, with the rotation perturbed on
//! the right: `gamma(b + d) ~= gamma(b) * exp(J_gamma_bw * d_bw)`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geom::{right_jacobian, skew, UnitQuat};
use crate::imu_model::{validate_samples, GravityConfig, ImuBias, ImuSample, NavState};
use crate::scalar::Real;

const UNIT_NORM_TOL: f64 = 1e-6;

/// Relative motion terms between two keyframes, expressed in the first
/// keyframe's body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaTerms<T> {
    pub alpha: Vector3<T>,
    pub beta: Vector3<T>,
    pub gamma: UnitQuat<T>,
}

impl<T: Real> DeltaTerms<T> {
    pub fn identity() -> Self {
        Self {
            alpha: Vector3::zeros(),
            beta: Vector3::zeros(),
            gamma: UnitQuat::identity(),
        }
    }

    /// Chains `self` (spanning `dt_self`) with `next` (spanning `dt_next`).
    pub fn compose(&self, next: &Self, dt_next: T) -> Self {
        Self {
            alpha: self.alpha + self.beta * dt_next + self.gamma.rotate(&next.alpha),
            beta: self.beta + self.gamma.rotate(&next.beta),
            gamma: self.gamma * next.gamma,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preintegration<T: Real> {
    pub alpha: Vector3<T>,
    pub beta: Vector3<T>,
    pub gamma: UnitQuat<T>,
    pub j_alpha_ba: Matrix3<T>,
    pub j_alpha_bw: Matrix3<T>,
    pub j_beta_ba: Matrix3<T>,
    pub j_beta_bw: Matrix3<T>,
    pub j_gamma_bw: Matrix3<T>,
    pub dt_total: T,
    pub linearization_bias: ImuBias<T>,
}

impl<T: Real> Preintegration<T> {
    /// Preintegration over an empty span.
    pub fn empty(linearization_bias: ImuBias<T>) -> Self {
        Self {
            alpha: Vector3::zeros(),
            beta: Vector3::zeros(),
            gamma: UnitQuat::identity(),
            j_alpha_ba: Matrix3::zeros(),
            j_alpha_bw: Matrix3::zeros(),
            j_beta_ba: Matrix3::zeros(),
            j_beta_bw: Matrix3::zeros(),
            j_gamma_bw: Matrix3::zeros(),
            dt_total: T::zero(),
            linearization_bias,
        }
    }

    pub fn deltas(&self) -> DeltaTerms<T> {
        DeltaTerms {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    /// Advances by one midpoint step between consecutive samples.
    pub fn step(&mut self, s0: &ImuSample<T>, s1: &ImuSample<T>) {
        let dt = s1.t - s0.t;
        let half = T::lit(0.5);
        let b = self.linearization_bias;

        let omega = (s0.gyro + s1.gyro) * half - b.bw;
        let phi = omega * dt;
        let dq = UnitQuat::exp(&phi);
        let r0 = self.gamma.to_rotation_matrix();
        let gamma1 = self.gamma * dq;
        let r1 = gamma1.to_rotation_matrix();

        let u0 = s0.accel - b.ba;
        let u1 = s1.accel - b.ba;
        let acc = (r0 * u0 + r1 * u1) * half;

        let jg0 = self.j_gamma_bw;
        let jg1 = dq.to_rotation_matrix().transpose() * jg0 - right_jacobian(&phi) * dt;
        let dacc_dba = -(r0 + r1) * half;
        let dacc_dbw = -(r0 * skew(&u0) * jg0 + r1 * skew(&u1) * jg1) * half;

        let half_dt2 = half * dt * dt;
        self.j_alpha_ba += self.j_beta_ba * dt + dacc_dba * half_dt2;
        self.j_alpha_bw += self.j_beta_bw * dt + dacc_dbw * half_dt2;
        self.j_beta_ba += dacc_dba * dt;
        self.j_beta_bw += dacc_dbw * dt;
        self.j_gamma_bw = jg1;

        self.alpha += self.beta * dt + acc * half_dt2;
        self.beta += acc * dt;
        self.gamma = gamma1;
        self.dt_total += dt;
    }

    /// First-order bias correction of the delta terms.
    pub fn correct_first_order(&self, new_bias: &ImuBias<T>) -> DeltaTerms<T> {
        let d = *new_bias - self.linearization_bias;
        DeltaTerms {
            alpha: self.alpha + self.j_alpha_ba * d.ba + self.j_alpha_bw * d.bw,
            beta: self.beta + self.j_beta_ba * d.ba + self.j_beta_bw * d.bw,
            gamma: self.gamma * UnitQuat::exp(&(self.j_gamma_bw * d.bw)),
        }
    }
}

/// Preintegrates `samples` at linearization point `bias`.
pub fn integrate<T: Real>(samples: &[ImuSample<T>], bias: &ImuBias<T>) -> Result<Preintegration<T>> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples(samples.len()));
    }
    validate_samples(samples)?;
    let mut p = Preintegration::empty(*bias);
    for w in samples.windows(2) {
        p.step(&w[0], &w[1]);
    }
    Ok(p)
}

pub fn correct_first_order<T: Real>(p: &Preintegration<T>, new_bias: &ImuBias<T>) -> DeltaTerms<T> {
    p.correct_first_order(new_bias)
}

/// Ground-truth delta terms implied by two states `dt` seconds apart.
pub fn gt_targets<T: Real>(
    state_k: &NavState<T>,
    state_k1: &NavState<T>,
    gravity: &GravityConfig<T>,
    dt: T,
) -> Result<DeltaTerms<T>> {
    if !(dt > T::zero()) {
        return Err(Error::InvalidInput("gt_targets requires dt > 0".into()));
    }
    for q in [&state_k.q, &state_k1.q] {
        let n = q.norm();
        if !n.is_finite() || (n - T::one()).abs() > T::lit(UNIT_NORM_TOL) {
            return Err(Error::NotUnitQuaternion {
                norm: n.to_f64_lossy(),
            });
        }
    }
    let g = gravity.g_world;
    let half = T::lit(0.5);
    let qk_inv = state_k.q.inverse();
    let dp = state_k1.p - state_k.p - state_k.v * dt + g * (half * dt * dt);
    let dv = state_k1.v - state_k.v + g * dt;
    Ok(DeltaTerms {
        alpha: qk_inv.rotate(&dp),
        beta: qk_inv.rotate(&dv),
        gamma: qk_inv * state_k1.q,
    })
}

/// Propagates a state through a preintegrated interval (inverse of [`gt_targets`]).
pub fn predict_state<T: Real>(
    state: &NavState<T>,
    deltas: &DeltaTerms<T>,
    gravity: &GravityConfig<T>,
    dt: T,
) -> NavState<T> {
    let g = gravity.g_world;
    let half = T::lit(0.5);
    NavState {
        p: state.p + state.v * dt - g * (half * dt * dt) + state.q.rotate(&deltas.alpha),
        v: state.v - g * dt + state.q.rotate(&deltas.beta),
        q: state.q * deltas.gamma,
    }
}
