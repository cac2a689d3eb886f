//! Fixed-lag sliding-window estimator with a plug-in bias prior factor.
//!
//! Each keyframe carries a 15-dimensional tangent `[dp, dv, dtheta, dba, dbw]`
//! (position, velocity, right-perturbed rotation, accel bias, gyro bias).
//! The window holds IMU preintegration factors between consecutive keyframes,
//! optional pose observations (a stand-in for visual constraints), and bias
//! prior factors `r = W (b - b_hat)`. The oldest pose in the window is held
//! fixed; states leaving the window are dropped without marginalization.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SMatrix, SVector, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{right_jacobian, right_jacobian_inv, skew, UnitQuat};
use crate::imu_model::{validate_samples, GravityConfig, GtState, ImuBias, ImuSample, NavState};
use crate::preintegration::{integrate, predict_state, Preintegration};

pub type Vector15 = SVector<f64, 15>;
pub type Matrix15 = SMatrix<f64, 15, 15>;
pub type Matrix6x15 = SMatrix<f64, 6, 15>;

const P: usize = 0;
const V: usize = 3;
const TH: usize = 6;
const BA: usize = 9;
const BW: usize = 12;
pub const STATE_DIM: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeState {
    pub t: f64,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    /// Body to world.
    pub q: UnitQuat<f64>,
    pub bias: ImuBias<f64>,
}

impl KeyframeState {
    pub fn from_nav(t: f64, nav: &NavState<f64>, bias: ImuBias<f64>) -> Self {
        Self {
            t,
            p: nav.p,
            v: nav.v,
            q: nav.q,
            bias,
        }
    }

    pub fn nav(&self) -> NavState<f64> {
        NavState::new(self.p, self.v, self.q)
    }

    /// Applies a tangent update.
    pub fn retract(&self, d: &[f64]) -> Self {
        let v3 = |o: usize| Vector3::new(d[o], d[o + 1], d[o + 2]);
        Self {
            t: self.t,
            p: self.p + v3(P),
            v: self.v + v3(V),
            q: self.q.boxplus(&v3(TH)),
            bias: ImuBias::new(self.bias.ba + v3(BA), self.bias.bw + v3(BW)),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.v.iter()).all(|x| x.is_finite())
            && self.q.is_finite()
            && self.bias.is_finite()
    }
}

/// Unary bias factor `r = W [ba - ba_hat; bw - bw_hat]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasPriorFactor {
    pub target: ImuBias<f64>,
    pub weight: Matrix6<f64>,
    pub keyframe: usize,
}

impl BiasPriorFactor {
    /// Diagonal weight with entries `1/sigma_ba` and `1/sigma_bw`.
    pub fn diagonal_weight(sigma_ba: f64, sigma_bw: f64) -> Matrix6<f64> {
        let a = 1.0 / sigma_ba;
        let w = 1.0 / sigma_bw;
        Matrix6::from_diagonal(&Vector6::new(a, a, a, w, w, w))
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.weight;
        if (w - w.transpose()).amax() > 1e-12 * w.amax().max(1.0) {
            return Err(Error::InvalidInput("prior weight matrix is not symmetric".into()));
        }
        let eig = w.symmetric_eigenvalues();
        if eig.iter().any(|e| *e < -1e-12 * w.amax().max(1.0)) {
            return Err(Error::InvalidInput(
                "prior weight matrix is not positive semi-definite".into(),
            ));
        }
        Ok(())
    }
}

/// Residual and Jacobian (w.r.t. `[dba, dbw]`) of a bias prior factor.
pub fn prior_residual_and_jacobian(
    state: &KeyframeState,
    f: &BiasPriorFactor,
) -> (Vector6<f64>, Matrix6<f64>) {
    let mut e = Vector6::zeros();
    e.fixed_rows_mut::<3>(0).copy_from(&(state.bias.ba - f.target.ba));
    e.fixed_rows_mut::<3>(3).copy_from(&(state.bias.bw - f.target.bw));
    (f.weight * e, f.weight * Matrix6::identity())
}

/// Unweighted IMU factor residual `[r_alpha, r_beta, r_gamma, r_ba, r_bw]`
/// with Jacobians w.r.t. the tangents of both keyframes.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuResidual {
    pub r: Vector15,
    pub j0: Matrix15,
    pub j1: Matrix15,
}

fn put3(m: &mut Matrix15, r: usize, c: usize, b: &Matrix3<f64>) {
    m.fixed_view_mut::<3, 3>(r, c).copy_from(b);
}

pub fn imu_factor_residual(
    s0: &KeyframeState,
    s1: &KeyframeState,
    preint: &Preintegration<f64>,
    gravity: &GravityConfig<f64>,
) -> Result<ImuResidual> {
    let dt = preint.dt_total;
    if !(dt > 0.0) {
        return Err(Error::InvalidInput("IMU factor needs dt > 0".into()));
    }
    let g = gravity.g_world;
    let r0t = s0.q.to_rotation_matrix().transpose();
    let dp = s1.p - s0.p - s0.v * dt + g * (0.5 * dt * dt);
    let dv = s1.v - s0.v + g * dt;
    let corr = preint.correct_first_order(&s0.bias);
    let a_body = r0t * dp;
    let v_body = r0t * dv;

    let e = corr.gamma.inverse() * (s0.q.inverse() * s1.q);
    let ev = e.vec_xyz();

    let mut r = Vector15::zeros();
    r.fixed_rows_mut::<3>(P).copy_from(&(a_body - corr.alpha));
    r.fixed_rows_mut::<3>(V).copy_from(&(v_body - corr.beta));
    r.fixed_rows_mut::<3>(TH).copy_from(&(ev * 2.0));
    r.fixed_rows_mut::<3>(BA).copy_from(&(s1.bias.ba - s0.bias.ba));
    r.fixed_rows_mut::<3>(BW).copy_from(&(s1.bias.bw - s0.bias.bw));

    let i3 = Matrix3::identity();
    let mut j0 = Matrix15::zeros();
    let mut j1 = Matrix15::zeros();

    put3(&mut j0, P, P, &-r0t);
    put3(&mut j0, P, V, &(-r0t * dt));
    put3(&mut j0, P, TH, &skew(&a_body));
    put3(&mut j0, P, BA, &-preint.j_alpha_ba);
    put3(&mut j0, P, BW, &-preint.j_alpha_bw);
    put3(&mut j1, P, P, &r0t);

    put3(&mut j0, V, V, &-r0t);
    put3(&mut j0, V, TH, &skew(&v_body));
    put3(&mut j0, V, BA, &-preint.j_beta_ba);
    put3(&mut j0, V, BW, &-preint.j_beta_bw);
    put3(&mut j1, V, V, &r0t);

    // d/d(theta1): e * (1, d/2)
    put3(&mut j1, TH, TH, &(i3 * e.w + skew(&ev)));
    // d/d(theta0): a * (1, -d/2) * b with a = gamma_c^-1, b = q0^-1 q1
    let a = corr.gamma.inverse();
    let b = s0.q.inverse() * s1.q;
    let lr = a.left_matrix() * b.right_matrix();
    let jth0: Matrix3<f64> = -lr.fixed_view::<3, 3>(1, 1).into_owned();
    put3(&mut j0, TH, TH, &jth0);
    // d/d(bw0): gamma_c = gamma * exp(J (bw0 - lin))
    let phi = preint.j_gamma_bw * (s0.bias.bw - preint.linearization_bias.bw);
    let jbw = -(i3 * e.w - skew(&ev)) * right_jacobian(&phi) * preint.j_gamma_bw;
    put3(&mut j0, TH, BW, &jbw);

    put3(&mut j0, BA, BA, &-i3);
    put3(&mut j1, BA, BA, &i3);
    put3(&mut j0, BW, BW, &-i3);
    put3(&mut j1, BW, BW, &i3);

    Ok(ImuResidual { r, j0, j1 })
}

/// Weighted pose residual `S [p - p_obs; log(q_obs^-1 q)]` and its Jacobian
/// w.r.t. the state tangent, where `S^T S = info`.
pub fn pose_obs_residual(
    state: &KeyframeState,
    p_obs: &Vector3<f64>,
    q_obs: &UnitQuat<f64>,
    sqrt_info: &Matrix6<f64>,
) -> (Vector6<f64>, Matrix6x15) {
    let phi = (q_obs.inverse() * state.q).log();
    let mut e = Vector6::zeros();
    e.fixed_rows_mut::<3>(0).copy_from(&(state.p - p_obs));
    e.fixed_rows_mut::<3>(3).copy_from(&phi);
    let mut j = Matrix6x15::zeros();
    j.fixed_view_mut::<3, 3>(0, P).copy_from(&Matrix3::identity());
    j.fixed_view_mut::<3, 3>(3, TH).copy_from(&right_jacobian_inv(&phi));
    (sqrt_info * e, sqrt_info * j)
}

/// Upper-triangular square root of an information matrix.
pub fn sqrt_information(info: &Matrix6<f64>) -> Result<Matrix6<f64>> {
    let chol = info
        .cholesky()
        .ok_or_else(|| Error::InvalidInput("information matrix is not positive definite".into()))?;
    Ok(chol.l().transpose())
}

/// Continuous-time IMU noise used to weight the preintegration factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImuNoiseWeights {
    /// m/s²/√Hz
    pub accel_noise_density: f64,
    /// rad/s/√Hz
    pub gyro_noise_density: f64,
    /// m/s³/√Hz
    pub accel_walk_density: f64,
    /// rad/s²/√Hz
    pub gyro_walk_density: f64,
}

impl Default for ImuNoiseWeights {
    fn default() -> Self {
        Self {
            accel_noise_density: 2.0e-3,
            gyro_noise_density: 2.0e-4,
            accel_walk_density: 3.0e-3,
            gyro_walk_density: 2.0e-5,
        }
    }
}

impl ImuNoiseWeights {
    /// Diagonal square-root information for an interval of length `dt`.
    fn sqrt_info(&self, dt: f64) -> Vector15 {
        let s = |sigma: f64| 1.0 / (sigma * sigma * dt).sqrt();
        let mut w = Vector15::zeros();
        for i in 0..3 {
            w[P + i] = s(self.accel_noise_density);
            w[V + i] = s(self.accel_noise_density);
            w[TH + i] = s(self.gyro_noise_density);
            w[BA + i] = s(self.accel_walk_density);
            w[BW + i] = s(self.gyro_walk_density);
        }
        w
    }
}

#[derive(Debug, Clone)]
pub struct ImuFactor {
    /// Samples spanning the two keyframes, both ends included.
    pub samples: Vec<ImuSample<f64>>,
    pub preint: Preintegration<f64>,
}

impl ImuFactor {
    pub fn new(samples: Vec<ImuSample<f64>>, bias: &ImuBias<f64>) -> Result<Self> {
        let preint = integrate(&samples, bias)?;
        Ok(Self { samples, preint })
    }

    pub fn relinearize(&mut self, bias: &ImuBias<f64>) -> Result<()> {
        self.preint = integrate(&self.samples, bias)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseFactor {
    pub keyframe: usize,
    pub p: Vector3<f64>,
    pub q: UnitQuat<f64>,
    pub sqrt_info: Matrix6<f64>,
}

#[derive(Debug, Clone)]
pub struct WindowGraph {
    pub keyframes: Vec<KeyframeState>,
    /// `imu_factors[i]` links keyframes `i` and `i + 1`.
    pub imu_factors: Vec<ImuFactor>,
    pub pose_factors: Vec<PoseFactor>,
    pub prior_factors: Vec<BiasPriorFactor>,
    pub gravity: GravityConfig<f64>,
    pub imu_noise: ImuNoiseWeights,
    /// Holds the oldest keyframe's position and rotation fixed.
    pub pin_oldest_pose: bool,
}

impl WindowGraph {
    pub fn new(gravity: GravityConfig<f64>, imu_noise: ImuNoiseWeights) -> Self {
        Self {
            keyframes: Vec::new(),
            imu_factors: Vec::new(),
            pose_factors: Vec::new(),
            prior_factors: Vec::new(),
            gravity,
            imu_noise,
            pin_oldest_pose: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.keyframes.is_empty() {
            return Err(Error::InvalidInput("window has no keyframes".into()));
        }
        if self.imu_factors.len() + 1 != self.keyframes.len() {
            return Err(Error::InvalidInput(format!(
                "{} keyframes need {} IMU factors, found {}",
                self.keyframes.len(),
                self.keyframes.len() - 1,
                self.imu_factors.len()
            )));
        }
        let k = self.keyframes.len();
        if self.pose_factors.iter().any(|f| f.keyframe >= k)
            || self.prior_factors.iter().any(|f| f.keyframe >= k)
        {
            return Err(Error::InvalidInput("factor references a missing keyframe".into()));
        }
        for f in &self.prior_factors {
            f.validate()?;
        }
        Ok(())
    }

    /// `0.5 * sum |r|^2` over all factors at `states`.
    pub fn cost(&self, states: &[KeyframeState]) -> Result<f64> {
        let mut c = 0.0;
        for (i, f) in self.imu_factors.iter().enumerate() {
            let res = imu_factor_residual(&states[i], &states[i + 1], &f.preint, &self.gravity)?;
            let w = self.imu_noise.sqrt_info(f.preint.dt_total);
            c += res.r.component_mul(&w).norm_squared();
        }
        for f in &self.pose_factors {
            let (r, _) = pose_obs_residual(&states[f.keyframe], &f.p, &f.q, &f.sqrt_info);
            c += r.norm_squared();
        }
        for f in &self.prior_factors {
            let (r, _) = prior_residual_and_jacobian(&states[f.keyframe], f);
            c += r.norm_squared();
        }
        Ok(0.5 * c)
    }

    /// Gauss-Newton system `(J^T J, J^T r)` at `states`.
    fn linearize(&self, states: &[KeyframeState]) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let n = STATE_DIM * states.len();
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        for (i, f) in self.imu_factors.iter().enumerate() {
            let res = imu_factor_residual(&states[i], &states[i + 1], &f.preint, &self.gravity)?;
            let w = Matrix15::from_diagonal(&self.imu_noise.sqrt_info(f.preint.dt_total));
            let r = w * res.r;
            let blocks = [(i, w * res.j0), (i + 1, w * res.j1)];
            for (a, ja) in &blocks {
                let oa = a * STATE_DIM;
                let gb = ja.transpose() * r;
                let mut gv = g.rows_mut(oa, STATE_DIM);
                gv += gb;
                for (b, jb) in &blocks {
                    let ob = b * STATE_DIM;
                    let hb = ja.transpose() * jb;
                    let mut view = h.view_mut((oa, ob), (STATE_DIM, STATE_DIM));
                    view += hb;
                }
            }
        }
        for f in &self.pose_factors {
            let (r, j) = pose_obs_residual(&states[f.keyframe], &f.p, &f.q, &f.sqrt_info);
            let o = f.keyframe * STATE_DIM;
            let mut gv = g.rows_mut(o, STATE_DIM);
            gv += j.transpose() * r;
            let mut view = h.view_mut((o, o), (STATE_DIM, STATE_DIM));
            view += j.transpose() * j;
        }
        for f in &self.prior_factors {
            let (r, j) = prior_residual_and_jacobian(&states[f.keyframe], f);
            let o = f.keyframe * STATE_DIM + BA;
            let mut gv = g.rows_mut(o, 6);
            gv += j.transpose() * r;
            let mut view = h.view_mut((o, o), (6, 6));
            view += j.transpose() * j;
        }
        Ok((h, g))
    }

    fn pinned(&self) -> Vec<usize> {
        if self.pin_oldest_pose {
            (P..P + 3).chain(TH..TH + 3).collect()
        } else {
            Vec::new()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop when `(old - new) / old` falls below this.
    pub rel_cost_tol: f64,
    pub step_tol: f64,
    pub initial_lambda: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            rel_cost_tol: 1e-9,
            step_tol: 1e-10,
            initial_lambda: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    RelativeCostDecrease,
    StepNorm,
    MaxIterations,
    ZeroCost,
    NoProgress,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    pub keyframes: Vec<KeyframeState>,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
}

const MAX_LAMBDA: f64 = 1e16;

/// Levenberg-Marquardt over all keyframe tangents in the window.
pub fn optimize_window(graph: &WindowGraph, options: &LmOptions) -> Result<OptimizeReport> {
    graph.validate()?;
    let mut states = graph.keyframes.clone();
    let initial_cost = graph.cost(&states)?;
    if !initial_cost.is_finite() {
        return Err(Error::Numerical("initial window cost is not finite".into()));
    }
    let pinned = graph.pinned();
    let mut cost = initial_cost;
    let mut trace = vec![cost];
    let mut lambda = options.initial_lambda;
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;

    while iterations < options.max_iterations {
        if cost == 0.0 {
            termination = Termination::ZeroCost;
            break;
        }
        iterations += 1;
        let (h, g) = graph.linearize(&states)?;
        let n = h.nrows();
        let mut accepted = None;
        while lambda <= MAX_LAMBDA {
            let mut a = h.clone();
            for i in 0..n {
                a[(i, i)] += lambda * h[(i, i)].max(1e-6);
            }
            let mut rhs = -&g;
            for &i in &pinned {
                a.row_mut(i).fill(0.0);
                a.column_mut(i).fill(0.0);
                a[(i, i)] = 1.0;
                rhs[i] = 0.0;
            }
            let Some(chol) = a.clone().cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = chol.solve(&rhs);
            let candidate: Vec<KeyframeState> = states
                .iter()
                .enumerate()
                .map(|(k, s)| s.retract(&delta.as_slice()[k * STATE_DIM..(k + 1) * STATE_DIM]))
                .collect();
            let new_cost = graph.cost(&candidate)?;
            if new_cost.is_finite() && new_cost <= cost {
                accepted = Some((candidate, new_cost, delta.norm()));
                lambda = (lambda / 10.0).max(1e-15);
                break;
            }
            lambda *= 10.0;
        }
        let Some((candidate, new_cost, step)) = accepted else {
            if iterations == 1 && h.clone().cholesky().is_none() && lambda > MAX_LAMBDA {
                let d = h.diagonal();
                return Err(Error::Numerical(format!(
                    "normal matrix not positive definite after damping (diag min {:e}, max {:e})",
                    d.min(),
                    d.max()
                )));
            }
            termination = Termination::NoProgress;
            break;
        };
        let rel = (cost - new_cost) / cost;
        states = candidate;
        cost = new_cost;
        trace.push(cost);
        if rel < options.rel_cost_tol {
            termination = Termination::RelativeCostDecrease;
            break;
        }
        if step < options.step_tol {
            termination = Termination::StepNorm;
            break;
        }
    }
    if states.iter().any(|s| !s.is_finite()) {
        return Err(Error::Diverged("window states became non-finite".into()));
    }
    Ok(OptimizeReport {
        keyframes: states,
        initial_cost,
        final_cost: cost,
        cost_trace: trace,
        iterations,
        termination,
    })
}

/// Externally supplied bias target with its timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedBiasPrior {
    pub t: f64,
    pub bias: ImuBias<f64>,
    /// Emitted before the first full inference window.
    pub warmup: bool,
}

/// Simulated pose measurement standing in for visual constraints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseObservation {
    pub t: f64,
    pub p: Vector3<f64>,
    pub q: UnitQuat<f64>,
    /// Tracking lost; no factor is created.
    pub dropped: bool,
}

/// Noisy pose observations sampled from ground truth at `period` spacing,
/// dropped inside any `[start, end]` window of `dropout`.
pub fn vision_surrogate(
    gt: &[GtState<f64>],
    period: f64,
    position_sigma: f64,
    rotation_sigma: f64,
    dropout: &[[f64; 2]],
    seed: u64,
) -> Vec<PoseObservation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n3 = |rng: &mut ChaCha8Rng| {
        Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        )
    };
    let mut out = Vec::new();
    let mut next_t = match gt.first() {
        Some(s) => s.t,
        None => return out,
    };
    for s in gt {
        if s.t + 1e-9 < next_t {
            continue;
        }
        next_t += period;
        let np: Vector3<f64> = n3(&mut rng) * position_sigma;
        let nr: Vector3<f64> = n3(&mut rng) * rotation_sigma;
        let dropped = dropout.iter().any(|[a, b]| s.t >= *a && s.t <= *b);
        out.push(PoseObservation {
            t: s.t,
            p: s.nav.p + np,
            q: s.nav.q * UnitQuat::exp(&nr),
            dropped,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Keyframes kept in the window.
    pub lag: usize,
    pub keyframe_period: f64,
    pub imu_noise: ImuNoiseWeights,
    pub pose_position_sigma: f64,
    pub pose_rotation_sigma: f64,
    pub prior_sigma_ba: f64,
    pub prior_sigma_bw: f64,
    /// Attach each prior to every keyframe in the window instead of only the newest.
    pub prior_retroactive: bool,
    /// Max |t_obs - t_keyframe| for a pose observation to be used.
    pub observation_tolerance: f64,
    pub gravity: [f64; 3],
    pub lm: LmOptions,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            lag: 10,
            keyframe_period: 0.5,
            imu_noise: ImuNoiseWeights::default(),
            pose_position_sigma: 0.05,
            pose_rotation_sigma: 0.02,
            prior_sigma_ba: 0.1,
            prior_sigma_bw: 0.01,
            prior_retroactive: false,
            observation_tolerance: 2e-3,
            gravity: [0.0, 0.0, 9.81],
            lm: LmOptions::default(),
        }
    }
}

impl FusionConfig {
    pub fn prior_weight(&self) -> Matrix6<f64> {
        BiasPriorFactor::diagonal_weight(self.prior_sigma_ba, self.prior_sigma_bw)
    }

    fn pose_sqrt_info(&self) -> Matrix6<f64> {
        let a = 1.0 / self.pose_position_sigma;
        let r = 1.0 / self.pose_rotation_sigma;
        Matrix6::from_diagonal(&Vector6::new(a, a, a, r, r, r))
    }

    pub fn validate(&self) -> Result<()> {
        if self.lag < 2 {
            return Err(Error::InvalidInput("lag must be at least 2".into()));
        }
        let positive = [
            self.keyframe_period,
            self.pose_position_sigma,
            self.pose_rotation_sigma,
            self.prior_sigma_ba,
            self.prior_sigma_bw,
            self.imu_noise.accel_noise_density,
            self.imu_noise.gyro_noise_density,
            self.imu_noise.accel_walk_density,
            self.imu_noise.gyro_walk_density,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput(
                "fusion periods and sigmas must be positive and finite".into(),
            ));
        }
        Ok(())
    }
}

/// One emitted keyframe of a fixed-lag run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeEstimate {
    pub state: KeyframeState,
    /// Prior target attached when this keyframe was created.
    pub prior_target: Option<ImuBias<f64>>,
    /// Bias right after the solve in which this keyframe was newest; the
    /// initial bias for the first keyframe.
    pub online_bias: ImuBias<f64>,
    pub observed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedLagOutput {
    pub keyframes: Vec<KeyframeEstimate>,
    pub window_solves: usize,
}

struct Slot {
    estimate: KeyframeEstimate,
    observation: Option<PoseObservation>,
}

fn latest_prior(priors: &[TimedBiasPrior], t: f64) -> Option<ImuBias<f64>> {
    let idx = priors.partition_point(|p| p.t <= t + 1e-9);
    priors[..idx]
        .iter()
        .rev()
        .find(|p| !p.warmup)
        .map(|p| p.bias)
}

/// Runs the sliding-window estimator over a full stream.
///
/// `initial` seeds the first keyframe at `imu[0].t`; its pose is the first
/// pinned pose. `priors`, when given, must be time-sorted.
pub fn run_fixed_lag(
    imu: &[ImuSample<f64>],
    observations: &[PoseObservation],
    priors: Option<&[TimedBiasPrior]>,
    initial: &KeyframeState,
    config: &FusionConfig,
) -> Result<FixedLagOutput> {
    config.validate()?;
    validate_samples(imu)?;
    if imu.len() < 2 {
        return Err(Error::TooFewSamples(imu.len()));
    }
    for w in imu.windows(2) {
        let gap = w[1].t - w[0].t;
        if gap > config.keyframe_period {
            return Err(Error::StreamGap { t: w[0].t, gap });
        }
    }
    let gravity = GravityConfig::override_unchecked(Vector3::from(config.gravity))?;
    let weight = config.prior_weight();
    let sqrt_info = config.pose_sqrt_info();

    let find_obs = |t: f64| -> Option<PoseObservation> {
        let i = observations.partition_point(|o| o.t < t - config.observation_tolerance);
        observations
            .get(i)
            .filter(|o| (o.t - t).abs() <= config.observation_tolerance && !o.dropped)
            .copied()
    };

    let mut window: VecDeque<Slot> = VecDeque::new();
    let mut factors: VecDeque<ImuFactor> = VecDeque::new();
    let mut output = Vec::new();
    let mut solves = 0;

    let first = KeyframeState { t: imu[0].t, ..*initial };
    let prior0 = priors.and_then(|p| latest_prior(p, first.t));
    window.push_back(Slot {
        estimate: KeyframeEstimate {
            state: first,
            prior_target: prior0,
            online_bias: first.bias,
            observed: find_obs(first.t).is_some(),
        },
        observation: find_obs(first.t),
    });

    let mut start = 0usize;
    let mut k = 1usize;
    while k < imu.len() {
        let t_last = imu[start].t;
        // next keyframe at the first sample at least one period later
        let rel = imu[k..].partition_point(|s| s.t < t_last + config.keyframe_period - 1e-9);
        let end = k + rel;
        if end >= imu.len() {
            break;
        }
        let prev = window.back().expect("window never empty").estimate.state;
        let factor = ImuFactor::new(imu[start..=end].to_vec(), &prev.bias)?;
        let predicted = predict_state(
            &prev.nav(),
            &factor.preint.deltas(),
            &gravity,
            factor.preint.dt_total,
        );
        let t = imu[end].t;
        let state = KeyframeState::from_nav(t, &predicted, prev.bias);
        let obs = find_obs(t);
        let prior_target = priors.and_then(|p| latest_prior(p, t));
        window.push_back(Slot {
            estimate: KeyframeEstimate {
                state,
                prior_target,
                online_bias: state.bias,
                observed: obs.is_some(),
            },
            observation: obs,
        });
        factors.push_back(factor);

        let mut graph = WindowGraph::new(gravity, config.imu_noise);
        graph.keyframes = window.iter().map(|s| s.estimate.state).collect();
        for (i, f) in factors.iter_mut().enumerate() {
            f.relinearize(&graph.keyframes[i].bias)?;
        }
        graph.imu_factors = factors.iter().cloned().collect();
        for (i, s) in window.iter().enumerate() {
            if let Some(o) = &s.observation {
                graph.pose_factors.push(PoseFactor {
                    keyframe: i,
                    p: o.p,
                    q: o.q,
                    sqrt_info,
                });
            }
        }
        let newest = window.len() - 1;
        if let Some(target) = prior_target {
            if config.prior_retroactive {
                for i in 0..=newest {
                    graph.prior_factors.push(BiasPriorFactor {
                        target,
                        weight,
                        keyframe: i,
                    });
                }
            } else {
                graph.prior_factors.push(BiasPriorFactor {
                    target,
                    weight,
                    keyframe: newest,
                });
            }
        }
        let report = optimize_window(&graph, &config.lm)?;
        solves += 1;
        for (slot, s) in window.iter_mut().zip(report.keyframes) {
            slot.estimate.state = s;
        }
        let back = &mut window.back_mut().expect("window never empty").estimate;
        back.online_bias = back.state.bias;

        if window.len() > config.lag {
            let dropped = window.pop_front().expect("non-empty");
            factors.pop_front();
            output.push(dropped.estimate);
        }
        start = end;
        k = end + 1;
    }
    output.extend(window.into_iter().map(|s| s.estimate));
    Ok(FixedLagOutput {
        keyframes: output,
        window_solves: solves,
    })
}
