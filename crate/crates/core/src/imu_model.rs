//! IMU measurement model and an analytic synthetic trajectory generator.
//!
//! Measurements follow `accel = R_wbᵀ (a_w + g_w) + ba + n_a` and
//! `gyro = omega_b + bw + n_w`. With `g_w = (0, 0, 9.81)` a level, stationary
//! sensor reads `+9.81` on its z axis.

use std::f64::consts::TAU;
use std::ops::{Add, Sub};

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::UnitQuat;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample<T> {
    /// Seconds.
    pub t: T,
    /// Angular rate, rad/s.
    pub gyro: Vector3<T>,
    /// Specific force, m/s².
    pub accel: Vector3<T>,
}

impl<T: Real> ImuSample<T> {
    pub fn new(t: T, gyro: Vector3<T>, accel: Vector3<T>) -> Self {
        Self { t, gyro, accel }
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self.gyro.iter().all(|v| v.is_finite())
            && self.accel.iter().all(|v| v.is_finite())
    }
}

/// Checks the sequence invariants: finite components and strictly increasing time.
pub fn validate_samples<T: Real>(samples: &[ImuSample<T>]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::NonFinite("imu sample"));
        }
        if i > 0 && s.t <= samples[i - 1].t {
            return Err(Error::NonMonotonic {
                index: i,
                prev: samples[i - 1].t.to_f64_lossy(),
                next: s.t.to_f64_lossy(),
            });
        }
    }
    Ok(())
}

/// Accelerometer and gyroscope bias pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct ImuBias<T: Real> {
    /// m/s²
    pub ba: Vector3<T>,
    /// rad/s
    pub bw: Vector3<T>,
}

impl<T: Real> Default for ImuBias<T> {
    fn default() -> Self {
        Self::zero()
    }
}

impl<T: Real> ImuBias<T> {
    pub fn zero() -> Self {
        Self {
            ba: Vector3::zeros(),
            bw: Vector3::zeros(),
        }
    }

    pub fn new(ba: Vector3<T>, bw: Vector3<T>) -> Self {
        Self { ba, bw }
    }

    pub fn is_finite(&self) -> bool {
        self.ba.iter().chain(self.bw.iter()).all(|v| v.is_finite())
    }

    /// Stacked `[ba; bw]`.
    pub fn to_array(&self) -> [T; 6] {
        [
            self.ba.x, self.ba.y, self.ba.z, self.bw.x, self.bw.y, self.bw.z,
        ]
    }

    pub fn from_slice(v: &[T]) -> Self {
        Self {
            ba: Vector3::new(v[0], v[1], v[2]),
            bw: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn validate(&self, bounds: &BiasBounds) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::NonFinite("ImuBias"));
        }
        let na = self.ba.norm().to_f64_lossy();
        let nw = self.bw.norm().to_f64_lossy();
        if na >= bounds.accel_max || nw >= bounds.gyro_max {
            return Err(Error::InvalidInput(format!(
                "bias magnitude out of bounds: |ba| = {na}, |bw| = {nw}"
            )));
        }
        Ok(())
    }
}

impl<T: Real> Add for ImuBias<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.ba + o.ba, self.bw + o.bw)
    }
}

impl<T: Real> Sub for ImuBias<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.ba - o.ba, self.bw - o.bw)
    }
}

/// Sanity bounds on bias magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasBounds {
    pub accel_max: f64,
    pub gyro_max: f64,
}

impl Default for BiasBounds {
    fn default() -> Self {
        Self {
            accel_max: 2.0,
            gyro_max: 0.5,
        }
    }
}

/// Sensor noise. White noise is given as a per-sample standard deviation;
/// random walks as densities per √s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub accel_noise_std: f64,
    pub gyro_noise_std: f64,
    pub accel_walk_std: f64,
    pub gyro_walk_std: f64,
    pub rng_seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self::noiseless(0)
    }
}

impl NoiseSpec {
    pub fn noiseless(seed: u64) -> Self {
        Self {
            accel_noise_std: 0.0,
            gyro_noise_std: 0.0,
            accel_walk_std: 0.0,
            gyro_walk_std: 0.0,
            rng_seed: seed,
        }
    }

    /// Converts a continuous-time noise density (unit/√Hz, as in EuRoC
    /// `sensor.yaml`) to the per-sample standard deviation at `rate_hz`.
    pub fn per_sample_std_from_density(density: f64, rate_hz: f64) -> f64 {
        density * rate_hz.sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.accel_noise_std,
            self.gyro_noise_std,
            self.accel_walk_std,
            self.gyro_walk_std,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(
                "noise standard deviations must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// World-frame gravity vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GravityConfig<T> {
    pub g_world: Vector3<T>,
}

impl<T: Real> Default for GravityConfig<T> {
    fn default() -> Self {
        Self {
            g_world: Vector3::new(T::zero(), T::zero(), T::lit(9.81)),
        }
    }
}

impl<T: Real> GravityConfig<T> {
    /// Gravity with magnitude in [9.7, 9.9] m/s².
    pub fn new(g_world: Vector3<T>) -> Result<Self> {
        let n = g_world.norm().to_f64_lossy();
        if !n.is_finite() || !(9.7..=9.9).contains(&n) {
            return Err(Error::InvalidInput(format!(
                "gravity magnitude {n} outside [9.7, 9.9]; use GravityConfig::override_unchecked"
            )));
        }
        Ok(Self { g_world })
    }

    /// Any finite gravity vector, including zero.
    pub fn override_unchecked(g_world: Vector3<T>) -> Result<Self> {
        if !g_world.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("GravityConfig"));
        }
        Ok(Self { g_world })
    }

    pub fn zero_gravity() -> Self {
        Self {
            g_world: Vector3::zeros(),
        }
    }
}

/// Closed-form sinusoidal trajectory: position per axis and roll/pitch/yaw
/// per axis, each `A sin(2π f t + φ)`, on top of a constant base attitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectorySpec {
    pub position_amplitude: [f64; 3],
    pub position_frequency: [f64; 3],
    pub position_phase: [f64; 3],
    /// Roll, pitch, yaw amplitudes in radians.
    pub attitude_amplitude: [f64; 3],
    pub attitude_frequency: [f64; 3],
    pub attitude_phase: [f64; 3],
    /// `(w, x, y, z)`, left-multiplied onto the oscillating attitude.
    pub base_attitude: [f64; 4],
    pub duration: f64,
    pub imu_rate: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            position_amplitude: [0.0; 3],
            position_frequency: [0.0; 3],
            position_phase: [0.0; 3],
            attitude_amplitude: [0.0; 3],
            attitude_frequency: [0.0; 3],
            attitude_phase: [0.0; 3],
            base_attitude: [1.0, 0.0, 0.0, 0.0],
            duration: 10.0,
            imu_rate: 200.0,
        }
    }
}

impl TrajectorySpec {
    /// A stationary, level sensor.
    pub fn stationary(duration: f64) -> Self {
        Self {
            duration,
            ..Self::default()
        }
    }

    /// Hand-held style motion used by the synthetic experiments.
    pub fn handheld(duration: f64) -> Self {
        Self {
            position_amplitude: [1.2, 0.9, 0.4],
            position_frequency: [0.11, 0.17, 0.23],
            position_phase: [0.0, 0.7, 1.9],
            attitude_amplitude: [0.25, 0.2, 0.6],
            attitude_frequency: [0.31, 0.23, 0.13],
            attitude_phase: [0.3, 1.1, 0.0],
            base_attitude: [1.0, 0.0, 0.0, 0.0],
            duration,
            imu_rate: 200.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::InvalidInput("trajectory duration must be > 0".into()));
        }
        if !(self.imu_rate > 0.0 && self.imu_rate.is_finite()) {
            return Err(Error::InvalidInput("imu rate must be > 0".into()));
        }
        let fields = self
            .position_amplitude
            .iter()
            .chain(&self.position_frequency)
            .chain(&self.position_phase)
            .chain(&self.attitude_amplitude)
            .chain(&self.attitude_frequency)
            .chain(&self.attitude_phase)
            .chain(&self.base_attitude);
        if fields.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("TrajectorySpec"));
        }
        self.base_quat()?;
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        (self.duration * self.imu_rate + 1e-9).floor() as usize + 1
    }

    fn base_quat(&self) -> Result<UnitQuat<f64>> {
        let [w, x, y, z] = self.base_attitude;
        UnitQuat::new_normalize(w, x, y, z)
    }
}

/// Position, velocity and orientation at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState<T> {
    pub p: Vector3<T>,
    pub v: Vector3<T>,
    /// Body to world.
    pub q: UnitQuat<T>,
}

impl<T: Real> NavState<T> {
    pub fn new(p: Vector3<T>, v: Vector3<T>, q: UnitQuat<T>) -> Self {
        Self { p, v, q }
    }
}

/// Timestamped ground-truth state, optionally carrying the true bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtState<T: Real> {
    pub t: T,
    pub nav: NavState<T>,
    pub bias: Option<ImuBias<T>>,
}

/// Analytic kinematics of a [`TrajectorySpec`] at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    pub orientation: UnitQuat<f64>,
    pub omega_body: Vector3<f64>,
}

impl TrajectoryPoint {
    pub fn nav(&self) -> NavState<f64> {
        NavState::new(self.position, self.velocity, self.orientation)
    }
}

fn wave(a: f64, f: f64, phase: f64, t: f64) -> (f64, f64, f64) {
    let w = TAU * f;
    let (s, c) = (w * t + phase).sin_cos();
    (a * s, a * w * c, -a * w * w * s)
}

/// Exact position/velocity/acceleration/attitude/body-rate at time `t`.
pub fn sample_ground_truth(spec: &TrajectorySpec, t: f64) -> Result<TrajectoryPoint> {
    if !(0.0..=spec.duration).contains(&t) {
        return Err(Error::TimeOutOfRange {
            t,
            duration: spec.duration,
        });
    }
    Ok(eval_trajectory(spec, &spec.base_quat()?, t))
}

fn eval_trajectory(spec: &TrajectorySpec, base: &UnitQuat<f64>, t: f64) -> TrajectoryPoint {
    let mut position = Vector3::zeros();
    let mut velocity = Vector3::zeros();
    let mut acceleration = Vector3::zeros();
    for i in 0..3 {
        let (p, v, a) = wave(
            spec.position_amplitude[i],
            spec.position_frequency[i],
            spec.position_phase[i],
            t,
        );
        position[i] = p;
        velocity[i] = v;
        acceleration[i] = a;
    }

    let mut angle = [0.0; 3];
    let mut rate = [0.0; 3];
    for i in 0..3 {
        let (a, da, _) = wave(
            spec.attitude_amplitude[i],
            spec.attitude_frequency[i],
            spec.attitude_phase[i],
            t,
        );
        angle[i] = a;
        rate[i] = da;
    }
    let [roll, pitch, yaw] = angle;
    let [droll, dpitch, dyaw] = rate;

    // R = Rz(yaw) Ry(pitch) Rx(roll)
    let qx = UnitQuat::exp(&Vector3::new(roll, 0.0, 0.0));
    let qy = UnitQuat::exp(&Vector3::new(0.0, pitch, 0.0));
    let qz = UnitQuat::exp(&Vector3::new(0.0, 0.0, yaw));
    let orientation = *base * (qz * (qy * qx));

    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let omega_body = Vector3::new(
        droll - dyaw * sp,
        dpitch * cr + dyaw * sr * cp,
        -dpitch * sr + dyaw * cr * cp,
    );

    TrajectoryPoint {
        position,
        velocity,
        acceleration,
        orientation,
        omega_body,
    }
}

/// Measurements together with the per-sample true bias and ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub samples: Vec<ImuSample<f64>>,
    /// True bias in effect at each sample.
    pub bias_trace: Vec<ImuBias<f64>>,
    pub ground_truth: Vec<GtState<f64>>,
}

impl SyntheticSequence {
    /// Time average of the true bias over the sequence.
    pub fn mean_bias(&self) -> ImuBias<f64> {
        let n = self.bias_trace.len().max(1) as f64;
        let sum = self
            .bias_trace
            .iter()
            .fold(ImuBias::zero(), |acc, b| acc + *b);
        ImuBias::new(sum.ba / n, sum.bw / n)
    }
}

/// Synthesizes the IMU stream for `spec` under the given bias, noise and gravity.
pub fn synthesize_measurements(
    spec: &TrajectorySpec,
    bias: &ImuBias<f64>,
    noise: &NoiseSpec,
    gravity: &GravityConfig<f64>,
) -> Result<Vec<ImuSample<f64>>> {
    Ok(synthesize_sequence(spec, bias, noise, gravity)?.samples)
}

pub fn synthesize_sequence(
    spec: &TrajectorySpec,
    bias: &ImuBias<f64>,
    noise: &NoiseSpec,
    gravity: &GravityConfig<f64>,
) -> Result<SyntheticSequence> {
    spec.validate()?;
    noise.validate()?;
    if !bias.is_finite() {
        return Err(Error::NonFinite("ImuBias"));
    }
    let base = spec.base_quat()?;
    let n = spec.sample_count();
    let dt = 1.0 / spec.imu_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.rng_seed);
    let normal3 = |rng: &mut ChaCha8Rng| -> Vector3<f64> {
        Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        )
    };

    let mut samples = Vec::with_capacity(n);
    let mut bias_trace = Vec::with_capacity(n);
    let mut ground_truth = Vec::with_capacity(n);
    let mut current = *bias;
    for i in 0..n {
        let t = i as f64 * dt;
        let pt = eval_trajectory(spec, &base, t);
        let specific_force = pt
            .orientation
            .inverse()
            .rotate(&(pt.acceleration + gravity.g_world));
        let na = normal3(&mut rng) * noise.accel_noise_std;
        let nw = normal3(&mut rng) * noise.gyro_noise_std;
        samples.push(ImuSample::new(
            t,
            pt.omega_body + current.bw + nw,
            specific_force + current.ba + na,
        ));
        bias_trace.push(current);
        ground_truth.push(GtState {
            t,
            nav: pt.nav(),
            bias: Some(current),
        });
        let wa = normal3(&mut rng) * (noise.accel_walk_std * dt.sqrt());
        let ww = normal3(&mut rng) * (noise.gyro_walk_std * dt.sqrt());
        current = ImuBias::new(current.ba + wa, current.bw + ww);
    }
    Ok(SyntheticSequence {
        samples,
        bias_trace,
        ground_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn zero_amplitude_trajectory_is_at_rest() {
        let spec = TrajectorySpec::stationary(5.0);
        for t in [0.0, 1.3, 5.0] {
            let pt = sample_ground_truth(&spec, t).unwrap();
            assert_eq!(pt.position, Vector3::zeros());
            assert_eq!(pt.velocity, Vector3::zeros());
            assert_eq!(pt.orientation, UnitQuat::identity());
        }
    }

    #[test]
    fn sine_derivative_at_origin() {
        let spec = TrajectorySpec {
            position_amplitude: [0.7, 0.0, 0.0],
            position_frequency: [0.4, 0.0, 0.0],
            ..TrajectorySpec::stationary(2.0)
        };
        let pt = sample_ground_truth(&spec, 0.0).unwrap();
        assert_eq!(pt.position.x, 0.0);
        assert!((pt.velocity.x - TAU * 0.4 * 0.7).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_time_is_rejected() {
        let spec = TrajectorySpec::stationary(1.0);
        assert!(sample_ground_truth(&spec, -0.1).is_err());
        assert!(sample_ground_truth(&spec, 1.01).is_err());
    }

    #[test]
    fn analytic_velocity_and_rate_match_central_differences() {
        let spec = TrajectorySpec::handheld(20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 1e-6;
        for _ in 0..100 {
            let t = rng.random_range(0.01..19.99);
            let a = sample_ground_truth(&spec, t - h).unwrap();
            let b = sample_ground_truth(&spec, t + h).unwrap();
            let mid = sample_ground_truth(&spec, t).unwrap();
            let v_fd = (b.position - a.position) / (2.0 * h);
            assert!((v_fd - mid.velocity).amax() < 1e-6);
            let a_fd = (b.velocity - a.velocity) / (2.0 * h);
            assert!((a_fd - mid.acceleration).amax() < 1e-5);
            let w_fd = (a.orientation.inverse() * b.orientation).log() / (2.0 * h);
            assert!((w_fd - mid.omega_body).amax() < 1e-6);
        }
    }

    #[test]
    fn stationary_level_sensor_reads_gravity() {
        let spec = TrajectorySpec::stationary(1.0);
        let s = synthesize_measurements(
            &spec,
            &ImuBias::zero(),
            &NoiseSpec::noiseless(0),
            &GravityConfig::default(),
        )
        .unwrap();
        assert_eq!(s.len(), 201);
        for m in &s {
            assert_eq!(m.accel, Vector3::new(0.0, 0.0, 9.81));
            assert_eq!(m.gyro, Vector3::zeros());
        }
    }

    #[test]
    fn additive_bias_appears_in_readings() {
        let spec = TrajectorySpec::stationary(1.0);
        let bias = ImuBias::new(Vector3::new(0.05, -0.02, 0.03), Vector3::zeros());
        let s = synthesize_measurements(
            &spec,
            &bias,
            &NoiseSpec::noiseless(0),
            &GravityConfig::default(),
        )
        .unwrap();
        for m in &s {
            assert!((m.accel - Vector3::new(0.05, -0.02, 9.84)).amax() < 1e-12);
        }
    }

    #[test]
    fn tilted_base_attitude_rotates_gravity_reading() {
        let q = UnitQuat::exp(&Vector3::new(0.3, -0.5, 0.2));
        let spec = TrajectorySpec {
            base_attitude: [q.w, q.x, q.y, q.z],
            ..TrajectorySpec::stationary(1.0)
        };
        let g = GravityConfig::default();
        let s = synthesize_measurements(&spec, &ImuBias::zero(), &NoiseSpec::noiseless(0), &g)
            .unwrap();
        let expected = q.to_rotation_matrix().transpose() * g.g_world;
        assert!((s[0].accel - expected).amax() < 1e-12);
    }

    #[test]
    fn same_seed_same_stream() {
        let spec = TrajectorySpec::handheld(3.0);
        let noise = NoiseSpec {
            accel_noise_std: 0.02,
            gyro_noise_std: 0.002,
            accel_walk_std: 1e-3,
            gyro_walk_std: 1e-4,
            rng_seed: 42,
        };
        let g = GravityConfig::default();
        let a = synthesize_measurements(&spec, &ImuBias::zero(), &noise, &g).unwrap();
        let b = synthesize_measurements(&spec, &ImuBias::zero(), &noise, &g).unwrap();
        assert_eq!(a, b);
        let other = NoiseSpec { rng_seed: 43, ..noise };
        let c = synthesize_measurements(&spec, &ImuBias::zero(), &other, &g).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gravity_bounds_are_enforced() {
        assert!(GravityConfig::<f64>::new(Vector3::new(0.0, 0.0, 9.81)).is_ok());
        assert!(GravityConfig::<f64>::new(Vector3::new(0.0, 0.0, 1.0)).is_err());
        assert!(GravityConfig::<f64>::override_unchecked(Vector3::zeros()).is_ok());
    }

    #[test]
    fn bias_bounds_are_enforced() {
        let ok = ImuBias::new(Vector3::new(0.1, 0.0, 0.0), Vector3::new(0.01, 0.0, 0.0));
        assert!(ok.validate(&BiasBounds::default()).is_ok());
        let bad = ImuBias::new(Vector3::new(3.0, 0.0, 0.0), Vector3::zeros());
        assert!(bad.validate(&BiasBounds::default()).is_err());
    }

    #[test]
    fn density_conversion() {
        let std = NoiseSpec::per_sample_std_from_density(2.0e-3, 200.0);
        assert!((std - 2.0e-3 * 200f64.sqrt()).abs() < 1e-18);
    }
}
