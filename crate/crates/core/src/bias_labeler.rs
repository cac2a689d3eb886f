//! Per-sequence mean bias labels from ground-truth poses.
//!
//! The IMU stream is cut into keyframe intervals. On each interval the
//! preintegrated terms are compared with the terms implied by ground truth,
//! and a single bias shared by every interval is fitted to the first-order
//! model `target - measured ~= J * delta_b`. The gyroscope bias is solved first
//! and frozen; the accelerometer bias follows. Each solve runs a full-batch
//! Adam schedule and is repeated over a few re-linearization passes.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imu_model::{GravityConfig, GtState, ImuBias, ImuSample, NavState};
use crate::preintegration::{gt_targets, integrate, DeltaTerms, Preintegration};

const MAX_GT_GAP: f64 = 0.5;
const BOUNDARY_TOL: f64 = 1e-6;

/// First-order optimizer schedule for the label solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptSchedule {
    pub lr: f64,
    pub iterations: usize,
    /// Learning rate is multiplied by `decay_factor` every `decay_every` iterations.
    pub decay_every: usize,
    pub decay_factor: f64,
    /// Outer re-linearization passes.
    pub passes: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Consecutive loss increases tolerated before declaring divergence.
    pub divergence_window: usize,
}

impl Default for OptSchedule {
    fn default() -> Self {
        Self::gyro_default()
    }
}

impl OptSchedule {
    pub fn gyro_default() -> Self {
        Self {
            lr: 1e-3,
            iterations: 15_000,
            decay_every: 5_000,
            decay_factor: 0.1,
            passes: 3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            divergence_window: 1_000,
        }
    }

    pub fn accel_default() -> Self {
        Self {
            lr: 1e-2,
            ..Self::gyro_default()
        }
    }

    fn lr_at(&self, iteration: usize) -> f64 {
        let k = if self.decay_every == 0 {
            0
        } else {
            iteration / self.decay_every
        };
        self.lr * self.decay_factor.powi(k as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.iterations == 0 || self.passes == 0 {
            return Err(Error::InvalidInput(
                "schedule needs lr > 0, iterations > 0 and passes > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelConfig {
    pub interval_s: f64,
    pub gyro: OptSchedule,
    pub accel: OptSchedule,
    pub gravity: [f64; 3],
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            interval_s: 1.0,
            gyro: OptSchedule::gyro_default(),
            accel: OptSchedule::accel_default(),
            gravity: [0.0, 0.0, 9.81],
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.interval_s > 0.0 && self.interval_s.is_finite()) {
            return Err(Error::InvalidInput("label interval must be > 0".into()));
        }
        self.gyro.validate()?;
        self.accel.validate()?;
        self.gravity().map(|_| ())
    }

    pub fn gravity(&self) -> Result<GravityConfig<f64>> {
        GravityConfig::override_unchecked(Vector3::from(self.gravity))
    }
}

/// One keyframe interval: measured preintegration and ground-truth targets.
#[derive(Debug, Clone)]
pub struct Interval {
    /// Indices into [`IntervalResidualSet::samples`], both ends inclusive.
    pub first: usize,
    pub last: usize,
    pub preint: Preintegration<f64>,
    pub target: DeltaTerms<f64>,
    pub dt: f64,
}

#[derive(Debug, Clone)]
pub struct IntervalResidualSet {
    pub samples: Vec<ImuSample<f64>>,
    pub intervals: Vec<Interval>,
}

impl IntervalResidualSet {
    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    fn reintegrate(&self, bias: &ImuBias<f64>) -> Result<Vec<Preintegration<f64>>> {
        self.intervals
            .iter()
            .map(|iv| integrate(&self.samples[iv.first..=iv.last], bias))
            .collect()
    }
}

/// Interpolates ground truth at `t`: linear in position/velocity, slerp in
/// orientation. Exact pass-through when `t` hits a ground-truth timestamp.
pub fn interpolate_gt(gt: &[GtState<f64>], t: f64) -> Result<NavState<f64>> {
    let (first, last) = match (gt.first(), gt.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::InsufficientOverlap("empty ground truth".into())),
    };
    if t < first.t || t > last.t {
        return Err(Error::InsufficientOverlap(format!(
            "t = {t} outside ground truth span [{}, {}]",
            first.t, last.t
        )));
    }
    let i = gt.partition_point(|s| s.t <= t);
    let a = &gt[i - 1];
    if a.t == t || i == gt.len() {
        return Ok(a.nav);
    }
    let b = &gt[i];
    let u = (t - a.t) / (b.t - a.t);
    Ok(NavState {
        p: a.nav.p + (b.nav.p - a.nav.p) * u,
        v: a.nav.v + (b.nav.v - a.nav.v) * u,
        q: a.nav.q.slerp(&b.nav.q, u),
    })
}

/// Cuts the IMU stream into `interval_s` pieces over the span covered by
/// ground truth and forms measured and target delta terms at zero bias.
pub fn build_intervals(
    imu: &[ImuSample<f64>],
    gt: &[GtState<f64>],
    interval_s: f64,
    gravity: &GravityConfig<f64>,
) -> Result<IntervalResidualSet> {
    if !(interval_s > 0.0) {
        return Err(Error::InvalidInput("interval_s must be > 0".into()));
    }
    let (gt_first, gt_last) = match (gt.first(), gt.last()) {
        (Some(f), Some(l)) => (f.t, l.t),
        _ => return Err(Error::InsufficientOverlap("empty ground truth".into())),
    };
    for w in gt.windows(2) {
        if w[1].t <= w[0].t {
            return Err(Error::InvalidInput(format!(
                "ground truth not time-sorted at t = {}",
                w[1].t
            )));
        }
        let gap = w[1].t - w[0].t;
        if gap > MAX_GT_GAP {
            return Err(Error::GroundTruthGap { t: w[0].t, gap });
        }
    }
    crate::imu_model::validate_samples(imu)?;

    let samples: Vec<ImuSample<f64>> = imu
        .iter()
        .filter(|s| s.t >= gt_first && s.t <= gt_last)
        .copied()
        .collect();
    let span = match (samples.first(), samples.last()) {
        (Some(a), Some(b)) => b.t - a.t,
        _ => 0.0,
    };
    if span + BOUNDARY_TOL < interval_s {
        return Err(Error::InsufficientOverlap(format!(
            "IMU/ground-truth overlap of {span:.3} s is shorter than one {interval_s} s interval"
        )));
    }

    let t0 = samples[0].t;
    let count = ((span + BOUNDARY_TOL) / interval_s).floor() as usize;
    let mut bounds = Vec::with_capacity(count + 1);
    for k in 0..=count {
        let target = t0 + k as f64 * interval_s;
        let idx = samples.partition_point(|s| s.t < target - BOUNDARY_TOL);
        bounds.push(idx.min(samples.len() - 1));
    }

    let zero = ImuBias::zero();
    let mut intervals = Vec::with_capacity(count);
    for w in bounds.windows(2) {
        let (first, last) = (w[0], w[1]);
        if last <= first {
            return Err(Error::InvalidInput(format!(
                "interval of {interval_s} s holds fewer than 2 IMU samples"
            )));
        }
        let (ta, tb) = (samples[first].t, samples[last].t);
        let sa = interpolate_gt(gt, ta)?;
        let sb = interpolate_gt(gt, tb)?;
        let dt = tb - ta;
        intervals.push(Interval {
            first,
            last,
            preint: integrate(&samples[first..=last], &zero)?,
            target: gt_targets(&sa, &sb, gravity, dt)?,
            dt,
        });
    }
    Ok(IntervalResidualSet { samples, intervals })
}

/// Residual block `e - J * delta` of a linear least-squares problem in a 3-vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearBlock {
    pub jacobian: Matrix3<f64>,
    pub offset: Vector3<f64>,
}

/// Outcome of one Adam run on a fixed linearization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub step_norm: f64,
}

/// Full-batch Adam on `mean_k |e_k - J_k delta|^2`, starting from zero.
/// Returns the lowest-loss iterate visited, so a pass started at the
/// optimum cannot end worse than it began.
pub fn minimize_adam(blocks: &[LinearBlock], schedule: &OptSchedule) -> Result<(Vector3<f64>, PassReport)> {
    schedule.validate()?;
    if blocks.is_empty() {
        return Err(Error::InvalidInput("no residual blocks".into()));
    }
    let n = blocks.len() as f64;
    let eval = |x: &Vector3<f64>| -> (f64, Vector3<f64>) {
        let mut loss = 0.0;
        let mut grad = Vector3::zeros();
        for b in blocks {
            let r = b.offset - b.jacobian * x;
            loss += r.norm_squared();
            grad -= b.jacobian.transpose() * r * 2.0;
        }
        (loss / n, grad / n)
    };

    let mut x = Vector3::zeros();
    let mut m = Vector3::zeros();
    let mut v = Vector3::zeros();
    let (initial_loss, _) = eval(&x);
    let mut prev = initial_loss;
    let (mut best_loss, mut best_x) = (initial_loss, x);
    let mut rising = 0usize;
    let (mut b1t, mut b2t) = (1.0, 1.0);
    for it in 0..schedule.iterations {
        let (loss, g) = eval(&x);
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss at iteration {it}")));
        }
        if loss > prev {
            rising += 1;
            if rising >= schedule.divergence_window {
                return Err(Error::Diverged(format!(
                    "loss rose for {rising} consecutive iterations (iteration {it}, loss {loss:e}, initial {initial_loss:e})"
                )));
            }
        } else {
            rising = 0;
        }
        prev = loss;
        if loss < best_loss {
            best_loss = loss;
            best_x = x;
        }
        b1t *= schedule.beta1;
        b2t *= schedule.beta2;
        m = m * schedule.beta1 + g * (1.0 - schedule.beta1);
        v = v * schedule.beta2 + g.component_mul(&g) * (1.0 - schedule.beta2);
        let mh = m / (1.0 - b1t);
        let vh = v / (1.0 - b2t);
        let lr = schedule.lr_at(it);
        for i in 0..3 {
            x[i] -= lr * mh[i] / (vh[i].sqrt() + schedule.eps);
        }
    }
    let (final_loss, _) = eval(&x);
    if final_loss < best_loss {
        best_loss = final_loss;
        best_x = x;
    }
    Ok((
        best_x,
        PassReport {
            initial_loss,
            final_loss: best_loss,
            step_norm: best_x.norm(),
        },
    ))
}

fn rotation_residual(measured: &DeltaTerms<f64>, target: &DeltaTerms<f64>) -> Vector3<f64> {
    let d = measured.gamma.inverse() * target.gamma;
    let s = if d.w < 0.0 { -2.0 } else { 2.0 };
    d.vec_xyz() * s
}

/// Gyro residual blocks with preintegrations linearized at `(0, lin_bw)`.
/// `delta` in the blocks is relative to `lin_bw`.
pub fn gyro_blocks(set: &IntervalResidualSet, lin_bw: &Vector3<f64>) -> Result<Vec<LinearBlock>> {
    let preints = set.reintegrate(&ImuBias::new(Vector3::zeros(), *lin_bw))?;
    Ok(set
        .intervals
        .iter()
        .zip(&preints)
        .map(|(iv, p)| LinearBlock {
            jacobian: p.j_gamma_bw,
            offset: rotation_residual(&p.deltas(), &iv.target),
        })
        .collect())
}

/// Accel residual blocks (alpha and beta per interval) for the
/// preintegrations `preints`, with the gyro bias frozen at `bw_fixed`.
fn accel_blocks_from(
    set: &IntervalResidualSet,
    preints: &[Preintegration<f64>],
    bw_fixed: &Vector3<f64>,
) -> Vec<LinearBlock> {
    let mut out = Vec::with_capacity(2 * preints.len());
    for (iv, p) in set.intervals.iter().zip(preints) {
        let dbw = bw_fixed - p.linearization_bias.bw;
        out.push(LinearBlock {
            jacobian: p.j_alpha_ba,
            offset: iv.target.alpha - p.alpha - p.j_alpha_bw * dbw,
        });
        out.push(LinearBlock {
            jacobian: p.j_beta_ba,
            offset: iv.target.beta - p.beta - p.j_beta_bw * dbw,
        });
    }
    out
}

/// Accel residual blocks linearized at `lin`, gyro bias frozen at `bw_fixed`.
pub fn accel_blocks(
    set: &IntervalResidualSet,
    lin: &ImuBias<f64>,
    bw_fixed: &Vector3<f64>,
) -> Result<Vec<LinearBlock>> {
    let preints = set.reintegrate(lin)?;
    Ok(accel_blocks_from(set, &preints, bw_fixed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub estimate: Vector3<f64>,
    pub passes: Vec<PassReport>,
    pub iterations: usize,
}

/// Shared gyro bias over all intervals of `set`.
pub fn solve_gyro_bias(set: &IntervalResidualSet, schedule: &OptSchedule) -> Result<SolveReport> {
    if set.is_empty() {
        return Err(Error::InvalidInput("empty interval set".into()));
    }
    let mut bw = Vector3::zeros();
    let mut passes = Vec::with_capacity(schedule.passes);
    for pass in 0..schedule.passes {
        // pass 0 reuses the zero-bias preintegrations from build_intervals
        let blocks = if pass == 0 {
            set.intervals
                .iter()
                .map(|iv| LinearBlock {
                    jacobian: iv.preint.j_gamma_bw,
                    offset: rotation_residual(&iv.preint.deltas(), &iv.target),
                })
                .collect()
        } else {
            gyro_blocks(set, &bw)?
        };
        let (delta, report) = minimize_adam(&blocks, schedule)?;
        bw += delta;
        passes.push(report);
    }
    Ok(SolveReport {
        estimate: bw,
        iterations: schedule.iterations * schedule.passes,
        passes,
    })
}

/// Shared accel bias with the gyro bias held at `bw_fixed`.
pub fn solve_accel_bias(
    set: &IntervalResidualSet,
    bw_fixed: &Vector3<f64>,
    schedule: &OptSchedule,
) -> Result<SolveReport> {
    if set.is_empty() {
        return Err(Error::InvalidInput("empty interval set".into()));
    }
    let mut ba = Vector3::zeros();
    let mut passes = Vec::with_capacity(schedule.passes);
    for pass in 0..schedule.passes {
        let blocks = if pass == 0 {
            let preints: Vec<_> = set.intervals.iter().map(|iv| iv.preint.clone()).collect();
            accel_blocks_from(set, &preints, bw_fixed)
        } else {
            accel_blocks(set, &ImuBias::new(ba, *bw_fixed), bw_fixed)?
        };
        let (delta, report) = minimize_adam(&blocks, schedule)?;
        ba += delta;
        passes.push(report);
    }
    Ok(SolveReport {
        estimate: ba,
        iterations: schedule.iterations * schedule.passes,
        passes,
    })
}

/// RMS over intervals of the alpha (m), beta (m/s) and gamma (rad) errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelRms {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// Preintegration residual RMS of `set` re-integrated at `bias`.
pub fn residual_rms(set: &IntervalResidualSet, bias: &ImuBias<f64>) -> Result<ChannelRms> {
    let preints = set.reintegrate(bias)?;
    let n = preints.len().max(1) as f64;
    let (mut a, mut b, mut g) = (0.0, 0.0, 0.0);
    for (iv, p) in set.intervals.iter().zip(&preints) {
        a += (iv.target.alpha - p.alpha).norm_squared();
        b += (iv.target.beta - p.beta).norm_squared();
        g += (p.gamma.inverse() * iv.target.gamma).angle().powi(2);
    }
    Ok(ChannelRms {
        alpha: (a / n).sqrt(),
        beta: (b / n).sqrt(),
        gamma: (g / n).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelResult {
    pub bias: ImuBias<f64>,
    pub rms_before: ChannelRms,
    pub rms_after: ChannelRms,
    pub iterations: usize,
    pub converged: bool,
    pub intervals: usize,
}

/// Last-pass update below which a solve counts as converged.
const CONVERGED_STEP: f64 = 1e-7;

/// Builds intervals, solves gyro then accel bias and reports the shared bias
/// as the sequence label.
pub fn make_labels(imu: &[ImuSample<f64>], gt: &[GtState<f64>], config: &LabelConfig) -> Result<LabelResult> {
    let gravity = config.gravity()?;
    let set = build_intervals(imu, gt, config.interval_s, &gravity)?;
    let gyro = solve_gyro_bias(&set, &config.gyro)?;
    let accel = solve_accel_bias(&set, &gyro.estimate, &config.accel)?;
    let bias = ImuBias::new(accel.estimate, gyro.estimate);
    let last_step = |r: &SolveReport| r.passes.last().map(|p| p.step_norm).unwrap_or(f64::INFINITY);
    let converged = config.gyro.passes > 1
        && config.accel.passes > 1
        && last_step(&gyro) < CONVERGED_STEP
        && last_step(&accel) < CONVERGED_STEP * 10.0;
    Ok(LabelResult {
        bias,
        rms_before: residual_rms(&set, &ImuBias::zero())?,
        rms_after: residual_rms(&set, &bias)?,
        iterations: gyro.iterations + accel.iterations,
        converged,
        intervals: set.len(),
    })
}
