//! Trajectory accuracy metrics: nearest-neighbour time association, rigid
//! SE(3) alignment (no scale), ATE and RPE.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::UnitQuat;

pub const DEFAULT_MAX_DT: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPose {
    pub t: f64,
    pub p: Vector3<f64>,
    pub q: UnitQuat<f64>,
}

/// Rigid transform `x -> r x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Se3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Se3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

/// Injective nearest-neighbour association with `|t_est - t_gt| <= max_dt`.
///
/// Candidate pairs are accepted greedily in order of increasing time gap, so
/// the result does not depend on input row order. Returned pairs
/// `(est_index, gt_index)` are sorted by estimate time.
pub fn associate(est: &[StampedPose], gt: &[StampedPose], max_dt: f64) -> Vec<(usize, usize)> {
    let mut gt_order: Vec<usize> = (0..gt.len()).collect();
    gt_order.sort_by(|&a, &b| gt[a].t.total_cmp(&gt[b].t).then(a.cmp(&b)));
    let gt_times: Vec<f64> = gt_order.iter().map(|&j| gt[j].t).collect();

    let mut candidates = Vec::new();
    for (i, e) in est.iter().enumerate() {
        let k = gt_times.partition_point(|t| *t < e.t);
        let mut best: Option<(f64, usize)> = None;
        for idx in [k.wrapping_sub(1), k] {
            if let Some(&j) = gt_order.get(idx) {
                let d = (gt[j].t - e.t).abs();
                if d <= max_dt && best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, j));
                }
            }
        }
        if let Some((d, j)) = best {
            candidates.push((d, e.t, gt[j].t, i, j));
        }
    }
    candidates.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.total_cmp(&b.2))
    });
    let mut used_est = vec![false; est.len()];
    let mut used_gt = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (_, _, _, i, j) in candidates {
        if !used_est[i] && !used_gt[j] {
            used_est[i] = true;
            used_gt[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_by(|a, b| est[a.0].t.total_cmp(&est[b.0].t));
    pairs
}

/// Closed-form rigid alignment minimizing `sum |R est_i + t - gt_i|^2`.
pub fn align_se3(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<Se3> {
    if est.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "alignment needs paired points ({} vs {})",
            est.len(),
            gt.len()
        )));
    }
    if est.len() < 3 {
        return Err(Error::Degenerate(format!(
            "alignment needs at least 3 points, got {}",
            est.len()
        )));
    }
    let n = est.len() as f64;
    let mu_e = est.iter().sum::<Vector3<f64>>() / n;
    let mu_g = gt.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (e, g) in est.iter().zip(gt) {
        let de = e - mu_e;
        cov += (g - mu_g) * de.transpose();
        spread += de * de.transpose();
    }
    let sv = spread.symmetric_eigenvalues();
    let mut sv: Vec<f64> = sv.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0] {
        return Err(Error::Degenerate(
            "estimated positions are collinear or coincident".into(),
        ));
    }
    let svd = cov.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Numerical("SVD failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::Numerical("SVD failed".into()))?;
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    Ok(Se3 {
        rotation,
        translation: mu_g - rotation * mu_e,
    })
}

/// Time-associated pose lists with the alignment that maps estimate onto gt.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    pub est: Vec<StampedPose>,
    pub gt: Vec<StampedPose>,
    pub transform: Se3,
}

impl AlignedPair {
    pub fn new(est: &[StampedPose], gt: &[StampedPose], max_dt: f64) -> Result<Self> {
        let pairs = associate(est, gt, max_dt);
        if pairs.is_empty() {
            return Err(Error::EmptyAssociation);
        }
        let est: Vec<StampedPose> = pairs.iter().map(|&(i, _)| est[i]).collect();
        let gt: Vec<StampedPose> = pairs.iter().map(|&(_, j)| gt[j]).collect();
        let pe: Vec<_> = est.iter().map(|s| s.p).collect();
        let pg: Vec<_> = gt.iter().map(|s| s.p).collect();
        let transform = align_se3(&pe, &pg)?;
        Ok(Self { est, gt, transform })
    }

    pub fn len(&self) -> usize {
        self.est.len()
    }

    pub fn is_empty(&self) -> bool {
        self.est.is_empty()
    }

    pub fn ate_rmse(&self) -> f64 {
        let sse: f64 = self
            .est
            .iter()
            .zip(&self.gt)
            .map(|(e, g)| (self.transform.apply(&e.p) - g.p).norm_squared())
            .sum();
        (sse / self.len() as f64).sqrt()
    }

    pub fn rpe_rmse(&self, delta: usize) -> Result<f64> {
        if delta == 0 {
            return Err(Error::InvalidInput("RPE delta must be at least 1".into()));
        }
        if self.len() <= delta {
            return Err(Error::EmptyAssociation);
        }
        let mut sse = 0.0;
        let m = self.len() - delta;
        for k in 0..m {
            let rg = self.gt[k].q.inverse() * self.gt[k + delta].q;
            let re = self.est[k].q.inverse() * self.est[k + delta].q;
            let a = (rg.inverse() * re).angle();
            sse += a * a;
        }
        Ok((sse / m as f64).sqrt())
    }
}

pub fn ate_rmse(est: &[StampedPose], gt: &[StampedPose]) -> Result<f64> {
    Ok(AlignedPair::new(est, gt, DEFAULT_MAX_DT)?.ate_rmse())
}

pub fn rpe_rmse(est: &[StampedPose], gt: &[StampedPose], delta: usize) -> Result<f64> {
    AlignedPair::new(est, gt, DEFAULT_MAX_DT)?.rpe_rmse(delta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ate_rmse_m: f64,
    pub rpe_rmse_rad: f64,
    pub n_associated: usize,
    pub alignment: Se3,
}

pub fn evaluate(est: &[StampedPose], gt: &[StampedPose], delta: usize) -> Result<MetricReport> {
    let pair = AlignedPair::new(est, gt, DEFAULT_MAX_DT)?;
    Ok(MetricReport {
        ate_rmse_m: pair.ate_rmse(),
        rpe_rmse_rad: pair.rpe_rmse(delta)?,
        n_associated: pair.len(),
        alignment: pair.transform,
    })
}
