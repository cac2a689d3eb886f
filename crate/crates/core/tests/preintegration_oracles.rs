//! Finite-difference, re-integration and synthesis oracles for preintegration.

use biasprior_core::imu_model::{synthesize_sequence, NoiseSpec, SyntheticSequence, TrajectorySpec};
use biasprior_core::preintegration::{gt_targets, integrate};
use biasprior_core::{DeltaTerms, GravityConfig, ImuBias, ImuSample};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn truth_bias() -> ImuBias {
    ImuBias::new(Vector3::new(0.05, -0.02, 0.03), Vector3::new(0.002, -0.001, 0.0015))
}

fn synth(spec: &TrajectorySpec, bias: &ImuBias) -> SyntheticSequence {
    synthesize_sequence(spec, bias, &NoiseSpec::noiseless(0), &GravityConfig::default()).unwrap()
}

fn random_spec(rng: &mut ChaCha8Rng, duration: f64) -> TrajectorySpec {
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    TrajectorySpec {
        position_amplitude: [u(0.2, 2.0), u(0.2, 2.0), u(0.1, 1.0)],
        position_frequency: [u(0.05, 0.5), u(0.05, 0.5), u(0.05, 0.5)],
        position_phase: [u(0.0, 6.0), u(0.0, 6.0), u(0.0, 6.0)],
        attitude_amplitude: [u(0.05, 0.5), u(0.05, 0.5), u(0.1, 1.0)],
        attitude_frequency: [u(0.05, 0.5), u(0.05, 0.5), u(0.05, 0.5)],
        attitude_phase: [u(0.0, 6.0), u(0.0, 6.0), u(0.0, 6.0)],
        duration,
        ..TrajectorySpec::default()
    }
}

fn rotation_delta(a: &DeltaTerms, b: &DeltaTerms) -> Vector3<f64> {
    (a.gamma.inverse() * b.gamma).log()
}

/// Largest elementwise relative error; entries whose reference is tiny
/// compared with the block scale are judged against that scale.
fn block_rel_err(analytic: &Matrix3<f64>, fd: &Matrix3<f64>) -> f64 {
    let scale = fd.amax().max(1e-12);
    analytic
        .iter()
        .zip(fd.iter())
        .map(|(a, f)| (a - f).abs() / f.abs().max(1e-3 * scale))
        .fold(0.0, f64::max)
}

struct FdJacobians {
    alpha_ba: Matrix3<f64>,
    alpha_bw: Matrix3<f64>,
    beta_ba: Matrix3<f64>,
    beta_bw: Matrix3<f64>,
    gamma_bw: Matrix3<f64>,
}

fn finite_difference_jacobians(samples: &[ImuSample], lin: &ImuBias, h: f64) -> FdJacobians {
    let base = integrate(samples, lin).unwrap().deltas();
    let mut fd = FdJacobians {
        alpha_ba: Matrix3::zeros(),
        alpha_bw: Matrix3::zeros(),
        beta_ba: Matrix3::zeros(),
        beta_bw: Matrix3::zeros(),
        gamma_bw: Matrix3::zeros(),
    };
    for c in 0..3 {
        for gyro in [false, true] {
            let mut d = Vector3::zeros();
            d[c] = h;
            let (plus, minus) = if gyro {
                (
                    ImuBias::new(lin.ba, lin.bw + d),
                    ImuBias::new(lin.ba, lin.bw - d),
                )
            } else {
                (
                    ImuBias::new(lin.ba + d, lin.bw),
                    ImuBias::new(lin.ba - d, lin.bw),
                )
            };
            let p = integrate(samples, &plus).unwrap().deltas();
            let m = integrate(samples, &minus).unwrap().deltas();
            let da = (p.alpha - m.alpha) / (2.0 * h);
            let db = (p.beta - m.beta) / (2.0 * h);
            if gyro {
                fd.alpha_bw.set_column(c, &da);
                fd.beta_bw.set_column(c, &db);
                let dg = (rotation_delta(&base, &p) - rotation_delta(&base, &m)) / (2.0 * h);
                fd.gamma_bw.set_column(c, &dg);
            } else {
                fd.alpha_ba.set_column(c, &da);
                fd.beta_ba.set_column(c, &db);
            }
        }
    }
    fd
}

#[test]
fn bias_jacobians_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let spec = random_spec(&mut rng, 1.0);
        let seq = synth(&spec, &truth_bias());
        let lin = ImuBias::new(
            Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)),
            Vector3::new(rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01)),
        );
        let p = integrate(&seq.samples, &lin).unwrap();
        let fd = finite_difference_jacobians(&seq.samples, &lin, 1e-5);
        for (a, f) in [
            (p.j_alpha_ba, fd.alpha_ba),
            (p.j_alpha_bw, fd.alpha_bw),
            (p.j_beta_ba, fd.beta_ba),
            (p.j_beta_bw, fd.beta_bw),
            (p.j_gamma_bw, fd.gamma_bw),
        ] {
            worst = worst.max(block_rel_err(&a, &f));
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn first_order_correction_matches_reintegration() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let spec = random_spec(&mut rng, 1.0);
        let seq = synth(&spec, &truth_bias());
        let lin = ImuBias::zero();
        let p = integrate(&seq.samples, &lin).unwrap();
        let mut d = [0.0; 6];
        for v in d.iter_mut() {
            *v = if rng.random_bool(0.5) { 1e-4 } else { -1e-4 };
        }
        let nb = ImuBias::from_slice(&d);
        let corrected = p.correct_first_order(&nb);
        let exact = integrate(&seq.samples, &nb).unwrap().deltas();
        let err = (corrected.alpha - exact.alpha)
            .amax()
            .max((corrected.beta - exact.beta).amax())
            .max(rotation_delta(&corrected, &exact).amax());
        assert!(err < 1e-7, "quadratic remainder too large: {err:e}");
    }
}

#[test]
fn noiseless_synthesis_round_trips_through_gt_targets() {
    let spec = TrajectorySpec::handheld(10.0);
    let bias = truth_bias();
    let seq = synth(&spec, &bias);
    let g = GravityConfig::default();
    for k in 0..10 {
        let (a, b) = (k * 200, (k + 1) * 200);
        let p = integrate(&seq.samples[a..=b], &bias).unwrap();
        let t = gt_targets(&seq.ground_truth[a].nav, &seq.ground_truth[b].nav, &g, 1.0).unwrap();
        assert!((p.alpha - t.alpha).amax() < 1e-4);
        assert!((p.beta - t.beta).amax() < 1e-4);
        assert!(rotation_delta(&p.deltas(), &t).amax() < 1e-5);
    }
}

fn interval_error(rate: f64) -> f64 {
    let spec = TrajectorySpec {
        imu_rate: rate,
        ..TrajectorySpec::handheld(1.0)
    };
    let seq = synth(&spec, &ImuBias::zero());
    let p = integrate(&seq.samples, &ImuBias::zero()).unwrap();
    let n = seq.ground_truth.len() - 1;
    let t = gt_targets(
        &seq.ground_truth[0].nav,
        &seq.ground_truth[n].nav,
        &GravityConfig::default(),
        p.dt_total,
    )
    .unwrap();
    (p.alpha - t.alpha)
        .norm()
        .max((p.beta - t.beta).norm())
        .max(rotation_delta(&p.deltas(), &t).norm())
}

#[test]
fn integration_error_is_second_order() {
    let errs: Vec<f64> = [100.0, 200.0, 400.0].iter().map(|r| interval_error(*r)).collect();
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    for w in errs.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!(order >= 1.95, "observed order {order} from {errs:?}");
    }
}
