//! Finite-difference and end-to-end checks for the window estimator.

use biasprior_core::fusion::{
    imu_factor_residual, optimize_window, pose_obs_residual, run_fixed_lag, vision_surrogate,
    BiasPriorFactor, FusionConfig, ImuFactor, ImuNoiseWeights, KeyframeState, LmOptions,
    PoseFactor, TimedBiasPrior, WindowGraph, STATE_DIM,
};
use biasprior_core::geom::UnitQuat;
use biasprior_core::imu_model::{synthesize_sequence, NoiseSpec, TrajectorySpec};
use biasprior_core::eval::{ate_rmse, StampedPose};
use biasprior_core::preintegration::{integrate, predict_state};
use biasprior_core::{GravityConfig, ImuBias};
use nalgebra::{DMatrix, Matrix6, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn truth_bias() -> ImuBias {
    ImuBias::new(Vector3::new(0.05, -0.02, 0.03), Vector3::new(0.002, -0.001, 0.0015))
}

fn noisy(walk: f64) -> NoiseSpec {
    NoiseSpec {
        accel_noise_std: NoiseSpec::per_sample_std_from_density(2.0e-3, 200.0),
        gyro_noise_std: NoiseSpec::per_sample_std_from_density(2.0e-4, 200.0),
        accel_walk_std: walk,
        gyro_walk_std: walk * 0.01,
        rng_seed: 9,
    }
}

fn jitter(rng: &mut ChaCha8Rng, s: &KeyframeState, scale: f64) -> KeyframeState {
    let d: Vec<f64> = (0..STATE_DIM)
        .map(|i| rng.random_range(-1.0..1.0) * if i >= 9 { scale * 0.1 } else { scale })
        .collect();
    s.retract(&d)
}

fn rel_err(a: &DMatrix<f64>, f: &DMatrix<f64>) -> f64 {
    let scale = f.amax().max(1e-12);
    a.iter()
        .zip(f.iter())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1e-3 * scale))
        .fold(0.0, f64::max)
}

#[test]
fn imu_factor_jacobians_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = GravityConfig::default();
    let spec = TrajectorySpec::handheld(4.0);
    let seq = synthesize_sequence(&spec, &truth_bias(), &NoiseSpec::noiseless(0), &g).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..6 {
        let (a, b) = (k * 100, k * 100 + 100);
        let lin = ImuBias::zero();
        let preint = integrate(&seq.samples[a..=b], &lin).unwrap();
        let s0 = KeyframeState::from_nav(0.0, &seq.ground_truth[a].nav, truth_bias());
        let s1 = KeyframeState::from_nav(0.5, &seq.ground_truth[b].nav, truth_bias());
        let s0 = jitter(&mut rng, &s0, 0.05);
        let s1 = jitter(&mut rng, &s1, 0.05);
        let res = imu_factor_residual(&s0, &s1, &preint, &g).unwrap();
        for which in 0..2 {
            let mut fd = DMatrix::zeros(15, 15);
            for c in 0..STATE_DIM {
                let mut d = vec![0.0; STATE_DIM];
                d[c] = h;
                let plus = d.clone();
                d[c] = -h;
                let (p0, p1, m0, m1) = if which == 0 {
                    (s0.retract(&plus), s1, s0.retract(&d), s1)
                } else {
                    (s0, s1.retract(&plus), s0, s1.retract(&d))
                };
                let rp = imu_factor_residual(&p0, &p1, &preint, &g).unwrap().r;
                let rm = imu_factor_residual(&m0, &m1, &preint, &g).unwrap().r;
                fd.set_column(c, &((rp - rm) / (2.0 * h)));
            }
            let an = if which == 0 { &res.j0 } else { &res.j1 };
            let an = DMatrix::from_iterator(15, 15, an.iter().copied());
            // compare per 3x3 block so each block is judged on its own scale
            for br in 0..5 {
                for bc in 0..5 {
                    let fa = fd.view((br * 3, bc * 3), (3, 3)).into_owned();
                    let aa = an.view((br * 3, bc * 3), (3, 3)).into_owned();
                    if fa.amax() < 1e-9 {
                        assert!(aa.amax() < 1e-6, "block ({br},{bc}) should vanish");
                        continue;
                    }
                    worst = worst.max(rel_err(&aa, &fa));
                }
            }
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn pose_jacobian_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base = KeyframeState {
        t: 0.0,
        p: Vector3::new(1.0, -2.0, 0.5),
        v: Vector3::zeros(),
        q: UnitQuat::exp(&Vector3::new(0.3, -0.2, 0.9)),
        bias: ImuBias::zero(),
    };
    let s = jitter(&mut rng, &base, 0.2);
    let sqrt_info = Matrix6::from_diagonal(&nalgebra::Vector6::new(20.0, 20.0, 20.0, 50.0, 50.0, 50.0));
    let (_, j) = pose_obs_residual(&s, &base.p, &base.q, &sqrt_info);
    let h = 1e-6;
    for c in 0..STATE_DIM {
        let mut d = vec![0.0; STATE_DIM];
        d[c] = h;
        let (rp, _) = pose_obs_residual(&s.retract(&d), &base.p, &base.q, &sqrt_info);
        d[c] = -h;
        let (rm, _) = pose_obs_residual(&s.retract(&d), &base.p, &base.q, &sqrt_info);
        let fd = (rp - rm) / (2.0 * h);
        let an = j.column(c);
        assert!((fd - an).amax() < 1e-4 * an.amax().max(1.0), "column {c}");
    }
}

#[test]
fn lm_cost_never_increases() {
    let g = GravityConfig::default();
    let spec = TrajectorySpec::handheld(5.0);
    let noise = noisy(0.0);
    let seq = synthesize_sequence(&spec, &truth_bias(), &noise, &g).unwrap();
    let mut graph = WindowGraph::new(g, ImuNoiseWeights::default());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 0..=8 {
        let i = k * 100;
        let s = KeyframeState::from_nav(seq.samples[i].t, &seq.ground_truth[i].nav, ImuBias::zero());
        graph.keyframes.push(if k == 0 { s } else { jitter(&mut rng, &s, 0.1) });
        if k > 0 {
            graph
                .imu_factors
                .push(ImuFactor::new(seq.samples[i - 100..=i].to_vec(), &ImuBias::zero()).unwrap());
        }
        graph.pose_factors.push(PoseFactor {
            keyframe: k,
            p: seq.ground_truth[i].nav.p,
            q: seq.ground_truth[i].nav.q,
            sqrt_info: Matrix6::identity() * 20.0,
        });
    }
    let rep = optimize_window(&graph, &LmOptions::default()).unwrap();
    assert!(rep.final_cost < rep.initial_cost * 1e-2);
    for w in rep.cost_trace.windows(2) {
        assert!(w[1] <= w[0]);
    }
}

#[test]
fn fixed_lag_with_oracle_prior_tracks_bias() {
    let g = GravityConfig::default();
    let spec = TrajectorySpec::handheld(12.0);
    let noise = noisy(0.0);
    let bias = truth_bias();
    let seq = synthesize_sequence(&spec, &bias, &noise, &g).unwrap();
    let obs = vision_surrogate(&seq.ground_truth, 0.05, 0.02, 0.005, &[], 1);
    let initial = KeyframeState::from_nav(0.0, &seq.ground_truth[0].nav, ImuBias::zero());
    let priors = [TimedBiasPrior { t: 0.0, bias, warmup: false }];
    let cfg = FusionConfig::default();
    let out = run_fixed_lag(&seq.samples, &obs, Some(&priors), &initial, &cfg).unwrap();
    assert_eq!(out.keyframes.len(), 25);
    let last = out.keyframes.last().unwrap().state;
    assert!((last.bias.bw - bias.bw).amax() < 2e-3, "{:?}", last.bias);
    let gt_last = &seq.ground_truth[seq.ground_truth.len() - 1].nav;
    assert!((last.p - gt_last.p).norm() < 0.1);
    assert!(BiasPriorFactor::diagonal_weight(0.1, 0.01)[(3, 3)] == 100.0);
}

/// Keyframes chained through `predict_state` at the true bias, so every IMU
/// factor is exactly satisfied, with matching exact pose factors.
fn exact_window(k: usize) -> (WindowGraph, Vec<KeyframeState>) {
    let g = GravityConfig::default();
    let bias = truth_bias();
    let seq = synthesize_sequence(&TrajectorySpec::handheld(5.0), &bias, &noisy(0.0), &g).unwrap();
    let mut graph = WindowGraph::new(g, ImuNoiseWeights::default());
    let mut truth = vec![KeyframeState::from_nav(0.0, &seq.ground_truth[0].nav, bias)];
    for i in 1..k {
        let f = ImuFactor::new(seq.samples[(i - 1) * 100..=i * 100].to_vec(), &bias).unwrap();
        let prev = truth[i - 1];
        let nav = predict_state(&prev.nav(), &f.preint.deltas(), &g, f.preint.dt_total);
        truth.push(KeyframeState::from_nav(seq.samples[i * 100].t, &nav, bias));
        graph.imu_factors.push(f);
    }
    for (i, s) in truth.iter().enumerate() {
        graph.pose_factors.push(PoseFactor {
            keyframe: i,
            p: s.p,
            q: s.q,
            sqrt_info: Matrix6::identity() * 20.0,
        });
    }
    (graph, truth)
}

#[test]
fn exact_states_have_zero_imu_residual() {
    let (graph, truth) = exact_window(6);
    for (i, f) in graph.imu_factors.iter().enumerate() {
        let r = imu_factor_residual(&truth[i], &truth[i + 1], &f.preint, &graph.gravity).unwrap();
        assert!(r.r.amax() < 1e-8, "{:e}", r.r.amax());
    }
    // bias random-walk block vanishes for equal biases
    let r = imu_factor_residual(&truth[0], &truth[1], &graph.imu_factors[0].preint, &graph.gravity).unwrap();
    assert_eq!(r.r.fixed_rows::<6>(9).amax(), 0.0);
}

#[test]
fn noiseless_window_recovers_states_with_fast_convergence() {
    let (mut graph, truth) = exact_window(8);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    graph.keyframes = truth
        .iter()
        .enumerate()
        .map(|(i, s)| if i == 0 { *s } else { jitter(&mut rng, s, 1e-3) })
        .collect();
    let rep = optimize_window(&graph, &LmOptions::default()).unwrap();
    assert!(rep.final_cost < 1e-12, "final cost {:e}", rep.final_cost);
    for (e, t) in rep.keyframes.iter().zip(&truth) {
        assert!((e.p - t.p).amax() < 1e-6);
        assert!((e.v - t.v).amax() < 1e-6);
        assert!((e.q.inverse() * t.q).angle() < 1e-6);
        assert!((e.bias.bw - t.bias.bw).amax() < 1e-6);
        assert!((e.bias.ba - t.bias.ba).amax() < 1e-6);
    }
    // superlinear tail: once damping has relaxed, successive cost ratios
    // keep shrinking until round-off
    let c = &rep.cost_trace;
    let ratios: Vec<f64> = c
        .windows(2)
        .take_while(|w| w[1] > 1e-20)
        .map(|w| w[1] / w[0])
        .collect();
    let peak = ratios
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    let tail = &ratios[peak..];
    assert!(tail.len() >= 3, "ratios {ratios:?}");
    for w in tail.windows(2) {
        assert!(w[1] < 0.1 * w[0], "ratios {ratios:?}");
    }
}

fn fixed_lag_scenario(noise: NoiseSpec) -> (Vec<biasprior_core::ImuSample>, Vec<biasprior_core::GtState>) {
    let seq = synthesize_sequence(&TrajectorySpec::handheld(10.0), &truth_bias(), &noise, &GravityConfig::default())
        .unwrap();
    (seq.samples, seq.ground_truth)
}

fn ate(out: &[biasprior_core::fusion::KeyframeEstimate], gt: &[biasprior_core::GtState]) -> f64 {
    let est: Vec<StampedPose> = out
        .iter()
        .map(|k| StampedPose { t: k.state.t, p: k.state.p, q: k.state.q })
        .collect();
    let gt: Vec<StampedPose> = gt
        .iter()
        .map(|s| StampedPose { t: s.t, p: s.nav.p, q: s.nav.q })
        .collect();
    ate_rmse(&est, &gt).unwrap()
}

#[test]
fn noiseless_fixed_lag_without_prior_tracks_ground_truth() {
    let (imu, gt) = fixed_lag_scenario(NoiseSpec::noiseless(0));
    let obs = vision_surrogate(&gt, 0.05, 0.0, 0.0, &[], 0);
    let initial = KeyframeState::from_nav(0.0, &gt[0].nav, ImuBias::zero());
    let out = run_fixed_lag(&imu, &obs, None, &initial, &FusionConfig::default()).unwrap();
    let a = ate(&out.keyframes, &gt);
    assert!(a < 1e-4, "ATE {a:e}");
}

#[test]
fn vanishing_prior_weight_matches_prior_off() {
    let (imu, gt) = fixed_lag_scenario(noisy(0.0));
    let obs = vision_surrogate(&gt, 0.05, 0.02, 0.005, &[[3.0, 5.0]], 2);
    let initial = KeyframeState::from_nav(0.0, &gt[0].nav, ImuBias::zero());
    let off = run_fixed_lag(&imu, &obs, None, &initial, &FusionConfig::default()).unwrap();
    let cfg = FusionConfig {
        prior_sigma_ba: 1e12,
        prior_sigma_bw: 1e12,
        ..FusionConfig::default()
    };
    let priors = [TimedBiasPrior { t: 0.0, bias: truth_bias(), warmup: false }];
    let on = run_fixed_lag(&imu, &obs, Some(&priors), &initial, &cfg).unwrap();
    for (a, b) in off.keyframes.iter().zip(&on.keyframes) {
        assert!((a.state.p - b.state.p).amax() < 1e-6);
        assert!((a.state.bias.bw - b.state.bias.bw).amax() < 1e-8);
    }
}

#[test]
fn prior_at_converged_bias_does_not_move_solution() {
    let (mut graph, truth) = exact_window(6);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for f in graph.pose_factors.iter_mut() {
        f.p += Vector3::new(rng.random_range(-0.05..0.05), 0.0, rng.random_range(-0.05..0.05));
    }
    graph.keyframes = truth.clone();
    let first = optimize_window(&graph, &LmOptions::default()).unwrap();
    let newest = first.keyframes.len() - 1;
    graph.keyframes = first.keyframes.clone();
    graph.prior_factors.push(BiasPriorFactor {
        target: first.keyframes[newest].bias,
        weight: BiasPriorFactor::diagonal_weight(0.1, 0.01),
        keyframe: newest,
    });
    let second = optimize_window(&graph, &LmOptions::default()).unwrap();
    assert!((second.final_cost - first.final_cost).abs() < 1e-10);
    for (a, b) in first.keyframes.iter().zip(&second.keyframes) {
        assert!((a.p - b.p).amax() < 1e-7);
    }
}
