//! Per-sequence steps behind the subcommands.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use biasprior_core::bias_labeler::{interpolate_gt, make_labels, LabelConfig};
use biasprior_core::dataset::{LabelFile, SequenceBundle, IMU_REL_PATH};
use biasprior_core::eval::{AlignedPair, MetricReport, StampedPose};
use biasprior_core::fusion::{run_fixed_lag, vision_surrogate, FixedLagOutput, KeyframeState, TimedBiasPrior};
use biasprior_core::imu_model::{synthesize_sequence, NoiseSpec, TrajectorySpec};
use biasprior_core::{GtState, ImuBias};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{EvalSection, RunConfig};
use crate::error::{CliError, CliResult};

pub const TRUTH_FILE: &str = "truth.json";

/// Generator-side facts written next to each synthetic sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSidecar {
    pub sequence_id: String,
    pub injected_bias: ImuBias,
    /// Time average of the true bias, including any random walk.
    pub mean_bias: ImuBias,
    pub trajectory: TrajectorySpec,
    pub noise: NoiseSpec,
}

/// One planned synthetic sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPlan {
    pub id: String,
    pub bias: ImuBias,
    pub trajectory: TrajectorySpec,
    pub noise: NoiseSpec,
}

/// Expands the synthesis section into per-sequence specs. All randomness is
/// drawn here, in order, from the run seed.
pub fn plan_synthetic(cfg: &RunConfig) -> Vec<SyntheticPlan> {
    let s = &cfg.synthesis;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for bias in &s.biases {
        for _ in 0..s.sequences_per_bias {
            let mut trajectory = s.trajectory.clone();
            if s.randomize_phase {
                for i in 0..3 {
                    trajectory.position_phase[i] = rng.random_range(0.0..TAU);
                    trajectory.attitude_phase[i] = rng.random_range(0.0..TAU);
                }
            }
            let noise = NoiseSpec {
                rng_seed: rng.random(),
                ..s.noise
            };
            out.push(SyntheticPlan {
                id: format!("seq{:02}", out.len()),
                bias: *bias,
                trajectory,
                noise,
            });
        }
    }
    out
}

pub fn synthesize(plan: &SyntheticPlan, cfg: &RunConfig) -> CliResult<(SequenceBundle, TruthSidecar)> {
    let gravity = cfg.labeling.gravity()?;
    let seq = synthesize_sequence(&plan.trajectory, &plan.bias, &plan.noise, &gravity)?;
    let truth = TruthSidecar {
        sequence_id: plan.id.clone(),
        injected_bias: plan.bias,
        mean_bias: seq.mean_bias(),
        trajectory: plan.trajectory.clone(),
        noise: plan.noise,
    };
    let bundle = SequenceBundle {
        id: plan.id.clone(),
        base_ns: cfg.synthesis.base_ns,
        imu: seq.samples,
        gt: Some(seq.ground_truth),
        source: "synthetic".into(),
    };
    Ok((bundle, truth))
}

/// Sequence directories under `data`: `data` itself when it holds an EuRoC
/// layout, otherwise its sorted subdirectories that do.
pub fn discover_sequences(data: &Path) -> CliResult<Vec<PathBuf>> {
    if data.join(IMU_REL_PATH).is_file() {
        return Ok(vec![data.to_path_buf()]);
    }
    let entries = std::fs::read_dir(data).map_err(|e| CliError::Data(format!("{}: {e}", data.display())))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::Data(format!("{}: {e}", data.display())))?.path();
        if path.join(IMU_REL_PATH).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Data(format!("no EuRoC sequences under {}", data.display())));
    }
    Ok(dirs)
}

pub fn load_sequence(dir: &Path, quiet: bool) -> CliResult<SequenceBundle> {
    let (bundle, warnings) = SequenceBundle::load_euroc(dir)?;
    if !quiet {
        for w in warnings {
            eprintln!("warning: {}: {w}", bundle.id);
        }
    }
    Ok(bundle)
}

pub fn require_gt(bundle: &SequenceBundle) -> CliResult<&[GtState]> {
    bundle
        .gt
        .as_deref()
        .ok_or_else(|| CliError::Data(format!("{}: ground truth required", bundle.id)))
}

pub fn label_sequence(bundle: &SequenceBundle, cfg: &LabelConfig) -> CliResult<LabelFile> {
    let result = make_labels(&bundle.imu, require_gt(bundle)?, cfg)?;
    Ok(LabelFile::new(&bundle.id, &result, cfg))
}

/// Runs the fixed-lag estimator against simulated pose observations from
/// the sequence's ground truth. `obs_seed` drives the observation noise.
pub fn fuse_sequence(
    bundle: &SequenceBundle,
    priors: Option<&[TimedBiasPrior]>,
    cfg: &RunConfig,
    obs_seed: u64,
) -> CliResult<FixedLagOutput> {
    let gt = require_gt(bundle)?;
    let f = &cfg.fusion;
    let t0 = bundle
        .imu
        .first()
        .ok_or_else(|| CliError::Data(format!("{}: empty IMU stream", bundle.id)))?
        .t;
    let obs = vision_surrogate(
        gt,
        f.observation_period,
        f.observation_position_sigma,
        f.observation_rotation_sigma,
        &f.dropout,
        obs_seed,
    );
    let nav = interpolate_gt(gt, t0)?;
    let initial = KeyframeState::from_nav(t0, &nav, f.initial_bias);
    Ok(run_fixed_lag(&bundle.imu, &obs, priors, &initial, &f.estimator)?)
}

/// Single constant prior carrying `bias` from the start of the stream.
pub fn constant_prior(bundle: &SequenceBundle, bias: ImuBias) -> Vec<TimedBiasPrior> {
    vec![TimedBiasPrior {
        t: bundle.imu.first().map_or(0.0, |s| s.t),
        bias,
        warmup: false,
    }]
}

/// Per-keyframe online bias estimates as a prior stream. Fed back through
/// `--prior file:` they leave the prior-off optimum stationary in every solve.
pub fn online_priors(out: &FixedLagOutput) -> Vec<TimedBiasPrior> {
    out.keyframes
        .iter()
        .map(|k| TimedBiasPrior {
            t: k.state.t,
            bias: k.online_bias,
            warmup: false,
        })
        .collect()
}

pub fn keyframe_poses(out: &FixedLagOutput) -> Vec<StampedPose> {
    out.keyframes
        .iter()
        .map(|k| StampedPose {
            t: k.state.t,
            p: k.state.p,
            q: k.state.q,
        })
        .collect()
}

pub fn gt_poses(gt: &[GtState]) -> Vec<StampedPose> {
    gt.iter()
        .map(|s| StampedPose {
            t: s.t,
            p: s.nav.p,
            q: s.nav.q,
        })
        .collect()
}

pub fn evaluate(est: &[StampedPose], gt: &[StampedPose], eval: &EvalSection) -> CliResult<MetricReport> {
    let pair = AlignedPair::new(est, gt, eval.max_dt)?;
    Ok(MetricReport {
        ate_rmse_m: pair.ate_rmse(),
        rpe_rmse_rad: pair.rpe_rmse(eval.delta)?,
        n_associated: pair.len(),
        alignment: pair.transform,
    })
}

/// Observation-noise seed of the `index`-th sequence of a run.
pub fn observation_seed(run_seed: u64, index: usize) -> u64 {
    run_seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

