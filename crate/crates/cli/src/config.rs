//! JSON run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use biasprior_core::bias_labeler::LabelConfig;
use biasprior_core::fusion::FusionConfig;
use biasprior_core::imu_model::{NoiseSpec, TrajectorySpec};
use biasprior_core::ImuBias;
use biasprior_nn::{IpnetConfig, TrainingSchedule};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// EuRoC MH_01 first IMU stamp; synthetic sequences start here.
pub const DEFAULT_BASE_NS: i64 = 1_403_636_579_758_555_392;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub synthesis: SynthesisSection,
    pub labeling: LabelConfig,
    pub training: TrainingSection,
    pub fusion: FusionSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisSection {
    pub trajectory: TrajectorySpec,
    /// `rng_seed` is replaced per sequence by a draw from the run seed.
    pub noise: NoiseSpec,
    /// One group of sequences per bias.
    pub biases: Vec<ImuBias>,
    pub sequences_per_bias: usize,
    /// Draw fresh position and attitude phases for every sequence.
    pub randomize_phase: bool,
    pub base_ns: i64,
}

impl Default for SynthesisSection {
    fn default() -> Self {
        Self {
            trajectory: TrajectorySpec::handheld(60.0),
            noise: NoiseSpec {
                accel_noise_std: 0.02,
                gyro_noise_std: 0.002,
                ..NoiseSpec::noiseless(0)
            },
            biases: vec![ImuBias::new(
                Vector3::new(0.05, -0.02, 0.03),
                Vector3::new(0.002, -0.001, 0.0015),
            )],
            sequences_per_bias: 1,
            randomize_phase: false,
            base_ns: DEFAULT_BASE_NS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub ipnet: IpnetConfig,
    /// Validation ids live in `schedule.val_ids`.
    pub schedule: TrainingSchedule,
    /// Restricts training to these ids; empty means every non-validation sequence.
    pub train_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub estimator: FusionConfig,
    /// Spacing of simulated pose observations, seconds.
    pub observation_period: f64,
    /// Noise of simulated pose observations.
    pub observation_position_sigma: f64,
    pub observation_rotation_sigma: f64,
    /// `[start, end]` seconds from sequence start with no pose observations.
    pub dropout: Vec<[f64; 2]>,
    /// `off`, `oracle`, `network` or `file:PATH`.
    pub prior: String,
    /// Bias of the first keyframe and of the network warm-up prior.
    pub initial_bias: ImuBias,
}

impl Default for FusionSection {
    fn default() -> Self {
        let estimator = FusionConfig::default();
        Self {
            observation_period: 0.05,
            observation_position_sigma: estimator.pose_position_sigma,
            observation_rotation_sigma: estimator.pose_rotation_sigma,
            estimator,
            dropout: Vec::new(),
            prior: "off".into(),
            initial_bias: ImuBias::zero(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// RPE step in keyframes.
    pub delta: usize,
    /// Max timestamp difference for association, seconds.
    pub max_dt: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            delta: 1,
            max_dt: biasprior_core::eval::DEFAULT_MAX_DT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PriorMode {
    Off,
    Oracle,
    Network,
    File(PathBuf),
}

impl PriorMode {
    pub fn parse(s: &str) -> CliResult<Self> {
        match s {
            "off" => Ok(Self::Off),
            "oracle" => Ok(Self::Oracle),
            "network" => Ok(Self::Network),
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(Self::File(PathBuf::from(p))),
                _ => Err(CliError::Config(format!(
                    "prior must be off, oracle, network or file:PATH, got {s:?}"
                ))),
            },
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Off => "off".into(),
            Self::Oracle => "oracle".into(),
            Self::Network => "network".into(),
            Self::File(p) => format!("file:{}", p.display()),
        }
    }
}

fn check(what: &str, r: biasprior_core::Result<()>) -> CliResult<()> {
    r.map_err(|e| CliError::Config(format!("{what}: {e}")))
}

fn positive(what: &str, v: f64) -> CliResult<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} must be positive and finite, got {v}")))
    }
}

fn non_negative(what: &str, v: f64) -> CliResult<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} must be non-negative and finite, got {v}")))
    }
}

impl RunConfig {
    /// Reads and validates a config file.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let s = &self.synthesis;
        check("synthesis.trajectory", s.trajectory.validate())?;
        check("synthesis.noise", s.noise.validate())?;
        if s.biases.is_empty() || s.biases.iter().any(|b| !b.is_finite()) {
            return Err(CliError::Config("synthesis.biases must be a non-empty list of finite biases".into()));
        }
        if s.sequences_per_bias == 0 {
            return Err(CliError::Config("synthesis.sequences_per_bias must be at least 1".into()));
        }
        if s.base_ns < 0 {
            return Err(CliError::Config("synthesis.base_ns must be non-negative".into()));
        }
        check("labeling", self.labeling.validate())?;
        self.training
            .ipnet
            .validate()
            .and_then(|_| self.training.schedule.validate())
            .map_err(|e| CliError::Config(format!("training: {e}")))?;
        if let Some(id) = self.training.train_ids.iter().find(|id| self.training.schedule.val_ids.contains(id)) {
            return Err(CliError::Config(format!("training: {id} is in both train_ids and val_ids")));
        }
        let f = &self.fusion;
        check("fusion.estimator", f.estimator.validate())?;
        positive("fusion.observation_period", f.observation_period)?;
        non_negative("fusion.observation_position_sigma", f.observation_position_sigma)?;
        non_negative("fusion.observation_rotation_sigma", f.observation_rotation_sigma)?;
        if f.dropout.iter().any(|[a, b]| !(a.is_finite() && b.is_finite() && a <= b)) {
            return Err(CliError::Config("fusion.dropout windows must be finite with start <= end".into()));
        }
        if !f.initial_bias.is_finite() {
            return Err(CliError::Config("fusion.initial_bias must be finite".into()));
        }
        PriorMode::parse(&f.prior)?;
        if self.eval.delta == 0 {
            return Err(CliError::Config("eval.delta must be at least 1".into()));
        }
        positive("eval.max_dt", self.eval.max_dt)
    }

    pub fn prior_mode(&self) -> CliResult<PriorMode> {
        PriorMode::parse(&self.fusion.prior)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"fusion": {"lagg": 3}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"training": {"ipnet": {"s": 10, "x": 0}}}"#).is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 9, "eval": {"delta": 2}}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.eval.delta, 2);
        assert_eq!(cfg.fusion, FusionSection::default());
    }

    #[test]
    fn prior_modes_parse() {
        assert_eq!(PriorMode::parse("off").unwrap(), PriorMode::Off);
        assert_eq!(PriorMode::parse("file:a/b.csv").unwrap(), PriorMode::File("a/b.csv".into()));
        assert!(PriorMode::parse("file:").is_err());
        assert!(PriorMode::parse("on").is_err());
    }

    #[test]
    fn invalid_values_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.fusion.dropout = vec![[5.0, 1.0]];
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.synthesis.biases.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.training.ipnet.s = 3;
        assert!(cfg.validate().is_err());
    }
}
