//! Round-trip and export oracles for the file formats.

use std::fs;

use biasprior_core::bias_labeler::{ChannelRms, LabelConfig, LabelResult};
use biasprior_core::dataset::{
    read_euroc_gt, read_euroc_imu, read_label, read_prior_csv, read_tum, write_label,
    write_prior_csv, write_synthetic_euroc, write_tum, LabelFile, SequenceBundle, TumPose,
    WeightsContainer, GT_REL_PATH, IMU_REL_PATH,
};
use biasprior_core::fusion::TimedBiasPrior;
use biasprior_core::geom::UnitQuat;
use biasprior_core::imu_model::{synthesize_sequence, NoiseSpec, TrajectorySpec};
use biasprior_core::{Error, GravityConfig, ImuBias};
use nalgebra::Vector3;

const BASE_NS: i64 = 1_403_636_579_758_555_392;

fn bias() -> ImuBias {
    ImuBias::new(Vector3::new(0.05, -0.02, 0.03), Vector3::new(0.002, -0.001, 0.0015))
}

fn bundle() -> SequenceBundle {
    let noise = NoiseSpec {
        accel_noise_std: 0.02,
        gyro_noise_std: 0.002,
        rng_seed: 3,
        ..NoiseSpec::default()
    };
    let seq = synthesize_sequence(&TrajectorySpec::handheld(5.0), &bias(), &noise, &GravityConfig::default())
        .unwrap();
    SequenceBundle {
        id: "synth".into(),
        base_ns: BASE_NS,
        imu: seq.samples,
        gt: Some(seq.ground_truth),
        source: "synthetic".into(),
    }
}

#[test]
fn synthetic_export_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let b = bundle();
    write_synthetic_euroc(&b, dir.path()).unwrap();
    let imu = read_euroc_imu(&dir.path().join(IMU_REL_PATH)).unwrap();
    assert_eq!(imu.len(), b.imu.len());
    assert_eq!(imu.first_ns(), Some(BASE_NS));
    for (r, s) in imu.items.iter().zip(&b.imu) {
        assert!((r.t - s.t).abs() <= 1e-9);
        assert!((r.gyro - s.gyro).amax() <= 1e-12);
        assert!((r.accel - s.accel).amax() <= 1e-12);
    }
    let (loaded, warnings) = SequenceBundle::load_euroc(dir.path()).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(loaded.imu.len(), b.imu.len());
    assert_eq!(loaded.gt.as_ref().unwrap().len(), b.gt.as_ref().unwrap().len());

    // re-exporting the loaded bundle reproduces the files byte for byte
    let again = tempfile::tempdir().unwrap();
    write_synthetic_euroc(&loaded, again.path()).unwrap();
    for rel in [IMU_REL_PATH, GT_REL_PATH] {
        let same = fs::read(dir.path().join(rel)).unwrap() == fs::read(again.path().join(rel)).unwrap();
        assert!(same, "{rel} differs after re-export");
    }
}

#[test]
fn exported_bias_channel_mean_equals_injected_constant() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_euroc(&bundle(), dir.path()).unwrap();
    let gt = read_euroc_gt(&dir.path().join(GT_REL_PATH)).unwrap();
    let n = gt.len() as f64;
    let mut bw = Vector3::zeros();
    let mut ba = Vector3::zeros();
    for s in &gt.items {
        let b = s.bias.unwrap();
        bw += b.bw;
        ba += b.ba;
    }
    assert!((bw / n - bias().bw).amax() < 1e-15);
    assert!((ba / n - bias().ba).amax() < 1e-15);
}

fn label() -> LabelFile {
    let result = LabelResult {
        bias: ImuBias::new(Vector3::new(0.1 / 3.0, -2.0f64.sqrt(), 1e-17), Vector3::new(std::f64::consts::PI * 1e-3, 5e-324, -0.0)),
        rms_before: ChannelRms { alpha: 0.123456789012345, beta: 1.0 / 7.0, gamma: 2e-3 },
        rms_after: ChannelRms { alpha: 1e-9, beta: 3.3e-10, gamma: 7.1e-12 },
        iterations: 90000,
        converged: true,
        intervals: 59,
    };
    LabelFile::new("seq_a", &result, &LabelConfig::default())
}

#[test]
fn label_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("label.json");
    let l = label();
    write_label(&p, &l).unwrap();
    let r = read_label(&p).unwrap();
    assert_eq!(r, l);
    for (a, b) in r.ba_mean.iter().chain(&r.bw_mean).zip(l.ba_mean.iter().chain(&l.bw_mean)) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    let first = fs::read(&p).unwrap();
    write_label(&p, &r).unwrap();
    assert_eq!(first, fs::read(&p).unwrap());
}

#[test]
fn label_schema_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("label.json");
    let mut l = label();
    l.solver_config_hash = "0".repeat(64);
    write_label(&p, &l).unwrap();
    assert!(matches!(read_label(&p), Err(Error::Schema { .. })));
    let text = serde_json::to_string(&label()).unwrap().replacen('{', "{\"extra\":1,", 1);
    fs::write(&p, text).unwrap();
    assert!(matches!(read_label(&p), Err(Error::Json { .. })));
}

fn weights() -> WeightsContainer {
    WeightsContainer {
        config: serde_json::json!({"s": 64, "n": 8, "channels": [4, 8]}),
        normalization: serde_json::json!({"mean": [0.1, 9.81], "std": [1.5, 0.2]}),
        tensors: vec![
            ("a.weight".into(), vec![2, 3], vec![0.1, -0.2, 1.0 / 3.0, 4.0, 5e-300, -0.0]),
            ("a.bias".into(), vec![2], vec![1e10, f64::MIN_POSITIVE]),
            ("empty".into(), vec![0], vec![]),
        ],
    }
}

#[test]
fn weights_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("w.bin");
    let w = weights();
    w.save(&p).unwrap();
    let loaded = WeightsContainer::load(&p).unwrap();
    assert_eq!(loaded, w);
    let q = dir.path().join("w2.bin");
    loaded.save(&q).unwrap();
    assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
}

#[test]
fn weights_checksum_detects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("w.bin");
    weights().save(&p).unwrap();
    let mut bytes = fs::read(&p).unwrap();
    let last = bytes.len() - 3;
    bytes[last] ^= 0x40;
    fs::write(&p, &bytes).unwrap();
    match WeightsContainer::load(&p) {
        Err(Error::Schema { msg, .. }) => assert!(msg.contains("checksum")),
        other => panic!("{other:?}"),
    }
    let bad = WeightsContainer {
        tensors: vec![("x".into(), vec![3], vec![1.0])],
        ..weights()
    };
    assert!(bad.save(&p).is_err());
}

#[test]
fn tum_and_prior_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let poses: Vec<TumPose> = (0..20)
        .map(|i| TumPose {
            t: 0.5 * i as f64,
            p: Vector3::new(i as f64 * 0.1, -1.0 / (i + 1) as f64, 2.0),
            q: UnitQuat::exp(&Vector3::new(0.1 * i as f64, 0.2, -0.3)),
        })
        .collect();
    let p = dir.path().join("traj.txt");
    write_tum(&p, &poses).unwrap();
    let back = read_tum(&p).unwrap();
    for (a, b) in back.iter().zip(&poses) {
        assert!((a.t - b.t).abs() < 1e-9);
        assert_eq!(a.p, b.p);
        assert_eq!(a.q.as_wxyz(), b.q.as_wxyz());
    }

    let priors: Vec<TimedBiasPrior> = (0..5)
        .map(|i| TimedBiasPrior {
            t: i as f64,
            bias: if i == 0 { ImuBias::zero() } else { bias() },
            warmup: i == 0,
        })
        .collect();
    let p = dir.path().join("prior.csv");
    write_prior_csv(&p, &priors).unwrap();
    assert_eq!(read_prior_csv(&p).unwrap(), priors);
}

proptest::proptest! {
    #[test]
    fn weights_with_arbitrary_header_floats_load(mean in proptest::collection::vec(proptest::num::f64::NORMAL, 6)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        let w = WeightsContainer {
            normalization: serde_json::json!({"mean": mean, "std": [1.0]}),
            ..weights()
        };
        w.save(&p).unwrap();
        proptest::prop_assert_eq!(WeightsContainer::load(&p).unwrap(), w);
    }
}
