use biasprior_core::imu_model::{synthesize_sequence, NoiseSpec, TrajectorySpec};
use biasprior_core::{GravityConfig, ImuBias, ImuSample};
use biasprior_nn::autodiff::OptimizerKind;
use biasprior_nn::ipnet::{
    bias_from_rows, sliding_inference, train, window_rows, LabeledSequence, Mode, ModelWeights,
};
use biasprior_nn::{IpnetConfig, NnError, TrainingSchedule};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_window(cfg: &IpnetConfig, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.s * 6).map(|_| rng.random_range(-3.0..3.0)).collect()
}

fn model(cfg: &IpnetConfig, seed: u64) -> ModelWeights {
    ModelWeights::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn stream(len: usize, seed: u64) -> Vec<ImuSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|i| {
            ImuSample::new(
                i as f64 * 0.005,
                Vector3::new(rng.random_range(-0.1..0.1), 0.0, 0.01),
                Vector3::new(0.0, rng.random_range(-0.1..0.1), 9.81),
            )
        })
        .collect()
}

#[test]
fn default_config_output_shapes() {
    let cfg = IpnetConfig::default();
    let m = model(&cfg, 1);
    let (ba, bw) = m.forward(&random_window(&cfg, 2), Mode::Eval).unwrap();
    assert_eq!((ba.len(), bw.len()), (50, 50));
}

#[test]
fn wrong_window_shape_is_rejected() {
    let cfg = IpnetConfig::tiny();
    let m = model(&cfg, 1);
    let short = vec![0.0; (cfg.s - 1) * 6];
    assert!(matches!(m.forward(&short, Mode::Eval), Err(NnError::Shape { .. })));
    let mut bad = random_window(&cfg, 3);
    bad[10] = f64::NAN;
    assert!(matches!(m.forward(&bad, Mode::Eval), Err(NnError::NonFinite { .. })));
}

#[test]
fn non_finite_activation_names_the_layer() {
    let cfg = IpnetConfig::tiny();
    let mut m = model(&cfg, 1);
    m.param_mut("gru2.bias_hh").unwrap().data[0] = f64::NAN;
    match m.forward(&random_window(&cfg, 3), Mode::Eval) {
        Err(NnError::NonFinite { layer }) => assert_eq!(layer, "gru2"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn constant_network_outputs_head_bias() {
    let cfg = IpnetConfig::tiny();
    let mut m = model(&cfg, 1);
    for p in m.params.iter_mut() {
        p.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let ca = [0.3, -0.1, 0.05];
    let cw = [0.01, 0.0, -0.02];
    m.param_mut("head_ba.bias").unwrap().data = ca.to_vec();
    m.param_mut("head_bw.bias").unwrap().data = cw.to_vec();
    let (ba, bw) = m.forward(&random_window(&cfg, 5), Mode::Eval).unwrap();
    for r in &ba {
        assert_eq!(r.as_slice(), &ca);
    }
    for r in &bw {
        assert_eq!(r.as_slice(), &cw);
    }
    let b = m.predict(&random_window(&cfg, 6)).unwrap();
    assert!((b.ba - Vector3::from(ca)).amax() < 1e-15);
    assert!((b.bw - Vector3::from(cw)).amax() < 1e-15);
}

#[test]
fn eval_forward_is_bit_identical() {
    let cfg = IpnetConfig::tiny();
    let m = model(&cfg, 9);
    let w = random_window(&cfg, 10);
    let a = m.forward(&w, Mode::Eval).unwrap();
    let b = m.forward(&w, Mode::Eval).unwrap();
    assert_eq!(a, b);
}

#[test]
fn batched_prediction_matches_single_window() {
    let cfg = IpnetConfig::tiny();
    let m = model(&cfg, 9);
    let ws: Vec<Vec<f64>> = (0..3).map(|i| random_window(&cfg, 20 + i)).collect();
    let refs: Vec<&[f64]> = ws.iter().map(Vec::as_slice).collect();
    let batch = m.predict_batch(&refs).unwrap();
    for (w, b) in ws.iter().zip(batch) {
        assert_eq!(m.predict(w).unwrap(), b);
    }
}

#[test]
fn predict_is_brute_force_row_mean() {
    let cfg = IpnetConfig::tiny();
    let m = model(&cfg, 4);
    let w = random_window(&cfg, 4);
    let (ba, bw) = m.forward(&w, Mode::Eval).unwrap();
    let p = m.predict(&w).unwrap();
    for axis in 0..3 {
        let mut sa = 0.0;
        let mut sw = 0.0;
        for r in 0..cfg.n {
            sa += ba[r][axis];
            sw += bw[r][axis];
        }
        assert!((p.ba[axis] - sa / cfg.n as f64).abs() < 1e-12);
        assert!((p.bw[axis] - sw / cfg.n as f64).abs() < 1e-12);
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let cfg = IpnetConfig::tiny();
    let m = model(&cfg, 2);
    let mut bn = m.bn.clone();
    let w = [random_window(&cfg, 3), random_window(&cfg, 4)];
    let (tape, _, out) = m.record(&[&w[0], &w[1]], Mode::Train, &mut bn).unwrap();
    let a = tape.value(out.attention);
    let l = cfg.n;
    assert_eq!(a.shape, vec![2 * cfg.heads, l, l]);
    for row in a.data.chunks(l) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn weights_round_trip_byte_identical() {
    let cfg = IpnetConfig::tiny();
    let mut m = model(&cfg, 12);
    m.bn[3].running_mean[1] = 0.123456789;
    m.normalization.mean[2] = 9.81;
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    m.save(&a).unwrap();
    let loaded = ModelWeights::load(&a, &cfg).unwrap();
    assert_eq!(loaded, m);
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let mut other = cfg.clone();
    other.hidden = 4;
    assert!(matches!(ModelWeights::load(&a, &other), Err(NnError::Weights(_))));

    let mut bytes = std::fs::read(&a).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&b, bytes).unwrap();
    assert!(matches!(ModelWeights::load(&b, &cfg), Err(NnError::Core(_))));
}

#[test]
fn sliding_inference_counts_and_stamps() {
    let cfg = IpnetConfig::tiny();
    let m = model(&cfg, 1);
    let exact = stream(cfg.s, 1);
    let out = sliding_inference(&exact, &m, ImuBias::zero()).unwrap();
    assert_eq!(out.len(), 2);
    assert!(out[0].warmup && out[0].t == 0.0 && out[0].bias == ImuBias::zero());
    assert!(!out[1].warmup);
    assert_eq!(out[1].t, exact[cfg.s - 1].t);

    let longer = stream(cfg.s + 2 * cfg.stride, 2);
    let out = sliding_inference(&longer, &m, ImuBias::zero()).unwrap();
    let preds: Vec<_> = out.iter().filter(|p| !p.warmup).collect();
    assert_eq!(preds.len(), 3);
    for (k, p) in preds.iter().enumerate() {
        let end = k * cfg.stride + cfg.s - 1;
        assert_eq!(p.t, longer[end].t);
        assert_eq!(p.bias, m.predict(&window_rows(&longer[end + 1 - cfg.s..=end])).unwrap());
    }

    let short = stream(cfg.s - 1, 3);
    assert_eq!(sliding_inference(&short, &m, ImuBias::zero()).unwrap().len(), 1);
}

fn labeled(id: &str, bias: ImuBias, seed: u64, duration: f64) -> LabeledSequence {
    let spec = TrajectorySpec {
        position_amplitude: [0.1, 0.1, 0.05],
        attitude_amplitude: [0.03, 0.03, 0.1],
        ..TrajectorySpec::handheld(duration)
    };
    let noise = NoiseSpec {
        accel_noise_std: 0.02,
        gyro_noise_std: 0.002,
        ..NoiseSpec::noiseless(seed)
    };
    let seq = synthesize_sequence(&spec, &bias, &noise, &GravityConfig::default()).unwrap();
    LabeledSequence {
        id: id.into(),
        samples: seq.samples,
        label: bias,
    }
}

fn label_a() -> ImuBias {
    ImuBias::new(Vector3::new(0.05, -0.02, 0.03), Vector3::new(0.002, -0.001, 0.0015))
}

#[test]
fn overfits_a_single_constant_label() {
    let cfg = IpnetConfig::tiny();
    let seqs = [labeled("train", label_a(), 1, 2.0), labeled("val", label_a(), 2, 2.0)];
    let schedule = TrainingSchedule {
        optimizer: OptimizerKind::Adam,
        lr: 1e-3,
        decay_every: 1000,
        epochs: 200,
        batch_size: 8,
        val_ids: vec!["val".into()],
        ..TrainingSchedule::default()
    };
    let out = train(&seqs, &cfg, &schedule, 5).unwrap();
    assert_eq!(out.log.len(), 200);
    let first = out.log[0].val_loss;
    let best = out.log.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert!(best < 0.1 * first, "epoch-0 val {first}, best {best}");
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let cfg = IpnetConfig::tiny();
    let seqs = [labeled("t", label_a(), 1, 1.0), labeled("v", label_a(), 2, 1.0)];
    let schedule = TrainingSchedule {
        lr: 0.0,
        epochs: 3,
        val_ids: vec!["v".into()],
        ..TrainingSchedule::default()
    };
    let out = train(&seqs, &cfg, &schedule, 8).unwrap();
    let init = model(&cfg, 8);
    assert_eq!(out.model.params, init.params);
}

#[test]
fn same_seed_gives_identical_logs() {
    let cfg = IpnetConfig::tiny();
    let seqs = [labeled("t", label_a(), 1, 1.5), labeled("v", label_a(), 2, 1.0)];
    let schedule = TrainingSchedule {
        optimizer: OptimizerKind::Rmsprop,
        lr: 1e-3,
        epochs: 4,
        batch_size: 3,
        val_ids: vec!["v".into()],
        ..TrainingSchedule::default()
    };
    let a = train(&seqs, &cfg, &schedule, 77).unwrap();
    let b = train(&seqs, &cfg, &schedule, 77).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model, b.model);
    let c = train(&seqs, &cfg, &schedule, 78).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn training_needs_both_splits() {
    let cfg = IpnetConfig::tiny();
    let seqs = [labeled("t", label_a(), 1, 1.0)];
    let schedule = TrainingSchedule {
        val_ids: vec!["missing".into()],
        ..TrainingSchedule::default()
    };
    assert!(matches!(train(&seqs, &cfg, &schedule, 1), Err(NnError::EmptyDataset(_))));
    let short = [labeled("t", label_a(), 1, 0.1), labeled("v", label_a(), 2, 1.0)];
    let schedule = TrainingSchedule {
        val_ids: vec!["v".into()],
        ..TrainingSchedule::default()
    };
    assert!(matches!(train(&short, &cfg, &schedule, 1), Err(NnError::EmptyDataset(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn encoder_length_chain(s in 8usize..200, pools in prop::collection::vec(1usize..4, 4)) {
        let cfg = IpnetConfig {
            s,
            n: 1,
            channels: vec![2, 2, 2, 2],
            kernels: vec![3, 1, 5, 3],
            pools: pools.clone(),
            hidden: 2,
            heads: 1,
            stride: 1,
        };
        let mut expect = s;
        for p in &pools {
            expect /= p;
        }
        prop_assert_eq!(*cfg.encoder_lengths().last().unwrap(), expect);
        prop_assume!(expect >= 1);
        let m = model(&cfg, 0);
        let mut bn = m.bn.clone();
        let w = random_window(&cfg, 1);
        let (tape, _, out) = m.record(&[&w], Mode::Eval, &mut bn).unwrap();
        prop_assert_eq!(tape.shape(out.encoded), &[1, 2, expect]);
    }

    #[test]
    fn row_permutation_leaves_bias_unchanged(
        rows in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 2..20),
        seed in 0u64..1000,
    ) {
        let ba: Vec<Vector3<f64>> = rows.iter().map(|r| Vector3::from(*r)).collect();
        let bw: Vec<Vector3<f64>> = ba.iter().map(|v| v * 0.1).collect();
        let mut idx: Vec<usize> = (0..ba.len()).collect();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pa: Vec<_> = idx.iter().map(|&i| ba[i]).collect();
        let pw: Vec<_> = idx.iter().map(|&i| bw[i]).collect();
        let x = bias_from_rows(&ba, &bw);
        let y = bias_from_rows(&pa, &pw);
        prop_assert!((x.ba - y.ba).amax() < 1e-14 && (x.bw - y.bw).amax() < 1e-15);
    }
}
