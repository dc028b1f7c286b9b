use super::*;
use crate::data::{generate_phantom, PhantomSpec};
use crate::model::{ParamKind, Stage};

fn schedule(iterations: usize) -> TrainConfig {
    TrainConfig { iterations, lr_drop_iters: scaled_drops(iterations), ..TrainConfig::desk(0) }
}

#[test]
fn learning_rate_schedule() {
    let cfg = schedule(10_000);
    assert_eq!(cfg.lr_drop_iters, vec![5000, 8000]);
    assert_eq!(lr_at(0, &cfg), 0.0005);
    assert!((lr_at(4999, &cfg) - 0.0005).abs() < 1e-18);
    assert!((lr_at(5000, &cfg) - 0.00005).abs() < 1e-18);
    assert!((lr_at(9999, &cfg) - 0.000005).abs() < 1e-18);
    let mut plateaus: Vec<f64> = (0..10_000).map(|i| lr_at(i, &cfg)).collect();
    plateaus.dedup();
    assert_eq!(plateaus.len(), 3);
    assert_eq!(scaled_drops(2000), vec![1000, 1600]);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::desk(1).validate().is_ok());
    let bad = [
        TrainConfig { lr_drop_iters: vec![1600, 1000], ..TrainConfig::desk(1) },
        TrainConfig { lr_drop_iters: vec![1000, 2000], ..TrainConfig::desk(1) },
        TrainConfig { batch_size: 1, ..TrainConfig::desk(1) },
        TrainConfig { momentum: 1.0, ..TrainConfig::desk(1) },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))), "{cfg:?}");
    }
}

fn store(kind: ParamKind, value: f32) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    s.push("p".into(), Tensor::full(&[2], value).unwrap(), kind, Stage::Tap(0));
    s
}

#[test]
fn sgd_plain_and_zero_gradient() {
    let g = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
    let mut p = store(ParamKind::Weight, 1.0);
    let mut v = vec![vec![0.0; 2]];
    let hp = SgdParams { lr: 0.5, momentum: 0.0, weight_decay: 0.0 };
    sgd_step(&mut p, &[Some(&g)], &mut v, hp).unwrap();
    assert_eq!(p.get(0).value.data(), &[0.5, 2.0]);
    let zero = Tensor::zeros(&[2]).unwrap();
    let mut q = store(ParamKind::Weight, 3.0);
    let mut v = vec![vec![0.0; 2]];
    sgd_step(&mut q, &[Some(&zero)], &mut v, SgdParams { momentum: 0.9, ..hp }).unwrap();
    assert_eq!(q.get(0).value.data(), &[3.0, 3.0]);
}

#[test]
fn momentum_accumulates_by_recurrence() {
    let g = Tensor::full(&[2], 0.25f32).unwrap();
    let mut p = store(ParamKind::Weight, 0.0);
    let mut v = vec![vec![0.0; 2]];
    let hp = SgdParams { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
    for _ in 0..2 {
        sgd_step(&mut p, &[Some(&g)], &mut v, hp).unwrap();
    }
    // v1 = g, v2 = 0.9 g + g; total step lr g (1 + 1.9).
    let expect = -0.1 * 0.25 * 2.9;
    assert!((p.get(0).value.data()[0] as f64 - expect).abs() < 1e-7);
}

#[test]
fn weight_decay_skips_biases_and_batch_norm() {
    let g = Tensor::full(&[2], 0.5f32).unwrap();
    let hp = SgdParams { lr: 0.1, momentum: 0.9, weight_decay: 0.01 };
    for (kind, decays) in [(ParamKind::Weight, true), (ParamKind::Bias, false), (ParamKind::BnGamma, false), (ParamKind::BnBeta, false)] {
        let mut p = store(kind, 2.0);
        let mut v = vec![vec![0.0; 2]];
        let mut expect = (2.0f32, 0.0f32);
        for _ in 0..3 {
            sgd_step(&mut p, &[Some(&g)], &mut v, hp).unwrap();
            let wd = if decays { 0.01 } else { 0.0 };
            expect.1 = 0.9 * expect.1 + 0.5 + wd * expect.0;
            expect.0 -= 0.1 * expect.1;
        }
        assert_eq!(p.get(0).value.data()[0], expect.0, "{kind:?}");
    }
}

#[test]
fn nan_gradient_leaves_parameters_untouched() {
    let g = Tensor::new(&[2], vec![0.0, f32::NAN]).unwrap();
    let mut p = store(ParamKind::Weight, 1.0);
    let before = p.clone();
    let mut v = vec![vec![0.0; 2]];
    let err = sgd_step(&mut p, &[Some(&g)], &mut v, SgdParams { lr: 0.1, momentum: 0.9, weight_decay: 0.0 });
    assert_eq!(err, Err("p".to_string()));
    assert_eq!(p, before);
}

fn toy_volumes(n: u64, size: usize) -> Vec<LabeledVolume> {
    (0..n)
        .map(|i| {
            let spec = PhantomSpec::desk(size, 24);
            let ph = generate_phantom(&spec, &mut ChaCha8Rng::seed_from_u64(100 + i)).unwrap();
            LabeledVolume { name: format!("v{i}"), volume: ph.volume, labels: ph.labels }
        })
        .collect()
}

fn toy_config(iterations: usize) -> TrainConfig {
    let model = ModelConfig { input_size: 64, width_scale: 0.0625, ..ModelConfig::default() };
    TrainConfig { batch_size: 4, model, augment: AugmentConfig::none(), ..TrainConfig::desk(17).with_iterations(iterations) }
}

#[test]
fn short_run_reduces_loss() {
    let vols = toy_volumes(1, 64);
    let pool = lesion_slice_refs(&vols, &[0]);
    // A fixed four-sample toy set.
    let mut cfg = toy_config(50);
    cfg.lr0 = 0.005;
    let samples: Vec<Sample> = pool.iter().take(4).map(|&at| make_sample(&vols, at, &cfg.input_spec()).unwrap()).collect();
    let mut state = TrainState::init(&cfg.model, cfg.seed).unwrap();
    let priors = state.model.priors();
    let mut log = Vec::new();
    for _ in 0..cfg.iterations {
        log.push(train_step(&mut state, &cfg, &priors, &samples).unwrap());
    }
    assert!(log.iter().all(|r| r.total.is_finite()));
    assert!(log.last().unwrap().total < log[0].total, "{} -> {}", log[0].total, log.last().unwrap().total);
}

#[test]
fn same_seed_same_log_and_resume_matches() {
    let vols = toy_volumes(2, 64);
    let cfg = toy_config(12);
    let a = train(&cfg, &vols, &[0, 1], TrainOptions::default(), |_, _| Ok(())).unwrap();
    let b = train(&cfg, &vols, &[0, 1], TrainOptions::default(), |_, _| Ok(())).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.state, b.state);

    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions { out_dir: Some(dir.path()), config_text: "seed=17\n", stop_at: Some(6), ..Default::default() };
    let first = train(&cfg, &vols, &[0, 1], opts, |_, _| Ok(())).unwrap();
    assert_eq!(first.log, a.log[..6]);
    let ckpt = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ckpt.config_text, "seed=17\n");
    let resumed = ckpt.to_state(&cfg.model).unwrap();
    assert_eq!(resumed, first.state);
    let opts = TrainOptions { out_dir: Some(dir.path()), config_text: "seed=17\n", resume: Some(resumed), stop_at: None };
    let second = train(&cfg, &vols, &[0, 1], opts, |_, _| Ok(())).unwrap();
    assert_eq!(second.log, a.log[6..]);
    assert_eq!(second.state, a.state);

    let csv = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(LOG_HEADER));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 12);
    assert_eq!(rows[7], a.log[7].csv());
}

#[test]
fn checkpoint_rejects_corruption_and_mismatch() {
    let cfg = toy_config(1);
    let state = TrainState::init(&cfg.model, 3).unwrap();
    let ck = Checkpoint::from_state(&state, "a=1\n");
    let bytes = ck.to_bytes();
    let p = Path::new("mem");
    assert_eq!(Checkpoint::from_bytes(p, &bytes).unwrap(), ck);
    assert!(matches!(Checkpoint::from_bytes(p, &bytes[..bytes.len() - 3]), Err(TrainError::Checkpoint { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(p, &bad), Err(TrainError::Checkpoint { .. })));
    let wider = ModelConfig { width_scale: 0.125, ..cfg.model.clone() };
    assert!(matches!(ck.to_state(&wider), Err(TrainError::CheckpointContent(_))));
    assert_eq!(&bytes[..8], b"GSSDCKPT");
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
}
