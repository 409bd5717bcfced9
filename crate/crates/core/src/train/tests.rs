use super::*;
use crate::synth::{synth_generate, SynthSpec};

fn tiny_enc() -> EncoderConfig {
    EncoderConfig {
        crop_size: [16; 3],
        channels: vec![4, 8],
        strides: vec![2, 2],
        patch: 4,
        fuse_res: [4; 3],
        proj_dim: 8,
        proj_hidden: 8,
        pred_hidden: 8,
        decoder_hidden: 4,
        ..Default::default()
    }
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        steps_per_epoch: 3,
        batch_size: 2,
        roi_res: [2; 3],
        ..Default::default()
    }
}

fn sampler() -> SamplerConfig {
    SamplerConfig {
        crop_size: [16; 3],
        ..Default::default()
    }
}

fn data() -> Vec<Volume> {
    (0..2)
        .map(|s| {
            synth_generate(&SynthSpec {
                seed: s,
                dims: [24; 3],
                n_blobs: 3,
                radius: (2.0, 4.0),
                ..Default::default()
            })
            .unwrap()
            .0
        })
        .collect()
}

fn same(a: &ModelParams, b: &ModelParams) -> bool {
    a.iter()
        .zip(b.iter())
        .all(|((n1, x), (n2, y))| n1 == n2 && x.bitwise_eq(y))
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig {
            ema_decay: 1.5,
            ..Default::default()
        },
        TrainConfig {
            mask_ratio: -0.1,
            ..Default::default()
        },
        TrainConfig {
            lr: 0.0,
            ..Default::default()
        },
        TrainConfig {
            batch_size: 1,
            ..Default::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
    let json = r#"{"epochs": 1, "lamda_recon": 1.0}"#;
    let err = serde_json::from_str::<TrainConfig>(json).unwrap_err().to_string();
    assert!(err.contains("lamda_recon"), "{err}");
}

#[test]
fn zero_weights_leave_parameters_unchanged() {
    let enc = tiny_enc();
    let cfg = TrainConfig {
        weights: LossWeights {
            lambda_recon: 0.0,
            lambda_consis: 0.0,
            lambda_con: 0.0,
            ..Default::default()
        },
        ..tiny_cfg()
    };
    let mut state = TrainState::init(&enc, &cfg).unwrap();
    let before = state.student.clone();
    let batch = make_batch(&data(), &sampler(), &cfg, 0).unwrap();
    let rec = train_step(&mut state, &cfg, &enc, Stage::Two, &batch).unwrap();
    assert_eq!((rec.total, rec.recon, rec.consis, rec.con), (0.0, 0.0, 0.0, 0.0));
    assert!(same(&state.student, &before));
    assert_eq!(state.step, 1);
}

#[test]
fn total_is_the_weighted_breakdown() {
    let enc = tiny_enc();
    let cfg = TrainConfig {
        weights: LossWeights {
            lambda_recon: 0.7,
            lambda_consis: 1.3,
            lambda_con: 0.4,
            ..Default::default()
        },
        ..tiny_cfg()
    };
    let mut state = TrainState::init(&enc, &cfg).unwrap();
    let batch = make_batch(&data(), &sampler(), &cfg, 0).unwrap();
    let r = train_step(&mut state, &cfg, &enc, Stage::Two, &batch).unwrap();
    let oracle = 0.7 * r.recon + 1.3 * r.consis + 0.4 * r.con;
    assert!((r.total - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
    assert!(r.recon > 0.0 && r.consis > 0.0 && r.con > 0.0);

    let r1 = train_step(&mut state, &cfg, &enc, Stage::One, &batch).unwrap();
    assert_eq!((r1.consis, r1.con), (0.0, 0.0));
    assert_eq!(r1.total, 0.7 * r1.recon);
}

#[test]
fn consistency_variants_run() {
    let enc = tiny_enc();
    for kind in [ConsisKind::Cosine, ConsisKind::Ntxent, ConsisKind::Gram] {
        let cfg = TrainConfig {
            weights: LossWeights {
                consis_kind: kind,
                ..Default::default()
            },
            ..tiny_cfg()
        };
        let mut state = TrainState::init(&enc, &cfg).unwrap();
        let batch = make_batch(&data(), &sampler(), &cfg, 0).unwrap();
        let r = train_step(&mut state, &cfg, &enc, Stage::Two, &batch).unwrap();
        assert!(r.consis.is_finite() && r.consis >= 0.0, "{kind:?}: {r:?}");
    }
}

#[test]
fn frozen_teacher_gets_no_updates() {
    let enc = tiny_enc();
    let cfg = TrainConfig {
        ema_decay: 1.0,
        ..tiny_cfg()
    };
    let mut state = TrainState::init(&enc, &cfg).unwrap();
    let teacher = state.teacher.clone();
    let student = state.student.clone();
    let batch = make_batch(&data(), &sampler(), &cfg, 0).unwrap();
    train_step(&mut state, &cfg, &enc, Stage::Two, &batch).unwrap();
    assert!(same(&state.teacher, &teacher));
    assert!(!same(&state.student, &student));

    let simsiam = TrainConfig {
        ema_decay: 0.0,
        ..tiny_cfg()
    };
    train_step(&mut state, &simsiam, &enc, Stage::Two, &batch).unwrap();
    assert!(same(&state.teacher, &state.student));
}

#[test]
fn non_finite_loss_names_the_term() {
    let enc = tiny_enc();
    let cfg = tiny_cfg();
    let mut state = TrainState::init(&enc, &cfg).unwrap();
    let w = state.student.get("dec.w2").unwrap().map(|_| f64::MAX);
    state.student.set("dec.w2", w).unwrap();
    let batch = make_batch(&data(), &sampler(), &cfg, 0).unwrap();
    match train_step(&mut state, &cfg, &enc, Stage::Two, &batch) {
        Err(Error::NonFinite(msg)) => assert!(msg.starts_with("recon"), "{msg}"),
        other => panic!("expected a non-finite error, got {:?}", other.map(|r| r.total)),
    }
}

#[test]
fn zero_epochs_return_the_initial_state() {
    let enc = tiny_enc();
    let cfg = TrainConfig {
        epochs: 0,
        ..tiny_cfg()
    };
    let state = TrainState::init(&enc, &cfg).unwrap();
    let out = train_loop(state.clone(), &cfg, &enc, &sampler(), Stage::One, &data(), None).unwrap();
    assert!(out.trace.is_empty());
    assert_eq!(out.state, state);
}

#[test]
fn runs_are_bitwise_reproducible_and_warm_start_checks_registry() {
    let dir = tempfile::tempdir().unwrap();
    let enc = tiny_enc();
    let cfg = tiny_cfg();
    let run = |name: &str| {
        let out = RunOutputs {
            trace: dir.path().join(format!("{name}.csv")),
            checkpoint: dir.path().join(name),
        };
        let state = TrainState::init(&enc, &cfg).unwrap();
        train_loop(state, &cfg, &enc, &sampler(), Stage::One, &data(), Some(&out)).unwrap();
        out
    };
    let (a, b) = (run("a"), run("b"));
    let bytes = |p: &Path| fs::read(p).unwrap();
    assert_eq!(bytes(&a.trace), bytes(&b.trace));
    let ext = |p: &Path, e: &str| p.with_extension(e);
    assert_eq!(bytes(&ext(&a.checkpoint, "bin")), bytes(&ext(&b.checkpoint, "bin")));
    assert_eq!(bytes(&ext(&a.checkpoint, "json")), bytes(&ext(&b.checkpoint, "json")));

    let text = fs::read_to_string(&a.trace).unwrap();
    assert!(text.starts_with("step,total,recon,consis,con,lr\n"));
    let trace = read_trace(&a.trace).unwrap();
    assert_eq!(trace.len(), 3);
    assert_eq!(trace.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 1, 2]);

    let warm = load_warm_start(&a.checkpoint, &enc, &cfg).unwrap();
    assert!(same(&warm.student, &warm.teacher));
    let other = EncoderConfig {
        channels: vec![4, 4],
        ..tiny_enc()
    };
    assert!(matches!(
        load_warm_start(&a.checkpoint, &other, &cfg),
        Err(Error::Contract(_))
    ));
}

#[test]
fn alignment_score_is_one_for_identical_views() {
    let enc = tiny_enc();
    let params = ModelParams::init(&enc, 3, DType::F64).unwrap();
    let vol = &data()[0];
    let crop = vol.extract([2, 3, 4], [16; 3]).unwrap();
    let full = Box3::new([0; 3], [16; 3]).unwrap();
    let pair = ViewPair {
        crop1: crop.clone(),
        crop2: crop,
        geometry: crate::views::PairGeometry {
            box1: full,
            box2: full,
            omega1: full,
            omega2: full,
        },
        aug1: crate::views::AugmentRecord::identity(),
        aug2: crate::views::AugmentRecord::identity(),
    };
    let s = alignment_score(&params, &enc, &[pair], [2; 3]).unwrap();
    assert!((s - 1.0).abs() < 1e-12);
}
