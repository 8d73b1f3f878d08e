use pose2mesh::data::{generate_synthetic_dataset, ErrorSynthConfig, MeshTemplate, PoseSample, TemplateSpec};
use pose2mesh::losses::LossWeights;
use pose2mesh::nn::{ModelConfig, Pose2Mesh, POSENET};
use pose2mesh::train::{evaluate, predict, train_full, train_posenet, EvalConfig, InputMode, TraceRow, TrainConfig};
use pose2mesh::Error;

fn small_model() -> ModelConfig {
    ModelConfig {
        hidden: 32,
        widths: vec![16, 8],
        levels: 2,
        ..ModelConfig::desk()
    }
}

fn small_train() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        stage1_epochs: 4,
        stage1_decay_epoch: 2,
        stage2_epochs: 4,
        stage2_decay_epoch: 3,
        loss: LossWeights {
            edge_loss_start_epoch: 3,
            ..LossWeights::default()
        },
        seed: 11,
        ..TrainConfig::desk()
    }
}

fn data(n: usize) -> (MeshTemplate, Vec<PoseSample>) {
    generate_synthetic_dataset(&TemplateSpec::tube_man(), n, 21).unwrap()
}

fn stage_one(model: &ModelConfig, cfg: &TrainConfig, t: &MeshTemplate, d: &[PoseSample]) -> (Pose2Mesh, Vec<TraceRow>) {
    let mut m = Pose2Mesh::<f32>::posenet_only(model, t.num_joints(), t.root_index, cfg.seed).unwrap();
    let out = train_posenet(&mut m, d, &t.symmetry_pairs, cfg).unwrap();
    (m, out.trace)
}

fn mean(rows: &[TraceRow]) -> f64 {
    rows.iter().map(|r| r.losses.total).sum::<f64>() / rows.len() as f64
}

#[test]
fn same_seed_gives_bit_identical_runs() {
    let (t, d) = data(10);
    let cfg = TrainConfig {
        synthesize_errors: true,
        ..small_train()
    };
    let run = || {
        let (m, trace1) = stage_one(&small_model(), &cfg, &t, &d);
        let ck = m.to_checkpoint(serde_json::Value::Null).unwrap();
        let mut full = Pose2Mesh::<f32>::full(&small_model(), &t, cfg.seed).unwrap();
        full.load_posenet(&ck).unwrap();
        let trace2 = train_full(&mut full, &t, &d, &cfg).unwrap().trace;
        (
            trace1,
            trace2,
            full.to_checkpoint(serde_json::Value::Null).unwrap().to_bytes().unwrap(),
        )
    };
    let a = run();
    let b = run();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);

    let other = TrainConfig {
        seed: 12,
        ..cfg.clone()
    };
    let (_, trace) = stage_one(&small_model(), &other, &t, &d);
    assert_ne!(trace, a.0);
}

#[test]
fn learning_rate_drops_tenfold_after_decay_epoch() {
    let (t, d) = data(8);
    let cfg = small_train();
    let (_, trace) = stage_one(&small_model(), &cfg, &t, &d);
    let lr = |epoch: usize| trace.iter().find(|r| r.epoch == epoch).unwrap().lr;
    assert_eq!(lr(1), cfg.stage1_lr);
    assert_eq!(lr(cfg.stage1_decay_epoch), cfg.stage1_lr);
    assert!((lr(cfg.stage1_decay_epoch) / lr(cfg.stage1_decay_epoch + 1) - 10.0).abs() < 1e-12);
    assert_eq!(lr(cfg.stage1_epochs), lr(cfg.stage1_decay_epoch + 1));
    // 8 samples in batches of 4.
    assert_eq!(trace.len(), cfg.stage1_epochs * 2);
}

#[test]
fn edge_term_enters_the_total_at_its_start_epoch() {
    let (t, d) = data(8);
    let cfg = small_train();
    let mut m = Pose2Mesh::<f32>::full(&small_model(), &t, 0).unwrap();
    let trace = train_full(&mut m, &t, &d, &cfg).unwrap().trace;
    let w = &cfg.loss;
    for r in &trace {
        let l = &r.losses;
        let mut want = w.lambda_v * l.vertex.unwrap()
            + w.lambda_j * l.joint.unwrap()
            + w.lambda_n * l.normal.unwrap()
            + l.pose.unwrap();
        if r.epoch >= w.edge_loss_start_epoch {
            want += w.lambda_e * l.edge.unwrap();
        }
        assert!(l.edge.unwrap() > 0.0);
        assert!(
            (l.total - want).abs() <= 1e-5 * want.abs(),
            "epoch {}: total {} vs recomputed {want}",
            r.epoch,
            l.total
        );
    }
    assert!(trace.iter().any(|r| r.epoch < w.edge_loss_start_epoch));
    assert!(trace.iter().any(|r| r.epoch >= w.edge_loss_start_epoch));
}

#[test]
fn pose_term_is_optional_in_stage_two() {
    let (t, d) = data(8);
    let cfg = TrainConfig {
        include_pose_loss_stage2: false,
        stage2_epochs: 2,
        stage2_decay_epoch: 1,
        ..small_train()
    };
    let mut m = Pose2Mesh::<f32>::full(&small_model(), &t, 0).unwrap();
    let trace = train_full(&mut m, &t, &d, &cfg).unwrap().trace;
    assert!(trace.iter().all(|r| r.losses.pose.is_none()));
}

#[test]
fn frozen_posenet_is_left_untouched() {
    let (t, d) = data(8);
    let snapshot = |m: &Pose2Mesh<f32>| -> Vec<(String, Vec<f32>)> {
        m.store
            .iter()
            .filter(|(_, p)| p.name.starts_with(POSENET))
            .map(|(_, p)| (p.name.clone(), p.tensor.data().to_vec()))
            .collect()
    };
    for freeze in [true, false] {
        let cfg = TrainConfig {
            freeze_posenet: freeze,
            ..small_train()
        };
        let mut m = Pose2Mesh::<f32>::full(&small_model(), &t, 0).unwrap();
        let before = snapshot(&m);
        let out = train_full(&mut m, &t, &d, &cfg).unwrap();
        assert_eq!(snapshot(&m) == before, freeze, "freeze = {freeze}");
        assert!(out.dead_params.is_empty(), "{:?}", out.dead_params);
        // Both stages leave every parameter trainable afterwards.
        assert!(m.store.iter().all(|(_, p)| !p.frozen));
    }
}

#[test]
fn desk_posenet_overfits_eight_samples() {
    let (t, d) = data(8);
    let cfg = TrainConfig {
        stage1_epochs: 200,
        stage1_decay_epoch: 150,
        seed: 3,
        ..TrainConfig::desk()
    };
    let (m, trace) = stage_one(&ModelConfig::desk(), &cfg, &t, &d);
    let tenth = trace.len() / 10;
    assert!(mean(&trace[trace.len() - tenth..]) < mean(&trace[..tenth]));
    let mut m = m.cast::<f64>();
    let report = evaluate(&mut m, Some(&t), &d, &EvalConfig::default()).unwrap();
    assert!(report.mpjpe_mm < 10.0, "train MPJPE {}", report.mpjpe_mm);
    assert!(report.mpvpe_mm.is_none());
}

#[test]
fn stage_one_reaches_every_posenet_parameter() {
    let (t, d) = data(8);
    let mut m = Pose2Mesh::<f32>::full(&small_model(), &t, 0).unwrap();
    let out = train_posenet(&mut m, &d, &t.symmetry_pairs, &small_train()).unwrap();
    assert!(out.dead_params.is_empty(), "{:?}", out.dead_params);
}

#[test]
fn misuse_is_reported() {
    let (t, d) = data(4);
    let cfg = small_train();
    let mut pose_only = Pose2Mesh::<f32>::posenet_only(&small_model(), t.num_joints(), t.root_index, 0).unwrap();
    assert!(matches!(
        predict(&mut pose_only, &d, InputMode::Gt3d, &ErrorSynthConfig::off(), &[], 4),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        train_full(&mut pose_only, &t, &d, &cfg),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        train_posenet(&mut pose_only, &[], &t.symmetry_pairs, &cfg),
        Err(Error::EmptyDataset)
    ));

    let mut no_mesh = d.clone();
    no_mesh[2].mesh_gt = None;
    let mut full = Pose2Mesh::<f32>::full(&small_model(), &t, 0).unwrap();
    assert!(train_full(&mut full, &t, &no_mesh, &cfg).is_err());

    let bad = TrainConfig {
        stage1_decay_epoch: cfg.stage1_epochs,
        ..cfg.clone()
    };
    assert!(matches!(
        train_posenet(&mut pose_only, &d, &t.symmetry_pairs, &bad),
        Err(Error::Config(_))
    ));
}
