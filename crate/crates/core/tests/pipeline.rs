//! End-to-end behaviour of ingestion, phases, checkpoints and fusion.

mod common;

use std::path::Path;

use common::tiny_config;
use taskfuse::ias::fusion_loss_grad;
use taskfuse::imageops::Plane;
use taskfuse::pipeline::*;
use taskfuse::search_space::{derive_architecture, ArchRef, CellConfig, Supernet};
use taskfuse::Error;

fn here() -> &'static Path {
    Path::new(".")
}

#[test]
fn ingest_extracts_luma_and_pairs_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let red = image::RgbImage::from_pixel(4, 4, image::Rgb([255, 0, 0]));
    red.save(dir.path().join("s1_B.png")).unwrap();
    let gray = image::GrayImage::from_pixel(4, 4, image::Luma([51]));
    gray.save(dir.path().join("s1_A.png")).unwrap();
    image::GrayImage::from_pixel(5, 4, image::Luma([0]))
        .save(dir.path().join("s2_A.png"))
        .unwrap();
    image::GrayImage::from_pixel(4, 4, image::Luma([0]))
        .save(dir.path().join("s2_B.png"))
        .unwrap();
    image::GrayImage::from_pixel(4, 4, image::Luma([0]))
        .save(dir.path().join("s3_A.png"))
        .unwrap();

    let pairs = ingest(dir.path()).unwrap();
    assert_eq!(pairs.len(), 1, "mismatched and unpaired ids are skipped");
    let p = &pairs[0];
    assert_eq!(p.id, "s1");
    assert!(p.b.data.iter().all(|&y| (y - 0.299).abs() < 1e-3));
    assert!(
        p.a.data.iter().all(|&y| (y - 0.2).abs() < 1e-12),
        "grayscale passes through"
    );
    assert!(p.chroma.is_some());
}

#[test]
fn missing_prerequisite_names_the_phase() {
    let mut c = tiny_config(0);
    c.fallbacks = false;
    let exp = Experiment::new(c, here()).unwrap();
    match run_phase_joint(&exp, None) {
        Err(Error::MissingPrerequisite { phase, .. }) => assert_eq!(phase, "joint"),
        other => panic!("expected a missing-prerequisite error, got {other:?}"),
    }
    assert!(matches!(
        run_phase_meta(&exp, None),
        Err(Error::MissingPrerequisite { .. })
    ));
}

#[test]
fn skipped_phases_fall_back() {
    let mut c = tiny_config(1);
    c.phases.search = false;
    c.phases.meta = false;
    let exp = Experiment::new(c, here()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let summary = run_all(&exp, dir.path()).unwrap();
    assert_eq!(summary.phases.len(), 1);
    let ckpt = Checkpoint::load(&checkpoint_path(dir.path(), "joint")).unwrap();
    let fallback = derive_architecture(&exp.fallback_alpha().unwrap());
    assert_eq!(exp.model.fusion_from_checkpoint(&ckpt).unwrap().0, fallback);
}

#[test]
fn resumed_phases_match_a_single_run() {
    let exp = Experiment::new(tiny_config(2), here()).unwrap();
    let whole = tempfile::tempdir().unwrap();
    let summary = run_all(&exp, whole.path()).unwrap();

    let parts = tempfile::tempdir().unwrap();
    let s = run_phase_search(&exp).unwrap();
    s.persist(parts.path()).unwrap();
    let exp2 = Experiment::new(tiny_config(2), here()).unwrap();
    let loaded = Checkpoint::load(&checkpoint_path(parts.path(), "search")).unwrap();
    let m = run_phase_meta(&exp2, Some(&loaded)).unwrap();
    m.persist(parts.path()).unwrap();
    let loaded = Checkpoint::load(&checkpoint_path(parts.path(), "meta")).unwrap();
    let j = run_phase_joint(&exp2, Some(&loaded)).unwrap();
    let hash = j.persist(parts.path()).unwrap();
    assert_eq!(summary.phases[2].1, hash);
    for f in [
        "search_history.csv",
        "meta_history.csv",
        "joint_history.csv",
    ] {
        assert_eq!(
            std::fs::read(whole.path().join(f)).unwrap(),
            std::fs::read(parts.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn frozen_fusion_without_coupling_trains_the_head_only() {
    let mut c = tiny_config(3);
    c.losses.eta = 0.0;
    c.joint.freeze_fusion = true;
    let exp = Experiment::new(c, here()).unwrap();
    let arch = derive_architecture(&exp.model.net.uniform_architecture());
    let f0 = exp.model.fusion_init.clone();
    let out = joint_train(
        &exp,
        &arch,
        f0.clone(),
        exp.model.head_init.clone(),
        exp.joint_task(),
        &exp.config.joint,
    )
    .unwrap();
    assert_eq!(out.fusion, f0);
    assert_ne!(out.head, exp.model.head_init);
    for r in &out.history.records {
        assert_eq!(r.joint_objective, r.task_loss);
    }
    let first = &out.history.records[0];
    let last = out.history.records.last().unwrap();
    assert!(last.task_loss < first.task_loss);
}

#[test]
fn checkpoint_from_another_config_needs_override() {
    let exp = Experiment::new(tiny_config(4), here()).unwrap();
    let s = run_phase_search(&exp).unwrap();
    let other = tiny_config(5).hash();
    assert!(s.checkpoint.check_config(&other, false).is_err());
    assert!(s.checkpoint.check_config(&other, true).is_ok());
    assert!(s.checkpoint.check_config(&exp.hash, false).is_ok());
}

#[test]
fn fused_output_is_clamped_deterministic_and_size_checked() {
    let exp = Experiment::new(tiny_config(6), here()).unwrap();
    let arch = derive_architecture(&exp.model.net.uniform_architecture());
    let mut params = exp.model.fusion_init.clone();
    params
        .unflatten(
            &params
                .flatten()
                .iter()
                .map(|v| v * 40.0)
                .collect::<Vec<_>>(),
        )
        .unwrap();
    let pair = &exp.tasks[0].pairs[0];
    let f = exp.model.fuse(&params, &arch, pair).unwrap();
    assert!(f.data.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(f, exp.model.fuse(&params, &arch, pair).unwrap());

    let odd = ImagePair::new(
        "odd",
        Plane::constant(18, 18, 0.5),
        Plane::constant(18, 18, 0.5),
    )
    .unwrap();
    assert!(matches!(
        exp.model.fuse(&params, &arch, &odd),
        Err(Error::ImageSize { .. })
    ));
}

/// With identical sources the fusion loss is minimized by reproducing them.
#[test]
fn reconstruct_both_fixture() {
    let mut c = tiny_config(0);
    c.space.fusion.cells = vec![CellConfig::new("SC", &[&["3-RB"]])];
    let exp = Experiment::new(c, here()).unwrap();
    let arch = derive_architecture(&exp.model.net.uniform_architecture());
    let x = exp.tasks[0].pairs[0].a.clone();
    let t = x.to_tensor();
    let batch = taskfuse::data::PairBatch::new(t.clone(), t).unwrap();
    let mut theta = exp.model.fusion_init.flatten();
    let mut opt = OptimizerState::new(Optimizer::Adam, 1e-2, theta.len());
    for _ in 0..300 {
        let (_, g) = fusion_loss_grad(
            &exp.model.net,
            &exp.model.fusion_init,
            &theta,
            ArchRef::Discrete(&arch),
            &batch,
            &exp.config.losses,
        )
        .unwrap();
        opt.step(&mut theta, &g);
    }
    let pair = ImagePair::new("x", x.clone(), x.clone()).unwrap();
    let f = exp
        .model
        .fuse(
            &exp.model.fusion_init.with_flat(&theta).unwrap(),
            &arch,
            &pair,
        )
        .unwrap();
    let mad = f
        .data
        .iter()
        .zip(&x.data)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / x.data.len() as f64;
    assert!(mad < 0.05, "mean abs error {mad}");
}

#[test]
fn evaluate_matches_fused_files_to_sources() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = synthesize(SynthStyle::InfraredVisible, 2, 32, 32, 0).unwrap();
    let (src, fused) = (dir.path().join("src"), dir.path().join("fused"));
    std::fs::create_dir_all(&fused).unwrap();
    for p in &pairs {
        save_pair(&src, p).unwrap();
        save_gray(&fused.join(format!("{}.png", p.id)), &p.a).unwrap();
    }
    let report = evaluate_paths(&fused, &src, &src, &Default::default()).unwrap();
    assert_eq!(report.pairs.len(), 2);
    assert_eq!(report.pairs[0].pair_id, pairs[0].id);
    let missing = evaluate_paths(&dir.path().join("nope"), &src, &src, &Default::default());
    assert!(matches!(missing, Err(Error::MissingFiles(_))));
}

#[test]
fn segmentation_head_trains_on_masks() {
    let mut c = tiny_config(7);
    c.space.task.kind = "segmentation".into();
    let exp = Experiment::new(c, here()).unwrap();
    assert_eq!(exp.model.head.edge_count(), 4);
    let r = run_phase_joint(&exp, None).unwrap();
    let text = String::from_utf8(r.history_csv).unwrap();
    assert!(text.starts_with("epoch,task_loss,fusion_loss,joint_objective,val_task_loss"));
}
