//! Staged pipeline on a 200-image smoke dataset.

mod common;

use common::smoke_config;
use dscm_core::auxiliary::AuxRole;
use dscm_core::cft::Regime;
use dscm_core::checkpoint::Checkpoint;
use dscm_core::graph::Intervention;
use dscm_core::pipeline::{Pipeline, RunLock};
use dscm_core::Error;

#[test]
fn smoke_pipeline_emits_a_report_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = Pipeline::new(smoke_config(&dir.path().join("a")), vec![]).unwrap();
    let ra = a.run_all().unwrap();
    assert_eq!(ra.rows.len(), 9);
    for r in &ra.rows {
        assert_eq!(r.cells.iter().filter(|c| c.intervened).count(), 1);
        assert!(r.cells.iter().all(|c| c.value.is_finite()));
        assert!((0.0..=1.0).contains(&r.locality_median));
    }
    let eval = a.layout.eval();
    for f in ["table.csv", "report.json", "panels-none.png", "panels-reg.png", "panels-seg.png"] {
        assert!(eval.join(f).exists(), "missing {f}");
    }
    let ck = Checkpoint::load(&a.layout.model(Regime::Seg)).unwrap();
    assert_eq!(ck.meta::<String>("config_hash").unwrap(), a.config_hash);

    // Same config and seed in another root: byte-identical table.
    let b = Pipeline::new(smoke_config(&dir.path().join("b")), vec![]).unwrap();
    b.run_all().unwrap();
    let ta = std::fs::read(eval.join("table.csv")).unwrap();
    let tb = std::fs::read(b.layout.eval().join("table.csv")).unwrap();
    assert_eq!(ta, tb);

    // Regime none leaves the parameters untouched.
    let base = Checkpoint::load(&a.layout.hvae()).unwrap();
    let none = Checkpoint::load(&a.layout.model(Regime::None)).unwrap();
    assert_eq!(base.param_hash().unwrap(), none.param_hash().unwrap());

    // Counterfactual panel for one test sample.
    let ds = a.dataset().unwrap();
    let sample = &ds.test[0];
    let target = sample.attributes.get("left").unwrap() * 1.2;
    let out = dir.path().join("cf");
    let row = a
        .counterfactual(Regime::Seg, &sample.id, &Intervention::single("left", target), &out)
        .unwrap();
    assert!(out.join("panel.png").exists());
    assert_eq!(row.factual_areas.len(), 3);

    // Retraining the base model invalidates the fine-tuned checkpoints.
    let mut changed = smoke_config(&dir.path().join("a"));
    changed.hvae.lr *= 0.5;
    let c = Pipeline::new(changed, vec!["hvae.lr=0.001".into()]).unwrap();
    c.train_hvae().unwrap();
    match c.evaluate(&[Regime::Seg]) {
        Err(Error::Provenance(msg)) => assert!(msg.contains("hvae"), "{msg}"),
        other => panic!("expected a provenance error, got {other:?}"),
    }
}

#[test]
fn missing_stage_names_the_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(smoke_config(dir.path()), vec![]).unwrap();
    p.generate_data().unwrap();
    match p.train_hvae() {
        Err(Error::MissingArtifact(path)) => assert!(path.ends_with("flows.json")),
        other => panic!("expected a missing artifact, got {other:?}"),
    }
    p.train_flows().unwrap();
    p.train_hvae().unwrap();
    match p.finetune(Regime::Seg) {
        Err(Error::MissingArtifact(path)) => assert!(path.ends_with("segmentor-finetune.json")),
        other => panic!("expected a missing artifact, got {other:?}"),
    }
    p.train_aux(AuxRole::Eval).unwrap();
    p.finetune(Regime::None).unwrap();
    // No fine-tuning auxiliaries were trained, so the evaluator is trivially independent.
    assert_eq!(p.evaluate(&[Regime::None]).unwrap().rows.len(), 3);
}

#[test]
fn output_root_lock_is_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    let held = RunLock::acquire(dir.path()).unwrap();
    assert!(matches!(RunLock::acquire(dir.path()), Err(Error::Locked(_))));
    drop(held);
    RunLock::acquire(dir.path()).unwrap();
}
