//! Every artifact survives save and load unchanged.

use std::fmt::Debug;
use std::path::Path;

use cbdebug_core::cbm::{explain_all, train, TrainConfig};
use cbdebug_core::eval::RunMetrics;
use cbdebug_core::feedback::rule_oracle;
use cbdebug_core::io::Artifact;
use cbdebug_core::retrain::{run_strategy, RunArtifacts, Strategy, StrategyConfig};
use cbdebug_core::synthdata::{generate_dataset, DatasetConfig, GroupCount, Split};
use cbdebug_core::Error;

fn round_trip<T: Artifact + PartialEq + Debug>(value: &T, path: &Path) {
    value.save(path).unwrap();
    let first = std::fs::read(path).unwrap();
    let back = T::load(path).unwrap();
    assert_eq!(&back, value, "{}", path.display());
    back.save(path).unwrap();
    assert_eq!(std::fs::read(path).unwrap(), first, "{} is not stable", path.display());
}

#[test]
fn every_artifact_round_trips() {
    let mut cfg = DatasetConfig::waterbirds(21);
    cfg.group_counts = vec![
        GroupCount { y: 0, a: 0, count: 120 },
        GroupCount { y: 0, a: 1, count: 15 },
        GroupCount { y: 1, a: 0, count: 15 },
        GroupCount { y: 1, a: 1, count: 120 },
    ];
    cfg.test_per_group = 20;
    let ds = generate_dataset(&cfg).unwrap();
    let model = train(&ds, None, &TrainConfig { epochs: 4, seed: 21, ..TrainConfig::default() }).unwrap();
    let expl = explain_all(&model, &ds, 10).unwrap();
    let fb = rule_oracle(&model, &ds, &expl, 0.5).unwrap();
    assert!(!fb.c_spur.is_empty());
    let mut scfg = StrategyConfig::new(Strategy::Cbdebug);
    scfg.retrain_epochs = Some(2);
    let (after, arts) = run_strategy(&model, &ds, Some(&fb), &scfg, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    round_trip(&ds, &d.join("dataset.json"));
    round_trip(&model, &d.join("model.json"));
    round_trip(&after, &d.join("model_after.json"));
    round_trip(&fb, &d.join("feedback.json"));
    round_trip(arts.aux.as_ref().unwrap(), &d.join("aux.json"));
    round_trip(arts.weights.as_ref().unwrap(), &d.join("weights.json"));
    round_trip(arts.plan.as_ref().unwrap(), &d.join("plan.json"));
    let metrics = RunMetrics {
        split: Split::Test,
        before: cbdebug_core::eval::evaluate(&model, &ds, Split::Test).unwrap(),
        after: Some(cbdebug_core::eval::evaluate(&after, &ds, Split::Test).unwrap()),
        concept_report: Some(cbdebug_core::eval::concept_report(&model, &after, 5).unwrap()),
        dependence: None,
    };
    round_trip(&metrics, &d.join("metrics.json"));

    let run_dir = d.join("run");
    arts.save(&run_dir).unwrap();
    assert_eq!(RunArtifacts::load(&run_dir).unwrap(), arts);
}

#[test]
fn wrong_version_tag_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("fb.json");
    let ds = generate_dataset(&DatasetConfig::balanced(1)).unwrap();
    ds.save(&p).unwrap();
    let err = cbdebug_core::feedback::FeedbackSet::load(&p).unwrap_err();
    assert!(matches!(err, Error::Version { .. }), "{err}");
    std::fs::write(&p, "{\"c_spur\": []}").unwrap();
    assert!(matches!(
        cbdebug_core::feedback::FeedbackSet::load(&p).unwrap_err(),
        Error::Schema { .. }
    ));
}

#[test]
fn saving_leaves_no_temp_files() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&DatasetConfig::balanced(2)).unwrap();
    ds.save(dir.path().join("dataset.json")).unwrap();
    let names: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names, vec!["dataset.json".to_string()]);
}
