use automl_core::pipeline::{
    replay, reproducible_metrics, run_pipeline, run_pipeline_on, PipelineConfig, RunOptions,
};
use automl_core::synth::{generate, SynthConfig};
use automl_core::tracking::{RunStatus, RunStore, REPORT_SECTIONS};

fn small_config(dir: &std::path::Path, trials: usize) -> PipelineConfig {
    let data = generate(&SynthConfig::drebin_like(5).scaled(0.04)).unwrap();
    let path = dir.join("data.csv");
    data.write_csv(std::fs::File::create(&path).unwrap(), "class").unwrap();
    let text = format!(
        r#"
seed = 42
[dataset]
path = "{}"
[hpo]
n_trials = {trials}
startup_trials = 2
[explain]
importance_rows = 60
importance_repeats = 2
shapley_samples = 20
background_rows = 20
surrogate_perturbations = 200
"#,
        path.display()
    );
    let mut cfg = PipelineConfig::from_toml_str(&text).unwrap();
    cfg.tracking.root = dir.join("runs");
    cfg
}

#[test]
fn one_trial_gives_one_child_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 1);
    let store = RunStore::open(&cfg.tracking.root).unwrap();
    let out = run_pipeline(&cfg, &store, &RunOptions::default()).unwrap();
    assert_eq!(out.n_child_runs, 1);
    assert_eq!(store.children(&out.run_id).unwrap().len(), 1);
    let run = store.get_run(&out.run_id).unwrap();
    assert_eq!(run.status, RunStatus::Finished);
    assert!(run.metric("test.recall").is_some());
    assert!(run.metric("test.member.knn.mcc").is_some());
    for a in ["model.json", "importance.csv", "shapley.csv", "surrogate.json", "tree.dot", "config.toml"] {
        assert!(run.artifact(a).is_some(), "missing artifact {a}");
    }
    store.verify_run(&out.run_id).unwrap();
    let report = std::fs::read_to_string(store.run_dir(&out.run_id).join("report.md")).unwrap();
    for s in REPORT_SECTIONS {
        assert!(report.contains(s), "report lacks {s}");
    }
}

#[test]
fn repeated_and_replayed_runs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 3);
    let store = RunStore::open(&cfg.tracking.root).unwrap();
    let a = run_pipeline(&cfg, &store, &RunOptions::default()).unwrap();
    let b = run_pipeline(&cfg, &store, &RunOptions::default()).unwrap();
    let c = replay(&store, &a.run_id).unwrap();
    let ra = store.get_run(&a.run_id).unwrap();
    let rb = store.get_run(&b.run_id).unwrap();
    let rc = store.get_run(&c.run_id).unwrap();
    let bits = |r| -> Vec<(String, u64)> {
        reproducible_metrics(r).into_iter().map(|(k, v)| (k, v.to_bits())).collect()
    };
    assert_eq!(bits(&ra), bits(&rb));
    assert_eq!(bits(&ra), bits(&rc));
    assert_eq!(a.best_params, b.best_params);
    assert_eq!(a.best_params, c.best_params);
    assert_eq!(rc.params.get("replay_of"), Some(&a.run_id));
}

#[test]
fn failing_stage_marks_run_failed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), 1);
    cfg.hpo.enabled = false;
    cfg.explain.instance = 1_000_000;
    let store = RunStore::open(&cfg.tracking.root).unwrap();
    let ds = automl_core::dataset::load_csv(&cfg.dataset.path, &cfg.load_options()).unwrap();
    let err = run_pipeline_on(&ds, &cfg, &store, &RunOptions::default()).unwrap_err();
    assert!(err.to_string().contains("explain"), "{err}");
    let runs = store.list_runs().unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(runs[0].status, RunStatus::Failed);
    assert_eq!(runs[0].params.get("failed_stage").map(String::as_str), Some("explain"));
}

#[test]
fn replay_refuses_changed_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), 1);
    cfg.explain.enabled = false;
    let store = RunStore::open(&cfg.tracking.root).unwrap();
    let a = run_pipeline(&cfg, &store, &RunOptions::default()).unwrap();
    let mut text = std::fs::read_to_string(&cfg.dataset.path).unwrap();
    text.push_str(&text.lines().nth(1).unwrap().to_string());
    text.push('\n');
    std::fs::write(&cfg.dataset.path, text).unwrap();
    assert!(replay(&store, &a.run_id).is_err());
}

#[test]
fn restricted_roster_trains_only_named_members() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), 2);
    cfg.models.members = vec!["tree".into(), "gbt_a".into()];
    cfg.explain.enabled = false;
    let store = RunStore::open(&cfg.tracking.root).unwrap();
    let out = run_pipeline(&cfg, &store, &RunOptions::default()).unwrap();
    assert_eq!(out.members.keys().cloned().collect::<Vec<_>>(), vec!["gbt_a", "tree"]);
    let best = out.best_params.unwrap();
    assert!(best.keys().all(|k| k.starts_with("tree.") || k.starts_with("gbt_a.")));
}
