use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use automl_core::synth::{generate, SynthConfig};

fn automl(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_automl"))
        .args(args)
        .env("AUTOML_TRACKING_ROOT", root)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn questionnaire(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/questionnaires").join(name)
}

fn write_fixture(dir: &Path, trials: usize) -> PathBuf {
    let data = generate(&SynthConfig::drebin_like(9).scaled(0.03)).unwrap();
    data.write_csv(std::fs::File::create(dir.join("data.csv")).unwrap(), "class")
        .unwrap();
    let cfg = format!(
        "seed = 3\n[dataset]\npath = \"data.csv\"\n[hpo]\nn_trials = {trials}\n\
         [explain]\nimportance_rows = 40\nimportance_repeats = 1\nshapley_samples = 10\n\
         background_rows = 10\nsurrogate_perturbations = 100\n"
    );
    let path = dir.join("pipeline.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}

fn run_id(out: &str) -> String {
    out.lines()
        .find_map(|l| l.strip_prefix("run"))
        .map(|s| s.trim().to_string())
        .expect("run id line")
}

#[test]
fn score_reports_published_totals() {
    let dir = tempfile::tempdir().unwrap();
    let q = questionnaire("published_totals.txt");
    let out = stdout(&automl(dir.path(), &["score", q.to_str().unwrap()]));
    assert!(out.contains("Interpretability: 58.33"), "{out}");
    assert!(out.contains("Internal Analysis: 50.00"), "{out}");
}

#[test]
fn score_json_is_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let q = questionnaire("full_marks.txt");
    let out = stdout(&automl(dir.path(), &["--json", "score", q.to_str().unwrap()]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v[0]["overall"], 100.0);
}

#[test]
fn compare_scorecards_csv() {
    let dir = tempfile::tempdir().unwrap();
    let a = questionnaire("full_marks.txt");
    let b = questionnaire("published_totals.txt");
    let out = stdout(&automl(
        dir.path(),
        &["compare", "--scorecards", a.to_str().unwrap(), b.to_str().unwrap()],
    ));
    assert_eq!(out.lines().count(), 3);
}

#[test]
fn missing_file_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let o = automl(dir.path(), &["profile", "/nonexistent/data.csv"]);
    assert!(!o.status.success());
    assert!(!o.stderr.is_empty());
    let o = automl(dir.path(), &["report", "0123456789abcdef"]);
    assert!(!o.status.success());
}

#[test]
fn profile_json_only_on_stdout() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), 1);
    let csv = dir.path().join("data.csv");
    let out_path = dir.path().join("p.json");
    let out = stdout(&automl(
        dir.path(),
        &["--json", "profile", csv.to_str().unwrap(), "--out", out_path.to_str().unwrap()],
    ));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["n_cols"], 215);
    assert!(out_path.exists());
}

#[test]
fn run_compare_explain_report_replay() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("runs");
    let cfg = write_fixture(dir.path(), 1);
    let cfg = cfg.to_str().unwrap();

    let first = stdout(&automl(&root, &["--threads", "1", "run", cfg]));
    assert!(first.contains("recall") && first.contains("mcc") && first.contains("wall time"));
    let a = run_id(&first);
    let b = run_id(&stdout(&automl(&root, &["run", cfg, "--no-explain"])));

    let csv = stdout(&automl(&root, &["compare", &a, &b, "--metric", "recall"]));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "run_id,name,status,test.recall");
    let recall = |l: &str| l.rsplit(',').next().unwrap().to_string();
    assert_eq!(recall(lines[1]), recall(lines[2]));

    let s1 = stdout(&automl(&root, &["explain", &a, "--method", "shapley", "--samples", "50", "--seed", "7"]));
    let s2 = stdout(&automl(&root, &["explain", &a, "--method", "shapley", "--samples", "50", "--seed", "7"]));
    assert_eq!(s1, s2);
    assert!(s1.starts_with("feature,shapley,std_error\n"));
    let dot = stdout(&automl(&root, &["explain", &a, "--method", "tree"]));
    assert!(dot.starts_with("digraph"));

    let report = stdout(&automl(&root, &["report", &a, "--print"]));
    assert!(report.contains("## Model metrics"));

    let replayed = stdout(&automl(&root, &["--json", "run", "--replay", &a]));
    let v: serde_json::Value = serde_json::from_str(&replayed).unwrap();
    let orig = stdout(&automl(&root, &["--json", "compare", &a, "--metric", "recall", "--metric", "mcc"]));
    let o: serde_json::Value = serde_json::from_str(&orig).unwrap();
    assert_eq!(v["test"]["recall"], o["rows"][0]["cells"][0]);
    assert_eq!(v["test"]["mcc"], o["rows"][0]["cells"][1]);

    assert!(!automl(&root, &["explain", "ffffffffffffffff"]).status.success());
}

#[test]
fn invalid_config_rejected_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[hpo]\nn_trails = 2\n").unwrap();
    let o = automl(&dir.path().join("runs"), &["run", path.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_trails"));
    assert!(!dir.path().join("runs").join("ledger.jsonl").exists());
}
