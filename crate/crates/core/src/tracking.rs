//! File-backed experiment store.
//!
//! Layout: `<root>/ledger.jsonl` holds one JSON event per line and is only ever
//! appended to; artifacts live under `<root>/runs/<run_id>/artifacts/`. Run state is
//! reconstructed by replaying the ledger.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Component, Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::profiler::EnvSnapshot;

pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const REPORT_FILE: &str = "report.md";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Finished,
    Failed,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Running => "running",
            RunStatus::Finished => "finished",
            RunStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub step: u64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    /// Relative to the run's artifact directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Start {
        run_id: String,
        created_at: String,
        name: Option<String>,
        parent: Option<String>,
        config: serde_json::Value,
        env: Option<EnvSnapshot>,
    },
    Param {
        run_id: String,
        key: String,
        value: String,
    },
    Metric {
        run_id: String,
        key: String,
        value: f64,
        step: u64,
    },
    Artifact {
        run_id: String,
        #[serde(flatten)]
        artifact: ArtifactRef,
    },
    Finish {
        run_id: String,
        status: RunStatus,
        finished_at: String,
    },
}

impl Event {
    fn run_id(&self) -> &str {
        match self {
            Event::Start { run_id, .. }
            | Event::Param { run_id, .. }
            | Event::Metric { run_id, .. }
            | Event::Artifact { run_id, .. }
            | Event::Finish { run_id, .. } => run_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub name: Option<String>,
    pub created_at: String,
    pub finished_at: Option<String>,
    pub parent: Option<String>,
    pub config: serde_json::Value,
    pub env: Option<EnvSnapshot>,
    pub params: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, Vec<MetricPoint>>,
    pub artifacts: Vec<ArtifactRef>,
    pub status: RunStatus,
}

impl RunRecord {
    /// Value at the highest step (last logged on ties).
    pub fn metric(&self, key: &str) -> Option<f64> {
        let pts = self.metrics.get(key)?;
        let max_step = pts.iter().map(|p| p.step).max()?;
        pts.iter().rev().find(|p| p.step == max_step).map(|p| p.value)
    }

    pub fn artifact(&self, path: &str) -> Option<&ArtifactRef> {
        self.artifacts.iter().find(|a| a.path == path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Micros, true)
}

fn new_run_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()[..16].to_string()
}

fn check_relative(path: &str) -> Result<()> {
    let p = Path::new(path);
    let ok = !path.is_empty()
        && p.components().all(|c| matches!(c, Component::Normal(_)));
    if ok {
        Ok(())
    } else {
        Err(Error::Tracking(format!(
            "artifact path must be relative without '..': {path:?}"
        )))
    }
}

pub struct RunStore {
    root: PathBuf,
    // serializes appenders within the process; the file lock covers other processes
    guard: Mutex<()>,
}

impl RunStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("runs")).map_err(|e| Error::io(&root, e))?;
        let ledger = root.join(LEDGER_FILE);
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&ledger)
            .map_err(|e| Error::io(&ledger, e))?;
        Ok(RunStore {
            root,
            guard: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.root.join(LEDGER_FILE)
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    pub fn artifact_dir(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("artifacts")
    }

    /// Runs `f` with the ledger locked and the current state replayed; events returned
    /// by `f` are appended before the lock is released.
    fn transact<T>(&self, f: impl FnOnce(&BTreeMap<String, RunRecord>) -> Result<(Vec<Event>, T)>) -> Result<T> {
        let _g = self.guard.lock().unwrap_or_else(|p| p.into_inner());
        let path = self.ledger_path();
        let mut file = OpenOptions::new()
            .append(true)
            .read(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        file.lock().map_err(|e| Error::io(&path, e))?;
        let result = (|| {
            let state = replay(&path)?;
            let (events, out) = f(&state)?;
            let mut buf = String::new();
            for ev in &events {
                buf.push_str(&serde_json::to_string(ev)?);
                buf.push('\n');
            }
            file.write_all(buf.as_bytes()).map_err(|e| Error::io(&path, e))?;
            file.flush().map_err(|e| Error::io(&path, e))?;
            Ok(out)
        })();
        let _ = file.unlock();
        result
    }

    pub fn start_run<C: Serialize>(
        &self,
        config: &C,
        parent: Option<&str>,
        name: Option<&str>,
        env: Option<EnvSnapshot>,
    ) -> Result<RunRecord> {
        let config = serde_json::to_value(config)?;
        let id = self.transact(|state| {
            if let Some(p) = parent {
                if !state.contains_key(p) {
                    return Err(Error::Tracking(format!("unknown parent run {p}")));
                }
            }
            let mut id = new_run_id();
            while state.contains_key(&id) {
                id = new_run_id();
            }
            let ev = Event::Start {
                run_id: id.clone(),
                created_at: now(),
                name: name.map(str::to_string),
                parent: parent.map(str::to_string),
                config,
                env,
            };
            Ok((vec![ev], id))
        })?;
        let dir = self.artifact_dir(&id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        self.get_run(&id)
    }

    fn running<'a>(state: &'a BTreeMap<String, RunRecord>, run_id: &str) -> Result<&'a RunRecord> {
        let r = state
            .get(run_id)
            .ok_or_else(|| Error::Tracking(format!("unknown run {run_id}")))?;
        if r.status != RunStatus::Running {
            return Err(Error::Tracking(format!(
                "run {run_id} is {} and can no longer be modified",
                r.status.as_str()
            )));
        }
        Ok(r)
    }

    /// Write-once: re-logging a key with the same value is a no-op.
    pub fn log_params<K: AsRef<str>, V: ToString>(&self, run_id: &str, params: &[(K, V)]) -> Result<()> {
        self.transact(|state| {
            let run = Self::running(state, run_id)?;
            let mut events = Vec::new();
            let mut pending: BTreeMap<&str, String> = BTreeMap::new();
            for (k, v) in params {
                let (k, v) = (k.as_ref(), v.to_string());
                let existing = run.params.get(k).or(pending.get(k));
                match existing {
                    Some(old) if *old == v => continue,
                    Some(old) => {
                        return Err(Error::Tracking(format!(
                            "param {k} already set to {old:?}, refusing {v:?}"
                        )))
                    }
                    None => {}
                }
                pending.insert(k, v.clone());
                events.push(Event::Param {
                    run_id: run_id.to_string(),
                    key: k.to_string(),
                    value: v,
                });
            }
            Ok((events, ()))
        })
    }

    pub fn log_param(&self, run_id: &str, key: &str, value: impl ToString) -> Result<()> {
        self.log_params(run_id, &[(key, value.to_string())])
    }

    pub fn log_metrics<K: AsRef<str>>(&self, run_id: &str, metrics: &[(K, f64)], step: u64) -> Result<()> {
        self.transact(|state| {
            Self::running(state, run_id)?;
            let mut events = Vec::new();
            for (k, v) in metrics {
                if !v.is_finite() {
                    return Err(Error::Tracking(format!(
                        "metric {} must be finite, got {v}",
                        k.as_ref()
                    )));
                }
                events.push(Event::Metric {
                    run_id: run_id.to_string(),
                    key: k.as_ref().to_string(),
                    value: *v,
                    step,
                });
            }
            Ok((events, ()))
        })
    }

    pub fn log_metric(&self, run_id: &str, key: &str, value: f64, step: u64) -> Result<()> {
        self.log_metrics(run_id, &[(key, value)], step)
    }

    /// Stores `bytes` under the run's artifact directory and records its hash.
    pub fn log_artifact(&self, run_id: &str, rel_path: &str, bytes: &[u8]) -> Result<ArtifactRef> {
        check_relative(rel_path)?;
        let artifact = ArtifactRef {
            path: rel_path.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        };
        let dest = self.artifact_dir(run_id).join(rel_path);
        self.transact(|state| {
            let run = Self::running(state, run_id)?;
            if let Some(old) = run.artifact(rel_path) {
                if old.sha256 == artifact.sha256 {
                    return Ok((vec![], ()));
                }
                return Err(Error::Tracking(format!(
                    "artifact {rel_path} already stored with different content"
                )));
            }
            if let Some(dir) = dest.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            fs::write(&dest, bytes).map_err(|e| Error::io(&dest, e))?;
            Ok((
                vec![Event::Artifact {
                    run_id: run_id.to_string(),
                    artifact: artifact.clone(),
                }],
                (),
            ))
        })?;
        Ok(artifact)
    }

    pub fn log_artifact_file(&self, run_id: &str, src: impl AsRef<Path>, rel_path: &str) -> Result<ArtifactRef> {
        let src = src.as_ref();
        let bytes = fs::read(src).map_err(|e| Error::io(src, e))?;
        self.log_artifact(run_id, rel_path, &bytes)
    }

    pub fn finish_run(&self, run_id: &str, status: RunStatus) -> Result<RunRecord> {
        if status == RunStatus::Running {
            return Err(Error::Tracking("finish status must be finished or failed".into()));
        }
        self.transact(|state| {
            Self::running(state, run_id)?;
            Ok((
                vec![Event::Finish {
                    run_id: run_id.to_string(),
                    status,
                    finished_at: now(),
                }],
                (),
            ))
        })?;
        self.get_run(run_id)
    }

    pub fn list_runs(&self) -> Result<Vec<RunRecord>> {
        let mut runs: Vec<RunRecord> = replay(&self.ledger_path())?.into_values().collect();
        runs.sort_by(|a, b| a.created_at.cmp(&b.created_at).then(a.run_id.cmp(&b.run_id)));
        Ok(runs)
    }

    pub fn get_run(&self, run_id: &str) -> Result<RunRecord> {
        replay(&self.ledger_path())?
            .remove(run_id)
            .ok_or_else(|| Error::Tracking(format!("unknown run {run_id}")))
    }

    pub fn children(&self, parent: &str) -> Result<Vec<RunRecord>> {
        Ok(self
            .list_runs()?
            .into_iter()
            .filter(|r| r.parent.as_deref() == Some(parent))
            .collect())
    }

    /// Reads an artifact and verifies it against the recorded hash.
    pub fn read_artifact(&self, run_id: &str, rel_path: &str) -> Result<Vec<u8>> {
        let run = self.get_run(run_id)?;
        let a = run
            .artifact(rel_path)
            .ok_or_else(|| Error::Tracking(format!("run {run_id} has no artifact {rel_path}")))?;
        let path = self.artifact_dir(run_id).join(rel_path);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let actual = sha256_hex(&bytes);
        if actual != a.sha256 {
            return Err(Error::HashMismatch {
                path: path.display().to_string(),
                expected: a.sha256.clone(),
                actual,
            });
        }
        Ok(bytes)
    }

    pub fn read_artifact_string(&self, run_id: &str, rel_path: &str) -> Result<String> {
        String::from_utf8(self.read_artifact(run_id, rel_path)?)
            .map_err(|e| Error::Tracking(format!("artifact {rel_path} is not UTF-8: {e}")))
    }

    /// Verifies every artifact of the run.
    pub fn verify_run(&self, run_id: &str) -> Result<()> {
        for a in self.get_run(run_id)?.artifacts {
            self.read_artifact(run_id, &a.path)?;
        }
        Ok(())
    }
}

fn replay(path: &Path) -> Result<BTreeMap<String, RunRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut runs: BTreeMap<String, RunRecord> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: Event = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: format!("ledger: {e}"),
        })?;
        let id = ev.run_id().to_string();
        match ev {
            Event::Start {
                run_id,
                created_at,
                name,
                parent,
                config,
                env,
            } => {
                runs.insert(
                    run_id.clone(),
                    RunRecord {
                        run_id,
                        name,
                        created_at,
                        finished_at: None,
                        parent,
                        config,
                        env,
                        params: BTreeMap::new(),
                        metrics: BTreeMap::new(),
                        artifacts: Vec::new(),
                        status: RunStatus::Running,
                    },
                );
            }
            other => {
                let Some(run) = runs.get_mut(&id) else {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: format!("ledger event for unknown run {id}"),
                    });
                };
                match other {
                    Event::Param { key, value, .. } => {
                        run.params.insert(key, value);
                    }
                    Event::Metric { key, value, step, .. } => {
                        run.metrics.entry(key).or_default().push(MetricPoint { step, value });
                    }
                    Event::Artifact { artifact, .. } => run.artifacts.push(artifact),
                    Event::Finish {
                        status, finished_at, ..
                    } => {
                        run.status = status;
                        run.finished_at = Some(finished_at);
                    }
                    Event::Start { .. } => unreachable!(),
                }
            }
        }
    }
    Ok(runs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Number(f64),
    Text(String),
    Missing,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Number(v) => format!("{v}"),
            Cell::Text(s) => s.clone(),
            Cell::Missing => "NA".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run_id: String,
    pub name: Option<String>,
    pub status: RunStatus,
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

fn lookup(run: &RunRecord, key: &str) -> Cell {
    if let Some(v) = run.metric(key) {
        return Cell::Number(v);
    }
    match run.params.get(key) {
        Some(v) => v.parse::<f64>().map(Cell::Number).unwrap_or_else(|_| Cell::Text(v.clone())),
        None => Cell::Missing,
    }
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl ComparisonTable {
    /// Sorts rows by a column; missing values go last, ties keep input order.
    pub fn sort_by(&mut self, column: &str, descending: bool) -> Result<()> {
        let c = self
            .columns
            .iter()
            .position(|k| k == column)
            .ok_or_else(|| Error::Tracking(format!("no column {column} in comparison")))?;
        self.rows.sort_by(|a, b| {
            use std::cmp::Ordering;
            match (&a.cells[c], &b.cells[c]) {
                (Cell::Missing, Cell::Missing) => Ordering::Equal,
                (Cell::Missing, _) => Ordering::Greater,
                (_, Cell::Missing) => Ordering::Less,
                (Cell::Number(x), Cell::Number(y)) => {
                    let o = x.total_cmp(y);
                    if descending {
                        o.reverse()
                    } else {
                        o
                    }
                }
                (x, y) => {
                    let o = x.render().cmp(&y.render());
                    if descending {
                        o.reverse()
                    } else {
                        o
                    }
                }
            }
        });
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("run_id,name,status");
        for c in &self.columns {
            s.push(',');
            s.push_str(&csv_escape(c));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{}",
                r.run_id,
                csv_escape(r.name.as_deref().unwrap_or("")),
                r.status.as_str()
            ));
            for c in &r.cells {
                s.push(',');
                s.push_str(&csv_escape(&c.render()));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| run | name | status |");
        for c in &self.columns {
            s.push_str(&format!(" {c} |"));
        }
        s.push_str("\n|---|---|---|");
        for _ in &self.columns {
            s.push_str("---|");
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} |",
                r.run_id,
                r.name.as_deref().unwrap_or(""),
                r.status.as_str()
            ));
            for c in &r.cells {
                s.push_str(&format!(" {} |", c.render()));
            }
            s.push('\n');
        }
        s
    }
}

pub fn compare_runs(store: &RunStore, ids: &[String], keys: &[String]) -> Result<ComparisonTable> {
    let all = replay(&store.ledger_path())?;
    let mut rows = Vec::with_capacity(ids.len());
    for id in ids {
        let run = all
            .get(id)
            .ok_or_else(|| Error::Tracking(format!("unknown run {id}")))?;
        rows.push(ComparisonRow {
            run_id: id.clone(),
            name: run.name.clone(),
            status: run.status,
            cells: keys.iter().map(|k| lookup(run, k)).collect(),
        });
    }
    Ok(ComparisonTable {
        columns: keys.to_vec(),
        rows,
    })
}

/// Grid CSV: one row per distinct `row_key` value, one column per distinct
/// `col_key` value, cells holding `metric` (`NA` when absent). Later runs win
/// duplicate cells.
pub fn pivot_csv(store: &RunStore, ids: &[String], row_key: &str, col_key: &str, metric: &str) -> Result<String> {
    let all = replay(&store.ledger_path())?;
    let mut row_labels: Vec<String> = Vec::new();
    let mut col_labels: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(String, String), f64> = BTreeMap::new();
    for id in ids {
        let run = all
            .get(id)
            .ok_or_else(|| Error::Tracking(format!("unknown run {id}")))?;
        let (Some(r), Some(c)) = (run.params.get(row_key), run.params.get(col_key)) else {
            continue;
        };
        if !row_labels.contains(r) {
            row_labels.push(r.clone());
        }
        if !col_labels.contains(c) {
            col_labels.push(c.clone());
        }
        if let Some(v) = run.metric(metric) {
            cells.insert((r.clone(), c.clone()), v);
        }
    }
    let mut s = csv_escape(row_key);
    for c in &col_labels {
        s.push(',');
        s.push_str(&csv_escape(c));
    }
    s.push('\n');
    for r in &row_labels {
        s.push_str(&csv_escape(r));
        for c in &col_labels {
            s.push(',');
            match cells.get(&(r.clone(), c.clone())) {
                Some(v) => s.push_str(&v.to_string()),
                None => s.push_str("NA"),
            }
        }
        s.push('\n');
    }
    Ok(s)
}

/// Mandatory report sections, in order.
pub const REPORT_SECTIONS: [&str; 8] = [
    "## Run",
    "## Dataset profile",
    "## Preprocessing",
    "## Selected features",
    "## Model metrics",
    "## Best hyperparameters",
    "## Explanations",
    "## Resources",
];

fn embed(out: &mut String, store: &RunStore, run: &RunRecord, path: &str, lang: &str) {
    if run.artifact(path).is_none() {
        out.push_str(&format!("_{path} not recorded_\n\n"));
        return;
    }
    match store.read_artifact_string(&run.run_id, path) {
        Ok(text) => out.push_str(&format!("`{path}`:\n\n```{lang}\n{}\n```\n\n", text.trim_end())),
        Err(e) => out.push_str(&format!("_{path} unreadable: {e}_\n\n")),
    }
}

/// Markdown report for a finished run, also written to `runs/<id>/report.md`.
pub fn render_report(store: &RunStore, run_id: &str) -> Result<String> {
    let run = store.get_run(run_id)?;
    if run.status == RunStatus::Running {
        return Err(Error::Tracking(format!("run {run_id} has not finished")));
    }
    let mut out = format!("# Run report `{}`\n\n", run.run_id);
    out.push_str("## Run\n\n");
    out.push_str(&format!(
        "- status: {}\n- created: {}\n- finished: {}\n",
        run.status.as_str(),
        run.created_at,
        run.finished_at.as_deref().unwrap_or("NA")
    ));
    if let Some(n) = &run.name {
        out.push_str(&format!("- name: {n}\n"));
    }
    if let Some(p) = &run.parent {
        out.push_str(&format!("- parent: {p}\n"));
    }
    let children = store.children(run_id)?;
    if !children.is_empty() {
        out.push_str(&format!("- child runs: {}\n", children.len()));
    }
    out.push('\n');
    if let Some(env) = &run.env {
        out.push_str(&format!(
            "Environment: {} {} ({}), {} CPUs, memory {}\n\n",
            env.os_name,
            env.os_version.as_deref().unwrap_or(""),
            env.arch,
            env.cpu_count,
            env.total_memory_bytes
                .map(|b| format!("{b} bytes"))
                .unwrap_or_else(|| "unknown".into())
        ));
    }

    out.push_str("## Dataset profile\n\n");
    embed(&mut out, store, &run, "profile.json", "json");
    embed(&mut out, store, &run, "missingness.csv", "csv");

    out.push_str("## Preprocessing\n\n");
    embed(&mut out, store, &run, "preprocess.json", "json");

    out.push_str("## Selected features\n\n");
    embed(&mut out, store, &run, "selected_features.csv", "csv");

    out.push_str("## Model metrics\n\n");
    let metric_rows: Vec<(&String, f64)> = run
        .metrics
        .keys()
        .filter(|k| !k.starts_with("resource."))
        .filter_map(|k| run.metric(k).map(|v| (k, v)))
        .collect();
    if metric_rows.is_empty() {
        out.push_str("_no metrics recorded_\n\n");
    } else {
        out.push_str("```csv\nmetric,value\n");
        for (k, v) in metric_rows {
            out.push_str(&format!("{k},{v}\n"));
        }
        out.push_str("```\n\n");
    }

    out.push_str("## Best hyperparameters\n\n");
    let best: Vec<(&String, &String)> = run.params.iter().filter(|(k, _)| k.starts_with("best.")).collect();
    if best.is_empty() {
        out.push_str("_no hyperparameter search recorded_\n\n");
    } else {
        out.push_str("```csv\nparam,value\n");
        for (k, v) in best {
            out.push_str(&format!("{},{}\n", &k["best.".len()..], csv_escape(v)));
        }
        out.push_str("```\n\n");
    }

    out.push_str("## Explanations\n\n");
    embed(&mut out, store, &run, "importance.csv", "csv");
    embed(&mut out, store, &run, "shapley.csv", "csv");
    embed(&mut out, store, &run, "surrogate.json", "json");
    if run.artifact("tree.dot").is_some() {
        out.push_str("Tree structure: `tree.dot` (Graphviz).\n\n");
    }

    out.push_str("## Resources\n\n");
    embed(&mut out, store, &run, "resources.json", "json");

    let path = store.run_dir(run_id).join(REPORT_FILE);
    fs::write(&path, &out).map_err(|e| Error::io(&path, e))?;
    Ok(out)
}

/// Markdown comparison report: one table row per run.
pub fn render_comparison(table: &ComparisonTable) -> String {
    format!("# Run comparison\n\n{}", table.to_markdown())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (tempfile::TempDir, RunStore) {
        let dir = tempfile::tempdir().unwrap();
        let s = RunStore::open(dir.path()).unwrap();
        (dir, s)
    }

    #[test]
    fn metric_round_trip() {
        let (_d, s) = store();
        let r = s.start_run(&serde_json::json!({"a": 1}), None, None, None).unwrap();
        s.log_metric(&r.run_id, "recall", 0.985, 0).unwrap();
        assert_eq!(s.get_run(&r.run_id).unwrap().metric("recall"), Some(0.985));
        assert_eq!(s.list_runs().unwrap().len(), 1);
    }

    #[test]
    fn params_are_write_once() {
        let (_d, s) = store();
        let r = s.start_run(&(), None, None, None).unwrap();
        s.log_param(&r.run_id, "k", 3).unwrap();
        s.log_param(&r.run_id, "k", 3).unwrap();
        assert!(s.log_param(&r.run_id, "k", 4).is_err());
        assert_eq!(s.get_run(&r.run_id).unwrap().params["k"], "3");
    }

    #[test]
    fn finished_runs_are_frozen() {
        let (_d, s) = store();
        let r = s.start_run(&(), None, None, None).unwrap();
        s.finish_run(&r.run_id, RunStatus::Finished).unwrap();
        assert!(s.log_metric(&r.run_id, "x", 1.0, 0).is_err());
        assert!(s.log_artifact(&r.run_id, "a.txt", b"x").is_err());
        assert!(s.finish_run(&r.run_id, RunStatus::Failed).is_err());
    }

    #[test]
    fn non_finite_metric_rejected() {
        let (_d, s) = store();
        let r = s.start_run(&(), None, None, None).unwrap();
        assert!(s.log_metric(&r.run_id, "x", f64::NAN, 0).is_err());
    }

    #[test]
    fn corrupted_artifact_fails_verification() {
        let (_d, s) = store();
        let r = s.start_run(&(), None, None, None).unwrap();
        s.log_artifact(&r.run_id, "sub/data.txt", b"hello").unwrap();
        assert_eq!(s.read_artifact(&r.run_id, "sub/data.txt").unwrap(), b"hello");
        let p = s.artifact_dir(&r.run_id).join("sub/data.txt");
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] ^= 1;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            s.read_artifact(&r.run_id, "sub/data.txt"),
            Err(Error::HashMismatch { .. })
        ));
    }

    #[test]
    fn artifact_paths_stay_inside_run() {
        let (_d, s) = store();
        let r = s.start_run(&(), None, None, None).unwrap();
        assert!(s.log_artifact(&r.run_id, "../x", b"").is_err());
        assert!(s.log_artifact(&r.run_id, "/etc/x", b"").is_err());
    }

    #[test]
    fn comparison_sorts_and_flags_status() {
        let (_d, s) = store();
        let a = s.start_run(&(), None, Some("a"), None).unwrap();
        let b = s.start_run(&(), None, Some("b"), None).unwrap();
        s.log_metric(&a.run_id, "recall", 0.90, 0).unwrap();
        s.log_metric(&b.run_id, "recall", 0.95, 0).unwrap();
        s.finish_run(&a.run_id, RunStatus::Finished).unwrap();
        let mut t = compare_runs(
            &s,
            &[a.run_id.clone(), b.run_id.clone()],
            &["recall".into(), "mcc".into()],
        )
        .unwrap();
        t.sort_by("recall", true).unwrap();
        assert_eq!(t.rows[0].run_id, b.run_id);
        assert_eq!(t.rows[0].status, RunStatus::Running);
        assert_eq!(t.rows[0].cells[1], Cell::Missing);
        assert!(compare_runs(&s, &["nope".into()], &[]).is_err());
    }

    #[test]
    fn pivot_has_grid_shape() {
        let (_d, s) = store();
        let mut ids = Vec::new();
        for tool in ["t1", "t2", "t3"] {
            for ds in ["d1", "d2"] {
                let r = s.start_run(&(), None, None, None).unwrap();
                s.log_params(&r.run_id, &[("tool", tool), ("dataset", ds)]).unwrap();
                s.log_metric(&r.run_id, "recall", 0.5, 0).unwrap();
                ids.push(r.run_id);
            }
        }
        let csv = pivot_csv(&s, &ids, "tool", "dataset", "recall").unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines.iter().all(|l| l.split(',').count() == 3));
    }
}
