//! End-to-end pipeline: configuration schema, stage orchestration and replay.
//!
//! Stage order is profile, balance, split, preprocess, features, hpo, fit, evaluate,
//! explain, report. Every stage logs to one parent run; each HPO trial becomes a child
//! run. The resolved configuration is the run's config snapshot, so re-executing it on
//! the same data reproduces the same metrics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{
    kfold_plan, load_csv, split_holdout, Dataset, LoadOptions, SplitPlan, DEFAULT_LABEL_COLUMN,
};
use crate::error::{Error, Result};
use crate::explain::{
    export_tree, local_surrogate, permutation_importance, sample_background, shapley_exact,
    shapley_sampled, Attribution, ImportanceMetric, MAX_EXACT_FEATURES,
};
use crate::features::{fit_feature_plan, FeatureConfig, FeatureFit, FeaturePlan};
use crate::hpo::{
    default_space, ensemble_space, fit_members, members_from_params, optimize_with, HpoConfig, Objective, Params,
    Pruner, RandomSampler, StudyResult, Trial, TrialStatus, Validation, ENSEMBLE_MEMBERS,
};
use crate::metrics::{curve_csv, evaluate_scores, pr_curve, probe, MetricSet, ResourceReport};
use crate::models::forest::mix_seed;
use crate::models::{default_roster, model_from_json, model_to_json, MemberConfig, ModelArtifact, Voting};
use crate::preprocess::{
    balance_unique, fit_preprocessor, missingness_csv, Balance, Partition, PreprocessConfig, PreprocessPlan,
};
use crate::profiler::{profile_dataset, snapshot_environment};
use crate::tracking::{render_report, sha256_hex, RunStatus, RunStore};

pub const DEFAULT_TRACKING_ROOT: &str = "automl-runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// CSV file; relative paths resolve against the config file's directory.
    pub path: PathBuf,
    pub label_column: String,
    pub positive_label: Option<String>,
    pub strict: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            path: PathBuf::new(),
            label_column: DEFAULT_LABEL_COLUMN.to_string(),
            positive_label: None,
            strict: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    /// Training fraction of the outer holdout.
    pub ratio: f64,
    pub stratified: bool,
    /// Defaults to the global seed.
    pub seed: Option<u64>,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            ratio: 0.8,
            stratified: true,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelsSection {
    /// Subset of `tree`, `rf`, `et`, `gbt_a`, `gbt_b`, `knn`.
    pub members: Vec<String>,
    pub voting: Voting,
}

impl Default for ModelsSection {
    fn default() -> Self {
        ModelsSection {
            members: ENSEMBLE_MEMBERS.iter().map(|(n, _)| n.to_string()).collect(),
            voting: Voting::Soft,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationKind {
    Holdout,
    Kfold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HpoSection {
    pub enabled: bool,
    pub n_trials: usize,
    /// Defaults to the global seed.
    pub seed: Option<u64>,
    pub pruner: Pruner,
    pub eta: usize,
    pub rungs: usize,
    pub startup_trials: usize,
    pub objective: Objective,
    pub min_mcc_guard: f64,
    /// `ensemble` searches the joint space of the configured members.
    pub family: String,
    /// Validation inside the training partition.
    pub validation: ValidationKind,
    /// Training fraction of the validation holdout.
    pub validation_ratio: f64,
    pub folds: usize,
}

impl Default for HpoSection {
    fn default() -> Self {
        let h = HpoConfig::default();
        HpoSection {
            enabled: true,
            n_trials: h.n_trials,
            seed: None,
            pruner: h.pruner,
            eta: h.eta,
            rungs: h.rungs,
            startup_trials: h.startup_trials,
            objective: h.objective,
            min_mcc_guard: h.min_mcc_guard,
            family: h.family,
            validation: ValidationKind::Holdout,
            validation_ratio: 0.8,
            folds: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapleyChoice {
    /// Exact enumeration when the feature count allows it, sampling otherwise.
    Auto,
    Exact,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainSection {
    pub enabled: bool,
    /// Ensemble member to explain; the final model when absent.
    pub member: Option<String>,
    pub importance_metric: ImportanceMetric,
    pub importance_repeats: usize,
    /// Test rows used for permutation importance (seeded sample).
    pub importance_rows: usize,
    pub shapley: ShapleyChoice,
    pub shapley_samples: usize,
    pub background_rows: usize,
    /// Index into the test partition of the instance explained locally.
    pub instance: usize,
    pub surrogate_perturbations: usize,
    pub kernel_width: Option<f64>,
}

impl Default for ExplainSection {
    fn default() -> Self {
        ExplainSection {
            enabled: true,
            member: None,
            importance_metric: ImportanceMetric::Recall,
            importance_repeats: 3,
            importance_rows: 500,
            shapley: ShapleyChoice::Auto,
            shapley_samples: 200,
            background_rows: crate::explain::DEFAULT_BACKGROUND_ROWS,
            instance: 0,
            surrogate_perturbations: 1000,
            kernel_width: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingSection {
    pub root: PathBuf,
}

impl Default for TrackingSection {
    fn default() -> Self {
        TrackingSection {
            root: PathBuf::from(DEFAULT_TRACKING_ROOT),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    pub enabled: bool,
    pub curves: bool,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection {
            enabled: true,
            curves: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub name: Option<String>,
    pub dataset: DatasetSection,
    pub split: SplitSection,
    pub preprocess: PreprocessConfig,
    pub features: FeatureConfig,
    pub models: ModelsSection,
    pub hpo: HpoSection,
    pub explain: ExplainSection,
    pub tracking: TrackingSection,
    pub report: ReportSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            name: None,
            dataset: DatasetSection::default(),
            split: SplitSection::default(),
            preprocess: PreprocessConfig::default(),
            features: FeatureConfig::default(),
            models: ModelsSection::default(),
            hpo: HpoSection::default(),
            explain: ExplainSection::default(),
            tracking: TrackingSection::default(),
            report: ReportSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a config file and resolves a relative dataset path against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if !cfg.dataset.path.as_os_str().is_empty() && cfg.dataset.path.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.dataset.path = dir.join(&cfg.dataset.path);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn split_seed(&self) -> u64 {
        self.split.seed.unwrap_or(self.seed)
    }

    pub fn hpo_config(&self) -> HpoConfig {
        HpoConfig {
            n_trials: self.hpo.n_trials,
            seed: self.hpo.seed.unwrap_or(self.seed),
            pruner: self.hpo.pruner,
            eta: self.hpo.eta,
            rungs: self.hpo.rungs,
            startup_trials: self.hpo.startup_trials,
            objective: self.hpo.objective,
            min_mcc_guard: self.hpo.min_mcc_guard,
            voting: self.models.voting,
            family: self.hpo.family.clone(),
        }
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            label_column: self.dataset.label_column.clone(),
            positive_label: self.dataset.positive_label.clone(),
            strict: self.dataset.strict,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.split.ratio > 0.0 && self.split.ratio < 1.0) {
            return bad(format!("split.ratio must lie in (0, 1), got {}", self.split.ratio));
        }
        if self.models.members.is_empty() {
            return bad("models.members must name at least one member".into());
        }
        for m in &self.models.members {
            if !ENSEMBLE_MEMBERS.iter().any(|(n, _)| n == m) {
                return bad(format!("unknown ensemble member {m:?}"));
            }
        }
        let mut seen = self.models.members.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.models.members.len() {
            return bad("models.members contains duplicates".into());
        }
        if self.hpo.enabled {
            if self.hpo.n_trials == 0 {
                return bad("hpo.n_trials must be at least 1".into());
            }
            default_space(&self.hpo.family).map_err(|e| Error::Config(e.to_string()))?;
            match self.hpo.validation {
                ValidationKind::Holdout if !(self.hpo.validation_ratio > 0.0 && self.hpo.validation_ratio < 1.0) => {
                    return bad(format!(
                        "hpo.validation_ratio must lie in (0, 1), got {}",
                        self.hpo.validation_ratio
                    ));
                }
                ValidationKind::Kfold if self.hpo.folds < 2 => {
                    return bad(format!("hpo.folds must be at least 2, got {}", self.hpo.folds));
                }
                _ => {}
            }
            if self.hpo.pruner == Pruner::Halving && (self.hpo.eta < 2 || self.hpo.rungs == 0) {
                return bad("halving needs hpo.eta >= 2 and hpo.rungs >= 1".into());
            }
        }
        if self.explain.enabled {
            let e = &self.explain;
            if e.importance_repeats == 0 || e.importance_rows == 0 || e.shapley_samples == 0 {
                return bad("explain repeats, rows and samples must be positive".into());
            }
            if e.background_rows == 0 || e.surrogate_perturbations == 0 {
                return bad("explain.background_rows and surrogate_perturbations must be positive".into());
            }
            if let Some(m) = &e.member {
                if !self.models.members.contains(m) {
                    return bad(format!("explain.member {m:?} is not in models.members"));
                }
            }
            if let Some(w) = e.kernel_width {
                if !(w > 0.0) {
                    return bad(format!("explain.kernel_width must be positive, got {w}"));
                }
            }
        }
        if !(self.preprocess.iqr_k > 0.0) {
            return bad("preprocess.iqr_k must be positive".into());
        }
        Ok(())
    }
}

/// SHA-256 over the dataset's canonical CSV rendering.
pub fn dataset_fingerprint(ds: &Dataset) -> Result<String> {
    let mut buf = Vec::new();
    ds.write_csv(&mut buf, "__label__")?;
    Ok(sha256_hex(&buf))
}

/// Outer partition shared by `run` and later reconstruction: optional balancing of the
/// whole dataset, then the holdout split.
pub fn outer_partition(cfg: &PipelineConfig, ds: &Dataset) -> Result<(Dataset, SplitPlan)> {
    let base = match cfg.preprocess.balance {
        Balance::Off => ds.clone(),
        Balance::UniqueUndersample => balance_unique(ds, cfg.seed).map_err(|e| e.in_stage("balance"))?,
    };
    let plan = split_holdout(&base, cfg.split.ratio, cfg.split_seed(), cfg.split.stratified)
        .map_err(|e| e.in_stage("split"))?;
    Ok((base, plan))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub run_id: String,
    pub test: MetricSet,
    pub members: BTreeMap<String, MetricSet>,
    pub best_params: Option<Params>,
    pub n_child_runs: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Run being re-executed; its dataset fingerprint must match.
    pub replay_of: Option<String>,
}

/// Loads the configured dataset and runs the pipeline on it.
pub fn run_pipeline(cfg: &PipelineConfig, store: &RunStore, opts: &RunOptions) -> Result<PipelineOutcome> {
    cfg.validate()?;
    if cfg.dataset.path.as_os_str().is_empty() {
        return Err(Error::Config("dataset.path is required".into()));
    }
    let ds = load_csv(&cfg.dataset.path, &cfg.load_options()).map_err(|e| e.in_stage("load"))?;
    run_pipeline_on(&ds, cfg, store, opts)
}

struct Stages {
    reports: Vec<ResourceReport>,
}

impl Stages {
    fn run<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let (out, report) = probe(stage, f);
        self.reports.push(report);
        out.map_err(|e| e.in_stage(stage))
    }
}

fn stage_name(e: &Error) -> &str {
    match e {
        Error::Stage { stage, .. } => stage,
        _ => "setup",
    }
}

/// Runs every stage on an already loaded dataset.
pub fn run_pipeline_on(
    ds: &Dataset,
    cfg: &PipelineConfig,
    store: &RunStore,
    opts: &RunOptions,
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let fingerprint = dataset_fingerprint(ds)?;
    if let Some(orig) = &opts.replay_of {
        let prev = store.get_run(orig)?;
        match prev.params.get("data.sha256") {
            Some(h) if *h == fingerprint => {}
            Some(h) => {
                return Err(Error::invalid(format!(
                    "dataset changed since run {orig}: fingerprint {fingerprint} != {h}"
                )))
            }
            None => return Err(Error::Tracking(format!("run {orig} has no dataset fingerprint"))),
        }
    }
    let run = store.start_run(cfg, None, cfg.name.as_deref(), Some(snapshot_environment()))?;
    let id = run.run_id.clone();
    let started = std::time::Instant::now();
    let mut params: Vec<(String, String)> = vec![
        ("data.sha256".into(), fingerprint),
        ("data.source".into(), ds.source_id().to_string()),
        ("seed".into(), cfg.seed.to_string()),
        ("balance".into(), serde_json::to_value(cfg.preprocess.balance)?.as_str().unwrap_or("").to_string()),
    ];
    if let Some(orig) = &opts.replay_of {
        params.push(("replay_of".into(), orig.clone()));
    }
    store.log_params(&id, &params)?;
    store.log_artifact(&id, "config.toml", cfg.to_toml_string()?.as_bytes())?;

    match execute(ds, cfg, store, &id) {
        Ok(mut outcome) => {
            outcome.wall_seconds = started.elapsed().as_secs_f64();
            store.log_metric(&id, "resource.total.wall_seconds", outcome.wall_seconds, 0)?;
            store.finish_run(&id, RunStatus::Finished)?;
            if cfg.report.enabled {
                render_report(store, &id).map_err(|e| e.in_stage("report"))?;
            }
            Ok(outcome)
        }
        Err(e) => {
            let stage = stage_name(&e).to_string();
            let msg = e.chain();
            log::error!("run {id} failed: {msg}");
            store.log_params(&id, &[("failed_stage", stage.as_str()), ("error", msg.as_str())])?;
            store.finish_run(&id, RunStatus::Failed)?;
            Err(e)
        }
    }
}

fn pairs_with_prefix(prefix: &str, m: &MetricSet) -> Vec<(String, f64)> {
    m.to_pairs().into_iter().map(|(k, v)| (format!("{prefix}{k}"), v)).collect()
}

fn selected_features_csv(input: &Dataset, fit: &FeatureFit) -> String {
    let mut s = String::from("feature,score,kept\n");
    match &fit.plan {
        FeaturePlan::Identity => {
            for n in input.feature_names() {
                s.push_str(&format!("{n},,true\n"));
            }
        }
        FeaturePlan::Mask { mask, scores, .. } => {
            for ((n, sc), k) in input.feature_names().iter().zip(scores).zip(&mask.keep) {
                s.push_str(&format!("{n},{sc},{k}\n"));
            }
        }
        FeaturePlan::Pca { model } => {
            for n in model.component_names() {
                s.push_str(&format!("{n},,true\n"));
            }
        }
    }
    s
}

fn roster_members(cfg: &PipelineConfig) -> Vec<MemberConfig> {
    default_roster(cfg.seed)
        .into_iter()
        .filter(|m| cfg.models.members.contains(&m.name))
        .collect()
}

fn log_trial(store: &RunStore, parent: &str, t: &Trial) -> Result<()> {
    let name = format!("trial-{}", t.id);
    let child = store.start_run(&t.params, Some(parent), Some(&name), None)?;
    let cid = &child.run_id;
    let mut params: Vec<(String, String)> = t.params.iter().map(|(k, v)| (k.clone(), v.to_string())).collect();
    params.push(("trial.id".into(), t.id.to_string()));
    params.push(("trial.seed".into(), t.seed.to_string()));
    params.push((
        "trial.status".into(),
        serde_json::to_value(t.status)?.as_str().unwrap_or("").to_string(),
    ));
    if let Some(e) = &t.error {
        params.push(("trial.error".into(), e.clone()));
    }
    store.log_params(cid, &params)?;
    for (pct, rec) in &t.rung_reports {
        store.log_metric(cid, "val.recall", *rec, *pct as u64)?;
    }
    let mut m = vec![("budget", t.budget as f64)];
    if let Some(v) = t.objective {
        m.push(("objective", v));
    }
    if let Some(v) = t.mcc {
        m.push(("val.mcc", v));
    }
    store.log_metrics(cid, &m, 0)?;
    let status = if t.status == TrialStatus::Failed {
        RunStatus::Failed
    } else {
        RunStatus::Finished
    };
    store.finish_run(cid, status)?;
    Ok(())
}

fn run_hpo(
    train: &Dataset,
    cfg: &PipelineConfig,
    store: &RunStore,
    run_id: &str,
) -> Result<(StudyResult, Vec<MemberConfig>)> {
    let hcfg = cfg.hpo_config();
    let space = if hcfg.family == "ensemble" {
        ensemble_space(&cfg.models.members)?
    } else {
        default_space(&hcfg.family)?
    };
    let vseed = mix_seed(hcfg.seed, 7);
    let validation = match cfg.hpo.validation {
        ValidationKind::Holdout => Validation::Holdout(split_holdout(
            train,
            cfg.hpo.validation_ratio,
            vseed,
            cfg.split.stratified,
        )?),
        ValidationKind::Kfold => Validation::KFold(kfold_plan(train, cfg.hpo.folds, vseed, cfg.split.stratified)?),
    };
    let mut sampler = RandomSampler::new(hcfg.seed);
    let mut log_err: Option<Error> = None;
    let mut on_trial = |t: &Trial| {
        if log_err.is_none() {
            if let Err(e) = log_trial(store, run_id, t) {
                log_err = Some(e);
            }
        }
    };
    let study = optimize_with(train, &space, &hcfg, &validation, &mut sampler, &mut on_trial)?;
    if let Some(e) = log_err {
        return Err(e);
    }
    let best = study.best();
    let members = members_from_params(&hcfg.family, &best.params, best.seed)?;
    Ok((study, members))
}

/// Fits the preprocessing plan on `raw_train` alone and applies it to both partitions.
pub fn preprocess_partitions(
    cfg: &PipelineConfig,
    raw_train: &Dataset,
    raw_test: &Dataset,
) -> Result<(PreprocessPlan, Dataset, Dataset)> {
    let plan = fit_preprocessor(raw_train, &cfg.preprocess)?;
    let train = plan.apply(raw_train, Partition::Train)?;
    let test = plan.apply(raw_test, Partition::Test)?;
    Ok((plan, train, test))
}

/// Fits the feature plan on `train` alone and applies it to both partitions.
pub fn feature_partitions(cfg: &PipelineConfig, train: &Dataset, test: &Dataset) -> Result<(FeatureFit, Dataset, Dataset)> {
    let fit = fit_feature_plan(train, &cfg.features, mix_seed(cfg.seed, 3))?;
    let tr = fit.plan.apply(train)?;
    let te = fit.plan.apply(test)?;
    Ok((fit, tr, te))
}

fn execute(ds: &Dataset, cfg: &PipelineConfig, store: &RunStore, id: &str) -> Result<PipelineOutcome> {
    let mut st = Stages { reports: Vec::new() };

    let profile = st.run("profile", || profile_dataset(ds))?;
    store.log_artifact(id, "profile.json", &serde_json::to_vec_pretty(&profile)?)?;
    store.log_artifact(id, "missingness.csv", missingness_csv(ds).as_bytes())?;
    store.log_metrics(
        id,
        &[
            ("data.rows", ds.n_rows() as f64),
            ("data.features", ds.n_cols() as f64),
            ("data.duplicate_rows", profile.duplicate_rows as f64),
        ],
        0,
    )?;

    let (base, split) = st.run("split", || outer_partition(cfg, ds))?;
    store.log_artifact(id, "split.json", &serde_json::to_vec(&split)?)?;
    let raw_train = base.subset(&split.train_indices);
    let raw_test = base.subset(&split.test_indices);

    let (plan, train, test) = st.run("preprocess", || preprocess_partitions(cfg, &raw_train, &raw_test))?;
    store.log_artifact(id, "preprocess.json", &serde_json::to_vec_pretty(&plan)?)?;

    let (fit, train, test) = st.run("features", || feature_partitions(cfg, &train, &test))?;
    store.log_artifact(id, "features.json", &serde_json::to_vec_pretty(&fit)?)?;
    store.log_artifact(
        id,
        "selected_features.csv",
        selected_features_csv(&plan_output(&raw_train, &plan)?, &fit).as_bytes(),
    )?;
    let [tr0, tr1] = train.class_counts();
    let [te0, te1] = test.class_counts();
    store.log_metrics(
        id,
        &[
            ("data.train_rows", train.n_rows() as f64),
            ("data.train_benign", tr0 as f64),
            ("data.train_malware", tr1 as f64),
            ("data.test_rows", test.n_rows() as f64),
            ("data.test_benign", te0 as f64),
            ("data.test_malware", te1 as f64),
            ("features.selected", train.n_cols() as f64),
        ],
        0,
    )?;
    if let FeaturePlan::Mask { lambda: Some(l), .. } = &fit.plan {
        store.log_param(id, "features.lambda", l)?;
    }

    let mut best_params = None;
    let mut n_child_runs = 0;
    let members = if cfg.hpo.enabled {
        let (study, members) = st.run("hpo", || run_hpo(&train, cfg, store, id))?;
        let best = study.best();
        let logged: Vec<(String, String)> = best
            .params
            .iter()
            .map(|(k, v)| (format!("best.{k}"), v.to_string()))
            .collect();
        store.log_params(id, &logged)?;
        store.log_params(
            id,
            &[
                ("hpo.best_trial", best.id.to_string()),
                ("hpo.guard_satisfied", study.guard_satisfied.to_string()),
            ],
        )?;
        let count = |s: TrialStatus| study.trials.iter().filter(|t| t.status == s).count() as f64;
        let mut m = vec![
            ("hpo.trials", study.trials.len() as f64),
            ("hpo.complete", count(TrialStatus::Complete)),
            ("hpo.pruned", count(TrialStatus::Pruned)),
            ("hpo.failed", count(TrialStatus::Failed)),
            ("hpo.budget", study.total_budget() as f64),
        ];
        if let Some(v) = best.objective {
            m.push(("hpo.best.recall", v));
        }
        if let Some(v) = best.mcc {
            m.push(("hpo.best.mcc", v));
        }
        store.log_metrics(id, &m, 0)?;
        store.log_artifact(id, "hpo_trials.json", &serde_json::to_vec_pretty(&study.trials)?)?;
        n_child_runs = study.trials.len();
        best_params = Some(best.params.clone());
        members
    } else {
        roster_members(cfg)
    };

    let model = st.run("fit", || fit_members(&train, &members, cfg.models.voting))?;
    store.log_artifact(id, "model.json", model_to_json(&model)?.as_bytes())?;

    let (metrics, member_metrics) = st.run("evaluate", || evaluate(&model, &test))?;
    store.log_metrics(id, &pairs_with_prefix("test.", &metrics), 0)?;
    for (name, m) in &member_metrics {
        store.log_metrics(id, &pairs_with_prefix(&format!("test.member.{name}."), m), 0)?;
    }
    store.log_artifact(id, "metrics.json", &serde_json::to_vec_pretty(&metrics)?)?;
    if cfg.report.curves {
        let p = model.predict_malware_proba(test.features())?;
        store.log_artifact(id, "pr_curve.csv", curve_csv(&pr_curve(test.labels(), &p)?).as_bytes())?;
    }

    if cfg.explain.enabled {
        st.run("explain", || explain_stage(cfg, store, id, &model, &train, &test))?;
    }

    for r in &st.reports {
        let mut m = vec![(format!("resource.{}.wall_seconds", r.label), r.wall_seconds)];
        if let Some(c) = r.cpu_seconds {
            m.push((format!("resource.{}.cpu_seconds", r.label), c));
        }
        if let Some(b) = r.peak_rss_bytes {
            m.push((format!("resource.{}.peak_rss_bytes", r.label), b as f64));
        }
        store.log_metrics(id, &m, 0)?;
    }
    store.log_artifact(id, "resources.json", &serde_json::to_vec_pretty(&st.reports)?)?;

    Ok(PipelineOutcome {
        run_id: id.to_string(),
        test: metrics,
        members: member_metrics,
        best_params,
        n_child_runs,
        wall_seconds: 0.0,
    })
}

/// Column names produced by the preprocessing plan, as a zero-row dataset view.
fn plan_output(raw_train: &Dataset, plan: &PreprocessPlan) -> Result<Dataset> {
    plan.apply(&raw_train.subset(&[]), Partition::Test)
}

fn evaluate(model: &ModelArtifact, test: &Dataset) -> Result<(MetricSet, BTreeMap<String, MetricSet>)> {
    let p = model.predict_malware_proba(test.features())?;
    let metrics = evaluate_scores(test.labels(), &p)?;
    let mut members = BTreeMap::new();
    if let ModelArtifact::Ensemble(e) = model {
        for m in &e.members {
            let pm = m.model.predict_malware_proba(test.features())?;
            members.insert(m.name.clone(), evaluate_scores(test.labels(), &pm)?);
        }
    }
    Ok((metrics, members))
}

fn explain_target<'a>(model: &'a ModelArtifact, member: Option<&str>) -> Result<&'a ModelArtifact> {
    match (member, model) {
        (None, m) => Ok(m),
        (Some(name), ModelArtifact::Ensemble(e)) => e
            .member(name)
            .ok_or_else(|| Error::invalid(format!("model has no member {name:?}"))),
        // a one-member roster trains a bare model
        (Some(_), m) => Ok(m),
    }
}

fn seeded_rows(n: usize, keep: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..n).collect();
    if keep < n {
        idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(keep);
        idx.sort_unstable();
    }
    idx
}

/// Shapley attribution for test row `instance` with the configured estimator.
pub fn shapley_for(
    model: &ModelArtifact,
    train: &Dataset,
    test: &Dataset,
    instance: usize,
    choice: ShapleyChoice,
    background_rows: usize,
    samples: usize,
    seed: u64,
) -> Result<Attribution> {
    if instance >= test.n_rows() {
        return Err(Error::invalid(format!(
            "instance {instance} outside the {} test rows",
            test.n_rows()
        )));
    }
    let bg = sample_background(train.features(), background_rows, mix_seed(seed, 11));
    let x = test.features().row(instance);
    let exact = match choice {
        ShapleyChoice::Exact => true,
        ShapleyChoice::Sampled => false,
        ShapleyChoice::Auto => x.len() <= MAX_EXACT_FEATURES,
    };
    if exact {
        shapley_exact(model, x, &bg)
    } else {
        shapley_sampled(model, x, &bg, samples, seed)
    }
}

fn explain_stage(
    cfg: &PipelineConfig,
    store: &RunStore,
    id: &str,
    model: &ModelArtifact,
    train: &Dataset,
    test: &Dataset,
) -> Result<()> {
    let e = &cfg.explain;
    let target = explain_target(model, e.member.as_deref())?;
    let seed = mix_seed(cfg.seed, 5);
    let names = test.feature_names().to_vec();

    let rows = seeded_rows(test.n_rows(), e.importance_rows, mix_seed(seed, 1));
    let imp = permutation_importance(target, &test.subset(&rows), e.importance_metric, e.importance_repeats, seed)?;
    store.log_artifact(id, "importance.csv", imp.to_csv().as_bytes())?;

    let attr = shapley_for(
        target,
        train,
        test,
        e.instance,
        e.shapley,
        e.background_rows,
        e.shapley_samples,
        seed,
    )?;
    store.log_artifact(id, "shapley.csv", attr.to_csv(&names).as_bytes())?;
    store.log_metric(id, "explain.shapley.efficiency_residual", attr.efficiency_residual(), 0)?;

    let bg = sample_background(train.features(), e.background_rows, mix_seed(seed, 11));
    let local = local_surrogate(
        target,
        test.features().row(e.instance),
        &bg,
        e.surrogate_perturbations,
        e.kernel_width,
        seed,
    )?;
    store.log_artifact(id, "surrogate.json", &serde_json::to_vec_pretty(&local)?)?;
    if let Some(f) = local.fidelity {
        store.log_metric(id, "explain.surrogate.fidelity", f, 0)?;
    }

    let tree = match target {
        ModelArtifact::Tree(t) => Some(t),
        ModelArtifact::Ensemble(en) => match en.member("tree") {
            Some(ModelArtifact::Tree(t)) => Some(t),
            _ => None,
        },
        _ => None,
    };
    if let Some(t) = tree {
        store.log_artifact(id, "tree.dot", export_tree(t, &names).as_bytes())?;
    }
    Ok(())
}

/// A finished run's model and partitions rebuilt from its stored plans.
pub struct Reconstructed {
    pub config: PipelineConfig,
    pub model: ModelArtifact,
    pub train: Dataset,
    pub test: Dataset,
}

/// Reloads the dataset named in a run's config, checks its fingerprint, re-splits it and
/// applies the stored preprocessing and feature plans.
pub fn reconstruct(store: &RunStore, run_id: &str) -> Result<Reconstructed> {
    let (cfg, run) = run_config(store, run_id)?;
    let ds = load_csv(&cfg.dataset.path, &cfg.load_options())?;
    let fp = dataset_fingerprint(&ds)?;
    if run.params.get("data.sha256") != Some(&fp) {
        return Err(Error::invalid(format!(
            "dataset at {} no longer matches run {run_id}",
            cfg.dataset.path.display()
        )));
    }
    let (base, split) = outer_partition(&cfg, &ds)?;
    let plan: PreprocessPlan = serde_json::from_slice(&store.read_artifact(run_id, "preprocess.json")?)?;
    let fit: FeatureFit = serde_json::from_slice(&store.read_artifact(run_id, "features.json")?)?;
    let train = fit
        .plan
        .apply(&plan.apply(&base.subset(&split.train_indices), Partition::Train)?)?;
    let test = fit
        .plan
        .apply(&plan.apply(&base.subset(&split.test_indices), Partition::Test)?)?;
    let model = model_from_json(&store.read_artifact_string(run_id, "model.json")?)?;
    Ok(Reconstructed {
        config: cfg,
        model,
        train,
        test,
    })
}

/// The resolved config snapshot of a run.
pub fn run_config(store: &RunStore, run_id: &str) -> Result<(PipelineConfig, crate::tracking::RunRecord)> {
    let run = store.get_run(run_id)?;
    let cfg: PipelineConfig = serde_json::from_value(run.config.clone())
        .map_err(|e| Error::Config(format!("run {run_id} does not hold a pipeline config: {e}")))?;
    Ok((cfg, run))
}

/// Re-executes a run from its config snapshot.
pub fn replay(store: &RunStore, run_id: &str) -> Result<PipelineOutcome> {
    let (cfg, _) = run_config(store, run_id)?;
    run_pipeline(
        &cfg,
        store,
        &RunOptions {
            replay_of: Some(run_id.to_string()),
        },
    )
}

/// Metrics that must match between a run and its replay: everything except resource
/// probes, which measure the host rather than the computation.
pub fn reproducible_metrics(run: &crate::tracking::RunRecord) -> BTreeMap<String, f64> {
    run.metrics
        .keys()
        .filter(|k| !k.starts_with("resource."))
        .filter_map(|k| run.metric(k).map(|v| (k.clone(), v)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::from_toml_str("[hpo]\nn_trails = 3\n").is_err());
        assert!(PipelineConfig::from_toml_str("colour = 1\n").is_err());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = PipelineConfig::from_toml_str("seed = 7\n[hpo]\nn_trials = 3\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.hpo.n_trials, 3);
        assert_eq!(cfg.split.ratio, 0.8);
        assert_eq!(cfg.hpo_config().seed, 7);
        assert_eq!(cfg.models.members.len(), 6);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(PipelineConfig::from_toml_str("[split]\nratio = 1.0\n").is_err());
        assert!(PipelineConfig::from_toml_str("[models]\nmembers = [\"svm\"]\n").is_err());
        assert!(PipelineConfig::from_toml_str("[models]\nmembers = [\"rf\", \"rf\"]\n").is_err());
        assert!(PipelineConfig::from_toml_str("[hpo]\nfamily = \"svm\"\n").is_err());
        assert!(PipelineConfig::from_toml_str("[explain]\nmember = \"knn\"\n[models]\nmembers = [\"rf\"]\n").is_err());
    }

    #[test]
    fn lambda_setting_parses_both_forms() {
        let a = PipelineConfig::from_toml_str("[features]\nlambda = \"auto\"\n").unwrap();
        let f = PipelineConfig::from_toml_str("[features]\nlambda = 0.01\n").unwrap();
        assert_ne!(a.features.lambda, f.features.lambda);
    }

    #[test]
    fn seeded_rows_sorted_and_bounded() {
        let r = seeded_rows(100, 10, 3);
        assert_eq!(r.len(), 10);
        assert!(r.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(seeded_rows(5, 10, 3), vec![0, 1, 2, 3, 4]);
    }
}
