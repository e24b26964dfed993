//! Recall-first hyperparameter search: seeded random sampling with optional
//! rung-median pruning over warm-started model budgets.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FoldPlan, SplitPlan};
use crate::error::{Error, Result};
use crate::metrics::{confusion, mcc, recall};
use crate::models::forest::{mix_seed, ForestTrainer};
use crate::models::gbt::GbtTrainer;
use crate::models::{
    hard_label, train_model, EnsembleModel, ForestMode, ForestParams, GbtParams, KnnMetric,
    KnnParams, MaxFeatures, MemberConfig, ModelArtifact, ModelSpec, TreeParams, Voting,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Domain {
    Int { low: i64, high: i64, step: i64 },
    Real { low: f64, high: f64, log: bool },
    Categorical { choices: Vec<String> },
}

impl Domain {
    fn validate(&self, name: &str) -> Result<()> {
        let ok = match self {
            Domain::Int { low, high, step } => low <= high && *step >= 1,
            Domain::Real { low, high, log } => {
                low.is_finite() && high.is_finite() && low <= high && (!log || *low > 0.0)
            }
            Domain::Categorical { choices } => !choices.is_empty(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("empty or malformed domain for {name}: {self:?}")))
        }
    }

    pub fn contains(&self, v: &ParamValue) -> bool {
        match (self, v) {
            (Domain::Int { low, high, step }, ParamValue::Int(x)) => {
                x >= low && x <= high && (x - low) % step == 0
            }
            (Domain::Real { low, high, .. }, ParamValue::Real(x)) => x >= low && x <= high,
            (Domain::Categorical { choices }, ParamValue::Cat(c)) => choices.contains(c),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Real(f64),
    Cat(String),
}

impl std::fmt::Display for ParamValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamValue::Int(v) => write!(f, "{v}"),
            ParamValue::Real(v) => write!(f, "{v}"),
            ParamValue::Cat(v) => f.write_str(v),
        }
    }
}

pub type Params = BTreeMap<String, ParamValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub family: String,
    /// Sampled in this order, which fixes the random stream per trial.
    pub params: Vec<(String, Domain)>,
}

pub const FAMILIES: [&str; 6] = [
    "decision_tree",
    "random_forest",
    "extra_trees",
    "gbt",
    "knn",
    "ensemble",
];

/// Roster of the joint ensemble space: member name and the family it samples from.
pub const ENSEMBLE_MEMBERS: [(&str, &str); 6] = [
    ("tree", "decision_tree"),
    ("rf", "random_forest"),
    ("et", "extra_trees"),
    ("gbt_a", "gbt"),
    ("gbt_b", "gbt"),
    ("knn", "knn"),
];

fn int(low: i64, high: i64) -> Domain {
    Domain::Int { low, high, step: 1 }
}

fn cats(c: &[&str]) -> Domain {
    Domain::Categorical {
        choices: c.iter().map(|s| s.to_string()).collect(),
    }
}

fn family_params(family: &str) -> Result<Vec<(String, Domain)>> {
    let p = |v: Vec<(&str, Domain)>| v.into_iter().map(|(k, d)| (k.to_string(), d)).collect();
    Ok(match family {
        "decision_tree" => p(vec![("max_depth", int(2, 20)), ("min_samples_leaf", int(1, 50))]),
        "random_forest" | "extra_trees" => p(vec![
            ("n_trees", int(50, 400)),
            ("features_per_split", cats(&["sqrt", "log2", "all"])),
            ("max_depth", int(4, 24)),
        ]),
        "gbt" => p(vec![
            ("n_rounds", int(50, 500)),
            (
                "learning_rate",
                Domain::Real {
                    low: 0.01,
                    high: 0.3,
                    log: true,
                },
            ),
            ("leaves", int(15, 127)),
        ]),
        "knn" => p(vec![
            ("k", Domain::Int { low: 1, high: 25, step: 2 }),
            ("metric", cats(&["euclidean", "hamming"])),
        ]),
        _ => return Err(Error::invalid(format!("unknown model family {family:?}"))),
    })
}

/// Joint space restricted to the named ensemble members, in roster order.
pub fn ensemble_space(members: &[String]) -> Result<SearchSpace> {
    for m in members {
        if !ENSEMBLE_MEMBERS.iter().any(|(n, _)| n == m) {
            return Err(Error::invalid(format!("unknown ensemble member {m:?}")));
        }
    }
    let mut space = default_space("ensemble")?;
    space
        .params
        .retain(|(k, _)| members.iter().any(|m| k.split('.').next() == Some(m.as_str())));
    Ok(space)
}

pub fn default_space(family: &str) -> Result<SearchSpace> {
    let params = if family == "ensemble" {
        let mut all = Vec::new();
        for (member, fam) in ENSEMBLE_MEMBERS {
            for (k, d) in family_params(fam)? {
                all.push((format!("{member}.{k}"), d));
            }
        }
        all
    } else {
        family_params(family)?
    };
    Ok(SearchSpace {
        family: family.to_string(),
        params,
    })
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.params.is_empty() {
            return Err(Error::invalid("search space has no parameters"));
        }
        for (name, d) in &self.params {
            d.validate(name)?;
        }
        Ok(())
    }
}

pub trait Sampler {
    fn sample(&mut self, space: &SearchSpace) -> Params;
}

pub struct RandomSampler {
    rng: ChaCha8Rng,
}

impl RandomSampler {
    pub fn new(seed: u64) -> Self {
        RandomSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Sampler for RandomSampler {
    fn sample(&mut self, space: &SearchSpace) -> Params {
        let mut out = Params::new();
        for (name, d) in &space.params {
            let v = match d {
                Domain::Int { low, high, step } => {
                    let n = (high - low) / step;
                    ParamValue::Int(low + step * self.rng.gen_range(0..=n))
                }
                Domain::Real { low, high, log } => {
                    let x = if low == high {
                        *low
                    } else if *log {
                        self.rng.gen_range(low.ln()..high.ln()).exp()
                    } else {
                        self.rng.gen_range(*low..*high)
                    };
                    ParamValue::Real(x.clamp(*low, *high))
                }
                Domain::Categorical { choices } => {
                    ParamValue::Cat(choices.choose(&mut self.rng).unwrap().clone())
                }
            };
            out.insert(name.clone(), v);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rung {
    pub budget: usize,
    pub survivor_fraction: f64,
}

/// Geometric rungs ending at `max_budget`; the final rung keeps every survivor.
pub fn halving_schedule(max_budget: usize, eta: usize, rungs: usize) -> Result<Vec<Rung>> {
    if eta < 2 {
        return Err(Error::invalid(format!("eta must be at least 2, got {eta}")));
    }
    if rungs == 0 || max_budget == 0 {
        return Err(Error::invalid("need at least one rung and a positive budget"));
    }
    let mut out = Vec::with_capacity(rungs);
    for i in 0..rungs {
        let div = (eta as u128).saturating_pow((rungs - 1 - i) as u32);
        let budget = ((max_budget as u128 / div) as usize).max(1);
        let survivor_fraction = if i + 1 == rungs { 1.0 } else { 1.0 / eta as f64 };
        out.push(Rung {
            budget,
            survivor_fraction,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pruner {
    Off,
    #[default]
    Halving,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Recall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HpoConfig {
    pub n_trials: usize,
    pub seed: u64,
    pub pruner: Pruner,
    pub eta: usize,
    pub rungs: usize,
    /// Completed reports needed at a rung before its median can prune.
    pub startup_trials: usize,
    pub objective: Objective,
    /// Trials below this validation MCC are not eligible as best. MCC never drops
    /// below -1, so `-1` disables the guard.
    pub min_mcc_guard: f64,
    pub voting: Voting,
    /// Model family to search, or `ensemble` for the joint six-member space.
    pub family: String,
}

impl Default for HpoConfig {
    fn default() -> Self {
        HpoConfig {
            n_trials: 50,
            seed: 0,
            pruner: Pruner::Halving,
            eta: 2,
            rungs: 3,
            startup_trials: 5,
            objective: Objective::Recall,
            min_mcc_guard: 0.05,
            voting: Voting::Soft,
            family: "ensemble".to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Validation {
    Holdout(SplitPlan),
    KFold(FoldPlan),
}

impl Validation {
    fn folds(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        match self {
            Validation::Holdout(s) => vec![(s.train_indices.clone(), s.test_indices.clone())],
            Validation::KFold(f) => (0..f.k).map(|i| f.fold(i)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Complete,
    Pruned,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub id: usize,
    /// Seed handed to the randomized members of this trial.
    pub seed: u64,
    pub params: Params,
    /// Validation malware recall (last rung reached).
    pub objective: Option<f64>,
    pub mcc: Option<f64>,
    /// Trees plus boosting rounds actually grown, plus one per fixed-size member.
    pub budget: usize,
    pub status: TrialStatus,
    /// Recall observed at each rung reached, in percent of full budget.
    pub rung_reports: Vec<(usize, f64)>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub trials: Vec<Trial>,
    pub best_trial: usize,
    pub wall_seconds: f64,
    pub seed: u64,
    pub family: String,
    /// `false` when every complete trial fell below the MCC guard and the best was
    /// picked from all complete trials instead.
    pub guard_satisfied: bool,
}

impl StudyResult {
    pub fn best(&self) -> &Trial {
        &self.trials[self.best_trial]
    }

    pub fn total_budget(&self) -> usize {
        self.trials.iter().map(|t| t.budget).sum()
    }
}

fn get_int(p: &Params, key: &str) -> Result<i64> {
    match p.get(key) {
        Some(ParamValue::Int(v)) => Ok(*v),
        other => Err(Error::invalid(format!("parameter {key} missing or not an integer: {other:?}"))),
    }
}

fn get_real(p: &Params, key: &str) -> Result<f64> {
    match p.get(key) {
        Some(ParamValue::Real(v)) => Ok(*v),
        Some(ParamValue::Int(v)) => Ok(*v as f64),
        other => Err(Error::invalid(format!("parameter {key} missing or not a number: {other:?}"))),
    }
}

fn get_cat<'a>(p: &'a Params, key: &str) -> Result<&'a str> {
    match p.get(key) {
        Some(ParamValue::Cat(v)) => Ok(v),
        other => Err(Error::invalid(format!("parameter {key} missing or not a choice: {other:?}"))),
    }
}

fn positive(v: i64, key: &str) -> Result<usize> {
    usize::try_from(v)
        .ok()
        .filter(|&u| u >= 1)
        .ok_or_else(|| Error::invalid(format!("{key} must be positive, got {v}")))
}

/// Model spec for one family from (optionally prefixed) sampled parameters.
/// `preset` picks the booster style for `gbt`: `"gbt_b"` selects depth-wise growth.
pub fn spec_from_params(family: &str, prefix: &str, p: &Params, seed: u64) -> Result<ModelSpec> {
    let k = |name: &str| format!("{prefix}{name}");
    Ok(match family {
        "decision_tree" => ModelSpec::DecisionTree(TreeParams {
            max_depth: Some(positive(get_int(p, &k("max_depth"))?, "max_depth")?),
            min_samples_leaf: positive(get_int(p, &k("min_samples_leaf"))?, "min_samples_leaf")?,
            ..Default::default()
        }),
        "random_forest" | "extra_trees" => {
            let max_features = match get_cat(p, &k("features_per_split"))? {
                "sqrt" => MaxFeatures::Sqrt,
                "log2" => MaxFeatures::Log2,
                "all" => MaxFeatures::All,
                other => return Err(Error::invalid(format!("unknown features_per_split {other}"))),
            };
            let fp = ForestParams {
                n_trees: positive(get_int(p, &k("n_trees"))?, "n_trees")?,
                max_features,
                bootstrap: None,
                tree: TreeParams {
                    max_depth: Some(positive(get_int(p, &k("max_depth"))?, "max_depth")?),
                    ..Default::default()
                },
                seed,
            };
            if family == "random_forest" {
                ModelSpec::RandomForest(fp)
            } else {
                ModelSpec::ExtraTrees(fp)
            }
        }
        "gbt" => {
            let base = if prefix.starts_with("gbt_b") {
                GbtParams::preset_b()
            } else {
                GbtParams::preset_a()
            };
            ModelSpec::Gbt(GbtParams {
                n_rounds: positive(get_int(p, &k("n_rounds"))?, "n_rounds")?,
                learning_rate: get_real(p, &k("learning_rate"))?,
                max_leaves: positive(get_int(p, &k("leaves"))?, "leaves")?,
                ..base
            })
        }
        "knn" => ModelSpec::Knn(KnnParams {
            k: positive(get_int(p, &k("k"))?, "k")?,
            metric: match get_cat(p, &k("metric"))? {
                "euclidean" => KnnMetric::Euclidean,
                "hamming" => KnnMetric::Hamming,
                other => return Err(Error::invalid(format!("unknown metric {other}"))),
            },
        }),
        _ => return Err(Error::invalid(format!("unknown model family {family:?}"))),
    })
}

/// Member configurations for a trial. Single families yield one member.
pub fn members_from_params(family: &str, p: &Params, seed: u64) -> Result<Vec<MemberConfig>> {
    if family == "ensemble" {
        let present = |name: &str| p.keys().any(|k| k.strip_prefix(name).is_some_and(|r| r.starts_with('.')));
        let members: Vec<MemberConfig> = ENSEMBLE_MEMBERS
            .iter()
            .enumerate()
            .filter(|(_, (name, _))| present(name))
            .map(|(i, (name, fam))| {
                let spec = spec_from_params(fam, &format!("{name}."), p, mix_seed(seed, i as u64))?;
                Ok(MemberConfig::new(*name, spec))
            })
            .collect::<Result<_>>()?;
        if members.is_empty() {
            return Err(Error::invalid("no ensemble member has parameters"));
        }
        Ok(members)
    } else {
        Ok(vec![MemberConfig::new(family, spec_from_params(family, "", p, seed)?)])
    }
}

/// Trains the final model for a set of members: a bare model for one member, a voting
/// ensemble otherwise.
pub fn fit_members(ds: &Dataset, members: &[MemberConfig], voting: Voting) -> Result<ModelArtifact> {
    match members {
        [one] => train_model(&one.spec, ds),
        _ => Ok(ModelArtifact::Ensemble(crate::models::train_voting_ensemble(ds, members, voting)?)),
    }
}

enum MemberState {
    Fixed(ModelArtifact),
    Forest { trainer: ForestTrainer, full: usize },
    Gbt { trainer: GbtTrainer, full: usize },
}

impl MemberState {
    fn new(spec: &ModelSpec, train: &Dataset) -> Result<Self> {
        Ok(match spec {
            ModelSpec::RandomForest(p) => MemberState::Forest {
                trainer: ForestTrainer::new(train, p, ForestMode::RandomForest)?,
                full: p.n_trees,
            },
            ModelSpec::ExtraTrees(p) => MemberState::Forest {
                trainer: ForestTrainer::new(train, p, ForestMode::ExtraTrees)?,
                full: p.n_trees,
            },
            ModelSpec::Gbt(p) => MemberState::Gbt {
                trainer: GbtTrainer::new(train, p)?,
                full: p.n_rounds,
            },
            other => MemberState::Fixed(train_model(other, train)?),
        })
    }

    /// Grows to `percent` of the full size and returns a snapshot.
    fn advance(&mut self, percent: usize) -> ModelArtifact {
        let target = |full: usize| (full * percent).div_ceil(100).clamp(1, full);
        match self {
            MemberState::Fixed(m) => m.clone(),
            MemberState::Forest { trainer, full } => {
                trainer.grow_to(target(*full));
                ModelArtifact::Forest(trainer.model().clone())
            }
            MemberState::Gbt { trainer, full } => {
                trainer.grow_to(target(*full));
                ModelArtifact::Gbt(trainer.model().clone())
            }
        }
    }

    fn consumed(&self) -> usize {
        match self {
            MemberState::Fixed(_) => 1,
            MemberState::Forest { trainer, .. } => trainer.n_trees(),
            MemberState::Gbt { trainer, .. } => trainer.n_rounds(),
        }
    }
}

struct FoldRun {
    members: Vec<(String, f64, MemberState)>,
    val: Dataset,
}

impl FoldRun {
    fn evaluate(&mut self, percent: usize, voting: Voting) -> Result<(f64, f64)> {
        let snaps: Vec<(String, f64, ModelArtifact)> = self
            .members
            .iter_mut()
            .map(|(n, w, s)| (n.clone(), *w, s.advance(percent)))
            .collect();
        let model = if snaps.len() == 1 {
            snaps.into_iter().next().unwrap().2
        } else {
            ModelArtifact::Ensemble(EnsembleModel::new(snaps, voting)?)
        };
        let pred: Vec<u8> = model
            .predict_proba(self.val.features())?
            .into_iter()
            .map(hard_label)
            .collect();
        let cm = confusion(self.val.labels(), &pred)?;
        Ok((recall(&cm), mcc(&cm)))
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Ordering used for best-trial selection: recall, then MCC, then lower id.
fn better(a: &Trial, b: &Trial) -> bool {
    let key = |t: &Trial| (t.objective.unwrap_or(f64::NEG_INFINITY), t.mcc.unwrap_or(f64::NEG_INFINITY));
    let (ka, kb) = (key(a), key(b));
    match ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1)) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => a.id < b.id,
    }
}

/// Index of the best complete trial; `bool` reports whether the MCC guard held.
pub fn select_best(trials: &[Trial], min_mcc_guard: f64) -> Option<(usize, bool)> {
    let pick = |guarded: bool| {
        let mut best: Option<usize> = None;
        for (i, t) in trials.iter().enumerate() {
            if t.status != TrialStatus::Complete {
                continue;
            }
            if guarded && t.mcc.is_none_or(|m| m < min_mcc_guard) {
                continue;
            }
            if best.is_none_or(|b| better(t, &trials[b])) {
                best = Some(i);
            }
        }
        best
    };
    match pick(true) {
        Some(i) => Some((i, true)),
        None => pick(false).map(|i| (i, false)),
    }
}

pub fn optimize(
    ds: &Dataset,
    space: &SearchSpace,
    config: &HpoConfig,
    validation: &Validation,
) -> Result<StudyResult> {
    let mut sampler = RandomSampler::new(config.seed);
    optimize_with(ds, space, config, validation, &mut sampler, &mut |_| {})
}

/// Runs the study sequentially, reporting each finished trial to `on_trial`.
pub fn optimize_with(
    ds: &Dataset,
    space: &SearchSpace,
    config: &HpoConfig,
    validation: &Validation,
    sampler: &mut dyn Sampler,
    on_trial: &mut dyn FnMut(&Trial),
) -> Result<StudyResult> {
    if config.n_trials == 0 {
        return Err(Error::invalid("n_trials must be at least 1"));
    }
    space.validate()?;
    let rungs: Vec<usize> = match config.pruner {
        Pruner::Off => vec![100],
        Pruner::Halving => halving_schedule(100, config.eta, config.rungs)?
            .into_iter()
            .map(|r| r.budget)
            .collect(),
    };
    let folds: Vec<(Dataset, Dataset)> = validation
        .folds()
        .into_iter()
        .map(|(tr, va)| (ds.subset(&tr), ds.subset(&va)))
        .collect();
    let start = Instant::now();
    let mut trials: Vec<Trial> = Vec::with_capacity(config.n_trials);
    // per rung: recalls reported by earlier trials
    let mut reports: Vec<Vec<f64>> = vec![Vec::new(); rungs.len()];

    for id in 0..config.n_trials {
        let params = sampler.sample(space);
        let seed = mix_seed(config.seed, 1_000_003 + id as u64);
        let mut trial = Trial {
            id,
            seed,
            params: params.clone(),
            objective: None,
            mcc: None,
            budget: 0,
            status: TrialStatus::Failed,
            rung_reports: Vec::new(),
            error: None,
        };
        let outcome = (|| -> Result<()> {
            let members = members_from_params(&space.family, &params, seed)?;
            let mut runs = Vec::with_capacity(folds.len());
            for (tr, va) in &folds {
                let mut states = Vec::with_capacity(members.len());
                for m in &members {
                    states.push((m.name.clone(), m.weight, MemberState::new(&m.spec, tr)?));
                }
                runs.push(FoldRun {
                    members: states,
                    val: va.clone(),
                });
            }
            for (r, &pct) in rungs.iter().enumerate() {
                let mut rec = 0.0;
                let mut m = 0.0;
                for run in runs.iter_mut() {
                    let (a, b) = run.evaluate(pct, config.voting)?;
                    rec += a;
                    m += b;
                }
                rec /= runs.len() as f64;
                m /= runs.len() as f64;
                trial.objective = Some(rec);
                trial.mcc = Some(m);
                trial.rung_reports.push((pct, rec));
                trial.budget = runs
                    .iter()
                    .flat_map(|run| run.members.iter().map(|(_, _, s)| s.consumed()))
                    .sum();
                let last = r + 1 == rungs.len();
                let prior = &reports[r];
                let prune = !last
                    && prior.len() >= config.startup_trials.max(1)
                    && rec < median(prior.clone());
                reports[r].push(rec);
                if prune {
                    trial.status = TrialStatus::Pruned;
                    return Ok(());
                }
            }
            trial.status = TrialStatus::Complete;
            Ok(())
        })();
        if let Err(e) = outcome {
            log::warn!("trial {id} failed: {}", e.chain());
            trial.status = TrialStatus::Failed;
            trial.objective = None;
            trial.mcc = None;
            trial.error = Some(e.to_string());
        }
        on_trial(&trial);
        trials.push(trial);
    }

    let (best_trial, guard_satisfied) = select_best(&trials, config.min_mcc_guard)
        .ok_or_else(|| Error::Numerical("every trial failed or was pruned".into()))?;
    if !guard_satisfied {
        log::warn!(
            "no trial reached validation MCC {}; best chosen without the guard",
            config.min_mcc_guard
        );
    }
    Ok(StudyResult {
        trials,
        best_trial,
        wall_seconds: start.elapsed().as_secs_f64(),
        seed: config.seed,
        family: space.family.clone(),
        guard_satisfied,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::split_holdout;
    use crate::matrix::Matrix;

    fn data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let r: Vec<f64> = (0..5).map(|_| f64::from(rng.gen_bool(0.5))).collect();
            let s = r[0] + r[1] + r[2] + rng.gen_range(-0.8..0.8);
            y.push(u8::from(s > 1.5));
            rows.push(r);
        }
        Dataset::from_matrix(Matrix::from_rows(&rows).unwrap(), y, "hpo").unwrap()
    }

    fn trial(id: usize, rec: f64, m: f64, status: TrialStatus) -> Trial {
        Trial {
            id,
            seed: 0,
            params: Params::new(),
            objective: Some(rec),
            mcc: Some(m),
            budget: 1,
            status,
            rung_reports: vec![],
            error: None,
        }
    }

    #[test]
    fn knn_space_is_odd_k() {
        let s = default_space("knn").unwrap();
        let (_, d) = &s.params[0];
        assert_eq!(d, &Domain::Int { low: 1, high: 25, step: 2 });
        let mut sm = RandomSampler::new(1);
        for _ in 0..200 {
            let ParamValue::Int(k) = sm.sample(&s)["k"] else { panic!() };
            assert!(k % 2 == 1 && (1..=25).contains(&k));
        }
    }

    #[test]
    fn gbt_learning_rate_is_log_scaled() {
        let s = default_space("gbt").unwrap();
        assert!(s.params.iter().any(|(n, d)| n == "learning_rate"
            && *d == Domain::Real { low: 0.01, high: 0.3, log: true }));
        let mut sm = RandomSampler::new(2);
        let below: usize = (0..2000)
            .filter(|_| matches!(sm.sample(&s)["learning_rate"], ParamValue::Real(v) if v < 0.0548))
            .count();
        // geometric midpoint of [0.01, 0.3] splits log-uniform draws in half
        assert!((800..1200).contains(&below), "{below}");
    }

    #[test]
    fn unknown_family_rejected() {
        assert!(default_space("svm").is_err());
    }

    #[test]
    fn halving_examples() {
        let b = |m, e, r| -> Vec<usize> {
            halving_schedule(m, e, r).unwrap().iter().map(|r| r.budget).collect()
        };
        assert_eq!(b(400, 2, 3), vec![100, 200, 400]);
        assert_eq!(b(400, 4, 2), vec![100, 400]);
        assert_eq!(b(400, 2, 1), vec![400]);
        assert!(halving_schedule(400, 1, 2).is_err());
        let s = halving_schedule(400, 2, 3).unwrap();
        assert_eq!(s[0].survivor_fraction, 0.5);
        assert_eq!(s[2].survivor_fraction, 1.0);
    }

    #[test]
    fn best_is_recall_then_mcc_then_id() {
        let t = vec![
            trial(0, 0.90, 0.8, TrialStatus::Complete),
            trial(1, 0.95, 0.5, TrialStatus::Complete),
            trial(2, 0.95, 0.6, TrialStatus::Complete),
            trial(3, 0.95, 0.6, TrialStatus::Complete),
            trial(4, 0.99, 0.9, TrialStatus::Pruned),
        ];
        assert_eq!(select_best(&t, -1.0), Some((2, true)));
    }

    #[test]
    fn guard_excludes_low_mcc_then_falls_back() {
        let t = vec![
            trial(0, 0.99, 0.01, TrialStatus::Complete),
            trial(1, 0.90, 0.70, TrialStatus::Complete),
        ];
        assert_eq!(select_best(&t, 0.05), Some((1, true)));
        assert_eq!(select_best(&t[..1], 0.05), Some((0, false)));
    }

    #[test]
    fn single_trial_study() {
        let ds = data(200, 1);
        let v = Validation::Holdout(split_holdout(&ds, 0.75, 1, true).unwrap());
        let cfg = HpoConfig {
            n_trials: 1,
            family: "decision_tree".into(),
            ..Default::default()
        };
        let r = optimize(&ds, &default_space("decision_tree").unwrap(), &cfg, &v).unwrap();
        assert_eq!(r.best_trial, 0);
        assert_eq!(r.trials.len(), 1);
    }

    #[test]
    fn seeded_study_repeats() {
        let ds = data(240, 2);
        let v = Validation::Holdout(split_holdout(&ds, 0.75, 3, true).unwrap());
        let space = default_space("gbt").unwrap();
        let cfg = HpoConfig {
            n_trials: 6,
            seed: 9,
            startup_trials: 2,
            family: "gbt".into(),
            ..Default::default()
        };
        let a = optimize(&ds, &space, &cfg, &v).unwrap();
        let b = optimize(&ds, &space, &cfg, &v).unwrap();
        let strip = |r: &StudyResult| {
            r.trials
                .iter()
                .map(|t| (t.params.clone(), t.objective, t.status))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.best().params, b.best().params);
    }

    #[test]
    fn pruning_never_costs_more() {
        let ds = data(240, 4);
        let v = Validation::Holdout(split_holdout(&ds, 0.75, 5, true).unwrap());
        let space = default_space("random_forest").unwrap();
        let base = HpoConfig {
            n_trials: 8,
            seed: 4,
            startup_trials: 2,
            family: "random_forest".into(),
            ..Default::default()
        };
        let off = optimize(&ds, &space, &HpoConfig { pruner: Pruner::Off, ..base.clone() }, &v).unwrap();
        let on = optimize(&ds, &space, &base, &v).unwrap();
        assert!(on.total_budget() <= off.total_budget());
        assert_ne!(on.best().status, TrialStatus::Pruned);
        for (a, b) in on.trials.iter().zip(&off.trials) {
            assert_eq!(a.params, b.params);
        }
    }

    #[test]
    fn all_failed_is_an_error() {
        let ds = data(20, 5);
        let v = Validation::Holdout(split_holdout(&ds, 0.5, 1, true).unwrap());
        let space = SearchSpace {
            family: "knn".into(),
            params: vec![
                ("k".into(), Domain::Int { low: 99, high: 99, step: 1 }),
                ("metric".into(), cats(&["hamming"])),
            ],
        };
        let cfg = HpoConfig {
            n_trials: 2,
            family: "knn".into(),
            ..Default::default()
        };
        assert!(optimize(&ds, &space, &cfg, &v).is_err());
    }
}
