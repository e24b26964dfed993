//! Model zoo, uniform prediction surface and the on-disk model container.

pub mod ensemble;
pub mod forest;
pub mod gbt;
pub mod knn;
pub mod tree;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub use ensemble::{train_voting_ensemble, EnsembleModel, MemberConfig, Voting};
pub use forest::{train_forest, ForestMode, ForestModel, ForestParams, MaxFeatures};
pub use gbt::{train_gbt, GbtModel, GbtParams, Growth};
pub use knn::{train_knn, KnnMetric, KnnModel, KnnParams};
pub use tree::{train_decision_tree, TreeModel, TreeParams};

pub const MODEL_FORMAT: &str = "automl-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Class-1 wins exact ties so that borderline samples count toward malware recall.
#[inline]
pub fn hard_label(p: [f64; 2]) -> u8 {
    u8::from(p[1] >= p[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum ModelSpec {
    DecisionTree(TreeParams),
    RandomForest(ForestParams),
    ExtraTrees(ForestParams),
    Gbt(GbtParams),
    Knn(KnnParams),
}

impl ModelSpec {
    pub fn family(&self) -> &'static str {
        match self {
            ModelSpec::DecisionTree(_) => "decision_tree",
            ModelSpec::RandomForest(_) => "random_forest",
            ModelSpec::ExtraTrees(_) => "extra_trees",
            ModelSpec::Gbt(_) => "gbt",
            ModelSpec::Knn(_) => "knn",
        }
    }
}

pub fn train_model(spec: &ModelSpec, ds: &Dataset) -> Result<ModelArtifact> {
    Ok(match spec {
        ModelSpec::DecisionTree(p) => ModelArtifact::Tree(train_decision_tree(ds, p)?),
        ModelSpec::RandomForest(p) => {
            ModelArtifact::Forest(train_forest(ds, p, ForestMode::RandomForest)?)
        }
        ModelSpec::ExtraTrees(p) => ModelArtifact::Forest(train_forest(ds, p, ForestMode::ExtraTrees)?),
        ModelSpec::Gbt(p) => ModelArtifact::Gbt(train_gbt(ds, p)?),
        ModelSpec::Knn(p) => ModelArtifact::Knn(train_knn(ds, p)?),
    })
}

/// The six-member roster: tree, random forest, extra-trees, both booster presets, KNN.
pub fn default_roster(seed: u64) -> Vec<MemberConfig> {
    vec![
        MemberConfig::new("tree", ModelSpec::DecisionTree(TreeParams::default())),
        MemberConfig::new(
            "rf",
            ModelSpec::RandomForest(ForestParams {
                seed: forest::mix_seed(seed, 101),
                ..Default::default()
            }),
        ),
        MemberConfig::new(
            "et",
            ModelSpec::ExtraTrees(ForestParams {
                seed: forest::mix_seed(seed, 202),
                ..Default::default()
            }),
        ),
        MemberConfig::new("gbt_a", ModelSpec::Gbt(GbtParams::preset_a())),
        MemberConfig::new("gbt_b", ModelSpec::Gbt(GbtParams::preset_b())),
        MemberConfig::new("knn", ModelSpec::Knn(KnnParams::default())),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
pub enum ModelArtifact {
    Tree(TreeModel),
    Forest(ForestModel),
    Gbt(GbtModel),
    Knn(KnnModel),
    Ensemble(EnsembleModel),
}

impl ModelArtifact {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelArtifact::Tree(_) => "decision_tree",
            ModelArtifact::Forest(f) => match f.mode {
                ForestMode::RandomForest => "random_forest",
                ForestMode::ExtraTrees => "extra_trees",
            },
            ModelArtifact::Gbt(_) => "gbt",
            ModelArtifact::Knn(_) => "knn",
            ModelArtifact::Ensemble(_) => "ensemble",
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            ModelArtifact::Tree(m) => m.n_features,
            ModelArtifact::Forest(m) => m.n_features,
            ModelArtifact::Gbt(m) => m.n_features,
            ModelArtifact::Knn(m) => m.n_features(),
            ModelArtifact::Ensemble(m) => m.members[0].model.n_features(),
        }
    }

    /// Unchecked single-row prediction; `x.len()` must equal `n_features()`.
    pub fn proba_row(&self, x: &[f64]) -> [f64; 2] {
        match self {
            ModelArtifact::Tree(m) => m.proba_row(x),
            ModelArtifact::Forest(m) => m.proba_row(x),
            ModelArtifact::Gbt(m) => m.proba_row(x),
            ModelArtifact::Knn(m) => m.proba_row(x),
            ModelArtifact::Ensemble(m) => m.proba_row(x),
        }
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Vec<[f64; 2]>> {
        x.check_cols(self.n_features())?;
        if x.rows() == 0 {
            return Ok(Vec::new());
        }
        let d = x.cols().max(1);
        Ok(x
            .as_slice()
            .par_chunks(d)
            .map(|row| self.proba_row(row))
            .collect())
    }

    pub fn predict_malware_proba(&self, x: &Matrix) -> Result<Vec<f64>> {
        Ok(self.predict_proba(x)?.into_iter().map(|p| p[1]).collect())
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<u8>> {
        Ok(self.predict_proba(x)?.into_iter().map(hard_label).collect())
    }
}

pub fn predict_proba(model: &ModelArtifact, x: &Matrix) -> Result<Vec<[f64; 2]>> {
    model.predict_proba(x)
}

#[derive(Serialize, Deserialize)]
struct Container<M> {
    format: String,
    version: u32,
    model: M,
}

pub fn model_to_json(model: &ModelArtifact) -> Result<String> {
    Ok(serde_json::to_string(&Container {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_FORMAT_VERSION,
        model,
    })?)
}

pub fn model_from_json(text: &str) -> Result<ModelArtifact> {
    let c: Container<ModelArtifact> = serde_json::from_str(text)?;
    if c.format != MODEL_FORMAT {
        return Err(Error::invalid(format!("not a model container: format {:?}", c.format)));
    }
    if c.version != MODEL_FORMAT_VERSION {
        return Err(Error::invalid(format!(
            "unsupported model container version {} (expected {MODEL_FORMAT_VERSION})",
            c.version
        )));
    }
    Ok(c.model)
}

pub fn save_model(model: &ModelArtifact, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_to_json(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelArtifact> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![(i % 7) as f64, f64::from(i % 2 == 0)]).collect();
        let y: Vec<u8> = (0..30).map(|i| u8::from(i % 7 > 3)).collect();
        Dataset::from_matrix(Matrix::from_rows(&rows).unwrap(), y, "toy").unwrap()
    }

    fn small_roster() -> Vec<MemberConfig> {
        default_roster(7)
            .into_iter()
            .map(|mut m| {
                match &mut m.spec {
                    ModelSpec::RandomForest(p) | ModelSpec::ExtraTrees(p) => p.n_trees = 5,
                    ModelSpec::Gbt(p) => {
                        p.n_rounds = 5;
                        p.min_samples_leaf = 2;
                    }
                    _ => {}
                }
                m
            })
            .collect()
    }

    #[test]
    fn rows_sum_to_one_for_every_kind() {
        let ds = toy();
        let ens = train_voting_ensemble(&ds, &small_roster(), Voting::Soft).unwrap();
        let mut models: Vec<ModelArtifact> = ens.members.iter().map(|m| m.model.clone()).collect();
        models.push(ModelArtifact::Ensemble(ens));
        for m in &models {
            for p in m.predict_proba(ds.features()).unwrap() {
                assert!((p[0] + p[1] - 1.0).abs() < 1e-9, "{}", m.kind());
                assert!((0.0..=1.0).contains(&p[1]));
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = train_model(&ModelSpec::DecisionTree(TreeParams::default()), &toy()).unwrap();
        assert!(m.predict_proba(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn container_round_trip_is_bit_identical() {
        let ds = toy();
        let ens = train_voting_ensemble(&ds, &small_roster(), Voting::Soft).unwrap();
        let m = ModelArtifact::Ensemble(ens);
        let back = model_from_json(&model_to_json(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        let a = m.predict_proba(ds.features()).unwrap();
        let b = back.predict_proba(ds.features()).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x[1].to_bits() == y[1].to_bits()));
    }

    #[test]
    fn container_rejects_wrong_version() {
        let m = train_model(&ModelSpec::Knn(KnnParams { k: 1, ..Default::default() }), &toy()).unwrap();
        let text = model_to_json(&m).unwrap().replace("\"version\":1", "\"version\":9");
        assert!(model_from_json(&text).is_err());
    }

    #[test]
    fn tie_goes_to_malware() {
        assert_eq!(hard_label([0.5, 0.5]), 1);
        assert_eq!(hard_label([0.6, 0.4]), 0);
    }

    #[test]
    fn soft_vote_is_weighted_mean() {
        let x = Matrix::from_rows(&[[0.0]]).unwrap();
        // single-leaf trees with fixed class ratios
        let leaf = |c0: usize, c1: usize| {
            let y: Vec<u8> = std::iter::repeat_n(0, c0).chain(std::iter::repeat_n(1, c1)).collect();
            let ds = Dataset::from_matrix(Matrix::zeros(y.len(), 1), y, "t").unwrap();
            train_model(&ModelSpec::DecisionTree(TreeParams::default()), &ds).unwrap()
        };
        let ens = EnsembleModel::new(
            vec![("a".into(), 1.0, leaf(9, 1)), ("b".into(), 1.0, leaf(6, 4))],
            Voting::Soft,
        )
        .unwrap();
        let p = ens.proba_row(x.row(0));
        assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);

        let same = EnsembleModel::new(
            vec![("a".into(), 1.0, leaf(6, 4)), ("b".into(), 3.0, leaf(6, 4))],
            Voting::Soft,
        )
        .unwrap();
        assert!((same.proba_row(x.row(0))[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn hard_vote_majority() {
        let leaf = |c0: usize, c1: usize| {
            let y: Vec<u8> = std::iter::repeat_n(0, c0).chain(std::iter::repeat_n(1, c1)).collect();
            let ds = Dataset::from_matrix(Matrix::zeros(y.len(), 1), y, "t").unwrap();
            train_model(&ModelSpec::DecisionTree(TreeParams::default()), &ds).unwrap()
        };
        let members = vec![
            ("a".into(), 1.0, leaf(1, 9)),
            ("b".into(), 1.0, leaf(1, 9)),
            ("c".into(), 1.0, leaf(9, 1)),
        ];
        let ens = EnsembleModel::new(members, Voting::Hard).unwrap();
        assert_eq!(hard_label(ens.proba_row(&[0.0])), 1);
        let two = EnsembleModel::new(
            vec![("a".into(), 1.0, leaf(1, 9)), ("c".into(), 1.0, leaf(9, 1))],
            Voting::Hard,
        )
        .unwrap();
        assert_eq!(hard_label(two.proba_row(&[0.0])), 1);
    }

    #[test]
    fn failed_members_are_dropped() {
        let ds = toy();
        let mut roster = small_roster();
        roster.push(MemberConfig::new("bad_knn", ModelSpec::Knn(KnnParams { k: 1000, ..Default::default() })));
        let ens = train_voting_ensemble(&ds, &roster, Voting::Soft).unwrap();
        assert_eq!(ens.members.len(), 6);
        let only_bad = vec![
            MemberConfig::new("a", ModelSpec::Knn(KnnParams { k: 1000, ..Default::default() })),
            MemberConfig::new("b", ModelSpec::DecisionTree(TreeParams::default())),
        ];
        assert!(train_voting_ensemble(&ds, &only_bad, Voting::Soft).is_err());
    }
}
