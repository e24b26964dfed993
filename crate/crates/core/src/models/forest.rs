//! Random forests and extremely randomized trees.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{grow_tree, SplitMode, TreeData, TreeModel, TreeParams};
use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForestMode {
    RandomForest,
    ExtraTrees,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    Sqrt,
    Log2,
    All,
    /// Fraction of the feature count, rounded down, at least one.
    Fraction(f64),
    Count(usize),
}

impl MaxFeatures {
    pub fn resolve(self, d: usize) -> usize {
        let m = match self {
            MaxFeatures::Sqrt => (d as f64).sqrt() as usize,
            MaxFeatures::Log2 => (d as f64).log2() as usize,
            MaxFeatures::All => d,
            MaxFeatures::Fraction(f) => (f * d as f64) as usize,
            MaxFeatures::Count(c) => c,
        };
        m.clamp(1, d.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_features: MaxFeatures,
    /// Defaults per mode when `None`: on for random forests, off for extra-trees.
    pub bootstrap: Option<bool>,
    pub tree: TreeParams,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_features: MaxFeatures::Sqrt,
            bootstrap: None,
            tree: TreeParams::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<TreeModel>,
    pub tree_seeds: Vec<u64>,
    pub mode: ForestMode,
    pub features_per_split: usize,
    pub bootstrap: bool,
    pub n_features: usize,
}

impl ForestModel {
    pub fn proba_row(&self, x: &[f64]) -> [f64; 2] {
        let mut p1 = 0.0;
        for t in &self.trees {
            p1 += t.proba_row(x)[1];
        }
        let p1 = p1 / self.trees.len() as f64;
        [1.0 - p1, p1]
    }
}

/// SplitMix64 finalizer, used to derive independent per-tree seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Holds the prepared training data so a forest can be grown in several steps.
pub struct ForestTrainer {
    data: TreeData,
    params: ForestParams,
    mode: ForestMode,
    bootstrap: bool,
    model: ForestModel,
}

impl ForestTrainer {
    pub fn new(ds: &Dataset, params: &ForestParams, mode: ForestMode) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::invalid("cannot train a forest on an empty dataset"));
        }
        if params.n_trees == 0 {
            return Err(Error::invalid("n_trees must be at least 1"));
        }
        let data = TreeData::from_dataset(ds);
        let d = data.n_features();
        let bootstrap = params
            .bootstrap
            .unwrap_or(mode == ForestMode::RandomForest);
        let m = params.max_features.resolve(d);
        Ok(ForestTrainer {
            data,
            params: params.clone(),
            mode,
            bootstrap,
            model: ForestModel {
                trees: Vec::new(),
                tree_seeds: Vec::new(),
                mode,
                features_per_split: m,
                bootstrap,
                n_features: d,
            },
        })
    }

    pub fn n_trees(&self) -> usize {
        self.model.trees.len()
    }

    /// Adds trees until the forest has `n` of them. Tree `i` depends only on the seed
    /// and `i`, so growing in steps matches growing in one go.
    pub fn grow_to(&mut self, n: usize) {
        let start = self.model.trees.len();
        if n <= start {
            return;
        }
        let data = &self.data;
        let params = &self.params;
        let (mode, bootstrap, m) = (self.mode, self.bootstrap, self.model.features_per_split);
        let new: Vec<(u64, TreeModel)> = (start..n)
            .into_par_iter()
            .map(|i| {
                let seed = mix_seed(params.seed, i as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n_rows = data.n_rows();
                let rows: Vec<usize> = if bootstrap {
                    (0..n_rows).map(|_| rng.gen_range(0..n_rows)).collect()
                } else {
                    (0..n_rows).collect()
                };
                let split_mode = match mode {
                    ForestMode::RandomForest => SplitMode::Best,
                    ForestMode::ExtraTrees => SplitMode::RandomThreshold,
                };
                (seed, grow_tree(data, rows, &params.tree, m, split_mode, Some(&mut rng)))
            })
            .collect();
        for (seed, tree) in new {
            self.model.tree_seeds.push(seed);
            self.model.trees.push(tree);
        }
    }

    pub fn model(&self) -> &ForestModel {
        &self.model
    }

    pub fn into_model(self) -> ForestModel {
        self.model
    }
}

pub fn train_forest(ds: &Dataset, params: &ForestParams, mode: ForestMode) -> Result<ForestModel> {
    let mut trainer = ForestTrainer::new(ds, params, mode)?;
    trainer.grow_to(params.n_trees);
    Ok(trainer.into_model())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::models::tree::train_decision_tree;

    fn blobs(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = (i % 2) as u8;
            let c = if y == 1 { 2.0 } else { -2.0 };
            rows.push(vec![c + rng.gen_range(-1.5..1.5), c + rng.gen_range(-1.5..1.5)]);
            labels.push(y);
        }
        Dataset::from_matrix(Matrix::from_rows(&rows).unwrap(), labels, "blobs").unwrap()
    }

    #[test]
    fn single_tree_forest_matches_cart() {
        let ds = blobs(60, 1);
        let params = ForestParams {
            n_trees: 1,
            max_features: MaxFeatures::All,
            bootstrap: Some(false),
            ..Default::default()
        };
        let forest = train_forest(&ds, &params, ForestMode::RandomForest).unwrap();
        let tree = train_decision_tree(&ds, &TreeParams::default()).unwrap();
        for row in ds.features().iter_rows() {
            assert_eq!(forest.proba_row(row), tree.proba_row(row));
        }
    }

    #[test]
    fn seeded_forests_are_identical() {
        let ds = blobs(80, 2);
        let params = ForestParams {
            n_trees: 7,
            seed: 42,
            ..Default::default()
        };
        for mode in [ForestMode::RandomForest, ForestMode::ExtraTrees] {
            let a = train_forest(&ds, &params, mode).unwrap();
            let b = train_forest(&ds, &params, mode).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn incremental_growth_matches_one_shot() {
        let ds = blobs(50, 3);
        let params = ForestParams {
            n_trees: 9,
            seed: 5,
            ..Default::default()
        };
        let full = train_forest(&ds, &params, ForestMode::ExtraTrees).unwrap();
        let mut t = ForestTrainer::new(&ds, &params, ForestMode::ExtraTrees).unwrap();
        t.grow_to(3);
        t.grow_to(9);
        assert_eq!(t.model(), &full);
    }

    #[test]
    fn separable_blobs_holdout_accuracy() {
        let train = blobs(400, 10);
        let test = blobs(200, 11);
        let params = ForestParams {
            n_trees: 25,
            seed: 3,
            ..Default::default()
        };
        for mode in [ForestMode::RandomForest, ForestMode::ExtraTrees] {
            let f = train_forest(&train, &params, mode).unwrap();
            let hits = test
                .features()
                .iter_rows()
                .zip(test.labels())
                .filter(|(r, &y)| u8::from(f.proba_row(r)[1] >= 0.5) == y)
                .count();
            assert!(hits as f64 / 200.0 >= 0.95, "{mode:?}: {hits}");
        }
    }

    #[test]
    fn max_features_resolution() {
        assert_eq!(MaxFeatures::Sqrt.resolve(215), 14);
        assert_eq!(MaxFeatures::Log2.resolve(1), 1);
        assert_eq!(MaxFeatures::Count(500).resolve(10), 10);
        assert_eq!(MaxFeatures::Fraction(0.5).resolve(9), 4);
    }
}
