//! Greedy CART classification trees (Gini impurity).
//!
//! Split candidates are compared exactly in integer arithmetic, so ties are real ties
//! and resolve by (lower feature index, lower threshold) regardless of evaluation order.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreeParams {
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub min_samples_split: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: None,
            min_samples_leaf: 1,
            min_samples_split: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    /// `None` for leaves. Rows with `x[feature] <= threshold` go left.
    pub split: Option<Split>,
    /// `[P(benign), P(malware)]` of the training rows reaching this node.
    pub proba: [f64; 2],
    pub class_counts: [usize; 2],
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    pub nodes: Vec<TreeNode>,
    pub params: TreeParams,
    pub n_features: usize,
    pub n_train: usize,
}

impl TreeModel {
    pub fn leaf_for(&self, x: &[f64]) -> &TreeNode {
        let mut node = &self.nodes[0];
        while let Some(s) = &node.split {
            node = if x[s.feature] <= s.threshold {
                &self.nodes[s.left]
            } else {
                &self.nodes[s.right]
            };
        }
        node
    }

    #[inline]
    pub fn proba_row(&self, x: &[f64]) -> [f64; 2] {
        self.leaf_for(x).proba
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.split.is_none()).count()
    }

    /// Features referenced by at least one split.
    pub fn read_set(&self) -> BTreeSet<usize> {
        self.nodes
            .iter()
            .filter_map(|n| n.split.map(|s| s.feature))
            .collect()
    }
}

/// Column-major view of the training data shared by every tree in a fit.
pub(crate) struct TreeData {
    pub cols: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    /// Column holds only 0/1 values, enabling the counting fast path.
    pub binary: Vec<bool>,
}

impl TreeData {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let cols = ds.features().to_column_major();
        let binary = cols
            .iter()
            .map(|c| c.iter().all(|&v| v == 0.0 || v == 1.0))
            .collect();
        TreeData {
            cols,
            labels: ds.labels().to_vec(),
            binary,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.cols.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum SplitMode {
    /// Exhaustive threshold search.
    Best,
    /// One uniformly drawn threshold per candidate feature.
    RandomThreshold,
}

/// Exact score of a split: `sum_children (c0^2 + c1^2) / n_child`, kept as a fraction.
/// Larger is better (equivalent to lower weighted Gini impurity).
#[derive(Debug, Clone, Copy)]
pub(crate) struct SplitScore {
    num: u128,
    den: u128,
}

impl SplitScore {
    pub fn new(left: [usize; 2], right: [usize; 2]) -> Self {
        let sq = |c: [usize; 2]| (c[0] as u128).pow(2) + (c[1] as u128).pow(2);
        let nl = (left[0] + left[1]) as u128;
        let nr = (right[0] + right[1]) as u128;
        SplitScore {
            num: sq(left) * nr + sq(right) * nl,
            den: nl * nr,
        }
    }

    pub fn cmp(&self, other: &SplitScore) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }

    /// Weighted Gini impurity of the children.
    #[cfg(test)]
    pub fn weighted_gini(&self, n: usize) -> f64 {
        1.0 - (self.num as f64 / self.den as f64) / n as f64
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    feature: usize,
    threshold: f64,
    score: SplitScore,
}

impl Candidate {
    /// `true` when `self` should replace `best`.
    fn beats(&self, best: &Option<Candidate>) -> bool {
        match best {
            None => true,
            Some(b) => match self.score.cmp(&b.score) {
                Ordering::Greater => true,
                Ordering::Less => false,
                Ordering::Equal => (self.feature, self.threshold)
                    .partial_cmp(&(b.feature, b.threshold))
                    .map(|o| o == Ordering::Less)
                    .unwrap_or(false),
            },
        }
    }
}

fn counts_of(labels: &[u8], rows: &[usize]) -> [usize; 2] {
    let ones = rows.iter().filter(|&&r| labels[r] == 1).count();
    [rows.len() - ones, ones]
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    // guards adjacent floats where the midpoint rounds up to b
    if m >= b {
        a
    } else {
        m
    }
}

struct Searcher<'a> {
    data: &'a TreeData,
    min_leaf: usize,
    scratch: Vec<(f64, u8)>,
}

impl<'a> Searcher<'a> {
    /// Best split on `feature`; `None` when the feature is constant over `rows`
    /// (the bool reports non-constancy even if no split passes `min_leaf`).
    fn best_on_feature(
        &mut self,
        feature: usize,
        rows: &[usize],
        total: [usize; 2],
    ) -> (bool, Option<Candidate>) {
        let col = &self.data.cols[feature];
        let labels = &self.data.labels;
        let n = rows.len();
        if self.data.binary[feature] {
            let mut right = [0usize; 2];
            for &r in rows {
                if col[r] == 1.0 {
                    right[labels[r] as usize] += 1;
                }
            }
            let n_right = right[0] + right[1];
            if n_right == 0 || n_right == n {
                return (false, None);
            }
            if n_right < self.min_leaf || n - n_right < self.min_leaf {
                return (true, None);
            }
            let left = [total[0] - right[0], total[1] - right[1]];
            return (
                true,
                Some(Candidate {
                    feature,
                    threshold: 0.5,
                    score: SplitScore::new(left, right),
                }),
            );
        }
        self.scratch.clear();
        self.scratch.extend(rows.iter().map(|&r| (col[r], labels[r])));
        self.scratch.sort_by(|a, b| a.0.total_cmp(&b.0));
        if self.scratch[0].0 == self.scratch[n - 1].0 {
            return (false, None);
        }
        let mut left = [0usize; 2];
        let mut best: Option<Candidate> = None;
        for i in 0..n - 1 {
            left[self.scratch[i].1 as usize] += 1;
            let (v, next) = (self.scratch[i].0, self.scratch[i + 1].0);
            if v == next {
                continue;
            }
            let nl = i + 1;
            if nl < self.min_leaf || n - nl < self.min_leaf {
                continue;
            }
            let right = [total[0] - left[0], total[1] - left[1]];
            let score = SplitScore::new(left, right);
            if best.is_none_or(|b| score.cmp(&b.score) == Ordering::Greater) {
                best = Some(Candidate {
                    feature,
                    threshold: midpoint(v, next),
                    score,
                });
            }
        }
        (true, best)
    }

    fn random_on_feature(
        &mut self,
        feature: usize,
        rows: &[usize],
        total: [usize; 2],
        rng: &mut ChaCha8Rng,
    ) -> (bool, Option<Candidate>) {
        let col = &self.data.cols[feature];
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &r in rows {
            lo = lo.min(col[r]);
            hi = hi.max(col[r]);
        }
        if lo >= hi {
            return (false, None);
        }
        let threshold = rng.gen_range(lo..hi);
        let mut left = [0usize; 2];
        for &r in rows {
            if col[r] <= threshold {
                left[self.data.labels[r] as usize] += 1;
            }
        }
        let nl = left[0] + left[1];
        let n = rows.len();
        if nl < self.min_leaf || n - nl < self.min_leaf || nl == 0 || nl == n {
            return (true, None);
        }
        let right = [total[0] - left[0], total[1] - left[1]];
        (
            true,
            Some(Candidate {
                feature,
                threshold,
                score: SplitScore::new(left, right),
            }),
        )
    }
}

/// Grows one tree over `rows` (duplicates allowed, for bootstrap samples).
/// `max_features < n_features` or `SplitMode::RandomThreshold` require `rng`.
pub(crate) fn grow_tree(
    data: &TreeData,
    rows: Vec<usize>,
    params: &TreeParams,
    max_features: usize,
    mode: SplitMode,
    mut rng: Option<&mut ChaCha8Rng>,
) -> TreeModel {
    let d = data.n_features();
    let max_features = max_features.clamp(1, d.max(1));
    let min_leaf = params.min_samples_leaf.max(1);
    let min_split = params.min_samples_split.max(2).max(2 * min_leaf);
    let mut searcher = Searcher {
        data,
        min_leaf,
        scratch: Vec::new(),
    };
    let n_train = rows.len();
    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut stack: Vec<(usize, Vec<usize>)> = Vec::new();

    let make_node = |counts: [usize; 2], depth: usize| {
        let n = (counts[0] + counts[1]).max(1) as f64;
        let p1 = counts[1] as f64 / n;
        TreeNode {
            split: None,
            proba: [1.0 - p1, p1],
            class_counts: counts,
            depth,
        }
    };
    nodes.push(make_node(counts_of(&data.labels, &rows), 0));
    stack.push((0, rows));
    let mut features: Vec<usize> = (0..d).collect();

    while let Some((id, rows)) = stack.pop() {
        let counts = nodes[id].class_counts;
        let depth = nodes[id].depth;
        let pure = counts[0] == 0 || counts[1] == 0;
        let depth_capped = params.max_depth.is_some_and(|m| depth >= m);
        if pure || depth_capped || rows.len() < min_split {
            continue;
        }

        let mut best: Option<Candidate> = None;
        let exhaustive = mode == SplitMode::Best && max_features >= d;
        if exhaustive {
            for f in 0..d {
                if let (_, Some(c)) = searcher.best_on_feature(f, &rows, counts) {
                    if c.beats(&best) {
                        best = Some(c);
                    }
                }
            }
        } else {
            let rng = rng
                .as_deref_mut()
                .expect("feature subsampling and random thresholds need an rng");
            // sample features without replacement until `max_features` non-constant
            // ones have been examined
            let mut visited = 0;
            let mut i = 0;
            while i < d && visited < max_features {
                let j = rng.gen_range(i..d);
                features.swap(i, j);
                let f = features[i];
                i += 1;
                let (varies, cand) = match mode {
                    SplitMode::Best => searcher.best_on_feature(f, &rows, counts),
                    SplitMode::RandomThreshold => searcher.random_on_feature(f, &rows, counts, rng),
                };
                if varies {
                    visited += 1;
                }
                if let Some(c) = cand {
                    if c.beats(&best) {
                        best = Some(c);
                    }
                }
            }
        }

        let Some(best) = best else { continue };
        let col = &data.cols[best.feature];
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.into_iter().partition(|&r| col[r] <= best.threshold);
        let left_id = nodes.len();
        nodes.push(make_node(counts_of(&data.labels, &left_rows), depth + 1));
        let right_id = nodes.len();
        nodes.push(make_node(counts_of(&data.labels, &right_rows), depth + 1));
        nodes[id].split = Some(Split {
            feature: best.feature,
            threshold: best.threshold,
            left: left_id,
            right: right_id,
        });
        // right first so the left subtree is expanded first
        stack.push((right_id, right_rows));
        stack.push((left_id, left_rows));
    }

    TreeModel {
        nodes,
        params: params.clone(),
        n_features: d,
        n_train,
    }
}

pub fn train_decision_tree(ds: &Dataset, params: &TreeParams) -> Result<TreeModel> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot train a tree on an empty dataset"));
    }
    let data = TreeData::from_dataset(ds);
    let rows = (0..ds.n_rows()).collect();
    Ok(grow_tree(&data, rows, params, data.n_features(), SplitMode::Best, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;

    fn ds(rows: &[Vec<f64>], labels: &[u8]) -> Dataset {
        Dataset::from_matrix(Matrix::from_rows(rows).unwrap(), labels.to_vec(), "t").unwrap()
    }

    fn accuracy(t: &TreeModel, d: &Dataset) -> f64 {
        let hits = d
            .features()
            .iter_rows()
            .zip(d.labels())
            .filter(|(r, &y)| u8::from(t.proba_row(r)[1] >= 0.5) == y)
            .count();
        hits as f64 / d.n_rows() as f64
    }

    #[test]
    fn one_dimensional_root_split() {
        let d = ds(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]], &[0, 0, 1, 1]);
        let t = train_decision_tree(&d, &TreeParams::default()).unwrap();
        let s = t.nodes[0].split.unwrap();
        assert_eq!((s.feature, s.threshold), (0, 2.5));
        assert_eq!(accuracy(&t, &d), 1.0);
    }

    #[test]
    fn pure_labels_give_single_leaf() {
        let d = ds(&[vec![1.0], vec![2.0]], &[1, 1]);
        let t = train_decision_tree(&d, &TreeParams::default()).unwrap();
        assert_eq!(t.nodes.len(), 1);
        assert_eq!(t.nodes[0].proba, [0.0, 1.0]);
    }

    #[test]
    fn xor_depth_two() {
        let rows = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]];
        let d = ds(&rows, &[0, 1, 1, 0]);
        let params = TreeParams {
            max_depth: Some(2),
            ..Default::default()
        };
        let t = train_decision_tree(&d, &params).unwrap();
        assert_eq!(accuracy(&t, &d), 1.0);
        assert!(t.depth() <= 2);
    }

    #[test]
    fn depth_and_leaf_constraints() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let labels: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
        let d = ds(&rows, &labels);
        let t = train_decision_tree(
            &d,
            &TreeParams {
                max_depth: Some(3),
                min_samples_leaf: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(t.depth() <= 3);
        for n in &t.nodes {
            assert!(n.class_counts[0] + n.class_counts[1] >= 2);
            assert!((n.proba[0] + n.proba[1] - 1.0).abs() < 1e-12);
            if let Some(s) = n.split {
                assert!(s.left < t.nodes.len() && s.right < t.nodes.len());
            }
        }
    }

    #[test]
    fn exact_score_orders_like_gini() {
        let a = SplitScore::new([3, 0], [0, 3]);
        let b = SplitScore::new([2, 1], [1, 2]);
        assert_eq!(a.cmp(&b), Ordering::Greater);
        assert_eq!(a.weighted_gini(6), 0.0);
        assert!((b.weighted_gini(6) - 4.0 / 9.0).abs() < 1e-12);
    }
}
