//! Histogram gradient boosting for binary log-loss.
//!
//! Two presets cover the two booster styles in the default ensemble: leaf-wise growth
//! with 31 leaves, and depth-wise growth to depth 6 with categorical codes re-ordered
//! by smoothed target rate before binning.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FeatureKind};
use crate::error::{Error, Result};

/// Bound on the initial log-odds, reached when the training data has one class.
pub const LOG_ODDS_CAP: f64 = 10.0;
pub const MAX_BINS: usize = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Growth {
    LeafWise,
    DepthWise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbtParams {
    pub n_rounds: usize,
    pub learning_rate: f64,
    pub growth: Growth,
    pub max_leaves: usize,
    pub max_depth: Option<usize>,
    pub l2: f64,
    pub min_samples_leaf: usize,
    pub min_hessian: f64,
    pub max_bins: usize,
    /// Prior weight for target-rate ordering of categorical codes; `None` bins codes
    /// in numeric order.
    pub categorical_smoothing: Option<f64>,
}

impl GbtParams {
    pub fn preset_a() -> Self {
        GbtParams {
            n_rounds: 100,
            learning_rate: 0.1,
            growth: Growth::LeafWise,
            max_leaves: 31,
            max_depth: None,
            l2: 1.0,
            min_samples_leaf: 20,
            min_hessian: 1e-3,
            max_bins: MAX_BINS,
            categorical_smoothing: None,
        }
    }

    pub fn preset_b() -> Self {
        GbtParams {
            n_rounds: 100,
            learning_rate: 0.1,
            growth: Growth::DepthWise,
            max_leaves: 64,
            max_depth: Some(6),
            l2: 3.0,
            min_samples_leaf: 1,
            min_hessian: 1e-3,
            max_bins: MAX_BINS,
            categorical_smoothing: Some(1.0),
        }
    }
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams::preset_a()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureBins {
    /// Bin `b` holds values in `(edges[b-1], edges[b]]`.
    Numeric { edges: Vec<f64> },
    /// Categorical codes mapped to bins ordered by smoothed target rate.
    Ranked {
        code_bins: Vec<u8>,
        default_bin: u8,
        n_bins: usize,
    },
}

impl FeatureBins {
    pub fn n_bins(&self) -> usize {
        match self {
            FeatureBins::Numeric { edges } => edges.len() + 1,
            FeatureBins::Ranked { n_bins, .. } => *n_bins,
        }
    }

    #[inline]
    pub fn bin(&self, x: f64) -> u8 {
        match self {
            FeatureBins::Numeric { edges } => edges.partition_point(|&e| e < x) as u8,
            FeatureBins::Ranked {
                code_bins,
                default_bin,
                ..
            } => {
                let r = x.round();
                if r >= 0.0 && (r as usize) < code_bins.len() {
                    code_bins[r as usize]
                } else {
                    *default_bin
                }
            }
        }
    }

    #[inline]
    fn goes_left(&self, x: f64, bin: u8) -> bool {
        match self {
            FeatureBins::Numeric { edges } => x <= edges[bin as usize],
            FeatureBins::Ranked { .. } => self.bin(x) <= bin,
        }
    }
}

fn numeric_bins(values: &[f64], max_bins: usize) -> FeatureBins {
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    let edges = if distinct.len() <= max_bins {
        distinct
            .windows(2)
            .map(|w| {
                let m = w[0] + (w[1] - w[0]) / 2.0;
                if m >= w[1] {
                    w[0]
                } else {
                    m
                }
            })
            .collect()
    } else {
        let n = sorted.len();
        let top = *sorted.last().unwrap();
        let mut edges: Vec<f64> = (1..max_bins)
            .map(|k| sorted[k * n / max_bins])
            .filter(|&v| v < top)
            .collect();
        edges.dedup();
        edges
    };
    FeatureBins::Numeric { edges }
}

fn ranked_bins(codes: &[f64], labels: &[u8], smoothing: f64, max_bins: usize) -> Option<FeatureBins> {
    let n_codes = codes.iter().map(|&c| c.round() as usize + 1).max().unwrap_or(0);
    if n_codes == 0 || codes.iter().any(|&c| c < 0.0 || c.is_nan()) {
        return None;
    }
    let mut count = vec![0usize; n_codes];
    let mut pos = vec![0usize; n_codes];
    for (&c, &y) in codes.iter().zip(labels) {
        count[c.round() as usize] += 1;
        pos[c.round() as usize] += y as usize;
    }
    let seen: Vec<usize> = (0..n_codes).filter(|&c| count[c] > 0).collect();
    if seen.len() > max_bins {
        return None;
    }
    let prior = labels.iter().map(|&y| y as f64).sum::<f64>() / labels.len() as f64;
    let rate = |c: usize| (pos[c] as f64 + smoothing * prior) / (count[c] as f64 + smoothing);
    let mut order = seen.clone();
    order.sort_by(|&a, &b| rate(a).total_cmp(&rate(b)).then(a.cmp(&b)));
    let mut code_bins = vec![0u8; n_codes];
    for (rank, &c) in order.iter().enumerate() {
        code_bins[c] = rank as u8;
    }
    let below_prior = order.iter().filter(|&&c| rate(c) < prior).count();
    let default_bin = below_prior.min(order.len() - 1) as u8;
    for c in 0..n_codes {
        if count[c] == 0 {
            code_bins[c] = default_bin;
        }
    }
    Some(FeatureBins::Ranked {
        code_bins,
        default_bin,
        n_bins: order.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbtSplit {
    pub feature: usize,
    /// Rows whose bin is `<= bin` go left.
    pub bin: u8,
    pub left: usize,
    pub right: usize,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtNode {
    pub split: Option<GbtSplit>,
    /// Leaf contribution to the log-odds, learning rate included.
    pub value: f64,
    pub n_samples: usize,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub params: GbtParams,
    pub bins: Vec<FeatureBins>,
    pub init_log_odds: f64,
    pub trees: Vec<Vec<GbtNode>>,
    /// Training log-loss after each round.
    pub loss_trace: Vec<f64>,
    pub n_features: usize,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-sample binary log-loss in terms of the raw log-odds, stable for large |z|.
#[inline]
fn sample_loss(z: f64, y: u8) -> f64 {
    // log(1 + e^z) - y z
    let softplus = if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    };
    softplus - y as f64 * z
}

fn mean_loss(raw: &[f64], labels: &[u8]) -> f64 {
    raw.iter()
        .zip(labels)
        .map(|(&z, &y)| sample_loss(z, y))
        .sum::<f64>()
        / raw.len() as f64
}

impl GbtModel {
    pub fn raw_score(&self, x: &[f64]) -> f64 {
        let mut z = self.init_log_odds;
        for tree in &self.trees {
            let mut node = &tree[0];
            while let Some(s) = &node.split {
                node = if self.bins[s.feature].goes_left(x[s.feature], s.bin) {
                    &tree[s.left]
                } else {
                    &tree[s.right]
                };
            }
            z += node.value;
        }
        z
    }

    pub fn proba_row(&self, x: &[f64]) -> [f64; 2] {
        let p1 = sigmoid(self.raw_score(x));
        [1.0 - p1, p1]
    }

    pub fn n_rounds(&self) -> usize {
        self.trees.len()
    }
}

struct FeatHist {
    g: Vec<f64>,
    h: Vec<f64>,
    n: Vec<u32>,
}

impl FeatHist {
    fn minus(&self, other: &FeatHist) -> FeatHist {
        FeatHist {
            g: self.g.iter().zip(&other.g).map(|(a, b)| a - b).collect(),
            h: self.h.iter().zip(&other.h).map(|(a, b)| a - b).collect(),
            n: self.n.iter().zip(&other.n).map(|(a, b)| a - b).collect(),
        }
    }
}

struct Leaf {
    node: usize,
    rows: Vec<usize>,
    hist: Vec<FeatHist>,
    g: f64,
    h: f64,
    best: Option<(usize, u8, f64)>,
}

/// Keeps binned training data and the running log-odds so boosting can resume.
pub struct GbtTrainer {
    params: GbtParams,
    binned: Vec<Vec<u8>>,
    labels: Vec<u8>,
    raw: Vec<f64>,
    model: GbtModel,
    constant: bool,
}

impl GbtTrainer {
    pub fn new(ds: &Dataset, params: &GbtParams) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::invalid("cannot train a booster on an empty dataset"));
        }
        if !(params.learning_rate > 0.0 && params.learning_rate <= 1.0) {
            return Err(Error::invalid(format!(
                "learning_rate must be in (0, 1], got {}",
                params.learning_rate
            )));
        }
        if params.n_rounds == 0 {
            return Err(Error::invalid("n_rounds must be at least 1"));
        }
        if params.max_leaves < 2 {
            return Err(Error::invalid("max_leaves must be at least 2"));
        }
        let max_bins = params.max_bins.clamp(2, MAX_BINS);
        let cols = ds.features().to_column_major();
        let labels = ds.labels().to_vec();
        let bins: Vec<FeatureBins> = cols
            .iter()
            .zip(ds.feature_kinds())
            .map(|(col, kind)| {
                let ranked = match (params.categorical_smoothing, kind) {
                    (Some(a), FeatureKind::Categorical) => ranked_bins(col, &labels, a, max_bins),
                    _ => None,
                };
                ranked.unwrap_or_else(|| numeric_bins(col, max_bins))
            })
            .collect();
        let binned = cols
            .iter()
            .zip(&bins)
            .map(|(col, b)| col.iter().map(|&x| b.bin(x)).collect())
            .collect();

        let [c0, c1] = ds.class_counts();
        let constant = c0 == 0 || c1 == 0;
        let init = if c1 == 0 {
            -LOG_ODDS_CAP
        } else if c0 == 0 {
            LOG_ODDS_CAP
        } else {
            (c1 as f64 / c0 as f64).ln().clamp(-LOG_ODDS_CAP, LOG_ODDS_CAP)
        };
        Ok(GbtTrainer {
            params: params.clone(),
            binned,
            raw: vec![init; labels.len()],
            labels,
            model: GbtModel {
                params: params.clone(),
                bins,
                init_log_odds: init,
                trees: Vec::new(),
                loss_trace: Vec::new(),
                n_features: ds.n_cols(),
            },
            constant,
        })
    }

    pub fn n_rounds(&self) -> usize {
        self.model.trees.len()
    }

    pub fn model(&self) -> &GbtModel {
        &self.model
    }

    pub fn into_model(mut self) -> GbtModel {
        self.model.params.n_rounds = self.model.trees.len();
        self.model
    }

    pub fn grow_to(&mut self, n_rounds: usize) {
        while self.model.trees.len() < n_rounds {
            self.boost_round();
        }
    }

    fn histograms(&self, rows: &[usize], grad: &[f64], hess: &[f64]) -> Vec<FeatHist> {
        self.binned
            .par_iter()
            .zip(self.model.bins.par_iter())
            .map(|(col, b)| {
                let nb = b.n_bins();
                let mut fh = FeatHist {
                    g: vec![0.0; nb],
                    h: vec![0.0; nb],
                    n: vec![0; nb],
                };
                for &r in rows {
                    let k = col[r] as usize;
                    fh.g[k] += grad[r];
                    fh.h[k] += hess[r];
                    fh.n[k] += 1;
                }
                fh
            })
            .collect()
    }

    /// Best `(feature, bin, gain)` over all features; earlier features win ties.
    fn best_split(&self, hist: &[FeatHist], g: f64, h: f64, n: usize) -> Option<(usize, u8, f64)> {
        let l2 = self.params.l2;
        let min_leaf = self.params.min_samples_leaf.max(1) as u32;
        let min_h = self.params.min_hessian;
        let parent = g * g / (h + l2);
        let mut best: Option<(usize, u8, f64)> = None;
        for (f, fh) in hist.iter().enumerate() {
            let (mut gl, mut hl, mut nl) = (0.0, 0.0, 0u32);
            for b in 0..fh.g.len().saturating_sub(1) {
                gl += fh.g[b];
                hl += fh.h[b];
                nl += fh.n[b];
                let nr = n as u32 - nl;
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let (gr, hr) = (g - gl, h - hl);
                if hl < min_h || hr < min_h {
                    continue;
                }
                let gain = gl * gl / (hl + l2) + gr * gr / (hr + l2) - parent;
                if gain > 1e-12 && best.is_none_or(|(_, _, bg)| gain > bg) {
                    best = Some((f, b as u8, gain));
                }
            }
        }
        best
    }

    fn make_leaf(&self, node: usize, rows: Vec<usize>, hist: Vec<FeatHist>, g: f64, h: f64) -> Leaf {
        let best = self.best_split(&hist, g, h, rows.len());
        Leaf {
            node,
            rows,
            hist,
            g,
            h,
            best,
        }
    }

    fn boost_round(&mut self) {
        let n = self.labels.len();
        let prev_loss = self
            .model
            .loss_trace
            .last()
            .copied()
            .unwrap_or_else(|| mean_loss(&self.raw, &self.labels));
        if self.constant {
            self.model.trees.push(vec![GbtNode {
                split: None,
                value: 0.0,
                n_samples: n,
                depth: 0,
            }]);
            self.model.loss_trace.push(prev_loss);
            return;
        }

        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n];
        for i in 0..n {
            let p = sigmoid(self.raw[i]);
            grad[i] = p - self.labels[i] as f64;
            hess[i] = (p * (1.0 - p)).max(1e-16);
        }
        let (tree, leaves) = self.grow_tree(&grad, &hess);

        // Newton leaf values are a descent direction, so halving the step eventually
        // lowers the loss; a zero step keeps it unchanged.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let mut trial = self.raw.clone();
            for (rows, value) in &leaves {
                for &r in rows {
                    trial[r] += step * value;
                }
            }
            let loss = mean_loss(&trial, &self.labels);
            if loss <= prev_loss {
                accepted = Some((trial, loss));
                break;
            }
            step *= 0.5;
        }
        let mut tree = tree;
        match accepted {
            Some((raw, loss)) => {
                for node in tree.iter_mut().filter(|nd| nd.split.is_none()) {
                    node.value *= step;
                }
                self.raw = raw;
                self.model.loss_trace.push(loss);
            }
            None => {
                for node in tree.iter_mut() {
                    node.value = 0.0;
                }
                self.model.loss_trace.push(prev_loss);
            }
        }
        self.model.trees.push(tree);
    }

    /// Returns the tree and, for each leaf, its rows and value.
    fn grow_tree(&self, grad: &[f64], hess: &[f64]) -> (Vec<GbtNode>, Vec<(Vec<usize>, f64)>) {
        let n = grad.len();
        let rows: Vec<usize> = (0..n).collect();
        let g: f64 = grad.iter().sum();
        let h: f64 = hess.iter().sum();
        let hist = self.histograms(&rows, grad, hess);
        let mut nodes = vec![GbtNode {
            split: None,
            value: 0.0,
            n_samples: n,
            depth: 0,
        }];
        let mut open = vec![self.make_leaf(0, rows, hist, g, h)];
        let mut done: Vec<Leaf> = Vec::new();
        let mut n_leaves = 1;
        let max_depth = self.params.max_depth.unwrap_or(usize::MAX);

        while n_leaves < self.params.max_leaves {
            let pick = match self.params.growth {
                Growth::LeafWise => {
                    let mut pick: Option<usize> = None;
                    for (i, leaf) in open.iter().enumerate() {
                        let Some((_, _, gain)) = leaf.best else { continue };
                        if nodes[leaf.node].depth >= max_depth {
                            continue;
                        }
                        if pick.is_none_or(|p| gain > open[p].best.unwrap().2) {
                            pick = Some(i);
                        }
                    }
                    pick
                }
                // shallowest first, then creation order
                Growth::DepthWise => open
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| l.best.is_some() && nodes[l.node].depth < max_depth)
                    .min_by_key(|(_, l)| (nodes[l.node].depth, l.node))
                    .map(|(i, _)| i),
            };
            let Some(i) = pick else { break };
            let leaf = open.remove(i);
            let (feature, bin, gain) = leaf.best.unwrap();
            let col = &self.binned[feature];
            let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
                leaf.rows.iter().partition(|&&r| col[r] <= bin);
            let (small, large_is_left) = if left_rows.len() <= right_rows.len() {
                (&left_rows, false)
            } else {
                (&right_rows, true)
            };
            let small_hist = self.histograms(small, grad, hess);
            let large_hist: Vec<FeatHist> = leaf
                .hist
                .iter()
                .zip(&small_hist)
                .map(|(p, s)| p.minus(s))
                .collect();
            let (left_hist, right_hist) = if large_is_left {
                (large_hist, small_hist)
            } else {
                (small_hist, large_hist)
            };
            let sum = |rows: &[usize], v: &[f64]| rows.iter().map(|&r| v[r]).sum::<f64>();
            let (gl, hl) = (sum(&left_rows, grad), sum(&left_rows, hess));
            let (gr, hr) = (leaf.g - gl, leaf.h - hl);
            let depth = nodes[leaf.node].depth + 1;
            let left_id = nodes.len();
            let right_id = left_id + 1;
            for rows in [&left_rows, &right_rows] {
                nodes.push(GbtNode {
                    split: None,
                    value: 0.0,
                    n_samples: rows.len(),
                    depth,
                });
            }
            nodes[leaf.node].split = Some(GbtSplit {
                feature,
                bin,
                left: left_id,
                right: right_id,
                gain,
            });
            open.push(self.make_leaf(left_id, left_rows, left_hist, gl, hl));
            open.push(self.make_leaf(right_id, right_rows, right_hist, gr, hr));
            n_leaves += 1;
        }
        done.extend(open);
        done.sort_by_key(|l| l.node);

        let lr = self.params.learning_rate;
        let mut out = Vec::with_capacity(done.len());
        for leaf in done {
            let value = -lr * leaf.g / (leaf.h + self.params.l2);
            nodes[leaf.node].value = value;
            out.push((leaf.rows, value));
        }
        (nodes, out)
    }
}

pub fn train_gbt(ds: &Dataset, params: &GbtParams) -> Result<GbtModel> {
    let mut t = GbtTrainer::new(ds, params)?;
    t.grow_to(params.n_rounds);
    Ok(t.into_model())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy(n: usize, d: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let r: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s = r[0] + 0.5 * r[1] * r[1 % d] + rng.gen_range(-0.5..0.5);
            labels.push(u8::from(s > 0.0));
            rows.push(r);
        }
        Dataset::from_matrix(Matrix::from_rows(&rows).unwrap(), labels, "noisy").unwrap()
    }

    #[test]
    fn loss_trace_non_increasing() {
        let ds = noisy(300, 4, 1);
        for params in [GbtParams::preset_a(), GbtParams::preset_b()] {
            let m = train_gbt(&ds, &GbtParams { n_rounds: 40, ..params }).unwrap();
            assert_eq!(m.loss_trace.len(), 40);
            for w in m.loss_trace.windows(2) {
                assert!(w[1] <= w[0]);
            }
        }
    }

    #[test]
    fn constant_model_on_single_class() {
        let x = Matrix::from_rows(&[[1.0], [2.0]]).unwrap();
        let ds = Dataset::from_matrix(x, vec![0, 0], "t").unwrap();
        let m = train_gbt(&ds, &GbtParams::default()).unwrap();
        assert_eq!(m.init_log_odds, -LOG_ODDS_CAP);
        assert!(m.proba_row(&[5.0])[1] < 1e-4);
    }

    #[test]
    fn balanced_constant_is_half() {
        let x = Matrix::from_rows(&[[1.0], [1.0]]).unwrap();
        let ds = Dataset::from_matrix(x, vec![0, 1], "t").unwrap();
        let m = train_gbt(&ds, &GbtParams { n_rounds: 3, ..Default::default() }).unwrap();
        assert_eq!(m.proba_row(&[1.0]), [0.5, 0.5]);
    }

    #[test]
    fn zero_learning_rate_rejected() {
        let ds = noisy(10, 2, 3);
        let p = GbtParams {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(train_gbt(&ds, &p).is_err());
    }

    #[test]
    fn tiny_learning_rate_stays_at_prior() {
        let ds = noisy(200, 3, 4);
        let p = GbtParams {
            learning_rate: 1e-6,
            n_rounds: 1,
            ..Default::default()
        };
        let m = train_gbt(&ds, &p).unwrap();
        let p0 = sigmoid(m.init_log_odds);
        for row in ds.features().iter_rows() {
            assert!((m.proba_row(row)[1] - p0).abs() < 1e-4);
        }
    }

    #[test]
    fn bin_edges_strictly_increasing() {
        let vals: Vec<f64> = (0..2000).map(|i| ((i * 7919) % 1000) as f64 / 3.0).collect();
        let FeatureBins::Numeric { edges } = numeric_bins(&vals, 255) else {
            panic!()
        };
        assert!(edges.len() <= 254);
        assert!(edges.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn ranked_bins_follow_target_rate() {
        let codes = [0.0, 0.0, 1.0, 1.0, 2.0, 2.0];
        let labels = [1, 1, 0, 0, 1, 0];
        let FeatureBins::Ranked { code_bins, .. } = ranked_bins(&codes, &labels, 1.0, 255).unwrap() else {
            panic!()
        };
        assert_eq!(code_bins, vec![2, 0, 1]);
    }
}
