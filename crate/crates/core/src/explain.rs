//! Model explanations: permutation importance, local linear surrogates, Shapley values
//! and Graphviz export of decision trees.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::{classification_metrics, confusion};
use crate::models::forest::mix_seed;
use crate::models::{ModelArtifact, TreeModel};

pub const MAX_EXACT_FEATURES: usize = 12;
pub const DEFAULT_BACKGROUND_ROWS: usize = 100;

/// Anything that yields a malware probability (or raw score) for a feature row.
pub trait Explainable: Sync {
    fn n_features(&self) -> usize;
    fn predict_one(&self, x: &[f64]) -> f64;
}

impl Explainable for ModelArtifact {
    fn n_features(&self) -> usize {
        ModelArtifact::n_features(self)
    }

    fn predict_one(&self, x: &[f64]) -> f64 {
        self.proba_row(x)[1]
    }
}

/// Adapts a closure to [`Explainable`].
pub struct FnModel<F> {
    pub n_features: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> Explainable for FnModel<F> {
    fn n_features(&self) -> usize {
        self.n_features
    }

    fn predict_one(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

fn predict_all<M: Explainable + ?Sized>(model: &M, x: &Matrix) -> Vec<f64> {
    let d = x.cols().max(1);
    x.as_slice().par_chunks(d).map(|r| model.predict_one(r)).collect()
}

fn check_dim<M: Explainable + ?Sized>(model: &M, d: usize) -> Result<()> {
    if model.n_features() != d {
        return Err(Error::DimensionMismatch {
            expected: model.n_features(),
            actual: d,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMetric {
    #[default]
    Recall,
    Mcc,
    Accuracy,
    F1,
}

impl ImportanceMetric {
    pub fn name(self) -> &'static str {
        match self {
            ImportanceMetric::Recall => "recall",
            ImportanceMetric::Mcc => "mcc",
            ImportanceMetric::Accuracy => "accuracy",
            ImportanceMetric::F1 => "f1",
        }
    }

    fn score(self, y: &[u8], p: &[f64]) -> Result<f64> {
        let pred: Vec<u8> = p.iter().map(|&v| u8::from(v >= 0.5)).collect();
        let m = classification_metrics(&confusion(y, &pred)?);
        Ok(match self {
            ImportanceMetric::Recall => m.recall,
            ImportanceMetric::Mcc => m.mcc,
            ImportanceMetric::Accuracy => m.accuracy,
            ImportanceMetric::F1 => m.f1,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub feature_names: Vec<String>,
    /// Mean metric drop when the column is shuffled; negative values are kept.
    pub importances: Vec<f64>,
    pub std: Vec<f64>,
    pub baseline_score: f64,
    pub repeats: usize,
    pub seed: u64,
    pub metric: String,
}

impl ImportanceReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("feature,importance,std\n");
        for ((n, i), sd) in self.feature_names.iter().zip(&self.importances).zip(&self.std) {
            s.push_str(&format!("{},{i},{sd}\n", csv_field(n)));
        }
        s
    }

    /// Feature indices by decreasing importance (ties by index).
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.importances.len()).collect();
        idx.sort_by(|&a, &b| self.importances[b].total_cmp(&self.importances[a]).then(a.cmp(&b)));
        idx
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn permutation_importance<M: Explainable + ?Sized>(
    model: &M,
    ds: &Dataset,
    metric: ImportanceMetric,
    repeats: usize,
    seed: u64,
) -> Result<ImportanceReport> {
    check_dim(model, ds.n_cols())?;
    if repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    let x = ds.features();
    let y = ds.labels();
    let base = metric.score(y, &predict_all(model, x))?;
    let d = ds.n_cols();
    let per_feature: Vec<Result<(f64, f64)>> = (0..d)
        .into_par_iter()
        .map(|j| {
            let col = x.column(j);
            let mut drops = Vec::with_capacity(repeats);
            let mut xp = x.clone();
            for r in 0..repeats {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, (j * repeats + r) as u64));
                let mut perm = col.clone();
                perm.shuffle(&mut rng);
                for (i, v) in perm.iter().enumerate() {
                    xp.set(i, j, *v);
                }
                let p: Vec<f64> = xp.iter_rows().map(|row| model.predict_one(row)).collect();
                drops.push(base - metric.score(y, &p)?);
            }
            let mean = drops.iter().sum::<f64>() / repeats as f64;
            let var = drops.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / repeats as f64;
            Ok((mean, var.sqrt()))
        })
        .collect();
    let mut importances = Vec::with_capacity(d);
    let mut std = Vec::with_capacity(d);
    for r in per_feature {
        let (m, s) = r?;
        importances.push(m);
        std.push(s);
    }
    Ok(ImportanceReport {
        feature_names: ds.feature_names().to_vec(),
        importances,
        std,
        baseline_score: base,
        repeats,
        seed,
        metric: metric.name().to_string(),
    })
}

/// `n` background rows drawn without replacement (all rows when `n >= rows`).
pub fn sample_background(x: &Matrix, n: usize, seed: u64) -> Matrix {
    if n >= x.rows() {
        return x.clone();
    }
    let mut idx: Vec<usize> = (0..x.rows()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    idx.sort_unstable();
    x.select_rows(&idx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalExplanation {
    pub instance: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub kernel_width: f64,
    pub n_perturbations: usize,
    /// Weighted R² on the perturbation sample; `None` when the model output does not
    /// vary over the sample.
    pub fidelity: Option<f64>,
    pub ridge_applied: bool,
    pub seed: u64,
}

pub fn default_kernel_width(d: usize) -> f64 {
    0.75 * (d as f64).sqrt()
}

fn is_binary(v: f64) -> bool {
    v == 0.0 || v == 1.0
}

pub fn local_surrogate<M: Explainable + ?Sized>(
    model: &M,
    x: &[f64],
    background: &Matrix,
    n_perturbations: usize,
    kernel_width: Option<f64>,
    seed: u64,
) -> Result<LocalExplanation> {
    let d = x.len();
    check_dim(model, d)?;
    background.check_cols(d)?;
    if background.rows() == 0 || n_perturbations == 0 {
        return Err(Error::invalid("need a background sample and at least one perturbation"));
    }
    let width = kernel_width.unwrap_or_else(|| default_kernel_width(d));
    if !(width > 0.0) {
        return Err(Error::invalid("kernel width must be positive"));
    }
    let cols = background.to_column_major();
    let binary: Vec<bool> = cols
        .iter()
        .zip(x)
        .map(|(c, &xv)| is_binary(xv) && c.iter().all(|&v| is_binary(v)))
        .collect();
    let scale: Vec<f64> = cols
        .iter()
        .map(|c| {
            let m = c.iter().sum::<f64>() / c.len() as f64;
            let s = (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / c.len() as f64).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_perturbations * d);
    samples.extend_from_slice(x);
    for _ in 1..n_perturbations {
        for j in 0..d {
            let v = if rng.gen_bool(0.5) {
                if binary[j] {
                    1.0 - x[j]
                } else {
                    cols[j][rng.gen_range(0..background.rows())]
                }
            } else {
                x[j]
            };
            samples.push(v);
        }
    }
    let z = Matrix::from_vec(n_perturbations, d, samples)?;
    let y = predict_all(model, &z);
    let w: Vec<f64> = z
        .iter_rows()
        .map(|row| {
            let d2: f64 = row
                .iter()
                .zip(x)
                .zip(&scale)
                .map(|((a, b), s)| ((a - b) / s).powi(2))
                .sum();
            (-d2 / (width * width)).exp()
        })
        .collect();

    let (beta, ridge_applied) = weighted_least_squares(&z, &y, &w)?;
    let fitted: Vec<f64> = z
        .iter_rows()
        .map(|r| beta[0] + r.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let wsum: f64 = w.iter().sum();
    let ybar = w.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / wsum;
    let ss_tot: f64 = w.iter().zip(&y).map(|(wi, yi)| wi * (yi - ybar).powi(2)).sum();
    let ss_res: f64 = w
        .iter()
        .zip(y.iter().zip(&fitted))
        .map(|(wi, (yi, fi))| wi * (yi - fi).powi(2))
        .sum();
    let fidelity = (ss_tot > 1e-12 * wsum).then(|| 1.0 - ss_res / ss_tot);
    Ok(LocalExplanation {
        instance: x.to_vec(),
        coefficients: beta[1..].to_vec(),
        intercept: beta[0],
        kernel_width: width,
        n_perturbations,
        fidelity,
        ridge_applied,
        seed,
    })
}

/// Solves `min sum w_i (y_i - b0 - z_i.b)^2` through the normal equations, adding a
/// 1e-6 ridge on the slopes when the weighted design is singular.
pub fn weighted_least_squares(z: &Matrix, y: &[f64], w: &[f64]) -> Result<(Vec<f64>, bool)> {
    let (n, d) = (z.rows(), z.cols());
    let p = d + 1;
    let mut xtwx = DMatrix::<f64>::zeros(p, p);
    let mut xtwy = DVector::<f64>::zeros(p);
    let mut row = vec![0.0; p];
    for i in 0..n {
        row[0] = 1.0;
        row[1..].copy_from_slice(z.row(i));
        for a in 0..p {
            xtwy[a] += w[i] * row[a] * y[i];
            for b in 0..p {
                xtwx[(a, b)] += w[i] * row[a] * row[b];
            }
        }
    }
    let solve = |m: DMatrix<f64>| {
        m.cholesky()
            .map(|c| c.solve(&xtwy))
            .filter(|s| s.iter().all(|v| v.is_finite()))
    };
    // a numerically tiny pivot counts as singular
    let max_diag = (0..p).map(|i| xtwx[(i, i)]).fold(0.0, f64::max);
    let well_posed = {
        let eig = xtwx.clone().symmetric_eigenvalues();
        eig.iter().cloned().fold(f64::INFINITY, f64::min) > 1e-10 * max_diag.max(1e-300)
    };
    if well_posed {
        if let Some(s) = solve(xtwx.clone()) {
            return Ok((s.iter().copied().collect(), false));
        }
    }
    log::info!("weighted design is singular; applying ridge damping 1e-6");
    let mut damped = xtwx;
    for i in 1..p {
        damped[(i, i)] += 1e-6;
    }
    damped[(0, 0)] += 1e-12;
    let s = solve(damped).ok_or_else(|| Error::Numerical("surrogate system unsolvable".into()))?;
    Ok((s.iter().copied().collect(), true))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapleyMethod {
    Exact,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub values: Vec<f64>,
    /// Per-feature Monte-Carlo standard error (sampled method only).
    pub std_errors: Option<Vec<f64>>,
    /// Mean model output over the background set.
    pub baseline: f64,
    pub prediction: f64,
    pub method: ShapleyMethod,
    pub n_samples: usize,
    pub seed: Option<u64>,
    /// 95% half-width for the efficiency residual (sampled method only).
    pub efficiency_halfwidth: Option<f64>,
}

impl Attribution {
    pub fn efficiency_residual(&self) -> f64 {
        (self.values.iter().sum::<f64>() - (self.prediction - self.baseline)).abs()
    }

    pub fn to_csv(&self, names: &[String]) -> String {
        let mut s = String::from("feature,shapley,std_error\n");
        for (j, v) in self.values.iter().enumerate() {
            let se = self
                .std_errors
                .as_ref()
                .map(|e| e[j].to_string())
                .unwrap_or_default();
            let name = names.get(j).cloned().unwrap_or_else(|| format!("f{j}"));
            s.push_str(&format!("{},{v},{se}\n", csv_field(&name)));
        }
        s
    }
}

fn baseline<M: Explainable + ?Sized>(model: &M, background: &Matrix) -> f64 {
    predict_all(model, background).iter().sum::<f64>() / background.rows() as f64
}

pub fn shapley_exact<M: Explainable + ?Sized>(model: &M, x: &[f64], background: &Matrix) -> Result<Attribution> {
    let d = x.len();
    check_dim(model, d)?;
    background.check_cols(d)?;
    if d > MAX_EXACT_FEATURES {
        return Err(Error::invalid(format!(
            "exact Shapley enumeration is limited to {MAX_EXACT_FEATURES} features, got {d}"
        )));
    }
    if background.rows() == 0 {
        return Err(Error::invalid("background set is empty"));
    }
    let n_masks = 1usize << d;
    let value: Vec<f64> = (0..n_masks)
        .into_par_iter()
        .map(|mask| {
            let mut z = vec![0.0; d];
            let mut total = 0.0;
            for b in background.iter_rows() {
                for j in 0..d {
                    z[j] = if mask >> j & 1 == 1 { x[j] } else { b[j] };
                }
                total += model.predict_one(&z);
            }
            total / background.rows() as f64
        })
        .collect();
    // weight(|S|) = |S|! (d-|S|-1)! / d!
    let mut weight = vec![0.0; d];
    for (s, w) in weight.iter_mut().enumerate() {
        let mut v = 1.0 / d as f64;
        // 1 / (d * C(d-1, s))
        let mut c = 1.0;
        for i in 0..s {
            c *= (d - 1 - i) as f64 / (i + 1) as f64;
        }
        v /= c;
        *w = v;
    }
    let mut phi = vec![0.0; d];
    for mask in 0..n_masks {
        let size = (mask as u32).count_ones() as usize;
        for (j, p) in phi.iter_mut().enumerate() {
            if mask >> j & 1 == 0 {
                *p += weight[size] * (value[mask | 1 << j] - value[mask]);
            }
        }
    }
    Ok(Attribution {
        values: phi,
        std_errors: None,
        baseline: value[0],
        prediction: model.predict_one(x),
        method: ShapleyMethod::Exact,
        n_samples: n_masks,
        seed: None,
        efficiency_halfwidth: None,
    })
}

pub fn shapley_sampled<M: Explainable + ?Sized>(
    model: &M,
    x: &[f64],
    background: &Matrix,
    n_samples: usize,
    seed: u64,
) -> Result<Attribution> {
    let d = x.len();
    check_dim(model, d)?;
    background.check_cols(d)?;
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be at least 1"));
    }
    if background.rows() == 0 {
        return Err(Error::invalid("background set is empty"));
    }
    // one permutation and one background row per sample
    let draws: Vec<(Vec<f64>, f64)> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
            let mut order: Vec<usize> = (0..d).collect();
            order.shuffle(&mut rng);
            let b = background.row(rng.gen_range(0..background.rows()));
            let mut z = b.to_vec();
            let start = model.predict_one(&z);
            let mut prev = start;
            let mut contrib = vec![0.0; d];
            for &j in &order {
                z[j] = x[j];
                let cur = model.predict_one(&z);
                contrib[j] = cur - prev;
                prev = cur;
            }
            (contrib, start)
        })
        .collect();
    let n = n_samples as f64;
    let mut mean = vec![0.0; d];
    for (c, _) in &draws {
        for j in 0..d {
            mean[j] += c[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for (c, _) in &draws {
        for j in 0..d {
            var[j] += (c[j] - mean[j]).powi(2);
        }
    }
    let denom = (n - 1.0).max(1.0);
    let se: Vec<f64> = var.iter().map(|v| (v / denom).sqrt() / n.sqrt()).collect();
    let start_mean = draws.iter().map(|(_, s)| s).sum::<f64>() / n;
    let start_var = draws.iter().map(|(_, s)| (s - start_mean).powi(2)).sum::<f64>() / denom;
    Ok(Attribution {
        values: mean,
        std_errors: Some(se),
        baseline: baseline(model, background),
        prediction: model.predict_one(x),
        method: ShapleyMethod::Sampled,
        n_samples,
        seed: Some(seed),
        efficiency_halfwidth: Some(1.96 * (start_var / n).sqrt()),
    })
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Graphviz document: one statement per line; edge labels carry the split predicate
/// and leaves carry the malware probability at full precision.
pub fn export_tree(tree: &TreeModel, feature_names: &[String]) -> String {
    let name = |f: usize| {
        feature_names
            .get(f)
            .cloned()
            .unwrap_or_else(|| format!("f{f}"))
    };
    let mut out = String::from("digraph tree {\n  node [shape=box];\n");
    for (i, n) in tree.nodes.iter().enumerate() {
        let samples = n.class_counts[0] + n.class_counts[1];
        match &n.split {
            Some(s) => out.push_str(&format!(
                "  n{i} [label=\"{} <= {}\\nsamples = {samples}\"];\n",
                dot_escape(&name(s.feature)),
                s.threshold
            )),
            None => out.push_str(&format!(
                "  n{i} [label=\"p_malware = {}\\nsamples = {samples}\", shape=ellipse];\n",
                n.proba[1]
            )),
        }
    }
    for (i, n) in tree.nodes.iter().enumerate() {
        if let Some(s) = &n.split {
            let f = dot_escape(&name(s.feature));
            out.push_str(&format!(
                "  n{i} -> n{} [label=\"{f} <= {}\"];\n",
                s.left, s.threshold
            ));
            out.push_str(&format!(
                "  n{i} -> n{} [label=\"{f} > {}\"];\n",
                s.right, s.threshold
            ));
        }
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn additive_model_exact_values() {
        let m = FnModel {
            n_features: 2,
            f: |x: &[f64]| 2.0 * x[0] + 3.0 * x[1],
        };
        let bg = Matrix::zeros(1, 2);
        let a = shapley_exact(&m, &[1.0, 1.0], &bg).unwrap();
        assert!((a.values[0] - 2.0).abs() < 1e-12 && (a.values[1] - 3.0).abs() < 1e-12);
        assert!(a.efficiency_residual() < 1e-12);
    }

    #[test]
    fn exact_guard_on_wide_inputs() {
        let m = FnModel {
            n_features: 13,
            f: |_: &[f64]| 0.0,
        };
        assert!(shapley_exact(&m, &[0.0; 13], &Matrix::zeros(1, 13)).is_err());
    }

    #[test]
    fn surrogate_recovers_linear_model() {
        let m = FnModel {
            n_features: 3,
            f: |x: &[f64]| 0.2 + 0.5 * x[0],
        };
        let bg = Matrix::from_rows(&[[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 0.0, 1.0]]).unwrap();
        let e = local_surrogate(&m, &[1.0, 0.0, 1.0], &bg, 500, None, 3).unwrap();
        assert!((e.coefficients[0] - 0.5).abs() < 0.05);
        assert!(e.coefficients[1].abs() < 0.05 && e.coefficients[2].abs() < 0.05);
        assert!(e.fidelity.unwrap() >= 0.9);
    }

    #[test]
    fn constant_model_has_no_fidelity() {
        let m = FnModel {
            n_features: 2,
            f: |_: &[f64]| 0.3,
        };
        let bg = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let e = local_surrogate(&m, &[1.0, 1.0], &bg, 200, None, 1).unwrap();
        assert!(e.fidelity.is_none());
        assert!(e.coefficients.iter().all(|c| c.abs() < 1e-6));
    }

    #[test]
    fn dot_of_single_leaf() {
        let ds = Dataset::from_matrix(Matrix::zeros(3, 1), vec![1, 1, 1], "t").unwrap();
        let t = crate::models::train_decision_tree(&ds, &Default::default()).unwrap();
        let doc = export_tree(&t, &["a".into()]);
        assert_eq!(doc.lines().filter(|l| l.contains("[label=") && !l.contains("->")).count(), 1);
        assert!(!doc.contains("->"));
    }
}
