//! Feature engineering: PCA extraction, ANOVA F-test ranking, and LASSO selection.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FeatureKind};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Above this width with fewer rows than columns the Gram-matrix dual form is used.
const GRAM_DUAL_MIN_COLS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Row-major `n_components x n_features`, orthonormal rows.
    pub components: Vec<Vec<f64>>,
    /// Sample-covariance eigenvalues of the kept components.
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    pub n_components: usize,
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

pub fn fit_pca(x: &Matrix, n_components: usize) -> Result<PcaModel> {
    let (n, d) = (x.rows(), x.cols());
    if n < 2 || n_components == 0 || n_components > (n - 1).min(d) {
        return Err(Error::invalid(format!(
            "n_components = {n_components} must be in 1..={} for a {n}x{d} matrix",
            (n.max(1) - 1).min(d)
        )));
    }
    let mean: Vec<f64> = (0..d)
        .map(|c| (0..n).map(|r| x.get(r, c)).sum::<f64>() / n as f64)
        .collect();
    let centered = DMatrix::from_fn(n, d, |r, c| x.get(r, c) - mean[c]);
    let scale = 1.0 / (n as f64 - 1.0);

    let (values, vectors): (Vec<f64>, Vec<Vec<f64>>) = if d > GRAM_DUAL_MIN_COLS && n < d {
        let gram = &centered * centered.transpose() * scale;
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut vals = Vec::new();
        let mut vecs = Vec::new();
        for &i in &order {
            let lambda = eig.eigenvalues[i].max(0.0);
            vals.push(lambda);
            let u = eig.eigenvectors.column(i);
            let mut v: Vec<f64> = (centered.transpose() * u).iter().copied().collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter_mut().for_each(|a| *a /= norm);
            }
            vecs.push(v);
        }
        (vals, vecs)
    } else {
        let cov = centered.transpose() * &centered * scale;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let vals = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let vecs = order
            .iter()
            .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
            .collect();
        (vals, vecs)
    };

    let total: f64 = (0..d)
        .map(|c| centered.column(c).iter().map(|v| v * v).sum::<f64>() * scale)
        .sum();
    if total <= 0.0 {
        return Err(Error::Numerical("PCA input has zero variance".into()));
    }
    let mut components: Vec<Vec<f64>> = vectors.into_iter().take(n_components).collect();
    components.iter_mut().for_each(|c| fix_sign(c));
    let explained_variance: Vec<f64> = values.into_iter().take(n_components).collect();
    let explained_variance_ratio = explained_variance.iter().map(|v| v / total).collect();
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
        explained_variance_ratio,
        n_components,
    })
}

impl PcaModel {
    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        x.check_cols(self.mean.len())?;
        let mut out = Matrix::zeros(x.rows(), self.n_components);
        let mut centered = vec![0.0; self.mean.len()];
        for r in 0..x.rows() {
            for (c, (v, m)) in x.row(r).iter().zip(&self.mean).enumerate() {
                centered[c] = v - m;
            }
            for (k, comp) in self.components.iter().enumerate() {
                out.set(r, k, comp.iter().zip(&centered).map(|(a, b)| a * b).sum());
            }
        }
        Ok(out)
    }

    pub fn inverse_transform(&self, scores: &Matrix) -> Result<Matrix> {
        scores.check_cols(self.n_components)?;
        let d = self.mean.len();
        let mut out = Matrix::zeros(scores.rows(), d);
        for r in 0..scores.rows() {
            let row = out.row_mut(r);
            row.copy_from_slice(&self.mean);
            for (k, comp) in self.components.iter().enumerate() {
                let s = scores.get(r, k);
                for (o, c) in row.iter_mut().zip(comp) {
                    *o += s * c;
                }
            }
        }
        Ok(out)
    }

    pub fn component_names(&self) -> Vec<String> {
        (0..self.n_components).map(|k| format!("pc{}", k + 1)).collect()
    }
}

pub fn transform_pca(model: &PcaModel, x: &Matrix) -> Result<Matrix> {
    model.transform(x)
}

/// Two-group one-way ANOVA F statistic per column. A zero within-group spread with a
/// nonzero between-group spread yields `+inf`; a column with no spread at all yields 0.
pub fn anova_f_scores(x: &Matrix, y: &[u8]) -> Result<Vec<f64>> {
    if x.rows() != y.len() {
        return Err(Error::invalid("feature rows and labels differ in length"));
    }
    let n1 = y.iter().filter(|&&v| v == 1).count();
    let n0 = y.len() - n1;
    if n0 == 0 || n1 == 0 {
        return Err(Error::invalid("ANOVA needs both classes present"));
    }
    let n = y.len() as f64;
    let mut scores = Vec::with_capacity(x.cols());
    for c in 0..x.cols() {
        let (mut s0, mut s1) = (0.0, 0.0);
        for (r, &label) in y.iter().enumerate() {
            if label == 1 {
                s1 += x.get(r, c);
            } else {
                s0 += x.get(r, c);
            }
        }
        let m0 = s0 / n0 as f64;
        let m1 = s1 / n1 as f64;
        let grand = (s0 + s1) / n;
        let ssb = n0 as f64 * (m0 - grand).powi(2) + n1 as f64 * (m1 - grand).powi(2);
        let ssw: f64 = y
            .iter()
            .enumerate()
            .map(|(r, &label)| (x.get(r, c) - if label == 1 { m1 } else { m0 }).powi(2))
            .sum();
        let df_within = n - 2.0;
        // relative guard so that exactly-constant groups are not undone by rounding
        let scale = (m0.abs() + m1.abs()).max(1.0);
        let zero_within = ssw <= 1e-24 * scale * scale * n || df_within <= 0.0;
        let f = if ssb <= 1e-24 * scale * scale * n {
            0.0
        } else if zero_within {
            f64::INFINITY
        } else {
            ssb / (ssw / df_within)
        };
        scores.push(f);
    }
    Ok(scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskProvenance {
    Anova,
    Lasso,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMask {
    pub keep: Vec<bool>,
    pub provenance: MaskProvenance,
}

impl FeatureMask {
    pub fn new(keep: Vec<bool>, provenance: MaskProvenance) -> Result<Self> {
        if !keep.iter().any(|&k| k) {
            return Err(Error::invalid("feature mask keeps no columns"));
        }
        Ok(FeatureMask { keep, provenance })
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter(|(_, &k)| k)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn n_kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Keeps the `k` highest scores; ties go to the lower column index.
pub fn select_k_best(scores: &[f64], k: usize) -> Result<FeatureMask> {
    if k == 0 || k > scores.len() {
        return Err(Error::invalid(format!(
            "k = {k} out of range 1..={}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = vec![false; scores.len()];
    for &i in &order[..k] {
        keep[i] = true;
    }
    FeatureMask::new(keep, MaskProvenance::Anova)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoModel {
    /// Coefficients in standardized coordinates.
    pub coef: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub x_mean: Vec<f64>,
    /// Population standard deviation per column; 0 for constant columns.
    pub x_scale: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value after each full sweep.
    pub objective_trace: Vec<f64>,
    /// Max KKT violation at the returned solution.
    pub kkt_residual: f64,
}

impl LassoModel {
    /// Coefficients and intercept on the original feature scale.
    pub fn original_scale(&self) -> (Vec<f64>, f64) {
        let coef: Vec<f64> = self
            .coef
            .iter()
            .zip(&self.x_scale)
            .map(|(b, s)| if *s > 0.0 { b / s } else { 0.0 })
            .collect();
        let shift: f64 = coef.iter().zip(&self.x_mean).map(|(b, m)| b * m).sum();
        (coef, self.intercept - shift)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        x.check_cols(self.coef.len())?;
        let (coef, b0) = self.original_scale();
        Ok(x
            .iter_rows()
            .map(|row| b0 + row.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>())
            .collect())
    }
}

#[inline]
pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

struct Standardized {
    /// Column-major standardized design.
    cols: Vec<Vec<f64>>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    y: Vec<f64>,
    y_mean: f64,
}

fn standardize(x: &Matrix, y: &[f64]) -> Result<Standardized> {
    let n = x.rows();
    if n == 0 || n != y.len() {
        return Err(Error::invalid("LASSO needs matching, non-empty X and y"));
    }
    if x.as_slice().iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("LASSO input contains non-finite values".into()));
    }
    let mut cols = x.to_column_major();
    let mut mean = Vec::with_capacity(cols.len());
    let mut scale = Vec::with_capacity(cols.len());
    for col in cols.iter_mut() {
        let m = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
        let s = var.sqrt();
        let s = if s > 1e-12 * m.abs().max(1.0) { s } else { 0.0 };
        for v in col.iter_mut() {
            *v = if s > 0.0 { (*v - m) / s } else { 0.0 };
        }
        mean.push(m);
        scale.push(s);
    }
    let y_mean = y.iter().sum::<f64>() / n as f64;
    Ok(Standardized {
        cols,
        mean,
        scale,
        y: y.iter().map(|v| v - y_mean).collect(),
        y_mean,
    })
}

/// Smallest lambda at which every coefficient is zero: `max_j |x_j' y| / n` after standardizing.
pub fn lambda_max(x: &Matrix, y: &[f64]) -> Result<f64> {
    let s = standardize(x, y)?;
    let n = y.len() as f64;
    Ok(s.cols
        .iter()
        .map(|c| (c.iter().zip(&s.y).map(|(a, b)| a * b).sum::<f64>() / n).abs())
        .fold(0.0, f64::max))
}

fn objective(residual: &[f64], coef: &[f64], lambda: f64) -> f64 {
    let n = residual.len() as f64;
    0.5 * residual.iter().map(|r| r * r).sum::<f64>() / n
        + lambda * coef.iter().map(|b| b.abs()).sum::<f64>()
}

/// Cyclic coordinate descent on `1/(2n) ||y - Xb||^2 + lambda ||b||_1` over standardized columns.
pub fn fit_lasso(x: &Matrix, y: &[f64], lambda: f64, tol: f64, max_iter: usize) -> Result<LassoModel> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda = {lambda} must be >= 0")));
    }
    let s = standardize(x, y)?;
    let n = y.len() as f64;
    let d = s.cols.len();
    let mut coef = vec![0.0; d];
    let mut residual = s.y.clone();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..d {
            if s.scale[j] == 0.0 {
                continue;
            }
            let col = &s.cols[j];
            let old = coef[j];
            // columns have unit mean square, so the partial-residual correlation is grad + old
            let rho = col.iter().zip(&residual).map(|(a, r)| a * r).sum::<f64>() / n + old;
            let new = soft_threshold(rho, lambda);
            if new != old {
                let delta = new - old;
                for (r, a) in residual.iter_mut().zip(col) {
                    *r -= delta * a;
                }
                coef[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        trace.push(objective(&residual, &coef, lambda));
        if max_change < tol {
            converged = true;
            break;
        }
    }

    let kkt_residual = (0..d)
        .filter(|&j| s.scale[j] > 0.0)
        .map(|j| {
            let grad = -s.cols[j].iter().zip(&residual).map(|(a, r)| a * r).sum::<f64>() / n;
            if coef[j] != 0.0 {
                (grad + lambda * coef[j].signum()).abs()
            } else {
                (grad.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max);

    Ok(LassoModel {
        coef,
        intercept: s.y_mean,
        lambda,
        x_mean: s.mean,
        x_scale: s.scale,
        iterations,
        converged,
        objective_trace: trace,
        kkt_residual,
    })
}

/// Keeps columns with `|coef| > abs_threshold`; falls back to the single largest
/// coefficient (lowest index among ties) when nothing survives.
pub fn lasso_select(model: &LassoModel, abs_threshold: f64) -> FeatureMask {
    let mut keep: Vec<bool> = model.coef.iter().map(|b| b.abs() > abs_threshold).collect();
    if !keep.iter().any(|&k| k) && !keep.is_empty() {
        let mut best = 0;
        for (i, b) in model.coef.iter().enumerate() {
            if b.abs() > model.coef[best].abs() {
                best = i;
            }
        }
        keep[best] = true;
    }
    FeatureMask {
        keep,
        provenance: MaskProvenance::Lasso,
    }
}

/// The `points`-long logarithmic lambda grid used for automatic selection, largest first.
pub fn lambda_grid(lambda_max: f64, points: usize) -> Vec<f64> {
    // half-decade steps from lambda_max / 10 downwards
    (0..points)
        .map(|i| lambda_max * 10f64.powf(-1.0 - 0.5 * i as f64))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMethod {
    Lasso,
    Anova,
    Pca,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaSetting {
    Fixed(f64),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoTag {
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub method: FeatureMethod,
    pub k: usize,
    pub n_components: usize,
    pub lambda: LambdaSetting,
    pub tol: f64,
    pub max_iter: usize,
    pub abs_threshold: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            method: FeatureMethod::Lasso,
            k: 20,
            n_components: 10,
            lambda: LambdaSetting::Auto(AutoTag::Auto),
            tol: 1e-6,
            max_iter: 10_000,
            abs_threshold: 0.0,
        }
    }
}

/// Fitted, replayable feature-engineering step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeaturePlan {
    Identity,
    Mask {
        mask: FeatureMask,
        /// Score per input column (F statistic or standardized coefficient).
        scores: Vec<f64>,
        lambda: Option<f64>,
    },
    Pca { model: PcaModel },
}

impl FeaturePlan {
    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        match self {
            FeaturePlan::Identity => Ok(ds.clone()),
            FeaturePlan::Mask { mask, .. } => {
                if mask.keep.len() != ds.n_cols() {
                    return Err(Error::DimensionMismatch {
                        expected: mask.keep.len(),
                        actual: ds.n_cols(),
                    });
                }
                Ok(ds.select_columns(&mask.kept_indices()))
            }
            FeaturePlan::Pca { model } => {
                let scores = model.transform(ds.features())?;
                ds.replace_features(
                    scores,
                    model.component_names(),
                    vec![FeatureKind::Numeric; model.n_components],
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaCandidate {
    pub lambda: f64,
    pub n_kept: usize,
    pub validation_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFit {
    pub plan: FeaturePlan,
    /// Grid evaluated when the LASSO penalty is chosen automatically.
    pub lambda_search: Vec<LambdaCandidate>,
    /// Standardized coefficients of the final LASSO fit.
    pub lasso: Option<LassoModel>,
}

const AUTO_LAMBDA_POINTS: usize = 5;

fn labels_f64(ds: &Dataset) -> Vec<f64> {
    ds.labels().iter().map(|&y| y as f64).collect()
}

/// Picks the penalty on `lambda_grid(lambda_max, 5)` whose selection gives the best
/// validation recall for a default decision tree on an inner stratified split.
/// Ties go to the larger penalty.
fn auto_lambda(train: &Dataset, cfg: &FeatureConfig, seed: u64) -> Result<(f64, Vec<LambdaCandidate>)> {
    let split = crate::dataset::split_holdout(train, 0.75, seed, true)?;
    let inner = train.subset(&split.train_indices);
    let val = train.subset(&split.test_indices);
    let y = labels_f64(&inner);
    let lmax = lambda_max(inner.features(), &y)?;
    if lmax == 0.0 {
        return Ok((0.0, Vec::new()));
    }
    let mut out = Vec::with_capacity(AUTO_LAMBDA_POINTS);
    let mut best: Option<(f64, f64)> = None;
    for lambda in lambda_grid(lmax, AUTO_LAMBDA_POINTS) {
        let model = fit_lasso(inner.features(), &y, lambda, cfg.tol, cfg.max_iter)?;
        let mask = lasso_select(&model, cfg.abs_threshold);
        let cols = mask.kept_indices();
        let tree = crate::models::train_decision_tree(
            &inner.select_columns(&cols),
            &crate::models::TreeParams::default(),
        )?;
        let vx = val.features().select_cols(&cols);
        let pred: Vec<u8> = vx
            .iter_rows()
            .map(|r| crate::models::hard_label(tree.proba_row(r)))
            .collect();
        let rec = crate::metrics::recall(&crate::metrics::confusion(val.labels(), &pred)?);
        if best.is_none_or(|(_, r)| rec > r) {
            best = Some((lambda, rec));
        }
        out.push(LambdaCandidate {
            lambda,
            n_kept: cols.len(),
            validation_recall: rec,
        });
    }
    Ok((best.unwrap().0, out))
}

/// Fits the configured feature step on training data only.
pub fn fit_feature_plan(train: &Dataset, cfg: &FeatureConfig, seed: u64) -> Result<FeatureFit> {
    if train.is_empty() || train.n_cols() == 0 {
        return Err(Error::invalid("feature selection needs a non-empty training set"));
    }
    let d = train.n_cols();
    Ok(match cfg.method {
        FeatureMethod::None => FeatureFit {
            plan: FeaturePlan::Identity,
            lambda_search: Vec::new(),
            lasso: None,
        },
        FeatureMethod::Anova => {
            let scores = anova_f_scores(train.features(), train.labels())?;
            let mask = select_k_best(&scores, cfg.k.clamp(1, d))?;
            FeatureFit {
                plan: FeaturePlan::Mask {
                    mask,
                    scores,
                    lambda: None,
                },
                lambda_search: Vec::new(),
                lasso: None,
            }
        }
        FeatureMethod::Pca => {
            let n = cfg.n_components.clamp(1, d.min(train.n_rows().saturating_sub(1)).max(1));
            FeatureFit {
                plan: FeaturePlan::Pca {
                    model: fit_pca(train.features(), n)?,
                },
                lambda_search: Vec::new(),
                lasso: None,
            }
        }
        FeatureMethod::Lasso => {
            let (lambda, search) = match cfg.lambda {
                LambdaSetting::Fixed(l) => (l, Vec::new()),
                LambdaSetting::Auto(_) => auto_lambda(train, cfg, seed)?,
            };
            let model = fit_lasso(train.features(), &labels_f64(train), lambda, cfg.tol, cfg.max_iter)?;
            let mask = lasso_select(&model, cfg.abs_threshold);
            FeatureFit {
                plan: FeaturePlan::Mask {
                    mask,
                    scores: model.coef.clone(),
                    lambda: Some(lambda),
                },
                lambda_search: search,
                lasso: Some(model),
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn pca_diagonal_points() {
        let x = Matrix::from_rows(&[[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]).unwrap();
        let m = fit_pca(&x, 1).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert!(close(m.components[0][0], h, 1e-12) && close(m.components[0][1], h, 1e-12));
        assert!(close(m.explained_variance_ratio[0], 1.0, 1e-12));
        // covariance [[1,1],[1,1]] has eigenvalues 2 and 0
        assert!(close(m.explained_variance[0], 2.0, 1e-12));
    }

    #[test]
    fn pca_diagonal_scores() {
        let x = Matrix::from_rows(&[[1.0, 1.0], [3.0, 3.0]]).unwrap();
        let m = fit_pca(&x, 1).unwrap();
        let s = m.transform(&x).unwrap();
        let r2 = 2f64.sqrt();
        assert!(close(s.get(0, 0), -r2, 1e-12) && close(s.get(1, 0), r2, 1e-12));
        let at_mean = m.transform(&Matrix::from_rows(&[[2.0, 2.0]]).unwrap()).unwrap();
        assert!(close(at_mean.get(0, 0), 0.0, 1e-12));
    }

    #[test]
    fn pca_axis_aligned() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [4.0, 0.0], [0.0, 1.0], [4.0, 1.0]]).unwrap();
        let m = fit_pca(&x, 2).unwrap();
        assert!(close(m.components[0][0].abs(), 1.0, 1e-12));
        assert!(close(m.components[1][1].abs(), 1.0, 1e-12));
        assert!(m.components[0][0] > 0.0);
    }

    #[test]
    fn pca_errors() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        assert!(fit_pca(&x, 1).is_err());
        let y = Matrix::from_rows(&[[1.0, 2.0], [2.0, 0.0]]).unwrap();
        assert!(fit_pca(&y, 2).is_err());
        let m = fit_pca(&y, 1).unwrap();
        assert!(m.transform(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn anova_hand_case() {
        let x = Matrix::from_vec(6, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let f = anova_f_scores(&x, &[0, 0, 0, 1, 1, 1]).unwrap();
        assert!(close(f[0], 13.5, 1e-12));
    }

    #[test]
    fn anova_edge_values() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [2.0, 2.0], [1.0, 5.0], [2.0, 5.0]]).unwrap();
        let f = anova_f_scores(&x, &[0, 0, 1, 1]).unwrap();
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], f64::INFINITY);
        let mask = select_k_best(&f, 1).unwrap();
        assert_eq!(mask.keep, vec![false, true]);
        assert!(anova_f_scores(&x, &[1, 1, 1, 1]).is_err());
    }

    #[test]
    fn k_best_cases() {
        assert_eq!(select_k_best(&[0.1, 13.5, 2.0], 1).unwrap().keep, vec![false, true, false]);
        assert!(select_k_best(&[0.1, 13.5, 2.0], 3).unwrap().keep.iter().all(|&k| k));
        assert_eq!(select_k_best(&[5.0, 5.0], 1).unwrap().keep, vec![true, false]);
        assert!(select_k_best(&[1.0], 0).is_err());
        assert!(select_k_best(&[1.0], 2).is_err());
    }

    #[test]
    fn lasso_single_feature_soft_threshold() {
        // standardized x = (+1, -1, +1, -1); y chosen so x'y/n = 0.8 with mean zero
        let x = Matrix::from_vec(4, 1, vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let y = [0.8, -0.8, 0.8, -0.8];
        let m = fit_lasso(&x, &y, 0.3, 1e-12, 100).unwrap();
        assert!(close(m.coef[0], soft_threshold(0.8, 0.3), 1e-12));
        assert!(close(m.coef[0], 0.5, 1e-12));
        assert!(m.converged);
    }

    #[test]
    fn lasso_kill_condition() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0], [1.0, 0.5]]).unwrap();
        let y = [1.0, 0.0, 1.0, 0.0, 1.0];
        let lmax = lambda_max(&x, &y).unwrap();
        let m = fit_lasso(&x, &y, lmax, 1e-9, 1000).unwrap();
        assert!(m.coef.iter().all(|&b| b == 0.0));
        let sel = lasso_select(&m, 0.0);
        assert_eq!(sel.keep, vec![true, false]);
    }

    #[test]
    fn lasso_constant_column_gets_zero() {
        let x = Matrix::from_rows(&[[1.0, 3.0], [2.0, 3.0], [3.0, 3.0], [4.0, 3.0]]).unwrap();
        let m = fit_lasso(&x, &[1.0, 2.0, 3.0, 5.0], 0.01, 1e-10, 1000).unwrap();
        assert_eq!(m.x_scale[1], 0.0);
        assert_eq!(m.coef[1], 0.0);
    }

    #[test]
    fn lasso_select_threshold() {
        let m = LassoModel {
            coef: vec![0.0, 0.5, -0.2],
            intercept: 0.0,
            lambda: 0.1,
            x_mean: vec![0.0; 3],
            x_scale: vec![1.0; 3],
            iterations: 1,
            converged: true,
            objective_trace: vec![],
            kkt_residual: 0.0,
        };
        assert_eq!(lasso_select(&m, 0.0).keep, vec![false, true, true]);
    }

    #[test]
    fn lasso_rejects_bad_input() {
        let x = Matrix::from_rows(&[[f64::NAN], [1.0]]).unwrap();
        assert!(fit_lasso(&x, &[0.0, 1.0], 0.1, 1e-6, 10).is_err());
        let x = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        assert!(fit_lasso(&x, &[0.0, 1.0], -1.0, 1e-6, 10).is_err());
        let m = fit_lasso(&x, &[0.0, 1.0], 0.0, 0.0, 3).unwrap();
        assert!(!m.converged);
        assert_eq!(m.iterations, 3);
    }

    #[test]
    fn lambda_grid_is_logarithmic() {
        let g = lambda_grid(1.0, 5);
        assert_eq!(g.len(), 5);
        for w in g.windows(2) {
            assert!(close(w[0] / w[1], 10f64.sqrt(), 1e-12));
        }
    }

    #[test]
    fn lambda_setting_parses() {
        #[derive(Deserialize)]
        struct W {
            lambda: LambdaSetting,
        }
        let a: W = toml::from_str("lambda = \"auto\"").unwrap();
        let b: W = toml::from_str("lambda = 0.25").unwrap();
        assert_eq!(a.lambda, LambdaSetting::Auto(AutoTag::Auto));
        assert_eq!(b.lambda, LambdaSetting::Fixed(0.25));
    }
}
