//! Fit-then-apply cleaning: imputation, IQR outlier removal, one-hot encoding,
//! duplicate elimination, and the balanced-unique resampling protocol.

use std::collections::{HashMap, HashSet};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{is_missing, Dataset, FeatureKind};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::profiler::row_key;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn is_on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Impute {
    MedianMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierRule {
    Off,
    Iqr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Balance {
    Off,
    UniqueUndersample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub impute: Impute,
    pub outliers: OutlierRule,
    pub iqr_k: f64,
    pub onehot: Switch,
    pub dedupe: Switch,
    pub balance: Balance,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            impute: Impute::MedianMode,
            outliers: OutlierRule::Off,
            iqr_k: 1.5,
            onehot: Switch::Off,
            dedupe: Switch::On,
            balance: Balance::Off,
        }
    }
}

/// Which partition a plan is being applied to. Row removal only happens on training data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Test,
}

/// Fitted treatment of one surviving input column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnPlan {
    Numeric {
        source: usize,
        kind: FeatureKind,
        fill: f64,
        /// Tukey fences when outlier removal is on.
        fences: Option<(f64, f64)>,
    },
    /// Categorical column kept as integer codes over the training levels; code
    /// `levels.len()` is the "other" bucket for unseen values.
    Codes {
        source: usize,
        levels: Vec<String>,
        fill: String,
    },
    OneHot {
        source: usize,
        levels: Vec<String>,
        fill: String,
        /// One name per level plus a trailing "other" column.
        names: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessPlan {
    pub config: PreprocessConfig,
    pub input_names: Vec<String>,
    pub dropped_columns: Vec<String>,
    pub columns: Vec<ColumnPlan>,
    pub output_names: Vec<String>,
    pub output_kinds: Vec<FeatureKind>,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Linear-interpolation quantile over sorted values.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn iqr_fences(values: &[f64], k: f64) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&v, 0.25);
    let q3 = quantile_sorted(&v, 0.75);
    let iqr = q3 - q1;
    (q1 - k * iqr, q3 + k * iqr)
}

/// Most frequent value; ties resolve to the smaller value.
fn mode(values: &[f64]) -> f64 {
    let mut counts: HashMap<u64, (f64, usize)> = HashMap::new();
    for &v in values {
        counts.entry(v.to_bits()).or_insert((v, 0)).1 += 1;
    }
    counts
        .into_values()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.total_cmp(&a.0)))
        .map(|(v, _)| v)
        .expect("non-empty")
}

fn unique_name(base: String, taken: &HashSet<String>) -> String {
    if !taken.contains(&base) {
        return base;
    }
    (1..)
        .map(|i| format!("{base}_{i}"))
        .find(|n| !taken.contains(n))
        .expect("unbounded")
}

pub fn fit_preprocessor(ds: &Dataset, config: &PreprocessConfig) -> Result<PreprocessPlan> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot fit preprocessing on an empty dataset"));
    }
    let x = ds.features();
    let mut taken: HashSet<String> = ds.feature_names().iter().cloned().collect();
    let mut columns = Vec::new();
    let mut dropped = Vec::new();
    let mut output_names = Vec::new();
    let mut output_kinds = Vec::new();

    for c in 0..ds.n_cols() {
        let name = &ds.feature_names()[c];
        let present: Vec<f64> = x.column(c).into_iter().filter(|v| !is_missing(*v)).collect();
        if present.is_empty() {
            warn!("column `{name}` has no observed values; dropped");
            dropped.push(name.clone());
            continue;
        }
        let kind = ds.feature_kinds()[c];
        match kind {
            FeatureKind::Binary | FeatureKind::Numeric => {
                let fill = if kind == FeatureKind::Numeric {
                    median(&mut present.clone())
                } else {
                    mode(&present)
                };
                let fences = (config.outliers == OutlierRule::Iqr && kind == FeatureKind::Numeric)
                    .then(|| iqr_fences(&present, config.iqr_k));
                columns.push(ColumnPlan::Numeric {
                    source: c,
                    kind,
                    fill,
                    fences,
                });
                output_names.push(name.clone());
                output_kinds.push(kind);
            }
            FeatureKind::Categorical => {
                let src_levels = ds.levels(c).expect("categorical column carries levels");
                let fill_code = mode(&present) as usize;
                let fill = src_levels[fill_code].clone();
                let mut used = vec![false; src_levels.len()];
                for &v in &present {
                    used[v as usize] = true;
                }
                let levels: Vec<String> = src_levels
                    .iter()
                    .zip(&used)
                    .filter(|(_, &u)| u)
                    .map(|(l, _)| l.clone())
                    .collect();
                if config.onehot.is_on() {
                    let mut names = Vec::with_capacity(levels.len() + 1);
                    for l in levels.iter().map(String::as_str).chain(["other"]) {
                        let n = unique_name(format!("{name}={l}"), &taken);
                        taken.insert(n.clone());
                        names.push(n);
                    }
                    output_names.extend(names.iter().cloned());
                    output_kinds.extend(std::iter::repeat_n(FeatureKind::Binary, names.len()));
                    columns.push(ColumnPlan::OneHot {
                        source: c,
                        levels,
                        fill,
                        names,
                    });
                } else {
                    output_names.push(name.clone());
                    output_kinds.push(FeatureKind::Categorical);
                    columns.push(ColumnPlan::Codes {
                        source: c,
                        levels,
                        fill,
                    });
                }
            }
        }
    }
    if columns.is_empty() {
        return Err(Error::invalid("every column is entirely missing"));
    }
    Ok(PreprocessPlan {
        config: config.clone(),
        input_names: ds.feature_names().to_vec(),
        dropped_columns: dropped,
        columns,
        output_names,
        output_kinds,
    })
}

impl PreprocessPlan {
    pub fn output_levels(&self) -> Vec<Option<Vec<String>>> {
        let mut out = Vec::with_capacity(self.output_names.len());
        for col in &self.columns {
            match col {
                ColumnPlan::Numeric { .. } => out.push(None),
                ColumnPlan::Codes { levels, .. } => {
                    let mut l = levels.clone();
                    l.push("other".into());
                    out.push(Some(l));
                }
                ColumnPlan::OneHot { names, .. } => out.extend(names.iter().map(|_| None)),
            }
        }
        out
    }

    pub fn apply(&self, ds: &Dataset, partition: Partition) -> Result<Dataset> {
        if ds.feature_names() != self.input_names.as_slice() {
            return Err(Error::invalid(
                "dataset columns do not match the columns the preprocessing plan was fitted on",
            ));
        }
        let n = ds.n_rows();
        let d_out = self.output_names.len();
        let x = ds.features();
        let mut data = Vec::with_capacity(n * d_out);
        let mut keep = vec![true; n];
        let mut unseen = 0usize;

        // translate this dataset's categorical codes to plan codes
        let code_maps: Vec<Option<Vec<usize>>> = self
            .columns
            .iter()
            .map(|col| match col {
                ColumnPlan::Codes { source, levels, .. }
                | ColumnPlan::OneHot { source, levels, .. } => {
                    let src = ds.levels(*source).unwrap_or(&[]);
                    Some(
                        src.iter()
                            .map(|l| levels.iter().position(|p| p == l).unwrap_or(levels.len()))
                            .collect(),
                    )
                }
                ColumnPlan::Numeric { .. } => None,
            })
            .collect();

        for r in 0..n {
            let row = x.row(r);
            for (col, map) in self.columns.iter().zip(&code_maps) {
                match col {
                    ColumnPlan::Numeric {
                        source,
                        fill,
                        fences,
                        ..
                    } => {
                        let v = row[*source];
                        let v = if is_missing(v) { *fill } else { v };
                        if let Some((lo, hi)) = fences {
                            if v < *lo || v > *hi {
                                keep[r] = false;
                            }
                        }
                        data.push(v);
                    }
                    ColumnPlan::Codes {
                        source,
                        levels,
                        fill,
                    }
                    | ColumnPlan::OneHot {
                        source,
                        levels,
                        fill,
                        ..
                    } => {
                        let v = row[*source];
                        let code = if is_missing(v) {
                            levels.iter().position(|l| l == fill).expect("fill is a level")
                        } else {
                            map.as_ref().expect("code map")[v as usize]
                        };
                        if code == levels.len() {
                            unseen += 1;
                        }
                        if matches!(col, ColumnPlan::OneHot { .. }) {
                            let start = data.len();
                            data.extend(std::iter::repeat_n(0.0, levels.len() + 1));
                            data[start + code] = 1.0;
                        } else {
                            data.push(code as f64);
                        }
                    }
                }
            }
        }
        if unseen > 0 {
            warn!("{unseen} cells held categorical levels unseen during fit; routed to `other`");
        }

        let mut rows: Vec<usize> = (0..n).collect();
        if partition == Partition::Train {
            if self.config.outliers == OutlierRule::Iqr {
                rows.retain(|&r| keep[r]);
            }
            if self.config.dedupe.is_on() {
                let mut seen = HashSet::with_capacity(rows.len());
                rows.retain(|&r| seen.insert(row_key(&data[r * d_out..(r + 1) * d_out])));
            }
        }
        let features = if rows.len() == n {
            Matrix::from_vec(n, d_out, data)?
        } else {
            let mut sel = Vec::with_capacity(rows.len() * d_out);
            for &r in &rows {
                sel.extend_from_slice(&data[r * d_out..(r + 1) * d_out]);
            }
            Matrix::from_vec(rows.len(), d_out, sel)?
        };
        let labels = rows.iter().map(|&r| ds.labels()[r]).collect();
        Dataset::with_levels(
            features,
            labels,
            self.output_names.clone(),
            self.output_kinds.clone(),
            self.output_levels(),
            ds.source_id(),
        )
    }
}

pub fn apply_preprocessor(
    plan: &PreprocessPlan,
    ds: &Dataset,
    partition: Partition,
) -> Result<Dataset> {
    plan.apply(ds, partition)
}

/// Row indices kept by the balanced-unique protocol, in ascending order.
pub fn balance_unique_indices(ds: &Dataset, seed: u64) -> Result<Vec<usize>> {
    let counts = ds.class_counts();
    if counts.contains(&0) {
        return Err(Error::invalid("balancing requires both classes to be present"));
    }
    let mut seen = HashSet::with_capacity(ds.n_rows());
    let mut by_class = [Vec::new(), Vec::new()];
    for (r, row) in ds.features().iter_rows().enumerate() {
        if seen.insert(row_key(row)) {
            by_class[ds.labels()[r] as usize].push(r);
        }
    }
    if by_class.iter().any(Vec::is_empty) {
        return Err(Error::invalid("deduplication emptied a class"));
    }
    let target = by_class[0].len().min(by_class[1].len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::with_capacity(2 * target);
    for idx in by_class.iter_mut() {
        if idx.len() > target {
            idx.shuffle(&mut rng);
            idx.truncate(target);
        }
        kept.extend_from_slice(idx);
    }
    kept.sort_unstable();
    Ok(kept)
}

pub fn balance_unique(ds: &Dataset, seed: u64) -> Result<Dataset> {
    Ok(ds.subset(&balance_unique_indices(ds, seed)?))
}

/// 0/1 missingness matrix as CSV, one column per feature.
pub fn missingness_csv(ds: &Dataset) -> String {
    let mut out = ds.feature_names().join(",");
    out.push('\n');
    for row in ds.features().iter_rows() {
        let line: Vec<&str> = row
            .iter()
            .map(|&v| if is_missing(v) { "1" } else { "0" })
            .collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{read_csv, LoadOptions};

    fn numeric(rows: &[[f64; 2]], labels: Vec<u8>) -> Dataset {
        Dataset::from_matrix(Matrix::from_rows(rows).unwrap(), labels, "t").unwrap()
    }

    #[test]
    fn median_imputation() {
        let nan = f64::NAN;
        let ds = numeric(
            &[[1.0, 0.0], [2.0, 1.0], [nan, 1.0], [3.0, 0.0]],
            vec![0, 1, 0, 1],
        );
        let plan = fit_preprocessor(&ds, &PreprocessConfig::default()).unwrap();
        match &plan.columns[0] {
            ColumnPlan::Numeric { fill, .. } => assert_eq!(*fill, 2.0),
            other => panic!("unexpected {other:?}"),
        }
        let out = plan.apply(&ds, Partition::Test).unwrap();
        assert_eq!(out.features().get(2, 0), 2.0);
        // binary column without missing cells passes through unchanged
        assert_eq!(out.features().column(1), ds.features().column(1));
    }

    #[test]
    fn iqr_flags_the_large_value() {
        let values: Vec<f64> = (1..=9).map(f64::from).chain([100.0]).collect();
        let (lo, hi) = iqr_fences(&values, 1.5);
        // numpy-style quartiles on the ten values: q1 = 3.25, q3 = 7.75
        assert!((hi - (7.75 + 1.5 * 4.5)).abs() < 1e-12);
        assert!((lo - (3.25 - 1.5 * 4.5)).abs() < 1e-12);
        let flagged: Vec<f64> = values.iter().copied().filter(|&v| v < lo || v > hi).collect();
        assert_eq!(flagged, vec![100.0]);

        let rows: Vec<[f64; 2]> = values.iter().map(|&v| [v, 0.0]).collect();
        let ds = numeric(&rows, vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
        let cfg = PreprocessConfig {
            outliers: OutlierRule::Iqr,
            ..Default::default()
        };
        let plan = fit_preprocessor(&ds, &cfg).unwrap();
        assert_eq!(plan.apply(&ds, Partition::Train).unwrap().n_rows(), 9);
        // never removes rows from test data
        assert_eq!(plan.apply(&ds, Partition::Test).unwrap().n_rows(), 10);
    }

    #[test]
    fn dedupe_train_only() {
        let ds = numeric(
            &[[1.0, 0.0], [1.0, 0.0], [2.0, 1.0], [2.0, 1.0], [3.0, 1.0]],
            vec![0, 0, 1, 1, 0],
        );
        let plan = fit_preprocessor(&ds, &PreprocessConfig::default()).unwrap();
        assert_eq!(plan.apply(&ds, Partition::Train).unwrap().n_rows(), 3);
        assert_eq!(plan.apply(&ds, Partition::Test).unwrap().n_rows(), 5);

        let ds = numeric(
            &[[1.0, 0.0], [1.0, 0.0], [2.0, 1.0], [5.0, 1.0], [3.0, 1.0]],
            vec![0, 0, 1, 1, 0],
        );
        let distinct: HashSet<Vec<u64>> = ds.features().iter_rows().map(row_key).collect();
        let out = plan.apply(&ds, Partition::Train).unwrap();
        assert_eq!(out.n_rows(), distinct.len());
        assert_eq!(out.n_rows(), 4);
    }

    #[test]
    fn all_missing_column_dropped() {
        let nan = f64::NAN;
        let ds = numeric(&[[nan, 1.0], [nan, 0.0]], vec![0, 1]);
        let plan = fit_preprocessor(&ds, &PreprocessConfig::default()).unwrap();
        assert_eq!(plan.dropped_columns, vec!["f0".to_string()]);
        let out = plan.apply(&ds, Partition::Test).unwrap();
        assert_eq!(out.n_cols(), 1);
    }

    #[test]
    fn one_hot_rows_sum_to_one() {
        let opts = LoadOptions {
            label_column: "y".into(),
            ..Default::default()
        };
        let train = read_csv("c,y\nA,0\nB,1\nA,1\n".as_bytes(), &opts, "t").unwrap();
        let cfg = PreprocessConfig {
            onehot: Switch::On,
            dedupe: Switch::Off,
            ..Default::default()
        };
        let plan = fit_preprocessor(&train, &cfg).unwrap();
        assert_eq!(plan.output_names, vec!["c=A", "c=B", "c=other"]);
        let out = plan.apply(&train, Partition::Train).unwrap();
        for row in out.features().iter_rows() {
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            assert_eq!(row[2], 0.0);
        }
        let test = read_csv("c,y\nC,0\nB,1\n".as_bytes(), &opts, "t").unwrap();
        let out = plan.apply(&test, Partition::Test).unwrap();
        assert_eq!(out.features().row(0), &[0.0, 0.0, 1.0]);
        assert_eq!(out.features().row(1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn categorical_codes_follow_training_levels() {
        let opts = LoadOptions {
            label_column: "y".into(),
            ..Default::default()
        };
        let train = read_csv("c,y\nB,0\nC,1\n".as_bytes(), &opts, "t").unwrap();
        let test = read_csv("c,y\nA,0\nC,1\n".as_bytes(), &opts, "t").unwrap();
        let plan = fit_preprocessor(&train, &PreprocessConfig::default()).unwrap();
        let out = plan.apply(&test, Partition::Test).unwrap();
        // A is unseen -> other bucket (code 2), C is code 1 in training levels
        assert_eq!(out.features().column(0), vec![2.0, 1.0]);
    }

    #[test]
    fn mismatched_columns_rejected() {
        let ds = numeric(&[[1.0, 0.0]], vec![0]);
        let plan = fit_preprocessor(&ds, &PreprocessConfig::default()).unwrap();
        let other = ds.select_columns(&[1]);
        assert!(plan.apply(&other, Partition::Test).is_err());
    }

    #[test]
    fn balance_counts() {
        // 90 majority rows of which 5 repeat an earlier row, 10 unique minority rows
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..85 {
            rows.push([i as f64, 0.0]);
            labels.push(0);
        }
        for i in 0..5 {
            rows.push([i as f64, 0.0]);
            labels.push(0);
        }
        for i in 0..10 {
            rows.push([i as f64, 1.0]);
            labels.push(1);
        }
        let ds = numeric(&rows, labels);
        let out = balance_unique(&ds, 3).unwrap();
        assert_eq!(out.class_counts(), [10, 10]);
        assert_eq!(
            balance_unique_indices(&ds, 3).unwrap(),
            balance_unique_indices(&ds, 3).unwrap()
        );
    }

    #[test]
    fn balance_identity_when_balanced() {
        let ds = numeric(&[[0.0, 0.0], [1.0, 0.0], [2.0, 1.0], [3.0, 1.0]], vec![0, 1, 0, 1]);
        assert_eq!(balance_unique_indices(&ds, 0).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn balance_error_when_class_vanishes() {
        let ds = numeric(&[[0.0, 0.0], [0.0, 0.0]], vec![0, 1]);
        assert!(balance_unique(&ds, 0).is_err());
        let ds = numeric(&[[0.0, 0.0], [1.0, 0.0]], vec![0, 0]);
        assert!(balance_unique(&ds, 0).is_err());
    }
}
