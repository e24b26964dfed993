//! CSV ingestion, the [`Dataset`] abstraction, and deterministic holdout / k-fold plans.
//!
//! Missing cells are stored as `NaN` inside the feature matrix. Imputation is the
//! preprocessing stage's responsibility; nothing here substitutes values.

use std::collections::{BTreeSet, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_LABEL_COLUMN: &str = "class";

/// Returns `true` for the missing-cell marker.
#[inline]
pub fn is_missing(v: f64) -> bool {
    v.is_nan()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Binary,
    Numeric,
    /// String levels stored as integer codes indexing [`Dataset::levels`].
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<u8>,
    feature_names: Vec<String>,
    feature_kinds: Vec<FeatureKind>,
    /// Level names for categorical columns, `None` elsewhere.
    levels: Vec<Option<Vec<String>>>,
    source_id: String,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Vec<u8>,
        feature_names: Vec<String>,
        feature_kinds: Vec<FeatureKind>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let levels = vec![None; feature_names.len()];
        Self::with_levels(
            features,
            labels,
            feature_names,
            feature_kinds,
            levels,
            source_id,
        )
    }

    pub fn with_levels(
        features: Matrix,
        labels: Vec<u8>,
        feature_names: Vec<String>,
        feature_kinds: Vec<FeatureKind>,
        levels: Vec<Option<Vec<String>>>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        let d = features.cols();
        if feature_names.len() != d || feature_kinds.len() != d || levels.len() != d {
            return Err(Error::invalid(format!(
                "metadata length mismatch: {d} columns, {} names, {} kinds",
                feature_names.len(),
                feature_kinds.len()
            )));
        }
        let mut seen = HashSet::with_capacity(d);
        for n in &feature_names {
            if !seen.insert(n.as_str()) {
                return Err(Error::invalid(format!("duplicate feature name `{n}`")));
            }
        }
        if let Some(bad) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::invalid(format!("label {bad} is not 0 or 1")));
        }
        Ok(Dataset {
            features,
            labels,
            feature_names,
            feature_kinds,
            levels,
            source_id: source_id.into(),
        })
    }

    /// Numeric dataset with kinds inferred from the values.
    pub fn from_matrix(features: Matrix, labels: Vec<u8>, source_id: &str) -> Result<Self> {
        let names = (0..features.cols()).map(|j| format!("f{j}")).collect();
        let kinds = infer_kinds(&features);
        Dataset::new(features, labels, names, kinds, source_id)
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }
    pub fn feature_kinds(&self) -> &[FeatureKind] {
        &self.feature_kinds
    }
    pub fn levels(&self, col: usize) -> Option<&[String]> {
        self.levels[col].as_deref()
    }
    pub fn source_id(&self) -> &str {
        &self.source_id
    }
    pub fn n_rows(&self) -> usize {
        self.features.rows()
    }
    pub fn n_cols(&self) -> usize {
        self.features.cols()
    }
    pub fn is_empty(&self) -> bool {
        self.n_rows() == 0
    }

    /// `[benign, malware]` counts.
    pub fn class_counts(&self) -> [usize; 2] {
        let ones = self.labels.iter().filter(|&&y| y == 1).count();
        [self.labels.len() - ones, ones]
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            feature_names: self.feature_names.clone(),
            feature_kinds: self.feature_kinds.clone(),
            levels: self.levels.clone(),
            source_id: self.source_id.clone(),
        }
    }

    pub fn select_columns(&self, cols: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_cols(cols),
            labels: self.labels.clone(),
            feature_names: cols.iter().map(|&c| self.feature_names[c].clone()).collect(),
            feature_kinds: cols.iter().map(|&c| self.feature_kinds[c]).collect(),
            levels: cols.iter().map(|&c| self.levels[c].clone()).collect(),
            source_id: self.source_id.clone(),
        }
    }

    pub fn with_source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }

    /// Replaces the feature matrix, keeping labels; used after projections.
    pub fn replace_features(
        &self,
        features: Matrix,
        names: Vec<String>,
        kinds: Vec<FeatureKind>,
    ) -> Result<Dataset> {
        let levels = vec![None; names.len()];
        Dataset::with_levels(
            features,
            self.labels.clone(),
            names,
            kinds,
            levels,
            self.source_id.clone(),
        )
    }

    /// Writes the dataset as CSV with the label in a trailing column.
    pub fn write_csv<W: Write>(&self, out: W, label_column: &str) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        header.push(label_column);
        w.write_record(&header)?;
        let mut rec: Vec<String> = Vec::with_capacity(self.n_cols() + 1);
        for (r, row) in self.features.iter_rows().enumerate() {
            rec.clear();
            for (c, &v) in row.iter().enumerate() {
                rec.push(if is_missing(v) {
                    String::new()
                } else if let Some(levels) = &self.levels[c] {
                    levels[v as usize].clone()
                } else {
                    format!("{v}")
                });
            }
            rec.push(self.labels[r].to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

pub(crate) fn infer_kinds(m: &Matrix) -> Vec<FeatureKind> {
    (0..m.cols())
        .map(|c| {
            let binary = (0..m.rows())
                .map(|r| m.get(r, c))
                .filter(|v| !is_missing(*v))
                .all(|v| v == 0.0 || v == 1.0);
            if binary {
                FeatureKind::Binary
            } else {
                FeatureKind::Numeric
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadOptions {
    pub label_column: String,
    /// Raw label value that denotes malware. When absent, `0`/`1` labels are taken
    /// literally and otherwise the lexicographically greatest of two values wins.
    pub positive_label: Option<String>,
    /// Reject non-numeric cells instead of encoding the column as categorical.
    pub strict: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            label_column: DEFAULT_LABEL_COLUMN.to_string(),
            positive_label: None,
            strict: false,
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let source = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_csv(file, opts, &source)
}

fn is_missing_token(s: &str) -> bool {
    matches!(s, "" | "?" | "NA" | "N/A" | "NaN" | "nan" | "null" | "NULL")
}

pub fn read_csv<R: Read>(input: R, opts: &LoadOptions, source_id: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::invalid("empty file: no header row"));
    }
    let label_idx = headers
        .iter()
        .position(|h| h == opts.label_column)
        .ok_or_else(|| {
            Error::invalid(format!("label column `{}` not found", opts.label_column))
        })?;
    let names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_idx)
        .map(|(_, h)| h.to_string())
        .collect();
    let d = names.len();

    let mut raw: Vec<Vec<String>> = vec![Vec::new(); d];
    let mut raw_labels = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(Error::Parse {
                line: line + 2,
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        let mut c = 0;
        for (i, cell) in rec.iter().enumerate() {
            if i == label_idx {
                if is_missing_token(cell) {
                    return Err(Error::Parse {
                        line: line + 2,
                        message: "missing label".into(),
                    });
                }
                raw_labels.push(cell.to_string());
            } else {
                raw[c].push(cell.to_string());
                c += 1;
            }
        }
    }
    let n = raw_labels.len();
    if n == 0 {
        return Err(Error::invalid("empty file: no data rows"));
    }

    let labels = map_labels(&raw_labels, opts.positive_label.as_deref())?;

    let mut data = vec![0.0; n * d];
    let mut kinds = Vec::with_capacity(d);
    let mut levels = Vec::with_capacity(d);
    for (c, column) in raw.iter().enumerate() {
        let parsed: Vec<Option<f64>> = column
            .iter()
            .map(|s| {
                if is_missing_token(s) {
                    Some(f64::NAN)
                } else {
                    s.parse::<f64>().ok()
                }
            })
            .collect();
        if let Some(bad_row) = parsed.iter().position(Option::is_none) {
            if opts.strict {
                return Err(Error::Parse {
                    line: bad_row + 2,
                    message: format!(
                        "non-numeric cell `{}` in column `{}`",
                        column[bad_row], names[c]
                    ),
                });
            }
            let distinct: BTreeSet<&str> = column
                .iter()
                .map(String::as_str)
                .filter(|s| !is_missing_token(s))
                .collect();
            let lv: Vec<String> = distinct.into_iter().map(str::to_string).collect();
            for (r, s) in column.iter().enumerate() {
                data[r * d + c] = if is_missing_token(s) {
                    f64::NAN
                } else {
                    lv.binary_search(s).expect("level present") as f64
                };
            }
            kinds.push(FeatureKind::Categorical);
            levels.push(Some(lv));
        } else {
            let mut binary = true;
            for (r, v) in parsed.into_iter().enumerate() {
                let v = v.expect("checked");
                if !is_missing(v) && v != 0.0 && v != 1.0 {
                    binary = false;
                }
                data[r * d + c] = v;
            }
            kinds.push(if binary {
                FeatureKind::Binary
            } else {
                FeatureKind::Numeric
            });
            levels.push(None);
        }
    }

    Dataset::with_levels(
        Matrix::from_vec(n, d, data)?,
        labels,
        names,
        kinds,
        levels,
        source_id,
    )
}

fn map_labels(raw: &[String], positive: Option<&str>) -> Result<Vec<u8>> {
    let distinct: BTreeSet<&str> = raw.iter().map(String::as_str).collect();
    if distinct.len() > 2 {
        return Err(Error::invalid(format!(
            "label column has {} distinct values; exactly two are required",
            distinct.len()
        )));
    }
    if let Some(pos) = positive {
        return Ok(raw.iter().map(|v| u8::from(v == pos)).collect());
    }
    let numeric: Option<Vec<u8>> = raw
        .iter()
        .map(|v| match v.parse::<f64>() {
            Ok(x) if x == 0.0 => Some(0),
            Ok(x) if x == 1.0 => Some(1),
            _ => None,
        })
        .collect();
    if let Some(labels) = numeric {
        return Ok(labels);
    }
    if distinct.len() < 2 {
        return Err(Error::invalid(
            "single non-numeric label value; set the positive label explicitly",
        ));
    }
    let positive = *distinct.iter().next_back().expect("two values");
    Ok(raw.iter().map(|v| u8::from(v == positive)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub seed: u64,
    pub ratio: f64,
    pub stratified: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub fold_assignments: Vec<usize>,
    pub seed: u64,
    pub stratified: bool,
}

impl FoldPlan {
    /// `(train, validation)` row indices for fold `f`.
    pub fn fold(&self, f: usize) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut valid = Vec::new();
        for (i, &a) in self.fold_assignments.iter().enumerate() {
            if a == f {
                valid.push(i);
            } else {
                train.push(i);
            }
        }
        (train, valid)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.fold_assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

fn class_indices(labels: &[u8]) -> [Vec<usize>; 2] {
    let mut out = [Vec::new(), Vec::new()];
    for (i, &y) in labels.iter().enumerate() {
        out[y as usize].push(i);
    }
    out
}

/// Per-class train quotas summing to `total`, each within one sample of `ratio * n_c`
/// (largest-remainder apportionment; ties go to the lower class).
fn apportion(counts: [usize; 2], ratio: f64, total: usize) -> [usize; 2] {
    let exact = [counts[0] as f64 * ratio, counts[1] as f64 * ratio];
    let mut quota = [exact[0].floor() as usize, exact[1].floor() as usize];
    let mut order = [0usize, 1];
    order.sort_by(|&a, &b| {
        let ra = exact[a] - quota[a] as f64;
        let rb = exact[b] - quota[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut remaining = total.saturating_sub(quota[0] + quota[1]);
    for &c in order.iter().cycle().take(4) {
        if remaining == 0 {
            break;
        }
        if quota[c] < counts[c] {
            quota[c] += 1;
            remaining -= 1;
        }
    }
    quota
}

pub fn split_holdout(ds: &Dataset, ratio: f64, seed: u64, stratified: bool) -> Result<SplitPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio {ratio} not in (0, 1)")));
    }
    let n = ds.n_rows();
    let n_train = (ratio * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::invalid(format!(
            "ratio {ratio} on {n} rows leaves an empty partition"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n - n_train);
    if stratified {
        let mut by_class = class_indices(ds.labels());
        let counts = [by_class[0].len(), by_class[1].len()];
        if counts.contains(&0) {
            return Err(Error::invalid(
                "stratified split requires both classes to be present",
            ));
        }
        let quota = apportion(counts, ratio, n_train);
        for (c, idx) in by_class.iter_mut().enumerate() {
            idx.shuffle(&mut rng);
            train.extend_from_slice(&idx[..quota[c]]);
            test.extend_from_slice(&idx[quota[c]..]);
        }
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitPlan {
        train_indices: train,
        test_indices: test,
        seed,
        ratio,
        stratified,
    })
}

pub fn kfold_plan(ds: &Dataset, k: usize, seed: u64, stratified: bool) -> Result<FoldPlan> {
    let n = ds.n_rows();
    if k < 2 {
        return Err(Error::invalid(format!("k = {k}; at least 2 folds required")));
    }
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds {n} rows")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order: Vec<usize> = if stratified {
        let mut by_class = class_indices(ds.labels());
        let min = by_class[0].len().min(by_class[1].len());
        if k > min {
            return Err(Error::invalid(format!(
                "k = {k} exceeds the minority class count {min}"
            )));
        }
        by_class[0].shuffle(&mut rng);
        by_class[1].shuffle(&mut rng);
        by_class.concat()
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx
    };
    let mut fold_assignments = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        fold_assignments[row] = pos % k;
    }
    Ok(FoldPlan {
        k,
        fold_assignments,
        seed,
        stratified,
    })
}
