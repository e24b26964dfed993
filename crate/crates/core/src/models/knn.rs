//! k-nearest-neighbour classifier.
//!
//! On all-binary training data rows are also kept as packed bit vectors so Hamming
//! distances reduce to popcounts. Squared Euclidean distance equals Hamming distance on
//! `{0,1}` vectors, so both metrics share that path.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnMetric {
    Euclidean,
    Hamming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnnParams {
    pub k: usize,
    pub metric: KnnMetric,
}

impl Default for KnnParams {
    fn default() -> Self {
        KnnParams {
            k: 5,
            metric: KnnMetric::Euclidean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "KnnStored", into = "KnnStored")]
pub struct KnnModel {
    pub params: KnnParams,
    pub train: Matrix,
    pub labels: Vec<u8>,
    packed: Option<Vec<u64>>,
}

#[derive(Serialize, Deserialize)]
struct KnnStored {
    params: KnnParams,
    train: Matrix,
    labels: Vec<u8>,
}

impl From<KnnStored> for KnnModel {
    fn from(s: KnnStored) -> Self {
        KnnModel::assemble(s.params, s.train, s.labels)
    }
}

impl From<KnnModel> for KnnStored {
    fn from(m: KnnModel) -> Self {
        KnnStored {
            params: m.params,
            train: m.train,
            labels: m.labels,
        }
    }
}

fn words_per_row(d: usize) -> usize {
    d.div_ceil(64)
}

fn pack_row(row: &[f64], out: &mut [u64]) -> bool {
    out.fill(0);
    for (j, &v) in row.iter().enumerate() {
        if v == 1.0 {
            out[j / 64] |= 1 << (j % 64);
        } else if v != 0.0 {
            return false;
        }
    }
    true
}

impl KnnModel {
    fn assemble(params: KnnParams, train: Matrix, labels: Vec<u8>) -> Self {
        let w = words_per_row(train.cols());
        let mut packed = vec![0u64; w * train.rows()];
        let binary = train
            .iter_rows()
            .enumerate()
            .all(|(i, row)| pack_row(row, &mut packed[i * w..(i + 1) * w]));
        KnnModel {
            params,
            train,
            labels,
            packed: binary.then_some(packed),
        }
    }

    pub fn n_features(&self) -> usize {
        self.train.cols()
    }

    fn distance(&self, metric: KnnMetric, a: &[f64], b: &[f64]) -> f64 {
        match metric {
            KnnMetric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
            KnnMetric::Hamming => a.iter().zip(b).filter(|(x, y)| x != y).count() as f64,
        }
    }

    /// Training-row indices of the `k` nearest neighbours, closest first; equal
    /// distances resolve to the lower row index.
    pub fn neighbors(&self, x: &[f64]) -> Vec<usize> {
        self.ranked(x, self.params.metric, self.params.k)
    }

    /// Full neighbour ranking under `metric`, truncated to `k`.
    pub fn ranked(&self, x: &[f64], metric: KnnMetric, k: usize) -> Vec<usize> {
        let n = self.train.rows();
        let mut d: Vec<(f64, usize)> = Vec::with_capacity(n);
        let w = words_per_row(x.len());
        let mut q = vec![0u64; w];
        match &self.packed {
            Some(packed) if pack_row(x, &mut q) => {
                for i in 0..n {
                    let row = &packed[i * w..(i + 1) * w];
                    let dist: u32 = row.iter().zip(&q).map(|(a, b)| (a ^ b).count_ones()).sum();
                    d.push((dist as f64, i));
                }
            }
            _ => {
                for (i, row) in self.train.iter_rows().enumerate() {
                    d.push((self.distance(metric, x, row), i));
                }
            }
        }
        let k = k.min(n);
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < n {
            d.select_nth_unstable_by(k - 1, cmp);
            d.truncate(k);
        }
        d.sort_by(cmp);
        d.into_iter().map(|(_, i)| i).collect()
    }

    pub fn proba_row(&self, x: &[f64]) -> [f64; 2] {
        let nb = self.neighbors(x);
        let ones = nb.iter().filter(|&&i| self.labels[i] == 1).count();
        let p1 = ones as f64 / nb.len() as f64;
        [1.0 - p1, p1]
    }
}

pub fn train_knn(ds: &Dataset, params: &KnnParams) -> Result<KnnModel> {
    if params.k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if params.k > ds.n_rows() {
        return Err(Error::invalid(format!(
            "k = {} exceeds the {} training rows",
            params.k,
            ds.n_rows()
        )));
    }
    Ok(KnnModel::assemble(
        params.clone(),
        ds.features().clone(),
        ds.labels().to_vec(),
    ))
}
