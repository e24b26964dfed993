//! Data-info stage: dataset profile and host environment snapshot.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{is_missing, Dataset, FeatureKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindCounts {
    pub binary: usize,
    pub numeric: usize,
    pub categorical: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetProfile {
    pub source_id: String,
    pub n_rows: usize,
    pub n_cols: usize,
    pub feature_names: Vec<String>,
    pub missing_fraction: Vec<f64>,
    pub missing_cells: usize,
    /// Rows minus distinct feature rows (labels excluded from the key).
    pub duplicate_rows: usize,
    /// Distinct feature rows that occur with both labels.
    pub label_conflicts: usize,
    /// `[benign, malware]`.
    pub class_counts: [usize; 2],
    /// majority / minority; `None` when one class is absent.
    pub imbalance_ratio: Option<f64>,
    pub kind_counts: KindCounts,
}

/// Hashable key for a feature row. Missing cells and signed zeros collapse to one value.
pub(crate) fn row_key(row: &[f64]) -> Vec<u64> {
    row.iter()
        .map(|&v| {
            if is_missing(v) {
                u64::MAX
            } else if v == 0.0 {
                0
            } else {
                v.to_bits()
            }
        })
        .collect()
}

pub fn profile_dataset(ds: &Dataset) -> Result<DatasetProfile> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot profile an empty dataset"));
    }
    let n = ds.n_rows();
    let d = ds.n_cols();
    let x = ds.features();
    let mut missing = vec![0usize; d];
    for row in x.iter_rows() {
        for (c, &v) in row.iter().enumerate() {
            if is_missing(v) {
                missing[c] += 1;
            }
        }
    }

    // per distinct row: bitmask of the labels seen
    let mut seen: HashMap<Vec<u64>, u8> = HashMap::with_capacity(n);
    for (row, &y) in x.iter_rows().zip(ds.labels()) {
        *seen.entry(row_key(row)).or_insert(0) |= 1 << y;
    }
    let label_conflicts = seen.values().filter(|&&m| m == 0b11).count();

    let class_counts = ds.class_counts();
    let (maj, min) = (
        class_counts[0].max(class_counts[1]),
        class_counts[0].min(class_counts[1]),
    );
    let mut kinds = KindCounts {
        binary: 0,
        numeric: 0,
        categorical: 0,
    };
    for k in ds.feature_kinds() {
        match k {
            FeatureKind::Binary => kinds.binary += 1,
            FeatureKind::Numeric => kinds.numeric += 1,
            FeatureKind::Categorical => kinds.categorical += 1,
        }
    }
    Ok(DatasetProfile {
        source_id: ds.source_id().to_string(),
        n_rows: n,
        n_cols: d,
        feature_names: ds.feature_names().to_vec(),
        missing_fraction: missing.iter().map(|&m| m as f64 / n as f64).collect(),
        missing_cells: missing.iter().sum(),
        duplicate_rows: n - seen.len(),
        label_conflicts,
        class_counts,
        imbalance_ratio: (min > 0).then(|| maj as f64 / min as f64),
        kind_counts: kinds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub os_name: String,
    pub os_version: Option<String>,
    pub arch: String,
    pub cpu_count: usize,
    /// `None` when the host does not expose physical memory size.
    pub total_memory_bytes: Option<u64>,
    pub timestamp: String,
    pub network: String,
}

pub fn snapshot_environment() -> EnvSnapshot {
    EnvSnapshot {
        os_name: std::env::consts::OS.to_string(),
        os_version: os_version(),
        arch: std::env::consts::ARCH.to_string(),
        cpu_count: std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1),
        total_memory_bytes: total_memory(),
        timestamp: chrono::Utc::now().to_rfc3339(),
        network: "not collected".to_string(),
    }
}

fn os_version() -> Option<String> {
    if let Ok(text) = std::fs::read_to_string("/etc/os-release") {
        for line in text.lines() {
            if let Some(v) = line.strip_prefix("PRETTY_NAME=") {
                return Some(v.trim_matches('"').to_string());
            }
        }
    }
    // SAFETY: uname writes into the zeroed struct we own.
    unsafe {
        let mut u: libc::utsname = std::mem::zeroed();
        if libc::uname(&mut u) == 0 {
            let rel = std::ffi::CStr::from_ptr(u.release.as_ptr());
            return Some(rel.to_string_lossy().into_owned());
        }
    }
    None
}

fn total_memory() -> Option<u64> {
    // SAFETY: sysconf has no memory-safety preconditions.
    let (pages, page_size) = unsafe {
        (
            libc::sysconf(libc::_SC_PHYS_PAGES),
            libc::sysconf(libc::_SC_PAGESIZE),
        )
    };
    if pages > 0 && page_size > 0 {
        Some(pages as u64 * page_size as u64)
    } else {
        None
    }
}
