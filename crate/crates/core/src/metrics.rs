//! Confusion-matrix metrics, ranking metrics, and resource probes.
//!
//! The positive class is malware (label 1) throughout.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub recall: f64,
    pub precision: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub mcc: f64,
    pub roc_auc: Option<f64>,
    pub counts: ConfusionMatrix,
}

impl MetricSet {
    /// Flat `(key, value)` pairs as logged to the run store.
    pub fn to_pairs(&self) -> Vec<(&'static str, f64)> {
        let c = &self.counts;
        let mut out = vec![
            ("recall", self.recall),
            ("precision", self.precision),
            ("accuracy", self.accuracy),
            ("f1", self.f1),
            ("mcc", self.mcc),
            ("tp", c.tp as f64),
            ("fp", c.fp as f64),
            ("fn", c.fn_ as f64),
            ("tn", c.tn as f64),
        ];
        if let Some(auc) = self.roc_auc {
            out.push(("roc_auc", auc));
        }
        out
    }
}

pub fn confusion(y_true: &[u8], y_pred: &[u8]) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::invalid(format!(
            "{} labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&t, &p) in y_true.iter().zip(y_pred) {
        match (t, p) {
            (1, 1) => cm.tp += 1,
            (0, 1) => cm.fp += 1,
            (1, 0) => cm.fn_ += 1,
            (0, 0) => cm.tn += 1,
            _ => return Err(Error::invalid(format!("labels must be 0/1, got ({t}, {p})"))),
        }
    }
    Ok(cm)
}

#[inline]
fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn recall(cm: &ConfusionMatrix) -> f64 {
    ratio(cm.tp as f64, (cm.tp + cm.fn_) as f64)
}

pub fn precision(cm: &ConfusionMatrix) -> f64 {
    ratio(cm.tp as f64, (cm.tp + cm.fp) as f64)
}

/// Zero when any marginal in the denominator is zero.
pub fn mcc(cm: &ConfusionMatrix) -> f64 {
    let (tp, fp, fn_, tn) = (cm.tp as f64, cm.fp as f64, cm.fn_ as f64, cm.tn as f64);
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if den == 0.0 {
        return 0.0;
    }
    ((tp * tn - fp * fn_) / den.sqrt()).clamp(-1.0, 1.0)
}

pub fn classification_metrics(cm: &ConfusionMatrix) -> MetricSet {
    let r = recall(cm);
    let p = precision(cm);
    MetricSet {
        recall: r,
        precision: p,
        accuracy: ratio((cm.tp + cm.tn) as f64, cm.total() as f64),
        f1: ratio(2.0 * p * r, p + r),
        mcc: mcc(cm),
        roc_auc: None,
        counts: *cm,
    }
}

/// Metrics for probability-of-malware scores thresholded at 0.5 (ties go to malware).
pub fn evaluate_scores(y_true: &[u8], p_malware: &[f64]) -> Result<MetricSet> {
    let pred: Vec<u8> = p_malware.iter().map(|&p| u8::from(p >= 0.5)).collect();
    let cm = confusion(y_true, &pred)?;
    let mut m = classification_metrics(&cm);
    m.roc_auc = roc_auc(y_true, p_malware).ok();
    Ok(m)
}

fn check_both_classes(y_true: &[u8], scores: &[f64]) -> Result<(usize, usize)> {
    if y_true.len() != scores.len() {
        return Err(Error::invalid("labels and scores differ in length"));
    }
    let pos = y_true.iter().filter(|&&y| y == 1).count();
    let neg = y_true.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("ranking metrics need both classes in the ground truth"));
    }
    Ok((pos, neg))
}

/// Mann-Whitney estimate of `P(s+ > s-) + P(s+ = s-)/2` via mid-ranks.
pub fn roc_auc(y_true: &[u8], scores: &[f64]) -> Result<f64> {
    let (pos, neg) = check_both_classes(y_true, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block shares the mean rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if y_true[k] == 1 {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
    pub fpr: f64,
}

/// One point per distinct threshold, descending; a row is positive when `score >= threshold`.
pub fn pr_curve(y_true: &[u8], scores: &[f64]) -> Result<Vec<CurvePoint>> {
    let (pos, neg) = check_both_classes(y_true, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if y_true[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(CurvePoint {
            threshold: t,
            recall: tp as f64 / pos as f64,
            precision: tp as f64 / (tp + fp) as f64,
            fpr: fp as f64 / neg as f64,
        });
    }
    Ok(out)
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("threshold,recall,precision,fpr\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.threshold, p.recall, p.precision, p.fpr
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub label: String,
    pub wall_seconds: f64,
    pub cpu_seconds: Option<f64>,
    /// Process-wide high-water mark of resident memory.
    pub peak_rss_bytes: Option<u64>,
    pub disk: String,
    pub network: String,
}

struct Usage {
    cpu_seconds: f64,
    max_rss_bytes: u64,
}

fn usage() -> Option<Usage> {
    // SAFETY: getrusage fills the zeroed struct we own.
    let ru = unsafe {
        let mut ru: libc::rusage = std::mem::zeroed();
        if libc::getrusage(libc::RUSAGE_SELF, &mut ru) != 0 {
            return None;
        }
        ru
    };
    let tv = |t: libc::timeval| t.tv_sec as f64 + t.tv_usec as f64 * 1e-6;
    // ru_maxrss is kilobytes on Linux and bytes on macOS
    let scale = if cfg!(target_os = "macos") { 1 } else { 1024 };
    Some(Usage {
        cpu_seconds: tv(ru.ru_utime) + tv(ru.ru_stime),
        max_rss_bytes: ru.ru_maxrss.max(0) as u64 * scale,
    })
}

/// Runs `f` and reports the resources it consumed.
pub fn probe<T>(label: &str, f: impl FnOnce() -> T) -> (T, ResourceReport) {
    let before = usage();
    let start = Instant::now();
    let out = f();
    let wall = start.elapsed().as_secs_f64();
    let after = usage();
    let cpu = match (&before, &after) {
        (Some(b), Some(a)) => Some((a.cpu_seconds - b.cpu_seconds).max(0.0)),
        _ => None,
    };
    (
        out,
        ResourceReport {
            label: label.to_string(),
            wall_seconds: wall,
            cpu_seconds: cpu,
            peak_rss_bytes: after.map(|a| a.max_rss_bytes).filter(|&b| b > 0),
            disk: "not collected".into(),
            network: "not collected".into(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_case() -> (Vec<u8>, Vec<u8>) {
        let y_true = vec![1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
        let y_pred = vec![1, 1, 1, 0, 0, 1, 0, 0, 0, 0];
        (y_true, y_pred)
    }

    #[test]
    fn hand_counted_confusion() {
        let (t, p) = hand_case();
        let cm = confusion(&t, &p).unwrap();
        assert_eq!((cm.tp, cm.fp, cm.fn_, cm.tn), (3, 1, 2, 4));
        let perfect = confusion(&t, &t).unwrap();
        assert_eq!((perfect.fp, perfect.fn_), (0, 0));
        let ones = confusion(&t, &[1; 10]).unwrap();
        assert_eq!((ones.tp, ones.fp), (5, 5));
        assert!(confusion(&t, &p[..3]).is_err());
    }

    #[test]
    fn hand_metrics() {
        let cm = ConfusionMatrix {
            tp: 3,
            fp: 1,
            fn_: 2,
            tn: 4,
        };
        let m = classification_metrics(&cm);
        assert!((m.recall - 0.6).abs() < 1e-15);
        assert!((m.mcc - 10.0 / 600f64.sqrt()).abs() < 1e-15);
        assert!((m.mcc - 0.408248).abs() < 1e-6);
    }

    #[test]
    fn perfect_and_inverted() {
        let perfect = classification_metrics(&ConfusionMatrix {
            tp: 5,
            fp: 0,
            fn_: 0,
            tn: 5,
        });
        for v in [perfect.recall, perfect.precision, perfect.f1, perfect.accuracy, perfect.mcc] {
            assert_eq!(v, 1.0);
        }
        let inverted = classification_metrics(&ConfusionMatrix {
            tp: 0,
            fp: 5,
            fn_: 5,
            tn: 0,
        });
        assert_eq!(inverted.mcc, -1.0);
    }

    #[test]
    fn degenerate_conventions() {
        let m = classification_metrics(&ConfusionMatrix {
            tp: 0,
            fp: 0,
            fn_: 3,
            tn: 7,
        });
        assert_eq!((m.precision, m.f1, m.mcc), (0.0, 0.0, 0.0));
    }

    #[test]
    fn auc_cases() {
        assert_eq!(roc_auc(&[0, 0, 1, 1], &[0.1, 0.2, 0.8, 0.9]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0, 1, 0, 1], &[0.5; 4]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[1, 0, 1, 0], &[0.9, 0.8, 0.7, 0.1]).unwrap(), 0.75);
        assert!(roc_auc(&[1, 1], &[0.2, 0.3]).is_err());
    }

    #[test]
    fn pr_curve_cases() {
        let curve = pr_curve(&[1, 0, 1, 0], &[0.9, 0.8, 0.7, 0.1]).unwrap();
        assert_eq!(curve.len(), 4);
        let pairs: Vec<(f64, f64)> = curve.iter().map(|p| (p.recall, p.precision)).collect();
        assert_eq!(
            pairs,
            vec![(0.5, 1.0), (0.5, 0.5), (1.0, 2.0 / 3.0), (1.0, 0.5)]
        );
        assert!(curve.windows(2).all(|w| w[0].threshold > w[1].threshold));

        let sep = pr_curve(&[0, 0, 1, 1], &[0.1, 0.2, 0.8, 0.9]).unwrap();
        assert!(sep.iter().any(|p| p.recall == 1.0 && p.precision == 1.0));
    }

    #[test]
    fn probe_times_a_sleep() {
        let pause = std::time::Duration::from_millis(100);
        let (inner, outer) = probe("outer", || {
            let ((), inner) = probe("inner", || std::thread::sleep(pause));
            std::thread::sleep(std::time::Duration::from_millis(5));
            inner
        });
        assert!(inner.wall_seconds >= 0.1 && inner.wall_seconds <= 0.5);
        assert!(inner.wall_seconds <= outer.wall_seconds);
    }
}
