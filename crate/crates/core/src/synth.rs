//! Seeded synthetic datasets shaped like Android permission/API feature tables.
//!
//! Samples come from latent clusters (benign app styles, malware families). Each
//! cluster switches on its own handful of signature features over a sparse background,
//! and malware signatures are drawn mostly from a shared "suspicious" feature pool, so
//! classes overlap without being trivially separable.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{infer_kinds, Dataset};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_benign: usize,
    pub n_malware: usize,
    pub n_binary: usize,
    /// Small non-negative integer count columns appended after the binary ones.
    pub n_count: usize,
    pub benign_clusters: usize,
    pub malware_families: usize,
    pub signature_size: usize,
    /// Probability of flipping a label after generation.
    pub label_noise: f64,
    /// Fraction of rows replaced by copies of other rows of the same class.
    pub duplicate_fraction: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// 15,031 rows (9,476 benign / 5,555 malware) by 215 binary features.
    pub fn drebin_like(seed: u64) -> Self {
        SynthConfig {
            n_benign: 9476,
            n_malware: 5555,
            n_binary: 215,
            n_count: 0,
            benign_clusters: 14,
            malware_families: 10,
            signature_size: 10,
            label_noise: 0.005,
            duplicate_fraction: 0.0,
            seed,
        }
    }

    /// 86,574 benign / 10,170 malware rows by 141 features (118 binary, 23 counts),
    /// with heavy row duplication.
    pub fn androcrawl_like(seed: u64) -> Self {
        SynthConfig {
            n_benign: 86_574,
            n_malware: 10_170,
            n_binary: 118,
            n_count: 23,
            benign_clusters: 20,
            malware_families: 12,
            signature_size: 8,
            label_noise: 0.005,
            duplicate_fraction: 0.3,
            seed,
        }
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.n_benign = ((self.n_benign as f64 * factor) as usize).max(1);
        self.n_malware = ((self.n_malware as f64 * factor) as usize).max(1);
        self
    }
}

struct Cluster {
    rates: Vec<f64>,
    count_means: Vec<f64>,
}

fn make_cluster(cfg: &SynthConfig, base: &[f64], pool: &[usize], rng: &mut ChaCha8Rng) -> Cluster {
    let mut rates = base.to_vec();
    let mut sig: Vec<usize> = pool.to_vec();
    sig.shuffle(rng);
    for &j in sig.iter().take(cfg.signature_size) {
        rates[j] = rng.gen_range(0.55..0.95);
    }
    let count_means = (0..cfg.n_count).map(|_| rng.gen_range(0.2..6.0)).collect();
    Cluster { rates, count_means }
}

fn poisson(mean: f64, rng: &mut ChaCha8Rng) -> f64 {
    // Knuth's method; means here are small
    let l = (-mean).exp();
    let mut k = 0.0;
    let mut p = 1.0;
    loop {
        p *= rng.gen::<f64>();
        if p <= l {
            return k;
        }
        k += 1.0;
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.n_binary == 0 || cfg.benign_clusters == 0 || cfg.malware_families == 0 {
        return Err(Error::invalid("synthetic data needs features and clusters"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.n_binary + cfg.n_count;
    let base: Vec<f64> = (0..cfg.n_binary).map(|_| rng.gen_range(0.005..0.12)).collect();
    let split = cfg.n_binary / 3;
    let suspicious: Vec<usize> = (0..split).collect();
    let ordinary: Vec<usize> = (split..cfg.n_binary).collect();
    let benign: Vec<Cluster> = (0..cfg.benign_clusters)
        .map(|_| {
            // benign apps occasionally use suspicious features too
            let pool: Vec<usize> = ordinary
                .iter()
                .copied()
                .chain(suspicious.iter().copied().filter(|_| rng.gen_bool(0.15)))
                .collect();
            make_cluster(cfg, &base, &pool, &mut rng)
        })
        .collect();
    let malware: Vec<Cluster> = (0..cfg.malware_families)
        .map(|_| {
            let pool: Vec<usize> = suspicious
                .iter()
                .copied()
                .chain(ordinary.iter().copied().filter(|_| rng.gen_bool(0.1)))
                .collect();
            make_cluster(cfg, &base, &pool, &mut rng)
        })
        .collect();

    let n = cfg.n_benign + cfg.n_malware;
    let mut labels: Vec<u8> = std::iter::repeat_n(0, cfg.n_benign)
        .chain(std::iter::repeat_n(1, cfg.n_malware))
        .collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * d);
    for &y in &labels {
        let clusters = if y == 1 { &malware } else { &benign };
        let c = &clusters[rng.gen_range(0..clusters.len())];
        for j in 0..cfg.n_binary {
            data.push(f64::from(rng.gen_bool(c.rates[j])));
        }
        for m in &c.count_means {
            data.push(poisson(*m, &mut rng));
        }
    }
    let mut x = Matrix::from_vec(n, d, data)?;

    if cfg.duplicate_fraction > 0.0 {
        let by_class: [Vec<usize>; 2] = [
            (0..n).filter(|&i| labels[i] == 0).collect(),
            (0..n).filter(|&i| labels[i] == 1).collect(),
        ];
        for i in 0..n {
            if rng.gen_bool(cfg.duplicate_fraction.min(1.0)) {
                let pool = &by_class[labels[i] as usize];
                let src = pool[rng.gen_range(0..pool.len())];
                if src != i {
                    let row = x.row(src).to_vec();
                    x.row_mut(i).copy_from_slice(&row);
                }
            }
        }
    }
    for y in labels.iter_mut() {
        if rng.gen_bool(cfg.label_noise.clamp(0.0, 1.0)) {
            *y ^= 1;
        }
    }

    let prefixes = ["perm", "api", "intent", "cmd"];
    let mut names: Vec<String> = (0..cfg.n_binary)
        .map(|j| format!("{}_{j}", prefixes[j % prefixes.len()]))
        .collect();
    names.extend((0..cfg.n_count).map(|j| format!("count_{j}")));
    let kinds = infer_kinds(&x);
    Dataset::new(x, labels, names, kinds, "synthetic")
}
