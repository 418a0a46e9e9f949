//! Local datasets: synthetic Gaussian-mixture shards and CSV ingestion.

use std::io::Read;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound = "T: Real")]
pub enum Targets<T> {
    Classes { labels: Vec<usize>, num_classes: usize },
    Real { values: Vec<T> },
}

impl<T> Targets<T> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Real { values } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> Self
    where
        T: Copy,
    {
        match self {
            Targets::Classes { labels, num_classes } => Targets::Classes {
                labels: rows.iter().map(|&r| labels[r]).collect(),
                num_classes: *num_classes,
            },
            Targets::Real { values } => Targets::Real {
                values: rows.iter().map(|&r| values[r]).collect(),
            },
        }
    }
}

/// Row-major feature matrix with one target per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Split<T> {
    pub dim: usize,
    pub features: Vec<T>,
    pub targets: Targets<T>,
}

impl<T: Real> Split<T> {
    pub fn new(dim: usize, features: Vec<T>, targets: Targets<T>) -> Result<Self> {
        if dim == 0 || features.len() != dim * targets.len() {
            return Err(Error::Dataset(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                targets.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dataset("non-finite feature".into()));
        }
        if let Targets::Classes { labels, num_classes } = &targets {
            if let Some(&bad) = labels.iter().find(|&&l| l >= *num_classes) {
                return Err(Error::Dataset(format!("label {bad} outside 0..{num_classes}")));
            }
        }
        Ok(Self { dim, features, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        Self {
            dim: self.dim,
            features,
            targets: self.targets.select(rows),
        }
    }

    /// Rows of `parts` stacked in order.
    pub fn concat(parts: &[&Split<T>]) -> Result<Self> {
        let first = parts.first().ok_or(Error::Empty("split list"))?;
        let mut features = Vec::new();
        let mut targets = match &first.targets {
            Targets::Classes { num_classes, .. } => Targets::Classes {
                labels: Vec::new(),
                num_classes: *num_classes,
            },
            Targets::Real { .. } => Targets::Real { values: Vec::new() },
        };
        for p in parts {
            if p.dim != first.dim {
                return Err(Error::Dataset("splits disagree on feature width".into()));
            }
            features.extend_from_slice(&p.features);
            match (&mut targets, &p.targets) {
                (Targets::Classes { labels, num_classes }, Targets::Classes { labels: l, num_classes: k }) => {
                    *num_classes = (*num_classes).max(*k);
                    labels.extend_from_slice(l);
                }
                (Targets::Real { values }, Targets::Real { values: v }) => values.extend_from_slice(v),
                _ => return Err(Error::Dataset("mixed target kinds".into())),
            }
        }
        Split::new(first.dim, features, targets)
    }

    /// Class frequencies, for classification splits.
    pub fn class_counts(&self) -> Option<Vec<usize>> {
        match &self.targets {
            Targets::Classes { labels, num_classes } => {
                let mut counts = vec![0; *num_classes];
                for &l in labels {
                    counts[l] += 1;
                }
                Some(counts)
            }
            Targets::Real { .. } => None,
        }
    }
}

/// One peer's data, split into train and test rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct LocalDataset<T> {
    pub train: Split<T>,
    pub test: Split<T>,
}

impl<T: Real> LocalDataset<T> {
    pub fn new(train: Split<T>, test: Split<T>) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Dataset("empty training split".into()));
        }
        if train.dim != test.dim {
            return Err(Error::Dataset("train and test widths differ".into()));
        }
        Ok(Self { train, test })
    }

    pub fn dim(&self) -> usize {
        self.train.dim
    }

    /// Number of classes, or `None` for regression data.
    pub fn num_classes(&self) -> Option<usize> {
        match &self.train.targets {
            Targets::Classes { num_classes, .. } => Some(*num_classes),
            Targets::Real { .. } => None,
        }
    }
}

/// Union of every peer's test rows.
pub fn pooled_test<T: Real>(data: &[LocalDataset<T>]) -> Result<Split<T>> {
    Split::concat(&data.iter().map(|d| &d.test).collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_peers: usize,
    pub samples_per_peer: usize,
    pub dim: usize,
    pub classes: usize,
    /// 0 gives every peer the same class mix; 1 gives peer `k` only class
    /// `k mod classes`.
    pub heterogeneity: f64,
    pub test_fraction: f64,
    /// Norm of each class mean; samples add unit Gaussian noise.
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_peers: 9,
            samples_per_peer: 400,
            dim: 10,
            classes: 4,
            heterogeneity: 0.5,
            test_fraction: 0.1,
            separation: 3.0,
            seed: 0,
        }
    }
}

/// Shards with the default class count, test fraction and separation.
pub fn make_synthetic<T: Real>(
    n_peers: usize,
    samples_per_peer: usize,
    dim: usize,
    heterogeneity: f64,
    seed: u64,
) -> Result<Vec<LocalDataset<T>>> {
    make_synthetic_with(&SyntheticConfig {
        n_peers,
        samples_per_peer,
        dim,
        heterogeneity,
        seed,
        ..SyntheticConfig::default()
    })
}

/// Largest-remainder rounding of `weights · total`.
fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let short = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Gaussian-mixture classification shards.
pub fn make_synthetic_with<T: Real>(cfg: &SyntheticConfig) -> Result<Vec<LocalDataset<T>>> {
    if cfg.n_peers == 0 || cfg.samples_per_peer < 2 || cfg.dim == 0 || cfg.classes < 2 {
        return Err(Error::InvalidParameter(
            "synthetic data needs peers, classes >= 2, width and at least 2 samples per peer".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.heterogeneity) || !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(Error::InvalidParameter("heterogeneity must lie in [0,1] and test_fraction in [0,1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, &[0x5EED, 0]));
    let means: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| {
            let v: Vec<f64> = (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm * cfg.separation).collect()
        })
        .collect();

    let n_test = ((cfg.samples_per_peer as f64) * cfg.test_fraction).round() as usize;
    let n_test = n_test.min(cfg.samples_per_peer - 1);
    (0..cfg.n_peers)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, &[0x5EED, 1, k as u64]));
            let weights: Vec<f64> = (0..cfg.classes)
                .map(|c| {
                    let dominant = if c == k % cfg.classes { 1.0 } else { 0.0 };
                    (1.0 - cfg.heterogeneity) / cfg.classes as f64 + cfg.heterogeneity * dominant
                })
                .collect();
            let counts = apportion(&weights, cfg.samples_per_peer);
            let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &m)| std::iter::repeat_n(c, m)).collect();
            labels.shuffle(&mut rng);
            let mut features = Vec::with_capacity(labels.len() * cfg.dim);
            for &l in &labels {
                for mu in &means[l] {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    features.push(T::from_f64_lossy(mu + noise));
                }
            }
            let all = Split::new(
                cfg.dim,
                features,
                Targets::Classes {
                    labels,
                    num_classes: cfg.classes,
                },
            )?;
            let rows: Vec<usize> = (0..all.len()).collect();
            let (test_rows, train_rows) = rows.split_at(n_test);
            LocalDataset::new(all.select(train_rows), all.select(test_rows))
        })
        .collect()
}

/// Linear-regression shards `y = a·x + b (+ noise)` drawn from one shared
/// ground-truth model.
pub fn make_regression<T: Real>(
    n_peers: usize,
    samples_per_peer: usize,
    dim: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<LocalDataset<T>>> {
    if n_peers == 0 || samples_per_peer < 2 || dim == 0 {
        return Err(Error::InvalidParameter("regression data needs peers, width and 2+ samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[0x2E6, 0]));
    let truth: Vec<f64> = (0..=dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n_test = (samples_per_peer / 10).max(1);
    (0..n_peers)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[0x2E6, 1, k as u64]));
            let mut features = Vec::with_capacity(samples_per_peer * dim);
            let mut values = Vec::with_capacity(samples_per_peer);
            for _ in 0..samples_per_peer {
                let x: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let eps: f64 = StandardNormal.sample(&mut rng);
                let y = x.iter().zip(&truth).map(|(a, b)| a * b).sum::<f64>() + truth[dim] + noise * eps;
                features.extend(x.into_iter().map(T::from_f64_lossy));
                values.push(T::from_f64_lossy(y));
            }
            let all = Split::new(dim, features, Targets::Real { values })?;
            let rows: Vec<usize> = (0..samples_per_peer).collect();
            let (test_rows, train_rows) = rows.split_at(n_test);
            LocalDataset::new(all.select(train_rows), all.select(test_rows))
        })
        .collect()
}

/// Reads `header, f1, ..., fd, label` rows, shuffles them with `seed` and
/// deals them round-robin to `n_peers` peers. The first `test_fraction` of
/// each peer's rows become its test split.
pub fn load_csv<T: Real>(input: impl Read, n_peers: usize, test_fraction: f64, seed: u64) -> Result<Vec<LocalDataset<T>>> {
    if n_peers == 0 || !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidParameter("need at least one peer and test_fraction in [0,1)".into()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let width = reader.headers()?.len();
    if width < 2 {
        return Err(Error::Dataset("need at least one feature column and a label column".into()));
    }
    let dim = width - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != width {
            return Err(Error::Dataset(format!("row {} has {} fields, expected {width}", line + 2, rec.len())));
        }
        for field in rec.iter().take(dim) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Dataset(format!("row {}: '{field}' is not numeric", line + 2)))?;
            features.push(T::from_f64_lossy(v));
        }
        let label = rec[dim].trim();
        labels.push(
            label
                .parse::<usize>()
                .map_err(|_| Error::Dataset(format!("row {}: label '{label}' is not a class index", line + 2)))?,
        );
    }
    if labels.len() < 2 * n_peers {
        return Err(Error::Dataset(format!("{} rows cannot feed {n_peers} peers", labels.len())));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let all = Split::new(dim, features, Targets::Classes { labels, num_classes })?;

    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[0xC5F])));
    (0..n_peers)
        .map(|k| {
            let rows: Vec<usize> = order.iter().skip(k).step_by(n_peers).copied().collect();
            let n_test = ((rows.len() as f64) * test_fraction).round() as usize;
            let n_test = n_test.min(rows.len() - 1);
            LocalDataset::new(all.select(&rows[n_test..]), all.select(&rows[..n_test]))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn proportions(d: &LocalDataset<f64>) -> Vec<usize> {
        let train = d.train.class_counts().unwrap();
        let test = d.test.class_counts().unwrap();
        train.iter().zip(test).map(|(a, b)| a + b).collect()
    }

    #[test]
    fn homogeneous_shards_share_class_mix() {
        let data: Vec<LocalDataset<f64>> = make_synthetic(5, 200, 3, 0.0, 1).unwrap();
        let first = proportions(&data[0]);
        assert_eq!(first, vec![50; 4]);
        assert!(data.iter().all(|d| proportions(d) == first));
    }

    #[test]
    fn extreme_heterogeneity_separates_supports() {
        let data: Vec<LocalDataset<f64>> = make_synthetic(2, 100, 3, 1.0, 1).unwrap();
        let (a, b) = (proportions(&data[0]), proportions(&data[1]));
        assert!(a.iter().zip(&b).all(|(x, y)| *x == 0 || *y == 0));
        assert_eq!(a[0], 100);
        assert_eq!(b[1], 100);
    }

    #[test]
    fn shards_are_reproducible() {
        let a: Vec<LocalDataset<f64>> = make_synthetic(3, 50, 4, 0.3, 9).unwrap();
        let b: Vec<LocalDataset<f64>> = make_synthetic(3, 50, 4, 0.3, 9).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        let c: Vec<LocalDataset<f64>> = make_synthetic(3, 50, 4, 0.3, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn apportion_sums() {
        assert_eq!(apportion(&[1.0, 1.0, 1.0], 10), vec![4, 3, 3]);
        assert_eq!(apportion(&[0.0, 1.0], 7), vec![0, 7]);
    }

    #[test]
    fn csv_round_robin() {
        let mut text = String::from("a,b,label\n");
        for i in 0..20 {
            text.push_str(&format!("{},{},{}\n", i, i as f64 * 0.5, i % 3));
        }
        let data: Vec<LocalDataset<f64>> = load_csv(text.as_bytes(), 4, 0.2, 1).unwrap();
        assert_eq!(data.len(), 4);
        let rows: usize = data.iter().map(|d| d.train.len() + d.test.len()).sum();
        assert_eq!(rows, 20);
        assert!(data.iter().all(|d| d.test.len() == 1 && d.dim() == 2 && d.num_classes() == Some(3)));

        assert!(load_csv::<f64>("a,label\nx,1\n1,0\n".as_bytes(), 1, 0.0, 0).is_err());
        assert!(load_csv::<f64>("a,label\n1,1.5\n1,0\n".as_bytes(), 1, 0.0, 0).is_err());
        assert!(load_csv::<f64>("a,label\n1,1\n".as_bytes(), 2, 0.0, 0).is_err());
    }

    #[test]
    fn split_validation() {
        assert!(Split::<f64>::new(2, vec![1.0; 3], Targets::Real { values: vec![0.0; 2] }).is_err());
        assert!(Split::<f64>::new(1, vec![1.0], Targets::Classes { labels: vec![2], num_classes: 2 }).is_err());
        let empty = Split::<f64>::new(1, vec![], Targets::Real { values: vec![] }).unwrap();
        assert!(LocalDataset::new(empty.clone(), empty).is_err());
    }
}
