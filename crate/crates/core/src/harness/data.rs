use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{argument, Error, Result};
use crate::numcore::{RngState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Labelled feature matrix with a declared feature range.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub lo: f32,
    pub hi: f32,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
        lo: f32,
        hi: f32,
    ) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if n != labels.len() {
            return Err(Error::Dimension {
                context: "feature rows vs label count",
                left: features.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(argument(format!(
                "label {bad} >= class count {num_classes}"
            )));
        }
        if !(lo < hi) {
            return Err(argument(format!("empty feature range [{lo}, {hi}]")));
        }
        if features.data().iter().any(|v| !(lo..=hi).contains(v)) {
            return Err(argument(format!(
                "feature outside declared range [{lo}, {hi}]"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            split,
            lo,
            hi,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.features.gather_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    /// Consecutive batches in stored order; the last one may be short.
    pub fn batches(&self, batch_size: usize) -> Result<Vec<(Tensor, Vec<usize>)>> {
        if batch_size == 0 {
            return Err(argument("batch_size must be positive"));
        }
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size).map(|c| self.batch(c)).collect()
    }

    /// Feature batches only, for BatchNorm recalibration.
    pub fn feature_batches(&self, batch_size: usize) -> Result<Vec<Tensor>> {
        Ok(self
            .batches(batch_size)?
            .into_iter()
            .map(|(x, _)| x)
            .collect())
    }

    /// Per-feature sample standard deviation.
    pub fn feature_std(&self) -> Vec<f64> {
        let (n, d) = (self.len(), self.dim());
        (0..d)
            .map(|j| {
                let col = (0..n).map(|i| f64::from(self.features.data()[i * d + j]));
                let mean = col.clone().sum::<f64>() / n as f64;
                (col.map(|v| (v - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64).sqrt()
            })
            .collect()
    }

    /// Seeded subset of at most `n` examples (all of them when `n >= len`).
    pub fn subsample(&self, n: usize, seed: u64) -> Result<Dataset> {
        let mut idx = RngState::new(seed).permutation(self.len());
        idx.truncate(n.min(self.len()));
        idx.sort_unstable();
        let (features, labels) = self.batch(&idx)?;
        Ok(Dataset {
            features,
            labels,
            ..self.clone()
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Isotropic blobs with means on the unit circle (radius 2 units before scaling).
    Gaussians,
    /// Interleaved spiral arms; `noise` is the angular jitter in radians.
    Spirals,
}

/// Fraction of each class assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

const GAUSSIAN_RADIUS: f64 = 2.0;
const SPIRAL_TURN: f64 = 4.0;

/// Deterministic 2-D toy data with a stratified 80/20 train/test split.
pub fn make_synthetic(
    kind: SyntheticKind,
    n_per_class: usize,
    classes: usize,
    noise: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if n_per_class == 0 {
        return Err(argument("n_per_class must be >= 1"));
    }
    if classes < 2 {
        return Err(argument("classes must be >= 2"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(argument(format!("noise must be >= 0, got {noise}")));
    }
    let root = RngState::new(seed);
    let mut points: Vec<(f64, f64, usize)> = Vec::with_capacity(n_per_class * classes);
    for c in 0..classes {
        let mut rng = root.substream(c as u64);
        for i in 0..n_per_class {
            let (x, y) = match kind {
                SyntheticKind::Gaussians => {
                    let a = 2.0 * PI * c as f64 / classes as f64;
                    (
                        GAUSSIAN_RADIUS * a.cos() + noise * rng.standard_normal(),
                        GAUSSIAN_RADIUS * a.sin() + noise * rng.standard_normal(),
                    )
                }
                SyntheticKind::Spirals => {
                    let r = if n_per_class > 1 {
                        i as f64 / (n_per_class - 1) as f64
                    } else {
                        0.5
                    };
                    let t = SPIRAL_TURN * (c as f64 + r) + noise * rng.standard_normal();
                    (r * t.sin(), r * t.cos())
                }
            };
            points.push((x, y, c));
        }
    }
    let (lo, hi) = match kind {
        SyntheticKind::Spirals => (-1.0f32, 1.0f32),
        SyntheticKind::Gaussians => {
            let m = points
                .iter()
                .fold(GAUSSIAN_RADIUS, |m, p| m.max(p.0.abs()).max(p.1.abs()));
            let bound = (m.ceil() as f32).max(1.0);
            (-bound, bound)
        }
    };

    let n_train = ((n_per_class as f64 * TRAIN_FRACTION).round() as usize).clamp(1, n_per_class);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..classes {
        let perm = root.substream(1000 + c as u64).permutation(n_per_class);
        for (rank, &i) in perm.iter().enumerate() {
            let p = points[c * n_per_class + i];
            if rank < n_train {
                train.push(p);
            } else {
                test.push(p);
            }
        }
    }
    let build = |pts: &[(f64, f64, usize)], split| -> Result<Dataset> {
        let data: Vec<f32> = pts
            .iter()
            .flat_map(|&(x, y, _)| [x as f32, y as f32])
            .map(|v| v.clamp(lo, hi))
            .collect();
        let labels = pts.iter().map(|p| p.2).collect();
        let features = Tensor::new(vec![pts.len(), 2], data)?;
        Dataset::new(features, labels, classes, split, lo, hi)
    };
    Ok((build(&train, Split::Train)?, build(&test, Split::Test)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest_mean_accuracy(train: &Dataset) -> f64 {
        let d = train.dim();
        let mut means = vec![vec![0f64; d]; train.num_classes];
        let mut counts = vec![0usize; train.num_classes];
        for i in 0..train.len() {
            counts[train.labels[i]] += 1;
            for (m, &v) in means[train.labels[i]].iter_mut().zip(train.features.row(i)) {
                *m += f64::from(v);
            }
        }
        for (m, c) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= *c as f64);
        }
        let correct = (0..train.len())
            .filter(|&i| {
                let row = train.features.row(i);
                let best = (0..train.num_classes)
                    .min_by(|&a, &b| {
                        let da: f64 = (0..d)
                            .map(|j| (f64::from(row[j]) - means[a][j]).powi(2))
                            .sum();
                        let db: f64 = (0..d)
                            .map(|j| (f64::from(row[j]) - means[b][j]).powi(2))
                            .sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == train.labels[i]
            })
            .count();
        correct as f64 / train.len() as f64
    }

    #[test]
    fn noiseless_gaussians_are_separable() {
        let (train, test) = make_synthetic(SyntheticKind::Gaussians, 50, 4, 0.0, 1).unwrap();
        assert_eq!(train.len(), 160);
        assert_eq!(test.len(), 40);
        assert_eq!(nearest_mean_accuracy(&train), 1.0);
    }

    #[test]
    fn same_seed_same_data() {
        let a = make_synthetic(SyntheticKind::Spirals, 40, 3, 0.2, 9).unwrap();
        let b = make_synthetic(SyntheticKind::Spirals, 40, 3, 0.2, 9).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic(SyntheticKind::Spirals, 40, 3, 0.2, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_counts_rejected() {
        assert!(make_synthetic(SyntheticKind::Spirals, 0, 3, 0.2, 0).is_err());
        assert!(make_synthetic(SyntheticKind::Spirals, 10, 1, 0.2, 0).is_err());
        assert!(make_synthetic(SyntheticKind::Spirals, 10, 3, -1.0, 0).is_err());
    }

    #[test]
    fn features_within_declared_range() {
        let (train, _) = make_synthetic(SyntheticKind::Gaussians, 30, 3, 0.5, 2).unwrap();
        assert!(train
            .features
            .data()
            .iter()
            .all(|v| (train.lo..=train.hi).contains(v)));
    }

    #[test]
    fn dataset_invariants_enforced() {
        let x = Tensor::zeros(&[2, 2]);
        assert!(Dataset::new(x.clone(), vec![0], 2, Split::Train, 0.0, 1.0).is_err());
        assert!(Dataset::new(x.clone(), vec![0, 2], 2, Split::Train, 0.0, 1.0).is_err());
        assert!(Dataset::new(x.map(|_| 3.0), vec![0, 1], 2, Split::Train, 0.0, 1.0).is_err());
    }
}
