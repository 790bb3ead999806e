use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::FlError;
use crate::seed;

/// Dense classification data, row-major features.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Copies the given rows into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            dim: self.dim,
            n_classes: self.n_classes,
        }
    }
}

/// Synthetic Gaussian-blob task; lives in `fl.toml` under `[dataset]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_eval: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub class_sep: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_train: 800,
            n_eval: 400,
            n_classes: 4,
            dim: 8,
            class_sep: 3.0,
            seed: 1,
        }
    }
}

/// Gaussian blobs: class means on a sphere of radius `class_sep`, unit
/// covariance, labels assigned round-robin so class counts differ by at most one.
pub fn make_synthetic_dataset(
    seed: u64,
    n: usize,
    n_classes: usize,
    dim: usize,
    class_sep: f64,
) -> Result<Dataset, FlError> {
    if n_classes < 1 || n < n_classes {
        return Err(FlError::InvalidArgs(format!(
            "need n >= n_classes >= 1, got n={n}, n_classes={n_classes}"
        )));
    }
    if dim < 2 {
        return Err(FlError::InvalidArgs(format!("dim must be >= 2, got {dim}")));
    }
    if !(class_sep.is_finite() && class_sep >= 0.0) {
        return Err(FlError::InvalidArgs(format!("class_sep must be >= 0, got {class_sep}")));
    }
    let mut rng = seed::rng(&[seed::stream::DATASET, seed]);
    let mut means = Vec::with_capacity(n_classes * dim);
    for _ in 0..n_classes {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        means.extend(v.iter().map(|x| x / norm * class_sep));
    }
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % n_classes;
        labels.push(c);
        for j in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(means[c * dim + j] + z);
        }
    }
    Ok(Dataset {
        features,
        labels,
        dim,
        n_classes,
    })
}

/// Train and held-out evaluation sets drawn from the same blobs.
pub fn make_synthetic_split(spec: &DatasetSpec) -> Result<(Dataset, Dataset), FlError> {
    if spec.n_eval < 1 {
        return Err(FlError::InvalidArgs("n_eval must be >= 1".into()));
    }
    let all = make_synthetic_dataset(
        spec.seed,
        spec.n_train + spec.n_eval,
        spec.n_classes,
        spec.dim,
        spec.class_sep,
    )?;
    if spec.n_train < spec.n_classes {
        return Err(FlError::InvalidArgs(format!(
            "n_train ({}) must be >= n_classes ({})",
            spec.n_train, spec.n_classes
        )));
    }
    let train: Vec<usize> = (0..spec.n_train).collect();
    let eval: Vec<usize> = (spec.n_train..all.len()).collect();
    Ok((all.subset(&train), all.subset(&eval)))
}
