//! Softmax classifiers (multinomial logistic regression or a one-hidden-layer
//! tanh MLP), mini-batch SGD with an optional proximal term, and evaluation.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, FlError};

/// Bytes added to every serialized model on the wire.
pub const WIRE_HEADER_BYTES: u64 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// 0 selects plain logistic regression.
    pub hidden: usize,
    pub n_classes: usize,
}

impl Architecture {
    pub fn layer_dims(&self) -> Vec<usize> {
        if self.hidden == 0 {
            vec![self.input_dim, self.n_classes]
        } else {
            vec![self.input_dim, self.hidden, self.n_classes]
        }
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Flat parameter vector. Layout per layer: weights (out x in, row-major), then biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Self {
        Self {
            arch,
            values: vec![0.0; arch.param_count()],
        }
    }

    /// Logistic models start at zero; MLP weights get scaled Gaussian noise.
    pub fn init<R: Rng>(arch: Architecture, rng: &mut R) -> Self {
        let mut p = Self::zeros(arch);
        if arch.hidden == 0 {
            return p;
        }
        let dims = arch.layer_dims();
        let mut off = 0;
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            for v in &mut p.values[off..off + fan_in * fan_out] {
                let z: f64 = StandardNormal.sample(rng);
                *v = z * scale;
            }
            off += fan_in * fan_out + fan_out;
        }
        p
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Serialized size: single-precision values plus a fixed envelope.
    pub fn wire_bytes(&self) -> u64 {
        4 * self.values.len() as u64 + WIRE_HEADER_BYTES
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, other: &ModelParams) -> Result<(), FlError> {
        if self.values.len() != other.values.len() || self.arch != other.arch {
            return Err(FlError::ShapeMismatch {
                expected: self.values.len(),
                got: other.values.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Proximal coefficient; 0 is plain SGD.
    #[serde(default)]
    pub mu: f64,
    /// Hidden units of the MLP; 0 trains logistic regression.
    #[serde(default)]
    pub hidden_units: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            local_epochs: 1,
            batch_size: 32,
            lr: 0.1,
            mu: 0.0,
            hidden_units: 0,
        }
    }
}

fn softmax_ce(logits: &mut [f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted = logits[label] - max;
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in logits.iter_mut() {
        *z /= sum;
    }
    sum.ln() - shifted
}

/// Forward pass; returns class logits and (for MLPs) hidden activations.
fn forward(p: &ModelParams, x: &[f64], logits: &mut [f64], hidden: &mut [f64]) {
    let a = p.arch;
    let v = &p.values;
    if a.hidden == 0 {
        let b_off = a.n_classes * a.input_dim;
        for (k, z) in logits.iter_mut().enumerate() {
            let w = &v[k * a.input_dim..(k + 1) * a.input_dim];
            *z = v[b_off + k] + w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
        }
    } else {
        let b1 = a.hidden * a.input_dim;
        let w2 = b1 + a.hidden;
        let b2 = w2 + a.n_classes * a.hidden;
        for (j, h) in hidden.iter_mut().enumerate() {
            let w = &v[j * a.input_dim..(j + 1) * a.input_dim];
            *h = (v[b1 + j] + w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()).tanh();
        }
        for (k, z) in logits.iter_mut().enumerate() {
            let w = &v[w2 + k * a.hidden..w2 + (k + 1) * a.hidden];
            *z = v[b2 + k] + w.iter().zip(hidden.iter()).map(|(w, h)| w * h).sum::<f64>();
        }
    }
}

/// Mean cross-entropy over `indices` and its gradient.
pub fn cross_entropy_grad(p: &ModelParams, data: &Dataset, indices: &[usize]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; p.len()];
    let loss = accumulate_grad(p, data, indices, &mut grad);
    (loss, grad)
}

fn accumulate_grad(p: &ModelParams, data: &Dataset, indices: &[usize], grad: &mut [f64]) -> f64 {
    let a = p.arch;
    let mut logits = vec![0.0; a.n_classes];
    let mut hidden = vec![0.0; a.hidden];
    let mut dhidden = vec![0.0; a.hidden];
    let scale = 1.0 / indices.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;
    for &i in indices {
        let x = data.row(i);
        let y = data.labels[i];
        forward(p, x, &mut logits, &mut hidden);
        loss += softmax_ce(&mut logits, y);
        // logits now hold probabilities; dL/dz = p - onehot
        logits[y] -= 1.0;
        if a.hidden == 0 {
            let b_off = a.n_classes * a.input_dim;
            for (k, dz) in logits.iter().enumerate() {
                let g = &mut grad[k * a.input_dim..(k + 1) * a.input_dim];
                for (g, x) in g.iter_mut().zip(x) {
                    *g += dz * x * scale;
                }
                grad[b_off + k] += dz * scale;
            }
        } else {
            let b1 = a.hidden * a.input_dim;
            let w2 = b1 + a.hidden;
            let b2 = w2 + a.n_classes * a.hidden;
            dhidden.iter_mut().for_each(|d| *d = 0.0);
            for (k, dz) in logits.iter().enumerate() {
                let row = w2 + k * a.hidden;
                for j in 0..a.hidden {
                    grad[row + j] += dz * hidden[j] * scale;
                    dhidden[j] += dz * p.values[row + j];
                }
                grad[b2 + k] += dz * scale;
            }
            for j in 0..a.hidden {
                let dpre = dhidden[j] * (1.0 - hidden[j] * hidden[j]);
                let g = &mut grad[j * a.input_dim..(j + 1) * a.input_dim];
                for (g, x) in g.iter_mut().zip(x) {
                    *g += dpre * x * scale;
                }
                grad[b1 + j] += dpre * scale;
            }
        }
    }
    loss * scale
}

/// `(mu/2) * ||w - anchor||^2`
pub fn proximal_penalty(w: &[f64], anchor: &[f64], mu: f64) -> f64 {
    0.5 * mu * w.iter().zip(anchor).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

/// Gradient of [`proximal_penalty`]: `mu * (w - anchor)`.
pub fn proximal_grad(w: &[f64], anchor: &[f64], mu: f64) -> Vec<f64> {
    w.iter().zip(anchor).map(|(a, b)| mu * (a - b)).collect()
}

/// Mini-batch SGD on one client's data, anchored at `global` when `mu > 0`.
///
/// Returns the trained parameters and the mean cross-entropy on the local data
/// at those parameters.
pub fn local_train<R: Rng>(
    global: &ModelParams,
    data: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(ModelParams, f64), FlError> {
    if indices.is_empty() {
        return Err(FlError::InvalidArgs("local training needs at least one sample".into()));
    }
    let batch = cfg.batch_size.max(1);
    let mut w = global.clone();
    let mut order = indices.to_vec();
    let mut grad = vec![0.0; w.len()];
    for epoch in 0..cfg.local_epochs {
        order.shuffle(rng);
        for (b, chunk) in order.chunks(batch).enumerate() {
            let loss = accumulate_grad(&w, data, chunk, &mut grad);
            if !loss.is_finite() {
                return Err(FlError::NumericalDivergence { epoch, batch: b });
            }
            if cfg.lr == 0.0 {
                continue;
            }
            for ((wi, gi), anchor) in w.values.iter_mut().zip(&grad).zip(&global.values) {
                let g = if cfg.mu > 0.0 { gi + cfg.mu * (*wi - anchor) } else { *gi };
                *wi -= cfg.lr * g;
            }
            if !w.is_finite() {
                return Err(FlError::NumericalDivergence { epoch, batch: b });
            }
        }
    }
    let (loss, _) = evaluate_indices(&w, data, indices);
    if !loss.is_finite() {
        return Err(FlError::NumericalDivergence {
            epoch: cfg.local_epochs,
            batch: 0,
        });
    }
    Ok((w, loss))
}

fn evaluate_indices(p: &ModelParams, data: &Dataset, indices: &[usize]) -> (f64, f64) {
    let mut logits = vec![0.0; p.arch.n_classes];
    let mut hidden = vec![0.0; p.arch.hidden];
    let mut loss = 0.0;
    let mut correct = 0usize;
    for &i in indices {
        forward(p, data.row(i), &mut logits, &mut hidden);
        // first maximum wins: ties go to the smallest class id
        let mut best = 0;
        for k in 1..logits.len() {
            if logits[k] > logits[best] {
                best = k;
            }
        }
        if best == data.labels[i] {
            correct += 1;
        }
        loss += softmax_ce(&mut logits, data.labels[i]);
    }
    let n = indices.len().max(1) as f64;
    (loss / n, correct as f64 / n)
}

/// Mean cross-entropy and argmax accuracy over the whole dataset.
pub fn evaluate(p: &ModelParams, data: &Dataset) -> (f64, f64) {
    let all: Vec<usize> = (0..data.len()).collect();
    evaluate_indices(p, data, &all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fl::make_synthetic_dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch(d: &Dataset, hidden: usize) -> Architecture {
        Architecture {
            input_dim: d.dim,
            hidden,
            n_classes: d.n_classes,
        }
    }

    #[test]
    fn param_counts_and_wire_size() {
        let a = Architecture { input_dim: 3, hidden: 0, n_classes: 2 };
        assert_eq!(a.param_count(), 8);
        assert_eq!(ModelParams::zeros(a).wire_bytes(), 4 * 8 + 1024);
        let a = Architecture { input_dim: 3, hidden: 4, n_classes: 2 };
        assert_eq!(a.param_count(), 3 * 4 + 4 + 4 * 2 + 2);
    }

    #[test]
    fn zero_params_uniform_softmax() {
        let d = make_synthetic_dataset(1, 100, 2, 2, 5.0).unwrap();
        let (loss, acc) = evaluate(&ModelParams::zeros(arch(&d, 0)), &d);
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert_eq!(acc, 0.5);
        let d = make_synthetic_dataset(1, 100, 5, 2, 5.0).unwrap();
        let (loss, _) = evaluate(&ModelParams::zeros(arch(&d, 0)), &d);
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_is_identity() {
        let d = make_synthetic_dataset(1, 50, 2, 2, 5.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w0 = ModelParams::init(arch(&d, 4), &mut rng);
        let cfg = TrainConfig { local_epochs: 3, batch_size: 7, lr: 0.0, mu: 0.0, hidden_units: 4 };
        let idx: Vec<usize> = (0..50).collect();
        let (w, loss) = local_train(&w0, &d, &idx, &cfg, &mut rng).unwrap();
        assert_eq!(w, w0);
        assert_eq!(loss, evaluate(&w0, &d).0);
    }

    #[test]
    fn proximal_term_zero_at_anchor() {
        let w = vec![0.3, -1.0, 2.0];
        assert_eq!(proximal_grad(&w, &w, 0.7), vec![0.0; 3]);
        assert_eq!(proximal_penalty(&w, &w, 0.7), 0.0);
    }

    #[test]
    fn training_reduces_loss() {
        let d = make_synthetic_dataset(1, 200, 2, 2, 5.0).unwrap();
        let idx: Vec<usize> = (0..200).collect();
        let w0 = ModelParams::zeros(arch(&d, 0));
        let initial = evaluate(&w0, &d).0;
        let cfg = TrainConfig { local_epochs: 5, batch_size: 16, lr: 0.1, mu: 0.0, hidden_units: 0 };
        let (w, loss) = local_train(&w0, &d, &idx, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(loss < initial);
        assert!(w.is_finite());
        assert!(evaluate(&w, &d).1 > 0.95);
    }

    #[test]
    fn partial_last_batch_is_kept() {
        let d = make_synthetic_dataset(1, 10, 2, 2, 5.0).unwrap();
        let idx: Vec<usize> = (0..10).collect();
        let cfg = TrainConfig { local_epochs: 1, batch_size: 64, lr: 0.5, mu: 0.0, hidden_units: 0 };
        let w0 = ModelParams::zeros(arch(&d, 0));
        let (w, _) = local_train(&w0, &d, &idx, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_ne!(w, w0);
    }

    #[test]
    fn divergence_is_reported() {
        let d = make_synthetic_dataset(1, 40, 2, 2, 5.0).unwrap();
        let idx: Vec<usize> = (0..40).collect();
        let cfg = TrainConfig { local_epochs: 50, batch_size: 4, lr: f64::MAX, mu: 0.0, hidden_units: 0 };
        let w0 = ModelParams::zeros(arch(&d, 0));
        let err = local_train(&w0, &d, &idx, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
        assert!(matches!(err, FlError::NumericalDivergence { .. }));
    }

    #[test]
    fn deterministic_given_seed() {
        let d = make_synthetic_dataset(4, 60, 3, 3, 2.0).unwrap();
        let idx: Vec<usize> = (0..60).collect();
        let cfg = TrainConfig { local_epochs: 2, batch_size: 8, lr: 0.2, mu: 0.1, hidden_units: 5 };
        let w0 = ModelParams::init(arch(&d, 5), &mut ChaCha8Rng::seed_from_u64(0));
        let a = local_train(&w0, &d, &idx, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = local_train(&w0, &d, &idx, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
