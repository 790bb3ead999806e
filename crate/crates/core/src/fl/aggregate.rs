use serde::{Deserialize, Serialize};

use super::{FlError, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregatorSpec {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedavgm")]
    FedAvgM { server_lr: f64, momentum: f64 },
    #[serde(rename = "fedyogi")]
    FedYogi { eta: f64, beta1: f64, beta2: f64, tau: f64 },
}

impl AggregatorSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AggregatorSpec::FedAvg => "fedavg",
            AggregatorSpec::FedAvgM { .. } => "fedavgm",
            AggregatorSpec::FedYogi { .. } => "fedyogi",
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let unit = |name: &str, x: f64| (!(0.0..1.0).contains(&x)).then(|| format!("{name} must be in [0,1), got {x}"));
        let pos = |name: &str, x: f64| (!(x.is_finite() && x > 0.0)).then(|| format!("{name} must be > 0, got {x}"));
        match *self {
            AggregatorSpec::FedAvg => vec![],
            AggregatorSpec::FedAvgM { server_lr, momentum } => {
                [pos("server_lr", server_lr), unit("momentum", momentum)].into_iter().flatten().collect()
            }
            AggregatorSpec::FedYogi { eta, beta1, beta2, tau } => [
                pos("eta", eta),
                unit("beta1", beta1),
                unit("beta2", beta2),
                pos("tau", tau),
            ]
            .into_iter()
            .flatten()
            .collect(),
        }
    }
}

/// Sample-weighted mean of client parameters.
pub fn aggregate_fedavg(updates: &[(ModelParams, usize)]) -> Result<ModelParams, FlError> {
    let (first, _) = updates.first().ok_or(FlError::EmptyAggregation)?;
    for (p, _) in updates {
        first.check_same_shape(p)?;
    }
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(FlError::EmptyAggregation);
    }
    let total = total as f64;
    let mut out = ModelParams::zeros(first.arch);
    for (i, v) in out.values.iter_mut().enumerate() {
        *v = updates.iter().map(|(p, n)| *n as f64 * p.values[i]).sum::<f64>() / total;
    }
    Ok(out)
}

/// Server momentum applied to the pseudo-gradient `w_prev - avg`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FedAvgMState {
    pub momentum: Vec<f64>,
}

impl FedAvgMState {
    pub fn step(
        &mut self,
        w_prev: &ModelParams,
        avg: &ModelParams,
        server_lr: f64,
        beta: f64,
    ) -> Result<ModelParams, FlError> {
        w_prev.check_same_shape(avg)?;
        if self.momentum.is_empty() {
            self.momentum = vec![0.0; w_prev.len()];
        }
        if self.momentum.len() != w_prev.len() {
            return Err(FlError::ShapeMismatch {
                expected: self.momentum.len(),
                got: w_prev.len(),
            });
        }
        let mut next = avg.clone();
        for i in 0..next.values.len() {
            let delta = w_prev.values[i] - avg.values[i];
            let m_old = self.momentum[i];
            self.momentum[i] = beta * m_old + delta;
            // w_prev - lr*(beta*m_old + delta), arranged so beta=0, lr=1 yields avg bit-for-bit
            next.values[i] = avg.values[i] - (server_lr - 1.0) * delta - server_lr * beta * m_old;
        }
        Ok(next)
    }
}

/// Adaptive server optimizer with the sign-corrected second moment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FedYogiState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl FedYogiState {
    pub fn step(
        &mut self,
        w_prev: &ModelParams,
        avg: &ModelParams,
        eta: f64,
        beta1: f64,
        beta2: f64,
        tau: f64,
    ) -> Result<ModelParams, FlError> {
        w_prev.check_same_shape(avg)?;
        if self.m.is_empty() {
            self.m = vec![0.0; w_prev.len()];
            self.v = vec![0.0; w_prev.len()];
        }
        if self.m.len() != w_prev.len() {
            return Err(FlError::ShapeMismatch {
                expected: self.m.len(),
                got: w_prev.len(),
            });
        }
        let floor = tau * tau;
        let mut next = w_prev.clone();
        for i in 0..next.values.len() {
            let delta = avg.values[i] - w_prev.values[i];
            let d2 = delta * delta;
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * delta;
            let diff = self.v[i] - d2;
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            self.v[i] -= (1.0 - beta2) * d2 * sign;
            next.values[i] = w_prev.values[i] + eta * self.m[i] / (self.v[i].max(floor).sqrt() + tau);
        }
        Ok(next)
    }
}

/// Per-run server state for the configured aggregator.
#[derive(Debug, Clone, PartialEq)]
pub enum ServerOptimizer {
    FedAvg,
    FedAvgM { spec: (f64, f64), state: FedAvgMState },
    FedYogi { spec: (f64, f64, f64, f64), state: FedYogiState },
}

impl ServerOptimizer {
    pub fn new(spec: &AggregatorSpec) -> Self {
        match *spec {
            AggregatorSpec::FedAvg => ServerOptimizer::FedAvg,
            AggregatorSpec::FedAvgM { server_lr, momentum } => ServerOptimizer::FedAvgM {
                spec: (server_lr, momentum),
                state: FedAvgMState::default(),
            },
            AggregatorSpec::FedYogi { eta, beta1, beta2, tau } => ServerOptimizer::FedYogi {
                spec: (eta, beta1, beta2, tau),
                state: FedYogiState::default(),
            },
        }
    }

    /// Weighted average of the updates followed by the server rule.
    pub fn apply(&mut self, w_prev: &ModelParams, updates: &[(ModelParams, usize)]) -> Result<ModelParams, FlError> {
        let avg = aggregate_fedavg(updates)?;
        w_prev.check_same_shape(&avg)?;
        let next = match self {
            ServerOptimizer::FedAvg => avg,
            ServerOptimizer::FedAvgM { spec: (lr, beta), state } => state.step(w_prev, &avg, *lr, *beta)?,
            ServerOptimizer::FedYogi {
                spec: (eta, b1, b2, tau),
                state,
            } => state.step(w_prev, &avg, *eta, *b1, *b2, *tau)?,
        };
        if !next.is_finite() {
            return Err(FlError::NumericalDivergence { epoch: 0, batch: 0 });
        }
        Ok(next)
    }
}
