//! Learnable per-round aggregation weights and their parameterizations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::AggregationWeights;

/// `T × K` matrix of unconstrained logits, row `t` driving round `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightLogits {
    rounds: usize,
    clients: usize,
    values: Vec<f64>,
}

impl WeightLogits {
    pub fn zeros(rounds: usize, clients: usize) -> Self {
        WeightLogits {
            rounds,
            clients,
            values: vec![0.0; rounds * clients],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let rounds = rows.len();
        let clients = rows.first().map_or(0, Vec::len);
        if rounds == 0 || clients == 0 {
            return Err(Error::Dimension("logits need at least one row and column".into()));
        }
        if rows.iter().any(|r| r.len() != clients) {
            return Err(Error::Dimension("logit rows have unequal lengths".into()));
        }
        let values: Vec<f64> = rows.into_iter().flatten().collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits must be finite".into()));
        }
        Ok(WeightLogits {
            rounds,
            clients,
            values,
        })
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rounds, self.clients)
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.clients..(t + 1) * self.clients]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.values[t * self.clients..(t + 1) * self.clients]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.clients).map(<[f64]>::to_vec).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Subtracts each row's maximum, so every row has max 0.
    pub fn max_centered(&self) -> Self {
        let mut out = self.clone();
        for t in 0..self.rounds {
            let row = out.row_mut(t);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for v in row {
                *v -= max;
            }
        }
        out
    }
}

/// `z ← z − η (grad + λ z)`.
pub fn meta_step(z: &WeightLogits, row_grads: &WeightLogits, eta_meta: f64, lambda_theta: f64) -> Result<WeightLogits> {
    if z.shape() != row_grads.shape() {
        return Err(Error::Dimension(format!(
            "logits {:?} vs gradients {:?}",
            z.shape(),
            row_grads.shape()
        )));
    }
    let mut out = z.clone();
    for (v, g) in out.values.iter_mut().zip(&row_grads.values) {
        *v -= eta_meta * (g + lambda_theta * *v);
    }
    Ok(out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_weights(z_row: &[f64]) -> AggregationWeights {
    AggregationWeights::new(prior_softmax(z_row, None)).expect("softmax lands on the simplex")
}

fn prior_softmax(z_row: &[f64], prior: Option<&[f64]>) -> Vec<f64> {
    let max = z_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = match prior {
        Some(p) => z_row.iter().zip(p).map(|(z, p)| p * (z - max).exp()).collect(),
        None => z_row.iter().map(|z| (z - max).exp()).collect(),
    };
    let sum: f64 = scaled.iter().sum();
    scaled.into_iter().map(|v| v / sum).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `θ ∝ prior ⊙ exp(z)`; always on the simplex.
    Softmax,
    /// `θ = π ⊙ exp(z)` with `π` the normalized prior; free total mass.
    Unnormalized,
    /// `θ = max(π + z, 0) / Σ max(π + z, 0)`; normalized after a linear update.
    PostHoc,
}

/// Fixed per-client base measure the logits are taken relative to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightPrior {
    Uniform,
    /// Shard sizes: zero logits reproduce FedAvg weights exactly.
    DataSize,
}

/// Maps a logit row to aggregation weights and pulls weight-gradients back to logits.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    normalization: Normalization,
    /// `None` is the uniform prior, kept separate so plain softmax takes no extra
    /// multiplications.
    prior: Option<Vec<f64>>,
}

impl WeightMap {
    pub fn new(normalization: Normalization, prior: Option<Vec<f64>>) -> Result<Self> {
        if let Some(p) = &prior {
            if p.is_empty() || p.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::InvalidArgument("prior weights must be positive".into()));
            }
        }
        Ok(WeightMap { normalization, prior })
    }

    pub fn softmax() -> Self {
        WeightMap {
            normalization: Normalization::Softmax,
            prior: None,
        }
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    /// Whether outputs are guaranteed to lie on the simplex.
    pub fn on_simplex(&self) -> bool {
        self.normalization != Normalization::Unnormalized
    }

    fn normalized_prior(&self, k: usize) -> Vec<f64> {
        match &self.prior {
            Some(p) => {
                let s: f64 = p.iter().sum();
                p.iter().map(|v| v / s).collect()
            }
            None => vec![1.0 / k as f64; k],
        }
    }

    fn check_len(&self, z_row: &[f64]) -> Result<()> {
        if let Some(p) = &self.prior {
            if p.len() != z_row.len() {
                return Err(Error::Dimension(format!(
                    "{} logits but prior has {} entries",
                    z_row.len(),
                    p.len()
                )));
            }
        }
        Ok(())
    }

    pub fn weights(&self, z_row: &[f64]) -> Result<Vec<f64>> {
        self.check_len(z_row)?;
        if z_row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logit row {z_row:?}")));
        }
        match self.normalization {
            Normalization::Softmax => Ok(prior_softmax(z_row, self.prior.as_deref())),
            Normalization::Unnormalized => {
                let pi = self.normalized_prior(z_row.len());
                Ok(z_row.iter().zip(pi).map(|(z, p)| p * z.exp()).collect())
            }
            Normalization::PostHoc => {
                let pi = self.normalized_prior(z_row.len());
                let raw: Vec<f64> = z_row.iter().zip(pi).map(|(z, p)| (p + z).max(0.0)).collect();
                let sum: f64 = raw.iter().sum();
                if sum <= 0.0 {
                    return Err(Error::InvalidArgument("post-hoc weights collapsed to zero mass".into()));
                }
                Ok(raw.into_iter().map(|r| r / sum).collect())
            }
        }
    }

    /// Chain rule from `∂L/∂θ` to `∂L/∂z` for one row.
    pub fn pullback(&self, z_row: &[f64], d_theta: &[f64]) -> Result<Vec<f64>> {
        let theta = self.weights(z_row)?;
        if d_theta.len() != theta.len() {
            return Err(Error::Dimension("weight gradient length mismatch".into()));
        }
        Ok(match self.normalization {
            Normalization::Softmax => {
                let mean: f64 = theta.iter().zip(d_theta).map(|(t, d)| t * d).sum();
                theta.iter().zip(d_theta).map(|(t, d)| t * (d - mean)).collect()
            }
            Normalization::Unnormalized => theta.iter().zip(d_theta).map(|(t, d)| t * d).collect(),
            Normalization::PostHoc => {
                let pi = self.normalized_prior(z_row.len());
                let sum: f64 = z_row.iter().zip(&pi).map(|(z, p)| (p + z).max(0.0)).sum();
                let mean: f64 = theta.iter().zip(d_theta).map(|(t, d)| t * d).sum();
                z_row
                    .iter()
                    .zip(&pi)
                    .zip(d_theta)
                    .map(|((z, p), d)| if p + z > 0.0 { (d - mean) / sum } else { 0.0 })
                    .collect()
            }
        })
    }

    pub fn theta_matrix(&self, logits: &WeightLogits) -> Result<Vec<Vec<f64>>> {
        (0..logits.rounds()).map(|t| self.weights(logits.row(t))).collect()
    }
}
