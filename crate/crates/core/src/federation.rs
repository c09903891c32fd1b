//! One federated round: local client training, parameter deltas and the regularized
//! weighted server update.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientProfile, Dataset, Shard};
use crate::error::{Error, Result};
use crate::nn::{sgd_step, Batch, ModelSpec, ParamVector};
use crate::seed::RoundStream;

/// Tolerance on `Σθ = 1` accepted by [`aggregate`].
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Per-client aggregation weights on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AggregationWeights(Vec<f64>);

impl AggregationWeights {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        check_simplex(&theta)?;
        Ok(AggregationWeights(theta))
    }

    pub fn uniform(clients: usize) -> Self {
        AggregationWeights(vec![1.0 / clients as f64; clients])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub fn check_simplex(theta: &[f64]) -> Result<()> {
    if theta.is_empty() {
        return Err(Error::InvalidArgument("aggregation weights are empty".into()));
    }
    if let Some(v) = theta.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::InvalidArgument(format!("weight {v} is negative or non-finite")));
    }
    let sum: f64 = theta.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::InvalidArgument(format!(
            "weights sum to {sum}, not 1 (tolerance {SIMPLEX_TOLERANCE})"
        )));
    }
    Ok(())
}

/// Data-proportional FedAvg weights, `|D_k| / Σ_j |D_j|`.
pub fn fedavg_weights(shards: &[Shard]) -> Result<AggregationWeights> {
    if shards.iter().any(|s| s.size() == 0) {
        return Err(Error::Data("every shard must be non-empty".into()));
    }
    let total: usize = shards.iter().map(Shard::size).sum();
    if total == 0 {
        return Err(Error::Data("total shard size is zero".into()));
    }
    Ok(AggregationWeights(
        shards.iter().map(|s| s.size() as f64 / total as f64).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    /// Local minus global parameters; zero when the client sat the round out.
    pub delta: ParamVector,
    /// Mean training loss over the final local epoch.
    pub local_loss: Option<f64>,
    pub participated: bool,
}

impl ClientUpdate {
    pub fn absent(len: usize) -> Self {
        ClientUpdate {
            delta: ParamVector::zeros(len),
            local_loss: None,
            participated: false,
        }
    }
}

/// A client with its shard materialized as a batch.
#[derive(Debug, Clone)]
pub struct Client {
    pub profile: ClientProfile,
    pub data: Batch,
}

/// Participation draw followed by `E_k` epochs of shuffled mini-batch SGD from `global`.
/// The first draw from `rng` decides participation; the rest drive shuffling.
pub fn client_update(
    model: &ModelSpec,
    global: &ParamVector,
    client: &Client,
    rng: &mut ChaCha8Rng,
) -> Result<ClientUpdate> {
    let profile = &client.profile;
    profile.validate()?;
    let present = rng.random::<f64>() < profile.participation;
    if !present {
        return Ok(ClientUpdate::absent(global.len()));
    }
    let n = client.data.len();
    let mut local = global.clone();
    let mut order: Vec<usize> = (0..n).collect();
    let mut last_epoch_loss = 0.0;
    for _ in 0..profile.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(profile.batch_size) {
            let batch = client.data.select(chunk)?;
            let (loss, grad) = model.loss_and_grad(&local, &batch)?;
            total += loss * chunk.len() as f64;
            local = sgd_step(&local, &grad, profile.local_lr, 0.0)?;
        }
        last_epoch_loss = total / n as f64;
    }
    Ok(ClientUpdate {
        delta: local.difference(global)?,
        local_loss: Some(last_epoch_loss),
        participated: true,
    })
}

/// `w + η_g Σ_k θ_k Δ_k − λ w` over participating clients, with weights on the simplex.
pub fn aggregate(
    global: &ParamVector,
    updates: &[ClientUpdate],
    theta: &[f64],
    eta_g: f64,
    lambda_model: f64,
) -> Result<ParamVector> {
    check_simplex(theta)?;
    aggregate_raw(global, updates, theta, eta_g, lambda_model)
}

/// [`aggregate`] without the simplex check, for unnormalized weight ablations.
pub fn aggregate_raw(
    global: &ParamVector,
    updates: &[ClientUpdate],
    theta: &[f64],
    eta_g: f64,
    lambda_model: f64,
) -> Result<ParamVector> {
    if updates.len() != theta.len() {
        return Err(Error::Dimension(format!(
            "{} updates but {} weights",
            updates.len(),
            theta.len()
        )));
    }
    let mut acc = vec![0.0; global.len()];
    for (update, &weight) in updates.iter().zip(theta) {
        if update.delta.len() != global.len() {
            return Err(Error::Dimension(format!(
                "delta has {} entries, model has {}",
                update.delta.len(),
                global.len()
            )));
        }
        if !update.participated {
            continue;
        }
        for (a, d) in acc.iter_mut().zip(update.delta.iter()) {
            *a += weight * d;
        }
    }
    Ok(ParamVector::new(
        global
            .iter()
            .zip(&acc)
            .map(|(&w, &a)| w + eta_g * a - lambda_model * w)
            .collect(),
    ))
}

/// Weights actually applied in a round. With `renormalize`, the mass of absent clients
/// is spread over those present; otherwise absent clients simply contribute nothing.
pub fn effective_weights(theta: &[f64], present: &[bool], renormalize: bool) -> Vec<f64> {
    if !renormalize {
        return theta.to_vec();
    }
    let mass: f64 = theta.iter().zip(present).filter(|(_, &p)| p).map(|(t, _)| t).sum();
    if mass <= 0.0 {
        return theta.to_vec();
    }
    theta
        .iter()
        .zip(present)
        .map(|(&t, &p)| if p { t / mass } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub theta: Vec<f64>,
    pub local_losses: Vec<Option<f64>>,
    pub participation: Vec<bool>,
    pub val_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub eta_g: f64,
    pub lambda_model: f64,
    pub renormalize_absent: bool,
    /// Skip the simplex check (unnormalized weight ablation).
    pub unchecked_weights: bool,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            eta_g: 1.0,
            lambda_model: 1e-4,
            renormalize_absent: false,
            unchecked_weights: false,
        }
    }
}

/// Everything one round produced.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub next: ParamVector,
    pub updates: Vec<ClientUpdate>,
    pub record: RoundRecord,
    /// Gradient of the validation loss at `next`, when requested.
    pub val_grad: Option<ParamVector>,
}

/// The simulated population: model, clients, server validation split and test set.
#[derive(Debug, Clone)]
pub struct Federation {
    pub model: ModelSpec,
    pub clients: Vec<Client>,
    pub validation: Batch,
    pub test: Batch,
}

impl Federation {
    pub fn new(
        model: ModelSpec,
        pool: &Dataset,
        profiles: Vec<ClientProfile>,
        validation: &Dataset,
        test: &Dataset,
    ) -> Result<Self> {
        if profiles.is_empty() {
            return Err(Error::Data("federation needs at least one client".into()));
        }
        for d in [pool, validation, test] {
            if d.dim() != model.input_dim() {
                return Err(Error::Dimension(format!(
                    "dataset dimension {} does not match model input {}",
                    d.dim(),
                    model.input_dim()
                )));
            }
        }
        let clients = profiles
            .into_iter()
            .map(|profile| {
                profile.validate()?;
                let data = pool.batch(&profile.shard.indices)?;
                Ok(Client { profile, data })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Federation {
            model,
            clients,
            validation: validation.full_batch()?,
            test: test.full_batch()?,
        })
    }

    pub fn from_parts(model: ModelSpec, clients: Vec<Client>, validation: Batch, test: Batch) -> Self {
        Federation {
            model,
            clients,
            validation,
            test,
        }
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn shards(&self) -> Vec<Shard> {
        self.clients.iter().map(|c| c.profile.shard.clone()).collect()
    }

    pub fn fedavg_weights(&self) -> Result<AggregationWeights> {
        fedavg_weights(&self.shards())
    }

    /// Runs every client (possibly in parallel) and returns updates in client order.
    pub fn client_updates(
        &self,
        global: &ParamVector,
        stream: RoundStream,
        rounds_seed: u64,
        round: usize,
    ) -> Result<Vec<ClientUpdate>> {
        self.clients
            .par_iter()
            .enumerate()
            .map(|(k, client)| {
                let mut rng = stream.client_rng(rounds_seed, round, k);
                client_update(&self.model, global, client, &mut rng)
            })
            .collect()
    }

    /// Distribute `global`, train locally, aggregate with `theta`, evaluate.
    #[allow(clippy::too_many_arguments)]
    pub fn run_round(
        &self,
        round: usize,
        global: &ParamVector,
        theta: &[f64],
        config: &RoundConfig,
        stream: RoundStream,
        rounds_seed: u64,
        want_val_grad: bool,
    ) -> Result<RoundOutcome> {
        if theta.len() != self.len() {
            return Err(Error::Dimension(format!(
                "{} weights for {} clients",
                theta.len(),
                self.len()
            )));
        }
        let updates = self.client_updates(global, stream, rounds_seed, round)?;
        let present: Vec<bool> = updates.iter().map(|u| u.participated).collect();
        let applied = effective_weights(theta, &present, config.renormalize_absent);
        let next = if config.unchecked_weights {
            aggregate_raw(global, &updates, &applied, config.eta_g, config.lambda_model)?
        } else {
            aggregate(global, &updates, &applied, config.eta_g, config.lambda_model)?
        };
        let (val_loss, val_grad) = if want_val_grad {
            let (loss, grad) = self.model.loss_and_grad(&next, &self.validation)?;
            (loss, Some(grad))
        } else {
            (self.model.loss(&next, &self.validation)?, None)
        };
        let (_, test_accuracy) = self.model.evaluate(&next, &self.test)?;
        let record = RoundRecord {
            round,
            theta: applied,
            local_losses: updates.iter().map(|u| u.local_loss).collect(),
            participation: present,
            val_loss,
            test_accuracy,
        };
        Ok(RoundOutcome {
            next,
            updates,
            record,
            val_grad,
        })
    }

    /// `rounds` consecutive rounds with one fixed weight vector.
    pub fn run_fixed(
        &self,
        init: &ParamVector,
        theta: &[f64],
        rounds: usize,
        config: &RoundConfig,
        stream: RoundStream,
        rounds_seed: u64,
    ) -> Result<(ParamVector, Vec<RoundRecord>)> {
        let mut w = init.clone();
        let mut records = Vec::with_capacity(rounds);
        for t in 0..rounds {
            let outcome = self.run_round(t, &w, theta, config, stream, rounds_seed, false)?;
            w = outcome.next;
            records.push(outcome.record);
        }
        Ok((w, records))
    }
}
