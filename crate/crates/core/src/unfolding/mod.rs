//! Learning per-round aggregation weights by unrolling the federated horizon.
//!
//! Each meta-iteration replays `T` rounds from the same initial model with weights
//! `θ(t) = map(z[t])`, accumulates the meta-objective after every round and then takes
//! one decayed SGD step on the logits. Gradients are truncated to one round: row `t`
//! only sees how `θ(t)` moves `w(t+1)`, with that round's client deltas held fixed.

pub mod gradcheck;
mod weights;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{aggregate_raw, effective_weights, ClientUpdate, Federation, RoundConfig, RoundRecord};
use crate::nn::{Batch, ModelSpec, ParamVector};
use crate::seed::{RoundStream, Seeds};

pub use weights::{meta_step, softmax_weights, Normalization, WeightLogits, WeightMap, WeightPrior};

/// What the meta-loss sums after each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaObjective {
    /// Loss on the server-held validation split.
    Validation,
    /// Sum over clients of the loss on their own shard.
    ClientLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnfoldConfig {
    pub clients: usize,
    pub meta_iterations: usize,
    pub rounds: usize,
    pub eta_g: f64,
    pub eta_meta: f64,
    pub lambda_model: f64,
    pub lambda_theta: f64,
    pub normalization: Normalization,
    pub prior: WeightPrior,
    pub objective: MetaObjective,
    pub renormalize_absent: bool,
    pub seeds: Seeds,
}

impl Default for UnfoldConfig {
    fn default() -> Self {
        UnfoldConfig {
            clients: 5,
            meta_iterations: 100,
            rounds: 10,
            eta_g: 1.0,
            eta_meta: 0.5,
            lambda_model: 1e-4,
            lambda_theta: 1e-4,
            normalization: Normalization::Softmax,
            prior: WeightPrior::Uniform,
            objective: MetaObjective::Validation,
            renormalize_absent: false,
            seeds: Seeds::default(),
        }
    }
}

impl UnfoldConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("clients", self.clients),
            ("meta_iterations", self.meta_iterations),
            ("rounds", self.rounds),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if !(self.eta_g > 0.0 && self.eta_g.is_finite()) {
            return Err(Error::config("server_lr", format!("must be > 0, got {}", self.eta_g)));
        }
        // zero is allowed: it freezes the logits
        if !(self.eta_meta >= 0.0 && self.eta_meta.is_finite()) {
            return Err(Error::config("meta_lr", format!("must be >= 0, got {}", self.eta_meta)));
        }
        for (field, v) in [("model_decay", self.lambda_model), ("weight_decay", self.lambda_theta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn round_config(&self, map: &WeightMap) -> RoundConfig {
        RoundConfig {
            eta_g: self.eta_g,
            lambda_model: self.lambda_model,
            renormalize_absent: self.renormalize_absent,
            unchecked_weights: !map.on_simplex(),
        }
    }

    pub fn weight_map(&self, federation: &Federation) -> Result<WeightMap> {
        let prior = match self.prior {
            WeightPrior::Uniform => None,
            WeightPrior::DataSize => Some(
                federation
                    .clients
                    .iter()
                    .map(|c| c.profile.shard.size() as f64)
                    .collect(),
            ),
        };
        WeightMap::new(self.normalization, prior)
    }

    /// Logits every run starts from: all zeros, i.e. the prior itself.
    pub fn initial_logits(&self) -> WeightLogits {
        WeightLogits::zeros(self.rounds, self.clients)
    }
}

/// `∂L/∂θ_eff` → `∂L/∂θ` when absent clients' mass is renormalized away.
fn renormalization_pullback(theta: &[f64], present: &[bool], d_eff: &[f64]) -> Vec<f64> {
    let mass: f64 = theta.iter().zip(present).filter(|(_, &p)| p).map(|(t, _)| t).sum();
    if mass <= 0.0 {
        return d_eff.to_vec();
    }
    let mean: f64 = theta
        .iter()
        .zip(present)
        .zip(d_eff)
        .filter(|((_, &p), _)| p)
        .map(|((t, _), d)| t / mass * d)
        .sum();
    present
        .iter()
        .zip(d_eff)
        .map(|(&p, d)| if p { (d - mean) / mass } else { 0.0 })
        .collect()
}

/// Truncated meta-gradient for one round given `g = ∇_w L(w_next)`.
///
/// With `a_k = η_g ⟨g, Δ_k⟩` (zero for absent clients) the loss moves by `a_k` per unit
/// of applied weight; the weight map turns that into a logit gradient. For the softmax
/// this is `θ_j (a_j − Σ_k θ_k a_k)`.
pub fn row_gradient(
    map: &WeightMap,
    z_row: &[f64],
    updates: &[ClientUpdate],
    objective_grad: &ParamVector,
    eta_g: f64,
    renormalize_absent: bool,
) -> Result<Vec<f64>> {
    if updates.len() != z_row.len() {
        return Err(Error::Dimension(format!(
            "{} updates for a row of {} logits",
            updates.len(),
            z_row.len()
        )));
    }
    let sensitivity = updates
        .iter()
        .map(|u| {
            if u.participated {
                Ok(eta_g * objective_grad.dot(&u.delta)?)
            } else {
                Ok(0.0)
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let d_theta = if renormalize_absent {
        let theta = map.weights(z_row)?;
        let present: Vec<bool> = updates.iter().map(|u| u.participated).collect();
        renormalization_pullback(&theta, &present, &sensitivity)
    } else {
        sensitivity
    };
    map.pullback(z_row, &d_theta)
}

/// `∂ L_val(w_next) / ∂ z_row` for plain softmax weights, deltas held constant.
pub fn meta_gradient_row(
    model: &ModelSpec,
    z_row: &[f64],
    updates: &[ClientUpdate],
    w_next: &ParamVector,
    val: &Batch,
    eta_g: f64,
) -> Result<Vec<f64>> {
    let (_, g) = model.loss_and_grad(w_next, val)?;
    row_gradient(&WeightMap::softmax(), z_row, updates, &g, eta_g, false)
}

pub const FD_EPSILON_RANGE: (f64, f64) = (1e-6, 1e-2);

pub fn check_epsilon(eps: f64) -> Result<()> {
    if !(FD_EPSILON_RANGE.0..=FD_EPSILON_RANGE.1).contains(&eps) {
        return Err(Error::config(
            "epsilon",
            format!("{eps} outside [{}, {}]", FD_EPSILON_RANGE.0, FD_EPSILON_RANGE.1),
        ));
    }
    Ok(())
}

/// Central differences of `objective` at `z`.
pub fn fd_gradient(mut objective: impl FnMut(&[f64]) -> Result<f64>, z: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_epsilon(eps)?;
    let mut probe = z.to_vec();
    (0..z.len())
        .map(|j| {
            probe[j] = z[j] + eps;
            let up = objective(&probe)?;
            probe[j] = z[j] - eps;
            let down = objective(&probe)?;
            probe[j] = z[j];
            Ok((up - down) / (2.0 * eps))
        })
        .collect()
}

/// One round frozen at its client deltas: the map `z ↦ L_val(aggregate(w, Δ, θ(z)))`.
#[derive(Debug, Clone)]
pub struct FrozenRound<'a> {
    pub model: &'a ModelSpec,
    pub map: &'a WeightMap,
    pub global: &'a ParamVector,
    pub updates: &'a [ClientUpdate],
    pub val: &'a Batch,
    pub eta_g: f64,
    pub lambda_model: f64,
    pub renormalize_absent: bool,
}

impl FrozenRound<'_> {
    pub fn next_params(&self, z_row: &[f64]) -> Result<ParamVector> {
        let theta = self.map.weights(z_row)?;
        let present: Vec<bool> = self.updates.iter().map(|u| u.participated).collect();
        let applied = effective_weights(&theta, &present, self.renormalize_absent);
        aggregate_raw(self.global, self.updates, &applied, self.eta_g, self.lambda_model)
    }

    pub fn objective(&self, z_row: &[f64]) -> Result<f64> {
        self.model.loss(&self.next_params(z_row)?, self.val)
    }
}

/// Finite-difference oracle for [`meta_gradient_row`] / [`row_gradient`].
pub fn fd_meta_gradient_row(round: &FrozenRound<'_>, z_row: &[f64], eps: f64) -> Result<Vec<f64>> {
    fd_gradient(|z| round.objective(z), z_row, eps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaIteration {
    pub meta_iter: usize,
    pub meta_loss: f64,
    /// Logits used during this iteration (before its update).
    pub logits: WeightLogits,
    pub rounds: Vec<RoundRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetaTrace {
    pub iterations: Vec<MetaIteration>,
}

impl MetaTrace {
    pub fn meta_losses(&self) -> Vec<f64> {
        self.iterations.iter().map(|i| i.meta_loss).collect()
    }
}

struct Replay {
    meta_loss: f64,
    records: Vec<RoundRecord>,
    row_grads: WeightLogits,
}

fn objective_loss_and_grad(
    federation: &Federation,
    objective: MetaObjective,
    next: &ParamVector,
    val_loss: f64,
    val_grad: Option<ParamVector>,
) -> Result<(f64, Option<ParamVector>)> {
    match objective {
        MetaObjective::Validation => Ok((val_loss, val_grad)),
        MetaObjective::ClientLoss => {
            let mut total = 0.0;
            let mut grad = ParamVector::zeros(next.len());
            for client in &federation.clients {
                let (loss, g) = federation.model.loss_and_grad(next, &client.data)?;
                total += loss;
                for (a, b) in grad.iter_mut().zip(g.iter()) {
                    *a += b;
                }
            }
            Ok((total, Some(grad)))
        }
    }
}

fn replay(
    federation: &Federation,
    config: &UnfoldConfig,
    map: &WeightMap,
    init: &ParamVector,
    logits: &WeightLogits,
    stream: RoundStream,
    with_gradients: bool,
) -> Result<Replay> {
    let round_config = config.round_config(map);
    let mut w = init.clone();
    let mut meta_loss = 0.0;
    let mut records = Vec::with_capacity(config.rounds);
    let mut row_grads = WeightLogits::zeros(config.rounds, federation.len());
    let want_val_grad = with_gradients && config.objective == MetaObjective::Validation;
    for t in 0..config.rounds {
        let z_row = logits.row(t);
        let theta = map.weights(z_row)?;
        let outcome = federation.run_round(t, &w, &theta, &round_config, stream, config.seeds.rounds, want_val_grad)?;
        let (loss, grad) = if with_gradients {
            objective_loss_and_grad(
                federation,
                config.objective,
                &outcome.next,
                outcome.record.val_loss,
                outcome.val_grad,
            )?
        } else if config.objective == MetaObjective::Validation {
            (outcome.record.val_loss, None)
        } else {
            let total = federation
                .clients
                .iter()
                .map(|c| federation.model.loss(&outcome.next, &c.data))
                .sum::<Result<f64>>()?;
            (total, None)
        };
        meta_loss += loss;
        if let Some(g) = grad {
            let row = row_gradient(
                map,
                z_row,
                &outcome.updates,
                &g,
                config.eta_g,
                config.renormalize_absent,
            )?;
            row_grads.row_mut(t).copy_from_slice(&row);
        }
        w = outcome.next;
        records.push(outcome.record);
    }
    Ok(Replay {
        meta_loss,
        records,
        row_grads,
    })
}

fn check_shapes(federation: &Federation, config: &UnfoldConfig, logits: &WeightLogits) -> Result<()> {
    config.validate()?;
    if federation.len() != config.clients {
        return Err(Error::config(
            "clients",
            format!(
                "config says {} but the federation has {}",
                config.clients,
                federation.len()
            ),
        ));
    }
    if logits.shape() != (config.rounds, config.clients) {
        return Err(Error::Dimension(format!(
            "logits {:?} but config needs ({}, {})",
            logits.shape(),
            config.rounds,
            config.clients
        )));
    }
    Ok(())
}

/// Learns the `T × K` logits. `init` defaults to [`UnfoldConfig::initial_logits`].
pub fn unfold_train(
    federation: &Federation,
    config: &UnfoldConfig,
    init: Option<WeightLogits>,
) -> Result<(WeightLogits, MetaTrace)> {
    let mut logits = init.unwrap_or_else(|| config.initial_logits());
    check_shapes(federation, config, &logits)?;
    if !logits.is_finite() {
        return Err(Error::NonFinite("initial logits".into()));
    }
    let map = config.weight_map(federation)?;
    if map.normalization() == Normalization::Softmax {
        logits = logits.max_centered();
    }
    let w0 = federation.model.init(config.seeds.model);
    let mut trace = MetaTrace::default();
    for m in 0..config.meta_iterations {
        let run = replay(federation, config, &map, &w0, &logits, RoundStream::Meta(m), true)?;
        if !run.meta_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "meta-loss {} at meta-iteration {m}; last logits {:?}",
                run.meta_loss,
                logits.rows()
            )));
        }
        let next = meta_step(&logits, &run.row_grads, config.eta_meta, config.lambda_theta)?;
        trace.iterations.push(MetaIteration {
            meta_iter: m,
            meta_loss: run.meta_loss,
            logits,
            rounds: run.records,
        });
        logits = next;
    }
    Ok((logits, trace))
}

/// Runs the `T`-round horizon on the evaluation stream with the given logits.
pub fn evaluate_logits(
    federation: &Federation,
    config: &UnfoldConfig,
    logits: &WeightLogits,
) -> Result<(ParamVector, Vec<RoundRecord>)> {
    check_shapes(federation, config, logits)?;
    let map = config.weight_map(federation)?;
    let theta = map.theta_matrix(logits)?;
    let round_config = config.round_config(&map);
    let mut w = federation.model.init(config.seeds.model);
    let mut records = Vec::with_capacity(config.rounds);
    for (t, row) in theta.iter().enumerate() {
        let outcome = federation.run_round(
            t,
            &w,
            row,
            &round_config,
            RoundStream::Evaluation,
            config.seeds.rounds,
            false,
        )?;
        w = outcome.next;
        records.push(outcome.record);
    }
    Ok((w, records))
}

/// Accumulated meta-loss of one replay on the stream of meta-iteration `meta_iter`.
pub fn meta_loss_at(
    federation: &Federation,
    config: &UnfoldConfig,
    logits: &WeightLogits,
    meta_iter: usize,
) -> Result<f64> {
    check_shapes(federation, config, logits)?;
    let map = config.weight_map(federation)?;
    let w0 = federation.model.init(config.seeds.model);
    Ok(replay(
        federation,
        config,
        &map,
        &w0,
        logits,
        RoundStream::Meta(meta_iter),
        false,
    )?
    .meta_loss)
}

/// Truncated row gradients for one replay, as used by [`unfold_train`].
pub fn truncated_gradient(
    federation: &Federation,
    config: &UnfoldConfig,
    logits: &WeightLogits,
    meta_iter: usize,
) -> Result<WeightLogits> {
    check_shapes(federation, config, logits)?;
    let map = config.weight_map(federation)?;
    let w0 = federation.model.init(config.seeds.model);
    Ok(replay(
        federation,
        config,
        &map,
        &w0,
        logits,
        RoundStream::Meta(meta_iter),
        true,
    )?
    .row_grads)
}

/// Slow diagnostic: central differences of the whole accumulated meta-loss with respect
/// to every logit, re-running the full horizon (client training included) per probe.
/// Comparing against [`truncated_gradient`] measures what truncation ignores.
pub fn fd_full_trajectory(
    federation: &Federation,
    config: &UnfoldConfig,
    logits: &WeightLogits,
    meta_iter: usize,
    eps: f64,
) -> Result<WeightLogits> {
    check_shapes(federation, config, logits)?;
    let grad = fd_gradient(
        |flat| {
            let rows = flat.chunks(config.clients).map(<[f64]>::to_vec).collect();
            meta_loss_at(federation, config, &WeightLogits::from_rows(rows)?, meta_iter)
        },
        logits.values(),
        eps,
    )?;
    WeightLogits::from_rows(grad.chunks(config.clients).map(<[f64]>::to_vec).collect())
}
