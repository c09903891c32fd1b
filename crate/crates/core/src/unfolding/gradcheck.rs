//! Randomized agreement check between the analytic truncated meta-gradient and central
//! finite differences of the frozen one-round objective.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{check_epsilon, fd_meta_gradient_row, row_gradient, FrozenRound, WeightMap};
use crate::error::Result;
use crate::federation::ClientUpdate;
use crate::nn::{Batch, ModelSpec, ParamVector};
use crate::seed;

/// Denominator floor for relative errors of near-zero components.
pub const RELATIVE_FLOOR: f64 = 1e-8;

/// `max_i |a_i − b_i| / max(|a_i|, |b_i|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// A random one-round problem: model, global params, frozen client deltas, validation
/// batch and a logit row.
#[derive(Debug, Clone)]
pub struct Instance {
    pub model: ModelSpec,
    pub global: ParamVector,
    pub updates: Vec<ClientUpdate>,
    pub val: Batch,
    pub z_row: Vec<f64>,
    pub eta_g: f64,
    pub lambda_model: f64,
}

impl Instance {
    pub fn frozen<'a>(&'a self, map: &'a WeightMap) -> FrozenRound<'a> {
        FrozenRound {
            model: &self.model,
            map,
            global: &self.global,
            updates: &self.updates,
            val: &self.val,
            eta_g: self.eta_g,
            lambda_model: self.lambda_model,
            renormalize_absent: false,
        }
    }

    /// True when no rectifier changes sign anywhere on the finite-difference stencil.
    pub fn is_smooth(&self, map: &WeightMap, eps: f64) -> Result<bool> {
        let round = self.frozen(map);
        let reference = self
            .model
            .activation_pattern(&round.next_params(&self.z_row)?, &self.val)?;
        for j in 0..self.z_row.len() {
            for sign in [-1.0, -0.5, 0.5, 1.0] {
                let mut z = self.z_row.clone();
                z[j] += sign * eps;
                let pattern = self.model.activation_pattern(&round.next_params(&z)?, &self.val)?;
                if pattern != reference {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }
}

fn draw(rng: &mut ChaCha8Rng, model: &ModelSpec, clients: usize, samples: usize) -> Instance {
    let global = ParamVector::new((0..model.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect());
    let updates = (0..clients)
        .map(|_| ClientUpdate {
            delta: ParamVector::new((0..model.param_count()).map(|_| rng.random_range(-0.5..0.5)).collect()),
            local_loss: None,
            participated: true,
        })
        .collect();
    let features = Array2::from_shape_fn((samples, model.input_dim()), |_| rng.random::<f64>());
    let labels = (0..samples).map(|_| rng.random_range(0..model.classes())).collect();
    Instance {
        model: model.clone(),
        global,
        updates,
        val: Batch::new(features, labels).expect("non-empty batch"),
        z_row: (0..clients).map(|_| rng.random_range(-1.0..1.0)).collect(),
        eta_g: rng.random_range(0.5..1.5),
        lambda_model: 1e-3,
    }
}

/// Draws instances until one is smooth on the stencil; `attempt` is the stream position.
pub fn random_instance(seed: u64, index: usize, eps: f64) -> Result<Instance> {
    let model = ModelSpec::new(vec![4, 3, 2])?;
    let map = WeightMap::softmax();
    for attempt in 0u64.. {
        let mut rng = seed::rng(seed, &[index as u64, attempt]);
        let inst = draw(&mut rng, &model, 3, 16);
        if inst.is_smooth(&map, eps)? {
            return Ok(inst);
        }
    }
    unreachable!("attempt counter is unbounded")
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub epsilon: f64,
    pub errors: Vec<f64>,
    pub max_relative_error: f64,
}

impl GradcheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Compares analytic and finite-difference row gradients on `instances` random problems.
/// `flip_sign` negates the analytic gradient as a negative control.
pub fn run(instances: usize, eps: f64, seed: u64, flip_sign: bool) -> Result<GradcheckReport> {
    check_epsilon(eps)?;
    let map = WeightMap::softmax();
    let mut errors = Vec::with_capacity(instances);
    for i in 0..instances {
        let inst = random_instance(seed, i, eps)?;
        let (_, g) = inst
            .model
            .loss_and_grad(&inst.frozen(&map).next_params(&inst.z_row)?, &inst.val)?;
        let mut analytic = row_gradient(&map, &inst.z_row, &inst.updates, &g, inst.eta_g, false)?;
        if flip_sign {
            analytic.iter_mut().for_each(|v| *v = -*v);
        }
        let numeric = fd_meta_gradient_row(&inst.frozen(&map), &inst.z_row, eps)?;
        errors.push(max_relative_error(&analytic, &numeric, RELATIVE_FLOOR));
    }
    let max = errors.iter().cloned().fold(0.0, f64::max);
    Ok(GradcheckReport {
        epsilon: eps,
        errors,
        max_relative_error: max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(max_relative_error(&[1.0, 2.0], &[1.0, 2.0], 1e-8), 0.0);
        assert!((max_relative_error(&[1.0], &[1.1], 1e-8) - 0.1 / 1.1).abs() < 1e-12);
        assert!((max_relative_error(&[0.0], &[1e-12], 1e-8) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn instances_are_reproducible() {
        let a = random_instance(3, 0, 1e-3).unwrap();
        let b = random_instance(3, 0, 1e-3).unwrap();
        assert_eq!(a.global, b.global);
        assert_eq!(a.z_row, b.z_row);
    }

    #[test]
    fn sign_flip_fails() {
        let report = run(3, 1e-3, 11, true).unwrap();
        assert!(!report.passes(1e-4));
        let ok = run(3, 1e-3, 11, false).unwrap();
        assert!(ok.passes(1e-4), "{:?}", ok.errors);
    }
}
