use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::serialize::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled decay: each step subtracts `lr * weight_decay * param`.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite()
            && self.learning_rate.is_finite();
        if ok {
            Ok(())
        } else {
            Err(invalid!("invalid optimizer settings {self:?}"))
        }
    }
}

/// Moment estimates and step count of one Adam run.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<F>, Vec<F>)>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of every parameter. Parameters without a
/// gradient are treated as having a zero gradient.
pub fn adam_step<F: Real>(
    params: &mut ParamStore<F>,
    grads: &BTreeMap<String, Tensor<F>>,
    state: &mut OptimizerState<F>,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(invalid!(
                "gradient of '{name}' has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            ));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter '{name}'")));
        }
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
    let (one_b1, one_b2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
    let (lr, decay, eps) = (F::of(c.learning_rate), F::of(c.learning_rate * c.weight_decay), F::of(c.epsilon));
    let (inv_bc1, inv_bc2) = (F::of(1.0 / bc1), F::of(1.0 / bc2));

    let names: Vec<String> = params.params().map(|(k, _)| k.clone()).collect();
    for name in names {
        let p = params.get(&name)?;
        let n = p.len();
        let g = grads.get(&name);
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![F::zero(); n], vec![F::zero(); n]));
        let mut out = p.to_vec();
        for i in 0..n {
            let gi = g.map_or(F::zero(), |g| g.data()[i]);
            m[i] = b1 * m[i] + one_b1 * gi;
            v[i] = b2 * v[i] + one_b2 * gi * gi;
            let m_hat = m[i] * inv_bc1;
            let v_hat = v[i] * inv_bc2;
            out[i] = out[i] - decay * out[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        let shape = p.shape().to_vec();
        let updated = Tensor::new(shape, out)?;
        if !updated.all_finite() {
            return Err(Error::NonFinite(format!("parameter '{name}' after update")));
        }
        params.set(&name, updated)?;
    }
    Ok(())
}
