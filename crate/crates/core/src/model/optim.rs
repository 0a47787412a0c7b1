//! AdamW with bias correction and decoupled weight decay.
//!
//! ```text
//! w <- w * (1 - lr * wd)
//! m <- b1 * m + (1 - b1) * g
//! v <- b2 * v + (1 - b2) * g^2
//! w <- w - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
//! ```

use indexmap::IndexMap;
use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use super::params::{LayerSelection, ParameterStore};
use super::transformer::Gradients;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moments for exactly the selected parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    step: u64,
    moments: IndexMap<String, (ArrayD<f64>, ArrayD<f64>)>,
}

impl OptimizerState {
    pub fn new(
        config: AdamWConfig,
        params: &ParameterStore,
        selection: &LayerSelection,
    ) -> Result<Self> {
        let moments = selection
            .names()
            .iter()
            .map(|n| {
                let p = params
                    .get(n)
                    .ok_or_else(|| Error::UnknownParameter(n.clone()))?;
                Ok((
                    n.clone(),
                    (ArrayD::zeros(p.raw_dim()), ArrayD::zeros(p.raw_dim())),
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            step: 0,
            moments,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

pub fn adamw_step(
    params: &mut ParameterStore,
    grads: &Gradients,
    state: &mut OptimizerState,
) -> Result<()> {
    if grads.len() != state.moments.len() {
        return Err(Error::SelectionMismatch(format!(
            "{} gradients for {} optimized parameters",
            grads.len(),
            state.moments.len()
        )));
    }
    for (name, g) in grads.iter() {
        let (m, _) = state
            .moments
            .get(name)
            .ok_or_else(|| Error::SelectionMismatch(format!("unexpected gradient {name}")))?;
        if m.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                name: name.to_owned(),
                expected: m.shape().to_vec(),
                actual: g.shape().to_vec(),
            });
        }
    }

    state.step += 1;
    let AdamWConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let decay = 1.0 - lr * weight_decay;

    for (name, (m, v)) in state.moments.iter_mut() {
        let g = grads.get(name).expect("validated above");
        let w = params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        Zip::from(w).and(m).and(v).and(g).for_each(|w, m, v, &g| {
            *w *= decay;
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        });
    }
    Ok(())
}
