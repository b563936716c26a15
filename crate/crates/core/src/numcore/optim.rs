use serde::{Deserialize, Serialize};

use super::params::{ParamGrads, Parameters};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    #[serde(flatten)]
    pub kind: OptimizerKind,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self { lr, kind: OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 } }
    }

    pub fn sgd(lr: f64) -> Self {
        Self { lr, kind: OptimizerKind::Sgd }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer state aligned with one [`Parameters`] store.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    config: OptimizerConfig,
    moments: Vec<Moments>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &Parameters) -> Self {
        let moments = params
            .iter()
            .map(|(_, _, t)| Moments { first: vec![0.0; t.len()], second: vec![0.0; t.len()] })
            .collect();
        Self { config, moments, steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Change the learning rate, keeping the accumulated moments.
    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step(&mut self, params: &mut Parameters, grads: &ParamGrads) -> Result<()> {
        self.step_filtered(params, grads, |_| true)
    }

    /// Update only the parameters whose name passes `filter`.
    pub fn step_filtered(
        &mut self,
        params: &mut Parameters,
        grads: &ParamGrads,
        filter: impl Fn(&str) -> bool,
    ) -> Result<()> {
        if grads.len() != params.len() || self.moments.len() != params.len() {
            return Err(Error::Structural(format!(
                "optimizer over {} parameters got {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for id in params.ids() {
            if params.get(id).shape() != grads.get(id).shape()
                || self.moments[id.index()].first.len() != params.get(id).len()
            {
                return Err(Error::Structural(format!(
                    "gradient shape mismatch for `{}`",
                    params.name(id)
                )));
            }
        }
        self.steps += 1;
        let lr = self.config.lr;
        let t = self.steps as i32;
        let ids: Vec<_> = params.ids().filter(|&id| filter(params.name(id))).collect();
        for id in ids {
            let g = grads.get(id).data();
            let moments = &mut self.moments[id.index()];
            let theta = params.get_mut(id).data_mut();
            match self.config.kind {
                OptimizerKind::Sgd => {
                    for (p, gv) in theta.iter_mut().zip(g) {
                        *p -= lr * gv;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (i, (p, &gv)) in theta.iter_mut().zip(g).enumerate() {
                        let m = &mut moments.first[i];
                        let v = &mut moments.second[i];
                        *m = beta1 * *m + (1.0 - beta1) * gv;
                        *v = beta2 * *v + (1.0 - beta2) * gv * gv;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
