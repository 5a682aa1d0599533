use std::collections::BTreeMap;

use super::{NumError, Result, Tensor};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    first: Vec<f32>,
    second: Vec<f32>,
}

/// Per-parameter moment buffers for bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter, then zeroes the gradients.
    ///
    /// Parameters are visited in name order; any parameter without a gradient
    /// slot aborts the step before anything is modified.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(_, p)| p.grad().is_none()) {
            return Err(NumError::Contract(format!("parameter `{name}` has no gradient")));
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let n = p.numel();
            let m = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
            });
            if m.first.len() != n {
                return Err(NumError::dim(
                    "adam_step",
                    format!("moments for `{name}` hold {} values, parameter {n}", m.first.len()),
                ));
            }
            let grad = p.grad().unwrap().to_vec();
            let data = p.data_mut();
            for i in 0..n {
                let g = grad[i];
                m.first[i] = beta1 * m.first[i] + (1.0 - beta1) * g;
                m.second[i] = beta2 * m.second[i] + (1.0 - beta2) * g * g;
                let mh = m.first[i] / c1;
                let vh = m.second[i] / c2;
                data[i] -= lr * mh / (vh.sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}
