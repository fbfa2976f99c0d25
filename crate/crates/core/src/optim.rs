//! Adam with bias correction and the windowed linear learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Parameter;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &[Parameter], config: AdamConfig) -> Self {
        Adam {
            config,
            m: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// One update of every parameter from its accumulated gradient. Fails
    /// without touching anything if a gradient is missing.
    pub fn step(&mut self, params: &[Parameter], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::InvalidArgument {
                op: "adam",
                detail: format!("optimizer tracks {} parameters, got {}", self.m.len(), params.len()),
            });
        }
        let grads = params
            .iter()
            .map(|p| p.tensor.grad().ok_or_else(|| Error::MissingGradient(p.name.clone())))
            .collect::<Result<Vec<_>>>()?;
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter().zip(&grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            p.tensor.update(|theta| {
                for i in 0..theta.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    theta[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            });
        }
        Ok(())
    }
}

/// Learning rate at `epoch`: linear decay from `lr0 / 2^k` at the start of
/// window `k` to half of that at its end.
pub fn lr_at(epoch: f64, lr0: f64, window: f64) -> f64 {
    let epoch = epoch.max(0.0);
    let k = (epoch / window).floor();
    let start = lr0 / 2f64.powf(k);
    let frac = (epoch - k * window) / window;
    start * (1.0 - 0.5 * frac)
}
