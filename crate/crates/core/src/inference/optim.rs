use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Adam,
    SgdMomentum,
}

/// Optimizer settings shared by MAP and ADVI training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub algo: Algo,
    pub lr: f64,
    /// Momentum for SGD; first-moment decay for Adam.
    pub momentum: f64,
    pub steps: usize,
    /// Minibatch size; 0 means full batch.
    pub batch_size: usize,
    /// Monte Carlo draws per ADVI step (ignored by MAP).
    pub mc_samples: usize,
    pub seed: u64,
    /// The learning rate decays linearly to `lr·final_lr_fraction` over `steps`.
    pub final_lr_fraction: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            algo: Algo::Adam,
            lr: 1e-2,
            momentum: 0.9,
            steps: 1000,
            batch_size: 0,
            mc_samples: 1,
            seed: 0,
            final_lr_fraction: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "need lr > 0 and momentum in [0, 1), got lr {} momentum {}",
                self.lr, self.momentum
            )));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::Config("final_lr_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub(crate) fn lr_at(&self, step: usize) -> f64 {
        let t = if self.steps > 1 { step as f64 / (self.steps - 1) as f64 } else { 0.0 };
        self.lr * (1.0 - t * (1.0 - self.final_lr_fraction))
    }
}

/// First-order optimizer state over a flat parameter vector.
pub(crate) struct Optimizer {
    algo: Algo,
    momentum: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig, n: usize) -> Self {
        Optimizer {
            algo: cfg.algo,
            momentum: cfg.momentum,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One descent step on `params` along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        match self.algo {
            Algo::SgdMomentum => {
                for ((p, g), m) in params.iter_mut().zip(grad).zip(&mut self.m) {
                    *m = self.momentum * *m + g;
                    *p -= lr * *m;
                }
            }
            Algo::Adam => {
                const BETA2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                let b1 = self.momentum;
                let c1 = 1.0 - b1.powi(self.t);
                let c2 = 1.0 - BETA2.powi(self.t);
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                }
            }
        }
    }
}
