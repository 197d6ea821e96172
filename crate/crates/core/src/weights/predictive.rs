use ndarray::{Array2, Array3, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{logsumexp, WeightVector};
use crate::error::{ensure_dim, Error, Result};
use crate::inference::PosteriorSamples;
use crate::nnet::{BatchOutput, ProbModel};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Weighted posterior statistics at one test point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum PredictiveSummary {
    Classification {
        mean_probs: Vec<f64>,
        /// `H(Σ w̃_s p_s)`.
        total_entropy: f64,
        /// `Σ w̃_s H(p_s)`.
        aleatoric_entropy: f64,
        /// Mutual information, `total − aleatoric`.
        epistemic_info: f64,
        /// `Σ_c Σ_s w̃_s (p_sc − p̄_c)²`.
        epistemic_var: f64,
        ess: f64,
    },
    Regression {
        mean: f64,
        aleatoric_var: f64,
        epistemic_var: f64,
        total_var: f64,
        ess: f64,
    },
}

impl PredictiveSummary {
    pub fn ess(&self) -> f64 {
        match self {
            PredictiveSummary::Classification { ess, .. } | PredictiveSummary::Regression { ess, .. } => *ess,
        }
    }

    /// Spread of per-sample predictions: summed class-probability variance
    /// for classification, variance of the mean for regression.
    pub fn epistemic_var(&self) -> f64 {
        match self {
            PredictiveSummary::Classification { epistemic_var, .. } | PredictiveSummary::Regression { epistemic_var, .. } => {
                *epistemic_var
            }
        }
    }

    /// `(aleatoric, epistemic, total)` in entropy units for classification and
    /// variance units for regression.
    pub fn decomposition(&self) -> (f64, f64, f64) {
        match self {
            PredictiveSummary::Classification {
                total_entropy,
                aleatoric_entropy,
                epistemic_info,
                ..
            } => (*aleatoric_entropy, *epistemic_info, *total_entropy),
            PredictiveSummary::Regression {
                aleatoric_var,
                epistemic_var,
                total_var,
                ..
            } => (*aleatoric_var, *epistemic_var, *total_var),
        }
    }

    /// Predictive mean: class probabilities, or a single regression mean.
    pub fn mean(&self) -> Vec<f64> {
        match self {
            PredictiveSummary::Classification { mean_probs, .. } => mean_probs.clone(),
            PredictiveSummary::Regression { mean, .. } => vec![*mean],
        }
    }

    pub fn max_prob(&self) -> Option<f64> {
        match self {
            PredictiveSummary::Classification { mean_probs, .. } => Some(mean_probs.iter().copied().fold(0.0, f64::max)),
            PredictiveSummary::Regression { .. } => None,
        }
    }
}

/// `−Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Per-sample model outputs over a batch of inputs, evaluated once and then
/// reweighted any number of times.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleOutputs {
    /// `S × B × m` class probabilities.
    Probs(Array3<f64>),
    /// `S × B` means and likelihood variances.
    Gaussian { mean: Array2<f64>, var: Array2<f64> },
}

impl SampleOutputs {
    /// Evaluates the model at every sample, in parallel over samples.
    pub fn compute(model: &ProbModel, samples: &PosteriorSamples, inputs: ArrayView2<'_, f64>) -> Result<Self> {
        ensure_dim("sample width", model.n_params(), samples.samples.ncols())?;
        let outs: Vec<BatchOutput> = (0..samples.len())
            .into_par_iter()
            .map(|s| {
                let theta = samples.get(s).to_vec();
                let out = model.predict_with(&theta, inputs)?;
                let finite = match &out {
                    BatchOutput::Probs(p) => p.iter().all(|v| v.is_finite()),
                    BatchOutput::Gaussian { mean, var } => {
                        mean.iter().all(|v| v.is_finite()) && var.iter().all(|v| v.is_finite() && *v > 0.0)
                    }
                };
                if finite {
                    Ok(out)
                } else {
                    Err(Error::numerical("per-sample prediction", s, "non-finite model output"))
                }
            })
            .collect::<Result<_>>()?;
        let (s, b) = (samples.len(), inputs.nrows());
        Ok(match &outs[0] {
            BatchOutput::Probs(p0) => {
                let mut all = Array3::zeros((s, b, p0.ncols()));
                for (k, o) in outs.iter().enumerate() {
                    if let BatchOutput::Probs(p) = o {
                        all.index_axis_mut(Axis(0), k).assign(p);
                    }
                }
                SampleOutputs::Probs(all)
            }
            BatchOutput::Gaussian { .. } => {
                let mut mean = Array2::zeros((s, b));
                let mut var = Array2::zeros((s, b));
                for (k, o) in outs.iter().enumerate() {
                    if let BatchOutput::Gaussian { mean: m, var: v } = o {
                        mean.row_mut(k).assign(m);
                        var.row_mut(k).assign(v);
                    }
                }
                SampleOutputs::Gaussian { mean, var }
            }
        })
    }

    pub fn n_samples(&self) -> usize {
        match self {
            SampleOutputs::Probs(p) => p.len_of(Axis(0)),
            SampleOutputs::Gaussian { mean, .. } => mean.nrows(),
        }
    }

    pub fn n_points(&self) -> usize {
        match self {
            SampleOutputs::Probs(p) => p.len_of(Axis(1)),
            SampleOutputs::Gaussian { mean, .. } => mean.ncols(),
        }
    }

    fn check_weights(&self, j: usize, w: &[f64]) -> Result<()> {
        ensure_dim("weight count", self.n_samples(), w.len())?;
        if j >= self.n_points() {
            return Err(Error::Input(format!("point {j} out of range for {} points", self.n_points())));
        }
        Ok(())
    }

    /// Statistics at point `j` under normalized weights `w`.
    pub fn summarize(&self, j: usize, w: &[f64], ess: f64) -> Result<PredictiveSummary> {
        self.check_weights(j, w)?;
        Ok(match self {
            SampleOutputs::Probs(p) => {
                let pj = p.index_axis(Axis(1), j);
                classification_summary(pj, w, ess)
            }
            SampleOutputs::Gaussian { mean, var } => regression_summary(mean.column(j), var.column(j), w, ess),
        })
    }

    /// `ln Σ_s w̃_s p(y | θ_s, x_j)`.
    pub fn log_predictive_density(&self, j: usize, w: &[f64], y: f64) -> Result<f64> {
        self.check_weights(j, w)?;
        let terms: Vec<f64> = match self {
            SampleOutputs::Probs(p) => {
                let m = p.len_of(Axis(2));
                if !(y >= 0.0 && y.fract() == 0.0 && (y as usize) < m) {
                    return Err(Error::Input(format!("class label {y} out of range for {m} classes")));
                }
                (0..w.len()).map(|s| w[s].ln() + p[[s, j, y as usize]].ln()).collect()
            }
            SampleOutputs::Gaussian { mean, var } => (0..w.len())
                .map(|s| {
                    let (m, v) = (mean[[s, j]], var[[s, j]]);
                    w[s].ln() - 0.5 * (y - m) * (y - m) / v - 0.5 * (LN_2PI + v.ln())
                })
                .collect(),
        };
        Ok(logsumexp(&terms))
    }
}

fn classification_summary(p: ArrayView2<'_, f64>, w: &[f64], ess: f64) -> PredictiveSummary {
    let m = p.ncols();
    let mut mean_probs = vec![0.0; m];
    let mut aleatoric = 0.0;
    for (ps, &ws) in p.outer_iter().zip(w) {
        for c in 0..m {
            mean_probs[c] += ws * ps[c];
        }
        aleatoric += ws * entropy(ps.as_slice().expect("contiguous row"));
    }
    let mut var = 0.0;
    for (ps, &ws) in p.outer_iter().zip(w) {
        var += ws * ps.iter().zip(&mean_probs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    let total = entropy(&mean_probs);
    PredictiveSummary::Classification {
        mean_probs,
        total_entropy: total,
        aleatoric_entropy: aleatoric,
        epistemic_info: total - aleatoric,
        epistemic_var: var,
        ess,
    }
}

fn regression_summary(m: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>, w: &[f64], ess: f64) -> PredictiveSummary {
    let mean: f64 = m.iter().zip(w).map(|(a, b)| a * b).sum();
    let aleatoric: f64 = v.iter().zip(w).map(|(a, b)| a * b).sum();
    let epistemic: f64 = m.iter().zip(w).map(|(a, b)| b * (a - mean) * (a - mean)).sum();
    PredictiveSummary::Regression {
        mean,
        aleatoric_var: aleatoric,
        epistemic_var: epistemic,
        total_var: aleatoric + epistemic,
        ess,
    }
}

/// Weighted predictive at a single input.
pub fn predict(model: &ProbModel, samples: &PosteriorSamples, weights: &WeightVector, input: ArrayView1<'_, f64>) -> Result<PredictiveSummary> {
    ensure_dim("weight count", samples.len(), weights.len())?;
    let x = input.insert_axis(Axis(0));
    SampleOutputs::compute(model, samples, x)?.summarize(0, &weights.normalized(), weights.ess)
}

/// The ordinary Bayesian model average: every sample weighted `1/S`.
pub fn bayesian_model_average(outputs: &SampleOutputs, j: usize) -> Result<PredictiveSummary> {
    let s = outputs.n_samples();
    outputs.summarize(j, &vec![1.0 / s as f64; s], s as f64)
}
