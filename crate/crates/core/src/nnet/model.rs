//! Likelihood models over a flat parameter vector.
//!
//! A [`ProbModel`] couples one or two [`Mlp`]s with a likelihood. Its flat
//! parameter vector `θ` is the mean (or logit) network's parameters, followed
//! by the noise parameters for regression: one log-std scalar in the
//! homoscedastic case, or the log-std network's parameters in the
//! heteroscedastic case.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::mlp::{log_softmax, softmax_rows, Mlp};
use crate::data::{Dataset, TaskKind, Targets};
use crate::error::{ensure_dim, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Noise {
    /// Known observation std; contributes no parameters.
    Fixed { std: f64 },
    /// One learned log-std shared by all inputs.
    Homoscedastic { log_std: f64 },
    /// Input-dependent log-std produced by an independent network.
    Heteroscedastic { net: Mlp },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum ProbModel {
    /// Softmax over the network's outputs.
    Classification { net: Mlp },
    /// Gaussian likelihood with the network output as mean.
    Regression { mean: Mlp, noise: Noise },
}

/// Per-sample predictions for a batch of inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchOutput {
    /// `B × m` class probabilities.
    Probs(Array2<f64>),
    /// Per-input predictive mean and likelihood variance.
    Gaussian { mean: Array1<f64>, var: Array1<f64> },
}

/// Which curvature approximation a diagonal Laplace fit uses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curvature {
    /// Generalized Gauss-Newton (Fisher) diagonal: exact Hessian for linear-Gaussian models.
    #[default]
    GaussNewton,
    /// Sum of squared per-example gradients.
    EmpiricalFisher,
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

impl ProbModel {
    pub fn classifier(net: Mlp) -> Self {
        ProbModel::Classification { net }
    }

    pub fn regressor(mean: Mlp, noise: Noise) -> Result<Self> {
        if mean.output_dim() != 1 {
            return Err(Error::Config("regression mean network needs one output".into()));
        }
        if let Noise::Heteroscedastic { net } = &noise {
            if net.output_dim() != 1 || net.input_dim() != mean.input_dim() {
                return Err(Error::Config("noise network must map the same inputs to one output".into()));
            }
        }
        if let Noise::Fixed { std } = noise {
            if !(std > 0.0) {
                return Err(Error::Config(format!("fixed noise std must be positive, got {std}")));
            }
        }
        Ok(ProbModel::Regression { mean, noise })
    }

    pub fn task(&self) -> TaskKind {
        match self {
            ProbModel::Classification { .. } => TaskKind::Classification,
            ProbModel::Regression { .. } => TaskKind::Regression,
        }
    }

    /// The network whose hidden features define distances, and whose
    /// parameters carry the epistemic uncertainty of the mean.
    pub fn primary(&self) -> &Mlp {
        match self {
            ProbModel::Classification { net } => net,
            ProbModel::Regression { mean, .. } => mean,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.primary().input_dim()
    }

    /// Number of leading entries of `θ` belonging to the primary network.
    pub fn n_primary(&self) -> usize {
        self.primary().n_params()
    }

    fn n_noise(&self) -> usize {
        match self {
            ProbModel::Classification { .. } => 0,
            ProbModel::Regression { noise, .. } => match noise {
                Noise::Fixed { .. } => 0,
                Noise::Homoscedastic { .. } => 1,
                Noise::Heteroscedastic { net } => net.n_params(),
            },
        }
    }

    pub fn n_params(&self) -> usize {
        self.n_primary() + self.n_noise()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.primary().params().to_vec();
        if let ProbModel::Regression { noise, .. } = self {
            match noise {
                Noise::Fixed { .. } => {}
                Noise::Homoscedastic { log_std } => p.push(*log_std),
                Noise::Heteroscedastic { net } => p.extend_from_slice(net.params()),
            }
        }
        p
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        ensure_dim("model parameters", self.n_params(), theta.len())?;
        let k = self.n_primary();
        match self {
            ProbModel::Classification { net } => net.params_mut().copy_from_slice(theta),
            ProbModel::Regression { mean, noise } => {
                mean.params_mut().copy_from_slice(&theta[..k]);
                match noise {
                    Noise::Fixed { .. } => {}
                    Noise::Homoscedastic { log_std } => *log_std = theta[k],
                    Noise::Heteroscedastic { net } => net.params_mut().copy_from_slice(&theta[k..]),
                }
            }
        }
        Ok(())
    }

    pub fn with_params(&self, theta: &[f64]) -> Result<Self> {
        let mut m = self.clone();
        m.set_params(theta)?;
        Ok(m)
    }

    /// Mask selecting the primary network's parameters.
    pub fn primary_mask(&self) -> Vec<bool> {
        let k = self.n_primary();
        (0..self.n_params()).map(|i| i < k).collect()
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        ensure_dim("model input", self.input_dim(), data.dim())?;
        match (self, data.targets()) {
            (ProbModel::Classification { net }, Targets::Classes { n_classes, .. }) => {
                ensure_dim("class count", net.output_dim(), *n_classes)
            }
            (ProbModel::Regression { .. }, Targets::Real(_)) => Ok(()),
            _ => Err(Error::Input("dataset task does not match the model".into())),
        }
    }

    /// Log-std per input row at parameters `theta`.
    fn log_std_with(&self, theta: &[f64], inputs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let k = self.n_primary();
        match self {
            ProbModel::Regression { noise, .. } => Ok(match noise {
                Noise::Fixed { std } => Array1::from_elem(inputs.nrows(), std.ln()),
                Noise::Homoscedastic { .. } => Array1::from_elem(inputs.nrows(), theta[k]),
                Noise::Heteroscedastic { net } => net.forward_with(&theta[k..], inputs)?.column(0).to_owned(),
            }),
            ProbModel::Classification { .. } => unreachable!("classification has no noise model"),
        }
    }

    /// Predictions of the model at parameters `theta` for a batch of inputs.
    pub fn predict_with(&self, theta: &[f64], inputs: ArrayView2<'_, f64>) -> Result<BatchOutput> {
        ensure_dim("model parameters", self.n_params(), theta.len())?;
        let k = self.n_primary();
        match self {
            ProbModel::Classification { net } => Ok(BatchOutput::Probs(softmax_rows(&net.forward_with(theta, inputs)?))),
            ProbModel::Regression { mean, .. } => {
                let m = mean.forward_with(&theta[..k], inputs)?.column(0).to_owned();
                let var = self.log_std_with(theta, inputs)?.mapv(|s| (2.0 * s).exp());
                Ok(BatchOutput::Gaussian { mean: m, var })
            }
        }
    }

    /// Summed negative log-likelihood over `rows` (all rows when `None`) and
    /// its gradient with respect to `theta`.
    pub fn nll_grad(&self, theta: &[f64], data: &Dataset, rows: Option<&[usize]>) -> Result<(f64, Vec<f64>)> {
        ensure_dim("model parameters", self.n_params(), theta.len())?;
        self.check_data(data)?;
        let owned;
        let (x, targets): (ArrayView2<'_, f64>, Vec<f64>) = match rows {
            Some(r) => {
                owned = data.inputs().select(Axis(0), r);
                (owned.view(), r.iter().map(|&i| data.targets().value(i)).collect())
            }
            None => (data.inputs().view(), (0..data.len()).map(|i| data.targets().value(i)).collect()),
        };
        let b = x.nrows();
        let mut grad = vec![0.0; self.n_params()];
        if b == 0 {
            return Ok((0.0, grad));
        }
        let k = self.n_primary();
        match self {
            ProbModel::Classification { net } => {
                let logits = net.forward_with(theta, x)?;
                let mut up = Array2::zeros(logits.raw_dim());
                let mut total = 0.0;
                for (i, row) in logits.outer_iter().enumerate() {
                    let lp = log_softmax(row);
                    let y = targets[i] as usize;
                    total -= lp[y];
                    for (c, l) in lp.iter().enumerate() {
                        up[[i, c]] = l.exp() - if c == y { 1.0 } else { 0.0 };
                    }
                }
                if !total.is_finite() {
                    return Err(Error::numerical("classification nll", 0, format!("nll {total}")));
                }
                grad.copy_from_slice(&net.backward_with(theta, x, up.view())?);
                Ok((total, grad))
            }
            ProbModel::Regression { mean, noise } => {
                let m = mean.forward_with(&theta[..k], x)?;
                let s = self.log_std_with(theta, x)?;
                let mut up_m = Array2::zeros((b, 1));
                let mut up_s = Array2::zeros((b, 1));
                let mut total = 0.0;
                for i in 0..b {
                    let inv_var = (-2.0 * s[i]).exp();
                    let r = m[[i, 0]] - targets[i];
                    let li = 0.5 * r * r * inv_var + s[i] + LN_SQRT_2PI;
                    if !li.is_finite() {
                        return Err(Error::numerical("gaussian nll", i, format!("nll {li}")));
                    }
                    total += li;
                    up_m[[i, 0]] = r * inv_var;
                    up_s[[i, 0]] = 1.0 - r * r * inv_var;
                }
                grad[..k].copy_from_slice(&mean.backward_with(&theta[..k], x, up_m.view())?);
                match noise {
                    Noise::Fixed { .. } => {}
                    Noise::Homoscedastic { .. } => grad[k] = up_s.sum(),
                    Noise::Heteroscedastic { net } => {
                        grad[k..].copy_from_slice(&net.backward_with(&theta[k..], x, up_s.view())?)
                    }
                }
                Ok((total, grad))
            }
        }
    }

    /// Diagonal of the negative log-likelihood curvature summed over `data`.
    pub fn curvature_diag(&self, theta: &[f64], data: &Dataset, kind: Curvature) -> Result<Vec<f64>> {
        ensure_dim("model parameters", self.n_params(), theta.len())?;
        self.check_data(data)?;
        let mut diag = vec![0.0; self.n_params()];
        let k = self.n_primary();
        for i in 0..data.len() {
            let x = data.row(i);
            match kind {
                Curvature::EmpiricalFisher => {
                    let (_, g) = self.nll_grad(theta, data, Some(&[i]))?;
                    diag.iter_mut().zip(&g).for_each(|(d, g)| *d += g * g);
                }
                Curvature::GaussNewton => match self {
                    ProbModel::Classification { net } => {
                        let logits = net.forward_with(theta, x.insert_axis(Axis(0)))?;
                        let p: Vec<f64> = log_softmax(logits.row(0)).iter().map(|l| l.exp()).collect();
                        let jac = net.output_jacobian_row(theta, x);
                        for (j, d) in diag.iter_mut().enumerate() {
                            let (mut a, mut b) = (0.0, 0.0);
                            for (c, pc) in p.iter().enumerate() {
                                a += pc * jac[c][j] * jac[c][j];
                                b += pc * jac[c][j];
                            }
                            *d += a - b * b;
                        }
                    }
                    ProbModel::Regression { mean, noise } => {
                        let xr = x.insert_axis(Axis(0));
                        let s = self.log_std_with(theta, xr)?[0];
                        let inv_var = (-2.0 * s).exp();
                        let jm = mean.vjp_row(&theta[..k], x, &[1.0]);
                        for (d, j) in diag[..k].iter_mut().zip(&jm) {
                            *d += inv_var * j * j;
                        }
                        // Fisher information of a Gaussian log-std is 2.
                        match noise {
                            Noise::Fixed { .. } => {}
                            Noise::Homoscedastic { .. } => diag[k] += 2.0,
                            Noise::Heteroscedastic { net } => {
                                let js = net.vjp_row(&theta[k..], x, &[1.0]);
                                for (d, j) in diag[k..].iter_mut().zip(&js) {
                                    *d += 2.0 * j * j;
                                }
                            }
                        }
                    }
                },
            }
        }
        if let Some(j) = diag.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical("curvature", j, format!("value {}", diag[j])));
        }
        Ok(diag)
    }

    /// Hidden features of the primary network at parameters `theta`.
    pub fn features_with(&self, theta: &[f64], inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.primary().features_with(&theta[..self.n_primary()], inputs)
    }
}

impl BatchOutput {
    pub fn len(&self) -> usize {
        match self {
            BatchOutput::Probs(p) => p.nrows(),
            BatchOutput::Gaussian { mean, .. } => mean.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Log-likelihood of target `y` at row `i`.
    pub fn log_density(&self, i: usize, y: f64) -> f64 {
        match self {
            BatchOutput::Probs(p) => p[[i, y as usize]].ln(),
            BatchOutput::Gaussian { mean, var } => {
                let r = y - mean[i];
                -0.5 * r * r / var[i] - 0.5 * (2.0 * PI * var[i]).ln()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::Activation;
    use ndarray::array;

    fn hetero() -> ProbModel {
        ProbModel::regressor(
            Mlp::new(&[2, 4, 1], Activation::Tanh, 1).unwrap(),
            Noise::Heteroscedastic {
                net: Mlp::new(&[2, 3, 1], Activation::Tanh, 2).unwrap(),
            },
        )
        .unwrap()
    }

    #[test]
    fn flat_params_round_trip() {
        let mut m = hetero();
        assert_eq!(m.n_params(), 17 + 13);
        let theta: Vec<f64> = (0..m.n_params()).map(|i| i as f64 * 0.01).collect();
        m.set_params(&theta).unwrap();
        assert_eq!(m.params(), theta);
        assert_eq!(m.primary_mask().iter().filter(|&&b| b).count(), 17);
        assert!(m.set_params(&theta[1..]).is_err());
    }

    #[test]
    fn task_mismatch_rejected() {
        let m = hetero();
        let ds = Dataset::classification(array![[0.0, 1.0]], vec![0], 2).unwrap();
        assert!(m.nll_grad(&m.params(), &ds, None).is_err());
    }

    #[test]
    fn gaussian_log_density() {
        let out = BatchOutput::Gaussian {
            mean: array![1.0],
            var: array![4.0],
        };
        let want = -0.5 * 0.25 - 0.5 * (8.0 * PI).ln();
        assert!((out.log_density(0, 2.0) - want).abs() < 1e-15);
    }

    #[test]
    fn nll_matches_log_density_sum() {
        let m = hetero();
        let ds = Dataset::regression(array![[0.1, 0.2], [1.0, -1.0], [0.3, 2.0]], vec![0.5, -0.2, 1.0]).unwrap();
        let (nll, _) = m.nll_grad(&m.params(), &ds, None).unwrap();
        let out = m.predict_with(&m.params(), ds.inputs().view()).unwrap();
        let ll: f64 = (0..3).map(|i| out.log_density(i, ds.targets().value(i))).sum();
        assert!((nll + ll).abs() < 1e-12);
    }
}
