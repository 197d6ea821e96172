use super::posterior::{GaussianPosterior, PosteriorSource};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nnet::{Curvature, ProbModel};

/// Diagonal Laplace approximation around a MAP solution:
/// `μ = θ_MAP`, `σ_i = (H_ii + 1/σ₀²)^(−1/2)` with `H` the diagonal curvature
/// of the negative log-likelihood summed over `data`.
///
/// Components with zero curvature get exactly `σ₀`.
pub fn fit_laplace(model_at_map: &ProbModel, data: &Dataset, prior_std: f64, curvature: Curvature) -> Result<GaussianPosterior> {
    if !(prior_std > 0.0) {
        return Err(Error::Config(format!("prior std must be positive, got {prior_std}")));
    }
    let theta = model_at_map.params();
    let h = model_at_map.curvature_diag(&theta, data, curvature)?;
    let prior_prec = 1.0 / (prior_std * prior_std);
    let std = h
        .iter()
        .map(|&hi| if hi == 0.0 { prior_std } else { (hi + prior_prec).sqrt().recip() })
        .collect();
    GaussianPosterior::new(theta, std, prior_std, model_at_map.primary_mask(), PosteriorSource::Laplace, 0)
}
