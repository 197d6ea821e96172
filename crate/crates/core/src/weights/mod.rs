//! Posterior weights for distance-aware priors.
//!
//! With training prior `N(0, σ₀² I)` and test-time prior `N(0, (σ₀+d)² I)`
//! on the masked parameters, the test-conditioned posterior relates to the
//! training posterior through the weight
//!
//! ```text
//! w(θ) = [N(θ | 0, (σ₀+d)²) / N(θ | 0, σ₀²)] · [p(y|x) / p(y|x*,x)]
//! ```
//!
//! The first factor is the prior ratio, `(σ₀/(σ₀+d))^{n_m} exp(‖θ‖²/2γ²)`
//! with `1/γ² = 1/σ₀² − 1/(σ₀+d)²`. The second is the marginal ratio. It is
//! the reciprocal of the posterior expectation of the prior ratio, available
//! in closed form for a diagonal Gaussian posterior when `σ_i < σ₀`, or by
//! Monte Carlo over posterior samples. Everything is carried in log space.

mod predictive;

pub use predictive::{bayesian_model_average, entropy, predict, PredictiveSummary, SampleOutputs};

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::inference::{GaussianPosterior, PositivityMode, PosteriorSamples};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    /// Closed-form marginal ratio for diagonal Gaussian posteriors.
    #[default]
    ClosedForm,
    /// Monte Carlo marginal ratio over the posterior samples, which makes the
    /// weights exactly self-normalized importance weights.
    McSelfNorm,
}

/// `1/γ² = 1/σ₀² − 1/(σ₀+d)²`, written as `d(2σ₀+d) / (σ₀²(σ₀+d)²)` so it
/// stays accurate when `d ≪ σ₀`.
pub fn inv_gamma_sq(prior_std: f64, d: f64) -> f64 {
    let s = prior_std + d;
    d * (2.0 * prior_std + d) / (prior_std * prior_std * s * s)
}

fn check_distance(d: f64) -> Result<()> {
    if d >= 0.0 && d.is_finite() {
        Ok(())
    } else {
        Err(Error::Input(format!("distance must be finite and non-negative, got {d}")))
    }
}

fn masked_sq_norm(theta: ArrayView1<'_, f64>, mask: &[bool]) -> f64 {
    theta
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(t, _)| t * t)
        .sum()
}

/// `ln[p(θ|x*,x) / p(θ|x)]` over the masked components. Exactly 0 at `d = 0`.
pub fn log_prior_ratio(theta: ArrayView1<'_, f64>, post: &GaussianPosterior, d: f64) -> Result<f64> {
    ensure_dim("parameter vector", post.n_params(), theta.len())?;
    check_distance(d)?;
    Ok(log_prior_ratio_from_norm(masked_sq_norm(theta, &post.mask), post.n_masked(), post.prior_std, d))
}

fn log_prior_ratio_from_norm(sq_norm: f64, n_masked: usize, prior_std: f64, d: f64) -> f64 {
    if d == 0.0 {
        return 0.0;
    }
    -(n_masked as f64) * (d / prior_std).ln_1p() + 0.5 * sq_norm * inv_gamma_sq(prior_std, d)
}

/// `ln[p(y|x) / p(y|x*,x)]` in closed form for a diagonal Gaussian posterior.
///
/// With `a_i = σ_i²/γ²` (so `β_i² = σ_i²/(1 − a_i)`), each masked component
/// contributes `½ln(1 − a_i) − ½·μ_i²/γ²/(1 − a_i)`, on top of
/// `n_m·ln((σ₀+d)/σ₀)`. Requires `σ_i < σ₀` on masked components, enforced
/// according to `positivity`. Exactly 0 at `d = 0`.
pub fn marginal_ratio_closed_form(post: &GaussianPosterior, d: f64, positivity: PositivityMode) -> Result<f64> {
    check_distance(d)?;
    if post.is_point_mass() {
        return Err(Error::Config("closed-form marginal ratio needs a Gaussian posterior, not a point mass".into()));
    }
    if d == 0.0 {
        return Ok(0.0);
    }
    let post = post.enforce_positivity(positivity)?;
    Ok(closed_form_unchecked(&post, d))
}

fn closed_form_unchecked(post: &GaussianPosterior, d: f64) -> f64 {
    if d == 0.0 {
        return 0.0;
    }
    let ig = inv_gamma_sq(post.prior_std, d);
    let mut acc = post.n_masked() as f64 * (d / post.prior_std).ln_1p();
    for i in (0..post.n_params()).filter(|&i| post.mask[i]) {
        let (m, s) = (post.mean[i], post.std[i]);
        let a = s * s * ig;
        acc += 0.5 * (-a).ln_1p() - 0.5 * m * m * ig / (1.0 - a);
    }
    acc
}

/// `ln` of the inverse sample mean of the prior ratio:
/// `−logsumexp_s(ln r(θ_s)) + ln S`.
pub fn marginal_ratio_mc(samples: &PosteriorSamples, post: &GaussianPosterior, d: f64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Input(format!(
            "Monte Carlo marginal ratio needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    ensure_dim("sample width", post.n_params(), samples.samples.ncols())?;
    check_distance(d)?;
    let lpr: Vec<f64> = samples
        .samples
        .outer_iter()
        .map(|t| log_prior_ratio_from_norm(masked_sq_norm(t, &post.mask), post.n_masked(), post.prior_std, d))
        .collect();
    Ok(mc_from_log_ratios(&lpr))
}

fn mc_from_log_ratios(lpr: &[f64]) -> f64 {
    if lpr.iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    (lpr.len() as f64).ln() - logsumexp(lpr)
}

pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-sample log posterior weights for one test point.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    /// `ln w_s`, not normalized.
    pub log_weights: Vec<f64>,
    pub log_marginal_ratio: f64,
    /// `(Σw)²/Σw²`.
    pub ess: f64,
}

impl WeightVector {
    fn from_log_weights(log_weights: Vec<f64>, log_marginal_ratio: f64) -> Result<Self> {
        if let Some(s) = log_weights.iter().position(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::numerical("posterior weight", s, format!("log weight {}", log_weights[s])));
        }
        let e = Self::shifted(&log_weights);
        let sum: f64 = e.iter().sum();
        let sq: f64 = e.iter().map(|v| v * v).sum();
        Ok(WeightVector {
            log_weights,
            log_marginal_ratio,
            ess: sum * sum / sq,
        })
    }

    /// Equal weights over `s` samples.
    pub fn uniform(s: usize) -> Self {
        WeightVector {
            log_weights: vec![0.0; s],
            log_marginal_ratio: 0.0,
            ess: s as f64,
        }
    }

    fn shifted(log_weights: &[f64]) -> Vec<f64> {
        let m = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        log_weights.iter().map(|v| (v - m).exp()).collect()
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    /// Weights divided by their sum. Equal log weights give exactly `1/S`.
    pub fn normalized(&self) -> Vec<f64> {
        let e = Self::shifted(&self.log_weights);
        let total: f64 = e.iter().sum();
        e.into_iter().map(|v| v / total).collect()
    }

    /// Unnormalized weights `w_s`.
    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|v| v.exp()).collect()
    }
}

/// Reusable weight evaluator over a fixed sample set: masked squared norms
/// are computed once, so each distance costs `O(S + n_m)`.
#[derive(Debug, Clone)]
pub struct Reweighter {
    sq_norms: Vec<f64>,
    n_masked: usize,
    prior_std: f64,
    mode: RatioMode,
    /// Positivity-enforced posterior for the closed form.
    post: Option<GaussianPosterior>,
    point_mass: bool,
}

impl Reweighter {
    pub fn new(samples: &PosteriorSamples, post: &GaussianPosterior, mode: RatioMode, positivity: PositivityMode) -> Result<Self> {
        ensure_dim("sample width", post.n_params(), samples.samples.ncols())?;
        if samples.is_empty() {
            return Err(Error::Input("no posterior samples".into()));
        }
        let point_mass = post.is_point_mass() || samples.len() == 1;
        if point_mass {
            log::warn!("posterior is a single point; distance-aware weights leave predictions unchanged");
        } else if mode == RatioMode::McSelfNorm && samples.len() < 2 {
            return Err(Error::Input("Monte Carlo marginal ratio needs at least 2 samples".into()));
        }
        let closed = if mode == RatioMode::ClosedForm && !point_mass {
            Some(post.enforce_positivity(positivity)?.into_owned())
        } else {
            None
        };
        Ok(Reweighter {
            sq_norms: samples.samples.outer_iter().map(|t| masked_sq_norm(t, &post.mask)).collect(),
            n_masked: post.n_masked(),
            prior_std: post.prior_std,
            mode,
            post: closed,
            point_mass,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.sq_norms.len()
    }

    pub fn weights(&self, d: f64) -> Result<WeightVector> {
        check_distance(d)?;
        if self.point_mass || d == 0.0 {
            return Ok(WeightVector::uniform(self.n_samples()));
        }
        let lpr: Vec<f64> = self
            .sq_norms
            .iter()
            .map(|&q| log_prior_ratio_from_norm(q, self.n_masked, self.prior_std, d))
            .collect();
        let lmr = match self.mode {
            RatioMode::ClosedForm => closed_form_unchecked(self.post.as_ref().expect("closed form posterior"), d),
            RatioMode::McSelfNorm => mc_from_log_ratios(&lpr),
        };
        WeightVector::from_log_weights(lpr.into_iter().map(|v| v + lmr).collect(), lmr)
    }
}

/// `ln w_s = ln r(θ_s) + ln[p(y|x)/p(y|x*,x)]` for every sample at distance `d`.
pub fn posterior_weights(
    samples: &PosteriorSamples,
    post: &GaussianPosterior,
    d: f64,
    mode: RatioMode,
    positivity: PositivityMode,
) -> Result<WeightVector> {
    Reweighter::new(samples, post, mode, positivity)?.weights(d)
}

/// One test point's prediction under distance-aware weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PointPrediction {
    pub d0: f64,
    pub d_phi: f64,
    pub summary: PredictiveSummary,
    pub weights: WeightVector,
}

/// Predictions at every point of `outputs`, with point `j` reweighted at
/// distance `g·pre[j]`. Parallel over points, results in input order.
pub fn predict_batch(outputs: &SampleOutputs, reweighter: &Reweighter, pre: &[f64], g: f64) -> Result<Vec<PointPrediction>> {
    use rayon::prelude::*;
    ensure_dim("pre-distance count", outputs.n_points(), pre.len())?;
    pre.par_iter()
        .enumerate()
        .map(|(j, &d0)| {
            let d_phi = g * d0;
            let weights = reweighter.weights(d_phi)?;
            let summary = outputs.summarize(j, &weights.normalized(), weights.ess)?;
            Ok(PointPrediction { d0, d_phi, summary, weights })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{sample_posterior, PosteriorSource};
    use ndarray::array;

    fn post1(mean: f64, std: f64) -> GaussianPosterior {
        GaussianPosterior::new(vec![mean], vec![std], 1.0, vec![true], PosteriorSource::Advi, 0).unwrap()
    }

    #[test]
    fn prior_ratio_zero_distance() {
        let p = post1(0.3, 0.5);
        assert_eq!(log_prior_ratio(array![12.0].view(), &p, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn prior_ratio_at_origin() {
        let p = post1(0.0, 0.5);
        let v = log_prior_ratio(array![0.0].view(), &p, 1.0).unwrap();
        assert!((v - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn prior_ratio_ignores_unmasked() {
        let p = GaussianPosterior::new(vec![0.0; 2], vec![0.5; 2], 1.0, vec![true, false], PosteriorSource::Advi, 0).unwrap();
        let a = log_prior_ratio(array![1.0, 0.0].view(), &p, 0.7).unwrap();
        let b = log_prior_ratio(array![1.0, 50.0].view(), &p, 0.7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn negative_distance_rejected() {
        assert!(log_prior_ratio(array![0.0].view(), &post1(0.0, 0.5), -1.0).is_err());
    }

    #[test]
    fn closed_form_reference_value() {
        let lr = marginal_ratio_closed_form(&post1(0.0, 0.5), 1.0, PositivityMode::Error).unwrap();
        // 2 · 0.5 · √3.25
        assert!((lr.exp() - 2.0 * 0.5 * 3.25f64.sqrt()).abs() < 1e-12);
        assert!((lr - 0.589_327).abs() < 1e-6);
        assert_eq!(marginal_ratio_closed_form(&post1(0.3, 0.5), 0.0, PositivityMode::Error).unwrap(), 0.0);
    }

    #[test]
    fn closed_form_positivity_modes() {
        let p = post1(0.0, 1.5);
        assert!(matches!(
            marginal_ratio_closed_form(&p, 1.0, PositivityMode::Error),
            Err(Error::Positivity { .. })
        ));
        assert!(marginal_ratio_closed_form(&p, 1.0, PositivityMode::Clamp).unwrap().is_finite());
    }

    #[test]
    fn mc_needs_two_samples() {
        let p = post1(0.0, 0.5);
        let s = sample_posterior(&p, 1, 0).unwrap();
        assert!(marginal_ratio_mc(&s, &p, 1.0).is_err());
        let s = sample_posterior(&p, 5, 0).unwrap();
        assert_eq!(marginal_ratio_mc(&s, &p, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn zero_distance_weights_are_one() {
        let p = GaussianPosterior::new(vec![0.1; 4], vec![0.4; 4], 1.0, vec![true; 4], PosteriorSource::Advi, 0).unwrap();
        let s = sample_posterior(&p, 33, 1).unwrap();
        for mode in [RatioMode::ClosedForm, RatioMode::McSelfNorm] {
            let w = posterior_weights(&s, &p, 0.0, mode, PositivityMode::Error).unwrap();
            assert!(w.weights().iter().all(|&v| v == 1.0));
            assert_eq!(w.ess, 33.0);
            assert!(w.normalized().iter().all(|&v| v == 1.0 / 33.0));
        }
    }

    #[test]
    fn selfnorm_weights_average_to_one() {
        let p = GaussianPosterior::new(vec![0.1; 4], vec![0.4; 4], 1.0, vec![true; 4], PosteriorSource::Advi, 0).unwrap();
        let s = sample_posterior(&p, 200, 1).unwrap();
        let w = posterior_weights(&s, &p, 2.0, RatioMode::McSelfNorm, PositivityMode::Error).unwrap();
        let mean = w.weights().iter().sum::<f64>() / 200.0;
        assert!((mean - 1.0).abs() < 1e-12);
        assert!(w.ess < 200.0 && w.ess >= 1.0);
    }

    #[test]
    fn weights_increase_with_norm() {
        let p = GaussianPosterior::new(vec![0.0; 3], vec![0.5; 3], 1.0, vec![true; 3], PosteriorSource::Advi, 0).unwrap();
        let s = sample_posterior(&p, 50, 4).unwrap();
        let w = posterior_weights(&s, &p, 0.8, RatioMode::ClosedForm, PositivityMode::Error).unwrap();
        let mut pairs: Vec<(f64, f64)> = s
            .samples
            .outer_iter()
            .zip(&w.log_weights)
            .map(|(t, lw)| (t.dot(&t), *lw))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(pairs.windows(2).all(|p| p[1].1 > p[0].1));
    }

    #[test]
    fn point_mass_weights_are_vacuous() {
        let p = GaussianPosterior::point_mass(vec![1.0, 2.0], 1.0, vec![true; 2], 0).unwrap();
        let s = sample_posterior(&p, 1, 0).unwrap();
        let w = posterior_weights(&s, &p, 5.0, RatioMode::ClosedForm, PositivityMode::Error).unwrap();
        assert_eq!(w.normalized(), vec![1.0]);
    }

    #[test]
    fn tiny_distance_is_numerically_smooth() {
        // φ = −50 scale: the stable 1/γ² keeps a non-zero but negligible effect.
        let d = (-50f64).exp();
        assert!(inv_gamma_sq(1.0, d) > 0.0);
        assert!((inv_gamma_sq(1.0, d) - 2.0 * d).abs() < 1e-30);
    }
}
