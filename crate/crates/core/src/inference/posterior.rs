use std::borrow::Cow;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorSource {
    Map,
    Advi,
    Laplace,
}

/// How masked components with `σ_i ≥ σ₀` are handled where the closed-form
/// marginal ratio requires `σ_i < σ₀`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositivityMode {
    #[default]
    Error,
    /// Shrink offending `σ_i` to `(1 − 10⁻³)·σ₀`, with a logged warning.
    Clamp,
}

pub const CLAMP_EPS: f64 = 1e-3;

/// Diagonal Gaussian approximation of the training posterior.
///
/// A MAP point mass is stored with `source = Map` and an empty `std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub prior_std: f64,
    /// `true` for parameters whose prior is widened with distance.
    pub mask: Vec<bool>,
    pub source: PosteriorSource,
    pub seed: u64,
}

impl GaussianPosterior {
    pub fn new(mean: Vec<f64>, std: Vec<f64>, prior_std: f64, mask: Vec<bool>, source: PosteriorSource, seed: u64) -> Result<Self> {
        let p = GaussianPosterior {
            mean,
            std,
            prior_std,
            mask,
            source,
            seed,
        };
        p.validate()?;
        Ok(p)
    }

    /// Point mass at `theta`.
    pub fn point_mass(theta: Vec<f64>, prior_std: f64, mask: Vec<bool>, seed: u64) -> Result<Self> {
        Self::new(theta, Vec::new(), prior_std, mask, PosteriorSource::Map, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.prior_std > 0.0 && self.prior_std.is_finite()) {
            return Err(Error::Config(format!("prior std must be positive, got {}", self.prior_std)));
        }
        ensure_dim("posterior mask", self.mean.len(), self.mask.len())?;
        if self.is_point_mass() {
            return Ok(());
        }
        ensure_dim("posterior std", self.mean.len(), self.std.len())?;
        if let Some(i) = self.std.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::numerical("posterior std", i, format!("std {} is not positive", self.std[i])));
        }
        if let Some(i) = self.mean.iter().position(|m| !m.is_finite()) {
            return Err(Error::numerical("posterior mean", i, "non-finite"));
        }
        Ok(())
    }

    pub fn is_point_mass(&self) -> bool {
        self.source == PosteriorSource::Map
    }

    pub fn n_params(&self) -> usize {
        self.mean.len()
    }

    pub fn n_masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Masked indices with `σ_i ≥ σ₀`.
    pub fn positivity_violations(&self) -> Vec<usize> {
        (0..self.std.len())
            .filter(|&i| self.mask[i] && self.std[i] >= self.prior_std)
            .collect()
    }

    /// Applies the positivity policy: borrows `self` when every masked
    /// component already satisfies `σ_i < σ₀`.
    pub fn enforce_positivity(&self, mode: PositivityMode) -> Result<Cow<'_, GaussianPosterior>> {
        let bad = self.positivity_violations();
        if bad.is_empty() {
            return Ok(Cow::Borrowed(self));
        }
        let max_ratio = bad.iter().map(|&i| self.std[i] / self.prior_std).fold(0.0, f64::max);
        match mode {
            PositivityMode::Error => Err(Error::Positivity {
                indices: bad,
                max_ratio,
                prior_std: self.prior_std,
            }),
            PositivityMode::Clamp => {
                log::warn!(
                    "clamping {} posterior std values (max std/prior_std = {max_ratio:.6}) to {}·prior_std",
                    bad.len(),
                    1.0 - CLAMP_EPS
                );
                let mut p = self.clone();
                let cap = (1.0 - CLAMP_EPS) * self.prior_std;
                for i in bad {
                    p.std[i] = cap;
                }
                Ok(Cow::Owned(p))
            }
        }
    }

    /// Analytic `KL(q ‖ N(0, σ₀² I))` over all components.
    pub fn kl_to_prior(&self) -> f64 {
        let s0 = self.prior_std;
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| (s0 / s).ln() + (s * s + m * m) / (2.0 * s0 * s0) - 0.5)
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: GaussianPosterior = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

/// Parameter draws from a posterior, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub samples: Array2<f64>,
    pub source: PosteriorSource,
    pub seed: u64,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, s: usize) -> ArrayView1<'_, f64> {
        self.samples.row(s)
    }
}

/// `θ_s = μ + σ ⊙ ε_s`, where `ε_s` comes from a generator keyed by
/// `(seed, s)`. Output does not depend on the rayon thread count.
pub fn sample_posterior(post: &GaussianPosterior, count: usize, seed: u64) -> Result<PosteriorSamples> {
    if count == 0 {
        return Err(Error::Input("sample count must be at least 1".into()));
    }
    post.validate()?;
    let n = post.n_params();
    if post.is_point_mass() {
        if count != 1 {
            log::warn!("point-mass posterior: returning a single sample instead of {count}");
        }
        let samples = Array2::from_shape_vec((1, n), post.mean.clone()).expect("shape");
        return Ok(PosteriorSamples {
            samples,
            source: post.source,
            seed,
        });
    }
    let mut flat = vec![0.0; count * n];
    flat.par_chunks_mut(n.max(1)).enumerate().for_each(|(s, row)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s as u64);
        for (i, v) in row.iter_mut().enumerate() {
            let e: f64 = rng.sample(StandardNormal);
            *v = post.mean[i] + post.std[i] * e;
        }
    });
    Ok(PosteriorSamples {
        samples: Array2::from_shape_vec((count, n), flat).expect("shape"),
        source: post.source,
        seed,
    })
}
