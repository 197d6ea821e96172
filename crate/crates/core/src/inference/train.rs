use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::optim::{Optimizer, OptimizerConfig};
use super::posterior::{GaussianPosterior, PosteriorSource};
use crate::data::Dataset;
use crate::error::{ensure_dim, Error, Result};
use crate::nnet::ProbModel;

/// Draws minibatch row indices epoch by epoch from a seeded shuffle.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        let size = if batch_size == 0 || batch_size >= n { n } else { batch_size };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let mut order: Vec<usize> = (0..n).collect();
        if size < n {
            order.shuffle(&mut rng);
        }
        Batches { order, pos: 0, size, rng }
    }

    /// `None` means the full dataset.
    fn next(&mut self) -> Option<&[usize]> {
        if self.size == self.order.len() {
            return None;
        }
        if self.pos + self.size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = &self.order[self.pos..self.pos + self.size];
        self.pos += self.size;
        Some(b)
    }
}

#[derive(Debug, Clone)]
pub struct MapOutcome {
    pub model: ProbModel,
    /// Per-step objective `(NLL + ‖θ‖²/2σ₀²)/N`, estimated on the minibatch.
    pub trace: Vec<f64>,
    /// Step at which the objective became non-finite; `model` then holds the
    /// last finite state.
    pub diverged_at: Option<usize>,
}

fn check_training(data: &Dataset, prior_std: f64, cfg: &OptimizerConfig) -> Result<()> {
    if !(prior_std > 0.0) {
        return Err(Error::Config(format!("prior std must be positive, got {prior_std}")));
    }
    if data.is_empty() {
        return Err(Error::Input("training needs at least one row".into()));
    }
    cfg.validate()
}

/// Maximizes `log p(y|θ,x) + log N(θ | 0, σ₀² I)` by minibatch gradient descent.
pub fn train_map(model: &ProbModel, data: &Dataset, prior_std: f64, cfg: &OptimizerConfig) -> Result<MapOutcome> {
    check_training(data, prior_std, cfg)?;
    let n = data.len() as f64;
    let prior_prec = 1.0 / (prior_std * prior_std);
    let mut theta = model.params();
    let mut last_good = theta.clone();
    let mut opt = Optimizer::new(cfg, theta.len());
    let mut batches = Batches::new(data.len(), cfg.batch_size, cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut diverged_at = None;
    for step in 0..cfg.steps {
        let rows = batches.next().map(<[usize]>::to_vec);
        let b = rows.as_ref().map_or(n, |r| r.len() as f64);
        let (nll, mut g) = match model.nll_grad(&theta, data, rows.as_deref()) {
            Ok(v) => v,
            Err(Error::Numerical { .. }) => {
                diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };
        let scale = n / b;
        let sq: f64 = theta.iter().map(|t| t * t).sum();
        let objective = (scale * nll + 0.5 * prior_prec * sq) / n;
        if !objective.is_finite() || g.iter().any(|v| !v.is_finite()) {
            diverged_at = Some(step);
            break;
        }
        trace.push(objective);
        for (gi, t) in g.iter_mut().zip(&theta) {
            *gi = (scale * *gi + prior_prec * t) / n;
        }
        last_good.copy_from_slice(&theta);
        opt.step(&mut theta, &g, cfg.lr_at(step));
    }
    if theta.iter().any(|v| !v.is_finite()) && diverged_at.is_none() {
        diverged_at = Some(cfg.steps);
    }
    if let Some(step) = diverged_at {
        log::warn!("MAP training diverged at step {step}; keeping the last finite parameters");
        theta = last_good;
    }
    Ok(MapOutcome {
        model: model.with_params(&theta)?,
        trace,
        diverged_at,
    })
}

#[derive(Debug, Clone)]
pub struct AdviOutcome {
    pub posterior: GaussianPosterior,
    /// Per-step single-batch ELBO estimates.
    pub elbo_trace: Vec<f64>,
}

/// Mean-field Gaussian variational inference with reparameterized gradients
/// and an analytic KL term to the prior `N(0, σ₀² I)`.
///
/// `σ = exp(ρ)`. The mean starts at `init_mean` (typically a MAP solution) or
/// the model's current parameters; `ρ` starts at `ln(0.05·σ₀)`.
pub fn train_advi(
    model: &ProbModel,
    data: &Dataset,
    prior_std: f64,
    cfg: &OptimizerConfig,
    init_mean: Option<&[f64]>,
) -> Result<AdviOutcome> {
    check_training(data, prior_std, cfg)?;
    if cfg.mc_samples == 0 {
        return Err(Error::Config("ADVI needs at least one Monte Carlo sample per step".into()));
    }
    let np = model.n_params();
    let mu0 = match init_mean {
        Some(m) => {
            ensure_dim("ADVI initial mean", np, m.len())?;
            m.to_vec()
        }
        None => model.params(),
    };
    let n = data.len() as f64;
    let s0sq = prior_std * prior_std;
    // Variational parameters laid out as [μ, ρ].
    let mut vparams = mu0;
    vparams.extend(std::iter::repeat_n((0.05 * prior_std).ln(), np));
    let mut opt = Optimizer::new(cfg, 2 * np);
    let mut batches = Batches::new(data.len(), cfg.batch_size, cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(1);
    let mut elbo_trace = Vec::with_capacity(cfg.steps);
    let mut theta = vec![0.0; np];
    let mut eps = vec![0.0; np];
    let mut grad = vec![0.0; 2 * np];
    let inv_mc = 1.0 / cfg.mc_samples as f64;
    for step in 0..cfg.steps {
        let rows = batches.next().map(<[usize]>::to_vec);
        let scale = n / rows.as_ref().map_or(n, |r| r.len() as f64);
        let (mu, rho) = vparams.split_at(np);
        let sigma: Vec<f64> = rho.iter().map(|r| r.exp()).collect();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut expected_nll = 0.0;
        for _ in 0..cfg.mc_samples {
            for i in 0..np {
                eps[i] = noise_rng.sample(StandardNormal);
                theta[i] = mu[i] + sigma[i] * eps[i];
            }
            let (nll, g) = model
                .nll_grad(&theta, data, rows.as_deref())
                .map_err(|e| match e {
                    Error::Numerical { detail, .. } => Error::numerical("ADVI ELBO", step, detail),
                    e => e,
                })?;
            expected_nll += inv_mc * scale * nll;
            for i in 0..np {
                let gi = inv_mc * scale * g[i];
                grad[i] += gi;
                grad[np + i] += gi * eps[i] * sigma[i];
            }
        }
        let mut kl = 0.0;
        for i in 0..np {
            let s2 = sigma[i] * sigma[i];
            kl += 0.5 * (s0sq / s2).ln() + (s2 + mu[i] * mu[i]) / (2.0 * s0sq) - 0.5;
            grad[i] = (grad[i] + mu[i] / s0sq) / n;
            grad[np + i] = (grad[np + i] + s2 / s0sq - 1.0) / n;
        }
        let elbo = -expected_nll - kl;
        if !elbo.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::numerical("ADVI ELBO", step, format!("ELBO {elbo}")));
        }
        elbo_trace.push(elbo);
        opt.step(&mut vparams, &grad, cfg.lr_at(step));
    }
    let (mu, rho) = vparams.split_at(np);
    let posterior = GaussianPosterior::new(
        mu.to_vec(),
        rho.iter().map(|r| r.exp()).collect(),
        prior_std,
        model.primary_mask(),
        PosteriorSource::Advi,
        cfg.seed,
    )?;
    Ok(AdviOutcome { posterior, elbo_trace })
}
