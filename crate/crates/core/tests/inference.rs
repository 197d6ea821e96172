use dapcal::data::Dataset;
use dapcal::inference::{fit_laplace, sample_posterior, train_advi, train_map, GaussianPosterior, OptimizerConfig, PosteriorSource};
use dapcal::nnet::{Activation, Curvature, Mlp, Noise, ProbModel};
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn linear_model(dim: usize, noise_std: f64) -> ProbModel {
    let net = Mlp::zeros(&[dim, 1], Activation::Tanh).unwrap();
    ProbModel::regressor(net, Noise::Fixed { std: noise_std }).unwrap()
}

/// Gauss-Jordan inverse of a small dense matrix.
fn invert(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut inv = Array2::eye(n);
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[[i, c]].abs().total_cmp(&m[[j, c]].abs())).unwrap();
        for k in 0..n {
            m.swap([c, k], [p, k]);
            inv.swap([c, k], [p, k]);
        }
        let d = m[[c, c]];
        for k in 0..n {
            m[[c, k]] /= d;
            inv[[c, k]] /= d;
        }
        for r in (0..n).filter(|&r| r != c) {
            let f = m[[r, c]];
            for k in 0..n {
                m[[r, k]] -= f * m[[c, k]];
                inv[[r, k]] -= f * inv[[c, k]];
            }
        }
    }
    inv
}

/// Posterior precision and mean of `y = [x, 1]·θ + ε`, `θ ~ N(0, σ₀² I)`.
fn linear_posterior(x: &Array2<f64>, y: &[f64], noise_std: f64, prior_std: f64) -> (Array2<f64>, Vec<f64>) {
    let (n, d) = x.dim();
    let a = Array2::from_shape_fn((n, d + 1), |(i, j)| if j < d { x[[i, j]] } else { 1.0 });
    let prec = a.t().dot(&a) / (noise_std * noise_std) + Array2::<f64>::eye(d + 1) / (prior_std * prior_std);
    let rhs = a.t().dot(&ndarray::Array1::from(y.to_vec())) / (noise_std * noise_std);
    let mean = invert(&prec).dot(&rhs).to_vec();
    (prec, mean)
}

#[test]
fn map_matches_ridge_solution() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let x = Array2::from_shape_fn((40, 3), |_| r.sample::<f64, _>(StandardNormal));
    let y: Vec<f64> = (0..40).map(|i| 0.5 * x[[i, 0]] - x[[i, 2]] + 0.3 + 0.2 * r.sample::<f64, _>(StandardNormal)).collect();
    let data = Dataset::regression(x.clone(), y.clone()).unwrap();
    let cfg = OptimizerConfig {
        steps: 6000,
        lr: 0.05,
        final_lr_fraction: 0.01,
        ..Default::default()
    };
    let fit = train_map(&linear_model(3, 0.5), &data, 0.7, &cfg).unwrap();
    let (_, exact) = linear_posterior(&x, &y, 0.5, 0.7);
    for (a, b) in fit.model.params().iter().zip(&exact) {
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }
}

#[test]
fn map_interpolates_one_point_without_prior() {
    let data = Dataset::regression(array![[0.8, -0.3]], vec![1.7]).unwrap();
    let cfg = OptimizerConfig {
        steps: 3000,
        lr: 0.01,
        final_lr_fraction: 0.01,
        ..Default::default()
    };
    let fit = train_map(&linear_model(2, 1.0), &data, 1e6, &cfg).unwrap();
    let pred = fit.model.primary().forward(data.inputs().view()).unwrap()[[0, 0]];
    assert!((pred - 1.7).abs() < 1e-6, "residual {}", pred - 1.7);
}

#[test]
fn zero_steps_leave_parameters_unchanged() {
    let model = ProbModel::classifier(Mlp::new(&[2, 4, 2], Activation::Tanh, 1).unwrap());
    let data = Dataset::classification(array![[0.0, 1.0], [1.0, 0.0]], vec![0, 1], 2).unwrap();
    let cfg = OptimizerConfig { steps: 0, ..Default::default() };
    assert_eq!(train_map(&model, &data, 1.0, &cfg).unwrap().model, model);
    let q = train_advi(&model, &data, 1.0, &cfg, None).unwrap().posterior;
    assert_eq!(q.mean, model.params());
    assert!(q.std.iter().all(|&s| (s - 0.05).abs() < 1e-15));
}

#[test]
fn divergence_keeps_last_finite_state() {
    let data = Dataset::regression(array![[1.0], [2.0]], vec![1e3, -1e3]).unwrap();
    let cfg = OptimizerConfig {
        algo: dapcal::inference::Algo::SgdMomentum,
        steps: 200,
        lr: 1e6,
        ..Default::default()
    };
    let fit = train_map(&linear_model(1, 0.01), &data, 1.0, &cfg).unwrap();
    assert!(fit.diverged_at.is_some());
    assert!(fit.model.params().iter().all(|v| v.is_finite()));
}

#[test]
fn advi_recovers_conjugate_gaussian_mean() {
    // Zero inputs leave only the bias in play: y_i ~ N(b, s²), b ~ N(0, σ₀²).
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let n = 20;
    let y: Vec<f64> = (0..n).map(|_| 2.0 + r.sample::<f64, _>(StandardNormal)).collect();
    let data = Dataset::regression(Array2::zeros((n, 1)), y.clone()).unwrap();
    let cfg = OptimizerConfig {
        steps: 20_000,
        lr: 0.01,
        mc_samples: 8,
        final_lr_fraction: 0.01,
        seed: 5,
        ..Default::default()
    };
    let q = train_advi(&linear_model(1, 1.0), &data, 1.0, &cfg, None).unwrap().posterior;
    let prec = n as f64 + 1.0;
    let (mean, std) = (y.iter().sum::<f64>() / prec, prec.sqrt().recip());
    assert!((q.mean[1] - mean).abs() < 0.02 * mean.abs(), "mean {} vs {mean}", q.mean[1]);
    assert!((q.std[1] - std).abs() < 0.02 * std, "std {} vs {std}", q.std[1]);
}

#[test]
fn elbo_improves() {
    let x = Array2::from_shape_fn((60, 1), |(i, _)| i as f64 / 30.0 - 1.0);
    let y: Vec<f64> = (0..60).map(|i| (3.0 * x[[i, 0]]).sin()).collect();
    let data = Dataset::regression(x, y).unwrap();
    let model = ProbModel::regressor(Mlp::new(&[1, 8, 1], Activation::Tanh, 2).unwrap(), Noise::Fixed { std: 0.1 }).unwrap();
    let cfg = OptimizerConfig {
        steps: 2000,
        lr: 0.01,
        ..Default::default()
    };
    let trace = train_advi(&model, &data, 1.0, &cfg, None).unwrap().elbo_trace;
    let median = |s: &[f64]| {
        let mut v = s.to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let k = trace.len() / 10;
    assert!(median(&trace[trace.len() - k..]) > median(&trace[..k]));
}

#[test]
fn laplace_equals_exact_linear_gaussian_posterior() {
    // Orthogonal, centered columns make the exact posterior covariance diagonal.
    let x = array![[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0], [2.0, 0.0], [-2.0, 0.0]];
    let y = vec![0.3, -1.1, 0.8, 0.2, 1.5, -0.7];
    let (noise, s0) = (0.4, 1.3);
    let (prec, mean) = linear_posterior(&x, &y, noise, s0);
    let cov = invert(&prec);
    let mut model = linear_model(2, noise);
    model.set_params(&mean).unwrap();
    let data = Dataset::regression(x, y).unwrap();
    let post = fit_laplace(&model, &data, s0, Curvature::GaussNewton).unwrap();
    assert_eq!(post.mean, mean);
    for i in 0..3 {
        assert!((post.std[i] - cov[[i, i]].sqrt()).abs() < 1e-6, "{i}: {} vs {}", post.std[i], cov[[i, i]].sqrt());
    }
}

#[test]
fn laplace_without_data_returns_prior_std() {
    let model = linear_model(3, 1.0);
    let data = Dataset::regression(Array2::zeros((0, 3)), vec![]).unwrap();
    let post = fit_laplace(&model, &data, 1.7, Curvature::GaussNewton).unwrap();
    assert!(post.std.iter().all(|&s| s == 1.7));
}

#[test]
fn duplicated_data_doubles_curvature() {
    let model = ProbModel::classifier(Mlp::new(&[2, 5, 3], Activation::Tanh, 4).unwrap());
    let x = Array2::from_shape_fn((12, 2), |(i, j)| ((i * 5 + j * 3) % 7) as f64 / 3.0 - 1.0);
    let data = Dataset::classification(x, (0..12).map(|i| i % 3).collect(), 3).unwrap();
    for kind in [Curvature::GaussNewton, Curvature::EmpiricalFisher] {
        let one = fit_laplace(&model, &data, 1.0, kind).unwrap();
        let two = fit_laplace(&model, &data.repeated(2), 1.0, kind).unwrap();
        for (a, b) in one.std.iter().zip(&two.std) {
            let (h1, h2) = (a.powi(-2) - 1.0, b.powi(-2) - 1.0);
            assert!((h2 - 2.0 * h1).abs() <= 1e-9 * h2.abs().max(1e-12), "{kind:?}: {h1} {h2}");
        }
    }
}

#[test]
fn analytic_kl_matches_monte_carlo() {
    let post = GaussianPosterior::new(vec![0.4, -1.2, 0.0], vec![0.3, 0.8, 1.4], 1.1, vec![true; 3], PosteriorSource::Advi, 0).unwrap();
    let samples = sample_posterior(&post, 1_000_000, 8).unwrap();
    let ln_normal = |x: f64, m: f64, s: f64| -0.5 * ((x - m) / s).powi(2) - s.ln();
    let mc: f64 = samples
        .samples
        .outer_iter()
        .map(|t| (0..3).map(|i| ln_normal(t[i], post.mean[i], post.std[i]) - ln_normal(t[i], 0.0, 1.1)).sum::<f64>())
        .sum::<f64>()
        / 1e6;
    let kl = post.kl_to_prior();
    assert!((mc - kl).abs() < 0.01 * kl, "{mc} vs {kl}");
}

#[test]
fn sample_mean_within_four_standard_errors() {
    let post = GaussianPosterior::new(vec![1.0, -2.0, 0.5], vec![0.1, 2.0, 0.7], 1.0, vec![true; 3], PosteriorSource::Laplace, 0).unwrap();
    let s = sample_posterior(&post, 100_000, 21).unwrap();
    let mean = s.samples.mean_axis(ndarray::Axis(0)).unwrap();
    for i in 0..3 {
        let se = post.std[i] / (1e5f64).sqrt();
        assert!((mean[i] - post.mean[i]).abs() < 4.0 * se);
    }
}
