use dapcal::calibrate::{
    calibration_loss, optimize_phi, select_calibration_indices, select_calibration_inputs, CalibrationConfig, CalibrationProblem, Selection,
    TargetValue,
};
use dapcal::data::Dataset;
use dapcal::distance::{DistanceModel, DistanceOptions, Projector};
use dapcal::inference::{sample_posterior, GaussianPosterior, PositivityMode, PosteriorSamples, PosteriorSource};
use dapcal::nnet::{Activation, Mlp, Noise, ProbModel};
use dapcal::weights::{bayesian_model_average, RatioMode, Reweighter, SampleOutputs};
use dapcal::Error;
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Setup {
    model: ProbModel,
    samples: PosteriorSamples,
    rw: Reweighter,
    dm: DistanceModel,
}

fn classifier_setup(seed: u64) -> (Setup, Array2<f64>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let model = ProbModel::classifier(Mlp::new(&[2, 8, 3], Activation::Tanh, seed).unwrap());
    let mean = model.params();
    let std: Vec<f64> = (0..mean.len()).map(|_| r.random_range(0.05..0.6)).collect();
    let post = GaussianPosterior::new(mean, std, 1.0, model.primary_mask(), PosteriorSource::Advi, 0).unwrap();
    let samples = sample_posterior(&post, 200, seed).unwrap();
    let rw = Reweighter::new(&samples, &post, RatioMode::ClosedForm, PositivityMode::Error).unwrap();
    let train = Array2::from_shape_fn((40, 2), |_| r.random_range(-1.0..1.0));
    let dm = DistanceModel::new(Projector::Identity, train.view(), 1.0, &DistanceOptions::default()).unwrap();
    let calib = Array2::from_shape_fn((25, 2), |_| r.random_range(-4.0..4.0));
    (Setup { model, samples, rw, dm }, calib)
}

fn point_mass_regressor(weights: [f64; 3]) -> (ProbModel, PosteriorSamples) {
    let net = Mlp::from_params(&[2, 1], Activation::Tanh, weights.to_vec()).unwrap();
    let model = ProbModel::regressor(net, Noise::Fixed { std: 1.0 }).unwrap();
    let post = GaussianPosterior::point_mass(model.params(), 1.0, model.primary_mask(), 0).unwrap();
    let samples = sample_posterior(&post, 1, 0).unwrap();
    (model, samples)
}

#[test]
fn worst_residual_selection_matches_sort_oracle() {
    let (model, samples) = point_mass_regressor([1.0, -2.0, 0.5]);
    let x = Array2::from_shape_fn((20, 2), |(i, j)| (i as f64 * 0.37 + j as f64).sin());
    let residuals: Vec<f64> = (0..20).map(|i| ((i * 7) % 20) as f64 * 0.1 - 1.0).collect();
    let y: Vec<f64> = (0..20).map(|i| x[[i, 0]] - 2.0 * x[[i, 1]] + 0.5 + residuals[i]).collect();
    let validation = Dataset::regression(x, y).unwrap();
    let mut order: Vec<usize> = (0..20).collect();
    order.sort_by(|&a, &b| residuals[b].abs().total_cmp(&residuals[a].abs()).then(a.cmp(&b)));
    let got = select_calibration_indices(&model, &samples, &validation, &Selection::WorstResidualFraction { fraction: 0.3 }).unwrap();
    let mut want = order[..6].to_vec();
    let mut got_sorted = got.clone();
    want.sort_unstable();
    got_sorted.sort_unstable();
    assert_eq!(got_sorted, want);

    let all = select_calibration_inputs(&model, &samples, &validation, &Selection::WorstResidualFraction { fraction: 1.0 }).unwrap();
    assert_eq!(all.nrows(), 20);
}

#[test]
fn perfect_classifier_has_nothing_to_select() {
    // Logits (x₀, −x₀): class 0 for positive inputs, class 1 for negative.
    let net = Mlp::from_params(&[1, 2], Activation::Tanh, vec![1.0, -1.0, 0.0, 0.0]).unwrap();
    let model = ProbModel::classifier(net);
    let post = GaussianPosterior::point_mass(model.params(), 1.0, model.primary_mask(), 0).unwrap();
    let samples = sample_posterior(&post, 1, 0).unwrap();
    let validation = Dataset::classification(array![[1.0], [2.0], [-1.0], [-3.0]], vec![0, 0, 1, 1], 2).unwrap();
    let err = select_calibration_indices(&model, &samples, &validation, &Selection::Misclassified).unwrap_err();
    assert!(matches!(err, Error::EmptyCalibration(_)));
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn cached_loss_equals_cacheless_recomputation() {
    let (s, calib) = classifier_setup(3);
    let target = TargetValue::uniform(3);
    let problem = CalibrationProblem::new(&s.model, &s.samples, s.rw.clone(), &s.dm, calib.view(), target.clone()).unwrap();
    for phi in [-2.0, 0.7] {
        let fresh = calibration_loss(phi, calib.view(), &s.model, &s.samples, &s.rw, &s.dm, &target).unwrap();
        assert_eq!(problem.loss(phi).unwrap(), fresh);
    }
}

#[test]
fn minus_fifty_recovers_uncalibrated_loss() {
    let (s, calib) = classifier_setup(4);
    let problem = CalibrationProblem::new(&s.model, &s.samples, s.rw.clone(), &s.dm, calib.view(), TargetValue::uniform(3)).unwrap();
    let out = SampleOutputs::compute(&s.model, &s.samples, calib.view()).unwrap();
    let uncal: f64 = (0..calib.nrows())
        .map(|j| bayesian_model_average(&out, j).unwrap().mean().iter().map(|p| (p - 1.0 / 3.0).powi(2)).sum::<f64>())
        .sum::<f64>()
        / calib.nrows() as f64;
    assert!((problem.loss(-50.0).unwrap() - uncal).abs() < 1e-12);
}

#[test]
fn optimum_within_one_grid_step_of_dense_search() {
    let (s, calib) = classifier_setup(5);
    let problem = CalibrationProblem::new(&s.model, &s.samples, s.rw.clone(), &s.dm, calib.view(), TargetValue::uniform(3)).unwrap();
    let cfg = CalibrationConfig {
        grid_points: 31,
        ..Default::default()
    };
    let res = optimize_phi(&problem, &cfg).unwrap();
    let dense = CalibrationConfig {
        grid_points: 301,
        refine: false,
        ..Default::default()
    };
    let best = dense
        .grid()
        .into_iter()
        .map(|p| (p, problem.loss(p).unwrap()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let spacing = 15.0 / 30.0;
    assert!((res.phi_star - best.0).abs() <= spacing, "{} vs {}", res.phi_star, best.0);
    assert!(res.loss_star <= best.1 + 1e-12);
    let recorded = res.loss_curve.iter().map(|c| c[1]).fold(f64::INFINITY, f64::min);
    assert_eq!(recorded, res.loss_star);
}

#[test]
fn flat_loss_picks_smallest_phi() {
    let (s, _) = classifier_setup(6);
    let train = s.dm.train_features().clone();
    let problem = CalibrationProblem::new(&s.model, &s.samples, s.rw.clone(), &s.dm, train.view(), TargetValue::uniform(3)).unwrap();
    let res = optimize_phi(&problem, &CalibrationConfig::default()).unwrap();
    assert!(res.degenerate);
    assert_eq!(res.phi_star, -10.0);
    assert_eq!(res.grid_argmin, 0);
}

#[test]
fn zero_loss_when_target_is_met() {
    let (model, samples) = point_mass_regressor([0.4, 0.0, -1.0]);
    let post = GaussianPosterior::point_mass(model.params(), 1.0, model.primary_mask(), 0).unwrap();
    let rw = Reweighter::new(&samples, &post, RatioMode::ClosedForm, PositivityMode::Error).unwrap();
    let x = array![[0.5, 0.5], [1.0, -1.0]];
    let dm = DistanceModel::new(Projector::Identity, x.view(), 1.0, &DistanceOptions::default()).unwrap();
    // A point mass has no epistemic variance, so a zero target is met exactly.
    let far = x * 3.0;
    let problem = CalibrationProblem::new(&model, &samples, rw, &dm, far.view(), TargetValue::Scalar(0.0)).unwrap();
    assert_eq!(problem.loss(0.0).unwrap(), 0.0);
    assert_eq!(problem.loss(2.0).unwrap(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn sweeps_are_non_negative_and_repeatable(seed in 0u64..1000) {
        let (s, calib) = classifier_setup(seed);
        let problem = CalibrationProblem::new(&s.model, &s.samples, s.rw.clone(), &s.dm, calib.view(), TargetValue::uniform(3)).unwrap();
        let cfg = CalibrationConfig { grid_points: 21, ..Default::default() };
        let a = optimize_phi(&problem, &cfg).unwrap();
        let b = optimize_phi(&problem, &cfg).unwrap();
        prop_assert!(a.loss_curve.iter().all(|c| c[1] >= 0.0 && c[1].is_finite()));
        prop_assert_eq!(a, b);
    }
}
