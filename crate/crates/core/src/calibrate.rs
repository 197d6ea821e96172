//! Choosing `φ`: calibration inputs, the target `γ`, and the loss
//!
//! ```text
//! L(φ) = (1/N*) Σ_j ‖U_φ(x*_j) − γ‖²
//! ```
//!
//! `U_φ` is the predictive mean probability vector for classification and the
//! epistemic variance for regression. Pre-distances and per-sample outputs at
//! the calibration inputs are computed once; each `φ` only reweights them.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Targets};
use crate::distance::{scale, DistanceModel, PreDistanceCache};
use crate::error::{Error, Result};
use crate::inference::PosteriorSamples;
use crate::metrics::argmax;
use crate::nnet::ProbModel;
use crate::weights::{bayesian_model_average, PredictiveSummary, Reweighter, SampleOutputs};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    /// `γ = (1/m, …, 1/m)`.
    #[default]
    ClassificationUniform,
    /// `γ = scale · q_quantile` of the uncalibrated epistemic variances at the
    /// training inputs.
    RegressionQuantile { scale: f64, quantile: f64 },
}

impl Target {
    pub fn regression_default() -> Self {
        Target::RegressionQuantile { scale: 10.0, quantile: 0.95 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selection {
    /// Validation inputs whose uncalibrated argmax differs from the label.
    #[default]
    Misclassified,
    /// The `fraction` of validation inputs with the largest absolute residual.
    WorstResidualFraction { fraction: f64 },
    /// Use the given inputs as they are (for example generated OOD inputs).
    ExplicitOodInputs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub target: Target,
    pub selection: Selection,
    pub phi_range: [f64; 2],
    pub grid_points: usize,
    pub refine: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            target: Target::default(),
            selection: Selection::default(),
            phi_range: [-10.0, 5.0],
            grid_points: 151,
            refine: true,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.phi_range;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("phi_range must satisfy lo < hi, got [{lo}, {hi}]")));
        }
        if self.grid_points < 3 {
            return Err(Error::Config(format!("grid_points must be at least 3, got {}", self.grid_points)));
        }
        if let Selection::WorstResidualFraction { fraction } = self.selection {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::Config(format!("residual fraction must lie in (0, 1], got {fraction}")));
            }
        }
        if let Target::RegressionQuantile { scale, quantile } = self.target {
            if !(scale > 0.0) || !(0.0..=1.0).contains(&quantile) {
                return Err(Error::Config(format!("invalid regression target scale {scale} / quantile {quantile}")));
            }
        }
        Ok(())
    }

    /// The evaluation grid, `grid_points` evenly spaced values including both ends.
    pub fn grid(&self) -> Vec<f64> {
        let [lo, hi] = self.phi_range;
        let n = self.grid_points;
        (0..n)
            .map(|k| if k + 1 == n { hi } else { lo + (hi - lo) * k as f64 / (n - 1) as f64 })
            .collect()
    }
}

/// The resolved target `γ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetValue {
    Vector(Vec<f64>),
    Scalar(f64),
}

impl TargetValue {
    pub fn uniform(n_classes: usize) -> Self {
        TargetValue::Vector(vec![1.0 / n_classes as f64; n_classes])
    }

    /// `scale · q_p(values)` with linear interpolation between order statistics.
    pub fn regression(epistemic_vars: &[f64], scale: f64, quantile: f64) -> Result<Self> {
        Ok(TargetValue::Scalar(scale * quantile_linear(epistemic_vars, quantile)?))
    }

    /// `‖U − γ‖²` for one summary.
    pub fn sq_deviation(&self, s: &PredictiveSummary) -> Result<f64> {
        match (self, s) {
            (TargetValue::Vector(g), PredictiveSummary::Classification { mean_probs, .. }) if g.len() == mean_probs.len() => {
                Ok(mean_probs.iter().zip(g).map(|(p, t)| (p - t) * (p - t)).sum())
            }
            (TargetValue::Scalar(g), PredictiveSummary::Regression { epistemic_var, .. }) => Ok((epistemic_var - g).powi(2)),
            _ => Err(Error::Config("calibration target does not match the prediction task".into())),
        }
    }
}

pub fn quantile_linear(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Input("quantile of an empty set".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// Builds `γ` from the config. Regression targets need the uncalibrated
/// per-sample outputs at the training inputs.
pub fn resolve_target(target: &Target, model: &ProbModel, train_outputs: Option<&SampleOutputs>) -> Result<TargetValue> {
    match (target, model) {
        (Target::ClassificationUniform, ProbModel::Classification { net }) => Ok(TargetValue::uniform(net.output_dim())),
        (Target::RegressionQuantile { scale, quantile }, ProbModel::Regression { .. }) => {
            let out = train_outputs.ok_or_else(|| Error::Config("regression target needs training outputs".into()))?;
            let vars = (0..out.n_points())
                .map(|j| bayesian_model_average(out, j).map(|s| s.epistemic_var()))
                .collect::<Result<Vec<_>>>()?;
            TargetValue::regression(&vars, *scale, *quantile)
        }
        _ => Err(Error::Config("calibration target does not match the model task".into())),
    }
}

/// Row indices of `validation` chosen for calibration, judged by the
/// uncalibrated predictive.
pub fn select_calibration_indices(
    model: &ProbModel,
    samples: &PosteriorSamples,
    validation: &Dataset,
    selection: &Selection,
) -> Result<Vec<usize>> {
    if validation.is_empty() {
        return Err(Error::Input("validation set is empty".into()));
    }
    if let Selection::ExplicitOodInputs = selection {
        return Ok((0..validation.len()).collect());
    }
    let outputs = SampleOutputs::compute(model, samples, validation.inputs().view())?;
    let summaries = (0..validation.len())
        .map(|j| bayesian_model_average(&outputs, j))
        .collect::<Result<Vec<_>>>()?;
    match (selection, validation.targets()) {
        (Selection::Misclassified, Targets::Classes { labels, .. }) => {
            let idx: Vec<usize> = summaries
                .iter()
                .zip(labels)
                .enumerate()
                .filter(|(_, (s, &y))| argmax(&s.mean()) != y)
                .map(|(j, _)| j)
                .collect();
            if idx.is_empty() {
                return Err(Error::EmptyCalibration(
                    "no validation input is misclassified".into(),
                ));
            }
            Ok(idx)
        }
        (Selection::WorstResidualFraction { fraction }, Targets::Real(y)) => {
            let resid: Vec<f64> = summaries.iter().zip(y).map(|(s, t)| (s.mean()[0] - t).abs()).collect();
            Ok(top_fraction(&resid, *fraction))
        }
        _ => Err(Error::Config("selection rule does not match the validation targets".into())),
    }
}

/// Indices of the `ceil(f·n)` largest values, largest first; equal values keep
/// index order.
pub fn top_fraction(values: &[f64], fraction: f64) -> Vec<usize> {
    let k = ((fraction * values.len() as f64).ceil() as usize).clamp(1, values.len());
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx.truncate(k);
    idx
}

/// Calibration inputs selected from `validation`.
pub fn select_calibration_inputs(
    model: &ProbModel,
    samples: &PosteriorSamples,
    validation: &Dataset,
    selection: &Selection,
) -> Result<Array2<f64>> {
    let idx = select_calibration_indices(model, samples, validation, selection)?;
    Ok(validation.inputs().select(Axis(0), &idx))
}

/// Everything `L(φ)` needs, precomputed once.
#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    outputs: SampleOutputs,
    pre: PreDistanceCache,
    reweighter: Reweighter,
    target: TargetValue,
}

impl CalibrationProblem {
    pub fn new(
        model: &ProbModel,
        samples: &PosteriorSamples,
        reweighter: Reweighter,
        dm: &DistanceModel,
        calib_inputs: ArrayView2<'_, f64>,
        target: TargetValue,
    ) -> Result<Self> {
        if calib_inputs.nrows() == 0 {
            return Err(Error::EmptyCalibration("calibration set is empty".into()));
        }
        Ok(CalibrationProblem {
            outputs: SampleOutputs::compute(model, samples, calib_inputs)?,
            pre: dm.cache(calib_inputs)?,
            reweighter,
            target,
        })
    }

    pub fn len(&self) -> usize {
        self.pre.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pre.values.is_empty()
    }

    pub fn target(&self) -> &TargetValue {
        &self.target
    }

    pub fn pre_distances(&self) -> &[f64] {
        &self.pre.values
    }

    /// `L(φ)`.
    pub fn loss(&self, phi: f64) -> Result<f64> {
        let g = scale(phi);
        let terms = self
            .pre
            .values
            .par_iter()
            .enumerate()
            .map(|(j, d0)| {
                let w = self.reweighter.weights(g * d0)?;
                let s = self.outputs.summarize(j, &w.normalized(), w.ess)?;
                self.target.sq_deviation(&s)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(terms.iter().sum::<f64>() / terms.len() as f64)
    }
}

/// `L(φ)` recomputed from scratch: no cached pre-distances or outputs.
#[allow(clippy::too_many_arguments)]
pub fn calibration_loss(
    phi: f64,
    calib_inputs: ArrayView2<'_, f64>,
    model: &ProbModel,
    samples: &PosteriorSamples,
    reweighter: &Reweighter,
    dm: &DistanceModel,
    target: &TargetValue,
) -> Result<f64> {
    let outputs = SampleOutputs::compute(model, samples, calib_inputs)?;
    let d0 = dm.pre_distance(calib_inputs)?;
    let g = scale(phi);
    let mut acc = 0.0;
    for (j, d) in d0.iter().enumerate() {
        let w = reweighter.weights(g * d)?;
        acc += target.sq_deviation(&outputs.summarize(j, &w.normalized(), w.ess)?)?;
    }
    Ok(acc / d0.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub phi_star: f64,
    pub loss_star: f64,
    pub target: TargetValue,
    pub selection_rule: Selection,
    #[serde(rename = "n_calibration")]
    pub calibration_set_size: usize,
    /// Grid and refinement evaluations, sorted by `φ`. Non-finite losses are left out.
    pub loss_curve: Vec<[f64; 2]>,
    /// Index of the best grid point.
    pub grid_argmin: usize,
    pub grid_points: usize,
    /// The loss was identical at every grid point.
    pub degenerate: bool,
}

impl CalibrationResult {
    /// Whether the best grid point lies strictly inside the grid.
    pub fn is_interior(&self) -> bool {
        self.grid_argmin > 0 && self.grid_argmin + 1 < self.grid_points
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `phi,loss` rows, optionally preceded by a `# stamp` line.
    pub fn write_curve_csv(&self, path: &Path, stamp: Option<&str>) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut body = String::new();
        if let Some(s) = stamp {
            body.push_str(&format!("# {s}\n"));
        }
        body.push_str("phi,loss\n");
        for [p, l] in &self.loss_curve {
            body.push_str(&format!("{p:?},{l:?}\n"));
        }
        f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Grid search over `φ`, then golden-section refinement inside the cells
/// adjacent to the best grid point. Ties go to the smallest `φ`.
pub fn optimize_phi(problem: &CalibrationProblem, cfg: &CalibrationConfig) -> Result<CalibrationResult> {
    cfg.validate()?;
    let grid = cfg.grid();
    let losses = grid
        .par_iter()
        .map(|&phi| match problem.loss(phi) {
            Ok(l) => Ok(l),
            Err(Error::Numerical { .. }) => Ok(f64::NAN),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut best: Option<usize> = None;
    for (k, l) in losses.iter().enumerate() {
        if l.is_finite() && best.is_none_or(|b| *l < losses[b]) {
            best = Some(k);
        }
    }
    let Some(k) = best else {
        let dump: Vec<String> = grid.iter().zip(&losses).map(|(p, l)| format!("({p}, {l})")).collect();
        return Err(Error::numerical("calibration loss", 0, format!("no finite loss on the grid: {}", dump.join(" "))));
    };
    let skipped = losses.iter().filter(|l| !l.is_finite()).count();
    if skipped > 0 {
        log::warn!("{skipped} grid points gave a non-finite calibration loss and were skipped");
    }
    let finite: Vec<f64> = losses.iter().copied().filter(|l| l.is_finite()).collect();
    let degenerate = finite.iter().all(|&l| l == finite[0]);
    if degenerate {
        log::warn!("calibration loss is flat over the grid; choosing the smallest phi");
    } else if losses.iter().filter(|&&l| l == losses[k]).count() > 1 {
        log::info!("several grid points share the minimum loss; choosing the smallest phi");
    }
    let mut curve: Vec<[f64; 2]> = grid
        .iter()
        .zip(&losses)
        .filter(|(_, l)| l.is_finite())
        .map(|(&p, &l)| [p, l])
        .collect();
    let (mut phi_star, mut loss_star) = (grid[k], losses[k]);
    if cfg.refine && !degenerate {
        let lo = grid[k.saturating_sub(1)];
        let hi = grid[(k + 1).min(grid.len() - 1)];
        for (p, l) in golden_section(|x| problem.loss(x), lo, hi, 1e-6 * (grid[1] - grid[0]))? {
            if l.is_finite() {
                curve.push([p, l]);
                if l < loss_star {
                    phi_star = p;
                    loss_star = l;
                }
            }
        }
        curve.sort_by(|a, b| a[0].total_cmp(&b[0]));
    }
    Ok(CalibrationResult {
        phi_star,
        loss_star,
        target: problem.target.clone(),
        selection_rule: cfg.selection,
        calibration_set_size: problem.len(),
        loss_curve: curve,
        grid_argmin: k,
        grid_points: grid.len(),
        degenerate,
    })
}

/// Golden-section evaluations `(φ, loss)` for a minimum in `[a, b]`.
fn golden_section(f: impl Fn(f64) -> Result<f64>, mut a: f64, mut b: f64, tol: f64) -> Result<Vec<(f64, f64)>> {
    let eval = |x: f64| match f(x) {
        Ok(v) => Ok(v),
        Err(Error::Numerical { .. }) => Ok(f64::NAN),
        Err(e) => Err(e),
    };
    let mut trace = Vec::new();
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (eval(c)?, eval(d)?);
    trace.push((c, fc));
    trace.push((d, fd));
    while (b - a).abs() > tol && trace.len() < 200 {
        // NaN compares false, so a non-finite fc moves the bracket away from c.
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = eval(c)?;
            trace.push((c, fc));
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = eval(d)?;
            trace.push((d, fd));
        }
    }
    Ok(trace)
}
