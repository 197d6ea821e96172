use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::artifacts::{self as art, read_json, read_predictions, write_json, write_predictions, write_text, PredictionRow, Stamp};
use super::config::{ExperimentConfig, InferenceMethod, MaskSpec, NoiseSpec, OodGenerator, ProjectorKind, TaskSpec};
use crate::calibrate::{optimize_phi, resolve_target, select_calibration_inputs, CalibrationProblem, CalibrationResult, Selection};
use crate::data::synth::{gaussian_blobs, gen_gap_regression, gen_gaussian_clusters, gen_sinusoid_clusters, gen_two_moons, lattice_2d, ring, shell_inputs};
use crate::data::{make_gap_splits, make_gap_splits_with_fraction, read_inputs, write_inputs_csv, Dataset, TaskKind};
use crate::distance::{scale, DistanceModel, DistanceOptions, Projector};
use crate::error::{Error, Result};
use crate::inference::{fit_laplace, sample_posterior, train_advi, train_map, GaussianPosterior, OptimizerConfig, PosteriorSamples};
use crate::metrics::{auroc, aucpr, argmax, Metrics, ScoreType, ScoredLabels};
use crate::nnet::{Activation, Mlp, Noise, ProbModel};
use crate::weights::{bayesian_model_average, predict_batch, PointPrediction, PredictiveSummary, Reweighter, SampleOutputs};

pub const DATA_META: &str = "data.json";

/// Steps of an experiment, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    Train,
    Calibrate,
    Predict,
    Evaluate,
    SweepPhi,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Train => "train",
            Stage::Calibrate => "calibrate",
            Stage::Predict => "predict",
            Stage::Evaluate => "evaluate",
            Stage::SweepPhi => "sweep-phi",
        }
    }
}

/// Dataset description written by `gen-data` and read by every later stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMeta {
    pub task: TaskSpec,
    pub kind: TaskKind,
    pub n_classes: Option<usize>,
    pub input_dim: usize,
    pub units: Vec<UnitMeta>,
}

/// One train/evaluate unit: the whole experiment, or one gap split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitMeta {
    /// Subdirectory of the output directory; `.` for single-unit tasks.
    pub dir: String,
    pub feature_index: Option<usize>,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub n_ood: usize,
    pub n_calibration_inputs: usize,
}

/// Metrics of one unit, before and after calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitReport {
    pub phi_star: f64,
    pub phi_interior: bool,
    pub uncalibrated: Metrics,
    pub dap: Metrics,
    /// Per input set: mean epistemic variance `[uncalibrated, dap]`.
    pub mean_epistemic_var: BTreeMap<String, [f64; 2]>,
    /// Per input set: mean effective sample size under DAP weights.
    pub mean_ess: BTreeMap<String, f64>,
}

/// Per-split summary written at the top level for gap tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub splits: Vec<GapSplitSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSplitSummary {
    pub dir: String,
    pub feature_index: Option<usize>,
    pub phi_star: f64,
    /// Mean test log-likelihood.
    pub test_ll_uncalibrated: f64,
    pub test_ll_dap: f64,
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    stamp: Stamp,
    root: PathBuf,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Self {
        Run {
            cfg,
            stamp: Stamp {
                config_hash: cfg.hash(),
                seed: cfg.seed,
            },
            root: cfg.output_dir.clone(),
        }
    }

    fn seed(&self, unit: &str, stage: &str) -> u64 {
        self.cfg.stage_seed(&format!("{unit}/{stage}"))
    }

    fn dir(&self, unit: &UnitMeta) -> PathBuf {
        self.unit_dir(&unit.dir)
    }

    fn unit_dir(&self, dir: &str) -> PathBuf {
        if dir == "." { self.root.clone() } else { self.root.join(dir) }
    }

    fn meta(&self) -> Result<DataMeta> {
        read_json(&self.root.join(DATA_META), &self.stamp)
    }

    fn read_dataset(&self, meta: &DataMeta, path: &Path) -> Result<Dataset> {
        let d = Dataset::read_csv(path, meta.kind, meta.n_classes)?;
        if d.dim() != meta.input_dim {
            return Err(Error::Input(format!("{} has {} inputs, expected {}", path.display(), d.dim(), meta.input_dim)));
        }
        Ok(d)
    }
}

/// Runs one stage on its own. Later stages read what earlier ones wrote into
/// `cfg.output_dir`.
pub fn run_stage(cfg: &ExperimentConfig, stage: Stage) -> Result<()> {
    in_pool(cfg.threads, || stage_inner(&Run::new(cfg), stage))
}

/// `gen-data`, `train`, `calibrate`, `predict` and `evaluate`, plus `sweep-phi`
/// when `outputs.sweep_phi` is set.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<()> {
    in_pool(cfg.threads, || {
        let run = Run::new(cfg);
        for stage in [Stage::GenData, Stage::Train, Stage::Calibrate, Stage::Predict, Stage::Evaluate] {
            stage_inner(&run, stage)?;
        }
        if cfg.outputs.sweep_phi {
            stage_inner(&run, Stage::SweepPhi)?;
        }
        Ok(())
    })
}

fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot build a pool of {n} threads: {e}")))?
            .install(f),
    }
}

fn stage_inner(run: &Run<'_>, stage: Stage) -> Result<()> {
    log::info!("stage {} ({})", stage.name(), run.stamp.line());
    let out = match stage {
        Stage::GenData => gen_data(run),
        Stage::Train => for_units(run, train_unit),
        Stage::Calibrate => for_units(run, calibrate_unit),
        Stage::Predict => for_units(run, predict_unit),
        Stage::Evaluate => evaluate(run),
        Stage::SweepPhi => for_units(run, sweep_unit),
    };
    out.map_err(|e| Error::Stage {
        stage: stage.name(),
        source: Box::new(e),
    })
}

fn for_units(run: &Run<'_>, f: fn(&Run<'_>, &DataMeta, &UnitMeta) -> Result<()>) -> Result<()> {
    let meta = run.meta()?;
    for unit in &meta.units {
        if meta.units.len() > 1 {
            log::info!("unit {}", unit.dir);
        }
        f(run, &meta, unit)?;
    }
    Ok(())
}

struct UnitData {
    dir: String,
    feature_index: Option<usize>,
    train: Dataset,
    validation: Option<Dataset>,
    test: Option<Dataset>,
    ood: Option<Array2<f64>>,
}

fn gen_data(run: &Run<'_>) -> Result<()> {
    let cfg = run.cfg;
    let seed = |s: &str| run.seed(".", s);
    let (units, n_classes) = match &cfg.task {
        TaskSpec::TwoMoons {
            n,
            noise,
            n_test,
            n_ood,
            ood_gap,
        } => {
            let train = gen_two_moons(*n, *noise, seed("data/train"))?;
            let ood = ood_ring(train.inputs(), *ood_gap, *n_ood);
            let unit = UnitData {
                dir: ".".into(),
                feature_index: None,
                validation: Some(gen_two_moons(*n_test, *noise, seed("data/validation"))?),
                test: Some(gen_two_moons(*n_test, *noise, seed("data/test"))?),
                ood: (*n_ood > 0).then_some(ood),
                train,
            };
            (vec![unit], Some(2))
        }
        TaskSpec::Sinusoid {
            n_per_cluster,
            centers,
            cluster_std,
            noise,
            n_test_per_cluster,
        } => {
            let gen = |n, s| gen_sinusoid_clusters(n, centers, *cluster_std, *noise, seed(s));
            let [lo, hi] = cfg.outputs.band_range;
            let far: Vec<f64> = linspace(lo, hi, cfg.outputs.band_points)
                .into_iter()
                .filter(|x| centers.iter().all(|c| (x - c).abs() > 3.0 * cluster_std))
                .collect();
            let unit = UnitData {
                dir: ".".into(),
                feature_index: None,
                train: gen(*n_per_cluster, "data/train")?,
                validation: Some(gen(*n_test_per_cluster, "data/validation")?),
                test: Some(gen(*n_test_per_cluster, "data/test")?),
                ood: (!far.is_empty()).then(|| Array2::from_shape_vec((far.len(), 1), far).expect("column")),
            };
            (vec![unit], None)
        }
        TaskSpec::GaussianClusters {
            centers,
            ood_centers,
            std,
            per_cluster,
            test_per_cluster,
        } => {
            let unit = UnitData {
                dir: ".".into(),
                feature_index: None,
                train: gen_gaussian_clusters(centers, *std, *per_cluster, seed("data/train"))?,
                validation: Some(gen_gaussian_clusters(centers, *std, *test_per_cluster, seed("data/validation"))?),
                test: Some(gen_gaussian_clusters(centers, *std, *test_per_cluster, seed("data/test"))?),
                ood: if ood_centers.is_empty() {
                    None
                } else {
                    Some(gaussian_blobs(ood_centers, *std, *test_per_cluster, seed("data/ood"))?)
                },
            };
            (vec![unit], Some(centers.len()))
        }
        TaskSpec::GapSynthetic {
            n,
            dim,
            noise,
            gap_fraction,
            validation_fraction,
        } => {
            let full = gen_gap_regression(*n, *dim, *noise, seed("data/full"))?;
            (gap_units(run, &full, *gap_fraction, *validation_fraction)?, None)
        }
        TaskSpec::Csv {
            path,
            task,
            n_classes,
            gap,
            gap_fraction,
            validation_fraction,
            test_fraction,
        } => {
            let full = Dataset::read_csv(path, *task, *n_classes)?;
            let units = if *gap {
                gap_units(run, &full, *gap_fraction, *validation_fraction)?
            } else {
                vec![random_split(run, &full, *validation_fraction, *test_fraction)?]
            };
            (units, full.n_classes())
        }
    };
    let input_dim = units[0].train.dim();
    let mut metas = Vec::with_capacity(units.len());
    let line = run.stamp.line();
    for u in &units {
        let dir = run.unit_dir(&u.dir);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        u.train.write_csv(&dir.join(art::TRAIN), Some(&line))?;
        if let Some(v) = &u.validation {
            v.write_csv(&dir.join(art::VALIDATION), Some(&line))?;
        }
        if let Some(t) = &u.test {
            t.write_csv(&dir.join(art::TEST), Some(&line))?;
        }
        if let Some(o) = &u.ood {
            write_inputs_csv(&dir.join(art::OOD), o, Some(&line))?;
        }
        let mut n_calib = 0;
        if cfg.calibration.config.selection == Selection::ExplicitOodInputs {
            let x = match &cfg.calibration.generator {
                OodGenerator::Shell(sc) => shell_inputs(u.train.inputs().view(), sc, run.seed(&u.dir, "data/calibration"))?,
                OodGenerator::Blobs { centers, std, per_center } => {
                    gaussian_blobs(centers, *std, *per_center, run.seed(&u.dir, "data/calibration"))?
                }
            };
            if x.ncols() != input_dim {
                return Err(Error::Config(format!("calibration inputs have {} columns, data has {input_dim}", x.ncols())));
            }
            n_calib = x.nrows();
            write_inputs_csv(&dir.join(art::CALIB_INPUTS), &x, Some(&line))?;
        }
        metas.push(UnitMeta {
            dir: u.dir.clone(),
            feature_index: u.feature_index,
            n_train: u.train.len(),
            n_validation: u.validation.as_ref().map_or(0, Dataset::len),
            n_test: u.test.as_ref().map_or(0, Dataset::len),
            n_ood: u.ood.as_ref().map_or(0, |o| o.nrows()),
            n_calibration_inputs: n_calib,
        });
    }
    let meta = DataMeta {
        task: cfg.task.clone(),
        kind: cfg.task.kind(),
        n_classes,
        input_dim,
        units: metas,
    };
    write_json(&run.root.join(DATA_META), &run.stamp, &meta)
}

/// Points on a circle around the training centroid, `gap` beyond the farthest
/// training input, hence at least `gap` away from every training input.
fn ood_ring(x: &Array2<f64>, gap: f64, n: usize) -> Array2<f64> {
    let c = x.mean_axis(Axis(0)).expect("non-empty");
    let r = x
        .outer_iter()
        .map(|row| (&row - &c).mapv(|v| v * v).sum().sqrt())
        .fold(0.0, f64::max);
    ring([c[0], c[1]], r + gap, n)
}

pub(crate) fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
    }
}

fn split_off(run: &Run<'_>, unit: &str, mut idx: Vec<usize>, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed(unit, "data/split"));
    idx.shuffle(&mut rng);
    let k = if fraction > 0.0 {
        ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len().saturating_sub(1))
    } else {
        0
    };
    let mut held: Vec<usize> = idx[..k].to_vec();
    let mut rest: Vec<usize> = idx[k..].to_vec();
    held.sort_unstable();
    rest.sort_unstable();
    (rest, held)
}

fn check_fraction(name: &str, f: f64) -> Result<()> {
    if (0.0..1.0).contains(&f) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in [0, 1), got {f}")))
    }
}

fn gap_units(run: &Run<'_>, full: &Dataset, gap_fraction: Option<f64>, validation_fraction: f64) -> Result<Vec<UnitData>> {
    check_fraction("validation_fraction", validation_fraction)?;
    let splits = match gap_fraction {
        Some(f) => make_gap_splits_with_fraction(full, f)?,
        None => make_gap_splits(full)?,
    };
    Ok(splits
        .into_iter()
        .enumerate()
        .map(|(k, s)| {
            let dir = format!("split_{k}");
            let (train, val) = split_off(run, &dir, s.train, validation_fraction);
            UnitData {
                feature_index: Some(s.feature_index),
                train: full.subset(&train),
                validation: (!val.is_empty()).then(|| full.subset(&val)),
                test: Some(full.subset(&s.test)),
                ood: None,
                dir,
            }
        })
        .collect())
}

fn random_split(run: &Run<'_>, full: &Dataset, validation_fraction: f64, test_fraction: f64) -> Result<UnitData> {
    check_fraction("validation_fraction", validation_fraction)?;
    check_fraction("test_fraction", test_fraction)?;
    let (rest, test) = split_off(run, ".", (0..full.len()).collect(), test_fraction);
    let (train, val) = split_off(run, "./validation", rest, validation_fraction);
    Ok(UnitData {
        dir: ".".into(),
        feature_index: None,
        train: full.subset(&train),
        validation: (!val.is_empty()).then(|| full.subset(&val)),
        test: (!test.is_empty()).then(|| full.subset(&test)),
        ood: None,
    })
}

fn build_model(cfg: &ExperimentConfig, meta: &DataMeta, seed: u64) -> Result<ProbModel> {
    let act = cfg.model.activation;
    let mut sizes = vec![meta.input_dim];
    sizes.extend(&cfg.model.hidden);
    match meta.kind {
        TaskKind::Classification => {
            sizes.push(meta.n_classes.unwrap_or(2));
            Ok(ProbModel::classifier(Mlp::new(&sizes, act, seed)?))
        }
        TaskKind::Regression => {
            sizes.push(1);
            let noise = match &cfg.model.noise {
                NoiseSpec::Fixed { std } => Noise::Fixed { std: *std },
                NoiseSpec::Homoscedastic { init_log_std } => Noise::Homoscedastic { log_std: *init_log_std },
                NoiseSpec::Heteroscedastic { hidden } => {
                    let mut s = vec![meta.input_dim];
                    s.extend(hidden);
                    s.push(1);
                    Noise::Heteroscedastic {
                        net: Mlp::new(&s, Activation::Tanh, seed.wrapping_add(1))?,
                    }
                }
            };
            ProbModel::regressor(Mlp::new(&sizes, act, seed)?, noise)
        }
    }
}

fn param_mask(model: &ProbModel, spec: &MaskSpec) -> Result<Vec<bool>> {
    match spec {
        MaskSpec::Primary => Ok(model.primary_mask()),
        MaskSpec::All => Ok(vec![true; model.n_params()]),
        MaskSpec::Layers { layers } => {
            let net = model.primary();
            let n_layers = net.layer_sizes().len() - 1;
            let mut mask = vec![false; model.n_params()];
            for &l in layers {
                if l >= n_layers {
                    return Err(Error::Config(format!("mask layer {l} out of range; the network has {n_layers} layers")));
                }
                for i in net.layer_range(l) {
                    mask[i] = true;
                }
            }
            Ok(mask)
        }
    }
}

fn write_trace(path: &Path, stamp: &Stamp, name: &str, trace: &[f64]) -> Result<()> {
    let rows: Vec<String> = trace.iter().enumerate().map(|(i, v)| format!("{i},{v:?}")).collect();
    write_text(path, stamp, &format!("step,{name}"), &rows)
}

fn train_unit(run: &Run<'_>, meta: &DataMeta, unit: &UnitMeta) -> Result<()> {
    let cfg = run.cfg;
    let inf = &cfg.inference;
    let dir = run.dir(unit);
    let train = run.read_dataset(meta, &dir.join(art::TRAIN))?;
    let model = build_model(cfg, meta, run.seed(&unit.dir, "init"))?;
    let map_cfg = OptimizerConfig {
        seed: run.seed(&unit.dir, "map"),
        ..inf.map.clone()
    };
    let map = train_map(&model, &train, inf.prior_std, &map_cfg)?;
    if let Some(step) = map.diverged_at {
        log::warn!("MAP training diverged at step {step}; keeping the last finite parameters");
    }
    write_trace(&dir.join(art::TRAIN_TRACE), &run.stamp, "map_objective", &map.trace)?;
    let mask = param_mask(&map.model, &cfg.dap.mask)?;
    let mut post = match inf.method {
        InferenceMethod::Map => GaussianPosterior::point_mass(map.model.params(), inf.prior_std, mask.clone(), cfg.seed)?,
        InferenceMethod::Advi => {
            let vi_cfg = OptimizerConfig {
                seed: run.seed(&unit.dir, "advi"),
                ..inf.vi.clone()
            };
            let out = train_advi(&map.model, &train, inf.prior_std, &vi_cfg, None)?;
            write_trace(&dir.join("elbo_trace.csv"), &run.stamp, "elbo", &out.elbo_trace)?;
            out.posterior
        }
        InferenceMethod::Laplace => fit_laplace(&map.model, &train, inf.prior_std, inf.curvature)?,
    };
    post.mask = mask;
    post.validate()?;
    let fitted = map.model.with_params(&post.mean)?;
    write_json(&dir.join(art::MODEL), &run.stamp, &fitted)?;
    write_json(&dir.join(art::POSTERIOR), &run.stamp, &post)
}

/// A trained unit rebuilt from its artifacts: the same samples, distance
/// model and reweighter every stage uses.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub model: ProbModel,
    pub samples: PosteriorSamples,
    pub dm: DistanceModel,
    pub rw: Reweighter,
    pub train: Dataset,
}

impl Fitted {
    /// Loads unit `index` (0 for single-unit tasks, the split number for gap
    /// tasks) after `train` has run.
    pub fn load(cfg: &ExperimentConfig, index: usize) -> Result<Self> {
        let run = Run::new(cfg);
        let meta = run.meta()?;
        let unit = meta
            .units
            .get(index)
            .ok_or_else(|| Error::Input(format!("unit {index} out of range for {} units", meta.units.len())))?;
        load_fitted(&run, &meta, unit)
    }

    /// DAP predictions at calibration parameter `phi`.
    pub fn predict(&self, inputs: ArrayView2<'_, f64>, phi: f64) -> Result<Vec<PointPrediction>> {
        let out = SampleOutputs::compute(&self.model, &self.samples, inputs)?;
        let pre = self.dm.pre_distance(inputs)?;
        predict_batch(&out, &self.rw, &pre, scale(phi))
    }

    /// Equally weighted Bayesian model average.
    pub fn uncalibrated(&self, inputs: ArrayView2<'_, f64>) -> Result<Vec<PredictiveSummary>> {
        let out = SampleOutputs::compute(&self.model, &self.samples, inputs)?;
        (0..inputs.nrows()).map(|j| bayesian_model_average(&out, j)).collect()
    }
}

fn load_fitted(run: &Run<'_>, meta: &DataMeta, unit: &UnitMeta) -> Result<Fitted> {
    let cfg = run.cfg;
    let dir = run.dir(unit);
    let model: ProbModel = read_json(&dir.join(art::MODEL), &run.stamp)?;
    let post: GaussianPosterior = read_json(&dir.join(art::POSTERIOR), &run.stamp)?;
    post.validate()?;
    let samples = sample_posterior(&post, cfg.inference.n_samples, run.seed(&unit.dir, "samples"))?;
    let train = run.read_dataset(meta, &dir.join(art::TRAIN))?;
    let projector = match cfg.distance.projector {
        ProjectorKind::Features => Projector::Features {
            net: model.primary().clone(),
        },
        ProjectorKind::Identity => Projector::Identity,
    };
    let opts = DistanceOptions {
        subsample_ref: cfg.distance.subsample_ref,
        seed: run.seed(&unit.dir, "distance"),
        standardize: cfg.distance.standardize,
    };
    let dm = DistanceModel::new(projector, train.inputs().view(), cfg.inference.prior_std, &opts)?;
    let rw = Reweighter::new(&samples, &post, cfg.dap.ratio_mode, cfg.dap.positivity)?;
    Ok(Fitted {
        model,
        samples,
        dm,
        rw,
        train,
    })
}

fn calibration_problem(run: &Run<'_>, meta: &DataMeta, unit: &UnitMeta, f: &Fitted) -> Result<CalibrationProblem> {
    let cc = &run.cfg.calibration.config;
    let dir = run.dir(unit);
    let inputs = match cc.selection {
        Selection::ExplicitOodInputs => read_inputs(&dir.join(art::CALIB_INPUTS))?,
        ref s => {
            let path = dir.join(art::VALIDATION);
            if !path.exists() {
                return Err(Error::EmptyCalibration(format!("unit {} has no validation set to select from", unit.dir)));
            }
            select_calibration_inputs(&f.model, &f.samples, &run.read_dataset(meta, &path)?, s)?
        }
    };
    let train_out = match meta.kind {
        TaskKind::Regression => Some(SampleOutputs::compute(&f.model, &f.samples, f.train.inputs().view())?),
        TaskKind::Classification => None,
    };
    let target = resolve_target(&cc.target, &f.model, train_out.as_ref())?;
    CalibrationProblem::new(&f.model, &f.samples, f.rw.clone(), &f.dm, inputs.view(), target)
}

fn calibrate_unit(run: &Run<'_>, meta: &DataMeta, unit: &UnitMeta) -> Result<()> {
    let f = load_fitted(run, meta, unit)?;
    let problem = calibration_problem(run, meta, unit, &f)?;
    let res = optimize_phi(&problem, &run.cfg.calibration.config)?;
    log::info!("phi* = {} (loss {}, interior {})", res.phi_star, res.loss_star, res.is_interior());
    let dir = run.dir(unit);
    write_json(&dir.join(art::CALIBRATION), &run.stamp, &res)?;
    res.write_curve_csv(&dir.join(art::LOSS_CURVE), Some(&run.stamp.line()))
}

/// Inputs and, if labelled, targets.
type LoadedSet = (Array2<f64>, Option<Vec<f64>>);

/// One evaluation set, if its file exists.
fn load_set(run: &Run<'_>, meta: &DataMeta, dir: &Path, set: &str) -> Result<Option<LoadedSet>> {
    let file = match set {
        "train" => art::TRAIN,
        "test" => art::TEST,
        _ => art::OOD,
    };
    let path = dir.join(file);
    if !path.exists() {
        return Ok(None);
    }
    if set == "ood" {
        return Ok(Some((read_inputs(&path)?, None)));
    }
    let d = run.read_dataset(meta, &path)?;
    let y = (0..d.len()).map(|i| d.targets().value(i)).collect();
    Ok(Some((d.inputs().clone(), Some(y))))
}

const SETS: [&str; 3] = ["train", "test", "ood"];

fn predict_unit(run: &Run<'_>, meta: &DataMeta, unit: &UnitMeta) -> Result<()> {
    let f = load_fitted(run, meta, unit)?;
    let dir = run.dir(unit);
    let cal: CalibrationResult = read_json(&dir.join(art::CALIBRATION), &run.stamp)?;
    let g = scale(cal.phi_star);
    for set in SETS {
        let Some((x, y)) = load_set(run, meta, &dir, set)? else { continue };
        let out = SampleOutputs::compute(&f.model, &f.samples, x.view())?;
        let pre = f.dm.pre_distance(x.view())?;
        for calibrated in [false, true] {
            let preds = predict_batch(&out, &f.rw, &pre, if calibrated { g } else { 0.0 })?;
            let rows = preds
                .iter()
                .enumerate()
                .map(|(j, p)| {
                    let (t, lp) = match &y {
                        Some(y) => (y[j], out.log_predictive_density(j, &p.weights.normalized(), y[j])?),
                        None => (f64::NAN, f64::NAN),
                    };
                    Ok(PredictionRow::new(p, t, lp))
                })
                .collect::<Result<Vec<_>>>()?;
            write_predictions(&dir.join(art::predictions_file(set, calibrated)), &run.stamp, &rows)?;
        }
    }
    let outs = &run.cfg.outputs;
    match meta.input_dim {
        2 => {
            let grid = lattice_2d(f.train.inputs().view(), outs.grid_per_axis, outs.grid_inflate);
            let (before, after) = before_after(&f, &grid, g)?;
            let rows: Vec<String> = (0..grid.nrows())
                .map(|j| {
                    let (b, a) = (&before[j].summary, &after[j].summary);
                    format!(
                        "{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
                        grid[[j, 0]],
                        grid[[j, 1]],
                        after[j].d0,
                        after[j].d_phi,
                        b.epistemic_var(),
                        a.epistemic_var(),
                        b.decomposition().1,
                        a.decomposition().1
                    )
                })
                .collect();
            write_text(
                &dir.join(art::GRID),
                &run.stamp,
                "x0,x1,d0,d_phi,epistemic_var_before,epistemic_var_after,epistemic_before,epistemic_after",
                &rows,
            )?;
        }
        1 if meta.kind == TaskKind::Regression => {
            let xs = linspace(outs.band_range[0], outs.band_range[1], outs.band_points);
            let grid = Array2::from_shape_vec((xs.len(), 1), xs).expect("column");
            let (before, after) = before_after(&f, &grid, g)?;
            let band = |p: &PointPrediction| {
                let m = p.summary.mean()[0];
                let v = p.summary.epistemic_var();
                let h = 1.96 * v.sqrt();
                format!("{m:?},{v:?},{:?},{:?}", m - h, m + h)
            };
            let rows: Vec<String> = (0..grid.nrows())
                .map(|j| format!("{:?},{:?},{:?},{},{}", grid[[j, 0]], after[j].d0, after[j].d_phi, band(&before[j]), band(&after[j])))
                .collect();
            write_text(
                &dir.join(art::BAND),
                &run.stamp,
                "x,d0,d_phi,mean_before,epistemic_var_before,lower_before,upper_before,mean_after,epistemic_var_after,lower_after,upper_after",
                &rows,
            )?;
        }
        _ => {}
    }
    Ok(())
}

fn before_after(f: &Fitted, x: &Array2<f64>, g: f64) -> Result<(Vec<PointPrediction>, Vec<PointPrediction>)> {
    let out = SampleOutputs::compute(&f.model, &f.samples, x.view())?;
    let pre = f.dm.pre_distance(x.view())?;
    Ok((predict_batch(&out, &f.rw, &pre, 0.0)?, predict_batch(&out, &f.rw, &pre, g)?))
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 { f64::NAN } else { s / n as f64 }
}

fn unit_metrics(kind: TaskKind, score_type: ScoreType, test: Option<&[PredictionRow]>, ood: Option<&[PredictionRow]>) -> Result<Metrics> {
    let accuracy = match (kind, test) {
        (TaskKind::Classification, Some(t)) if !t.is_empty() => {
            Some(t.iter().filter(|r| argmax(&r.summary.mean()) as f64 == r.target).count() as f64 / t.len() as f64)
        }
        _ => None,
    };
    let nll = test.filter(|t| !t.is_empty()).map(|t| -mean(t.iter().map(|r| r.log_pred)));
    let score_type = match kind {
        TaskKind::Classification => score_type,
        TaskKind::Regression => ScoreType::EpistemicVar,
    };
    let (auroc_v, aucpr_v, st) = match (test, ood) {
        (Some(t), Some(o)) if !t.is_empty() && !o.is_empty() => {
            let mut scores: Vec<f64> = t.iter().map(|r| score_type.score(&r.summary)).collect();
            scores.extend(o.iter().map(|r| score_type.score(&r.summary)));
            let labels = (0..t.len()).map(|_| false).chain((0..o.len()).map(|_| true)).collect();
            let sl = ScoredLabels::new(scores, labels, score_type)?;
            (Some(auroc(&sl)?), Some(aucpr(&sl)?), Some(score_type))
        }
        _ => (None, None, None),
    };
    Ok(Metrics {
        accuracy,
        nll,
        auroc: auroc_v,
        aucpr: aucpr_v,
        score_type: st,
        n_in: test.map_or(0, <[_]>::len),
        n_out: ood.map_or(0, <[_]>::len),
    })
}

fn evaluate_unit(run: &Run<'_>, meta: &DataMeta, unit: &UnitMeta) -> Result<UnitReport> {
    let dir = run.dir(unit);
    let cal: CalibrationResult = read_json(&dir.join(art::CALIBRATION), &run.stamp)?;
    let mut by_set: BTreeMap<(&'static str, bool), Vec<PredictionRow>> = BTreeMap::new();
    for set in SETS {
        for calibrated in [false, true] {
            let path = dir.join(art::predictions_file(set, calibrated));
            if path.exists() {
                by_set.insert((set, calibrated), read_predictions(&path)?);
            }
        }
    }
    let get = |set: &'static str, c: bool| by_set.get(&(set, c)).map(Vec::as_slice);
    let st = run.cfg.outputs.score_type;
    let mut mean_epistemic_var = BTreeMap::new();
    let mut mean_ess = BTreeMap::new();
    for set in SETS {
        if let (Some(b), Some(a)) = (get(set, false), get(set, true)) {
            let ev = |rows: &[PredictionRow]| mean(rows.iter().map(|r| r.summary.epistemic_var()));
            mean_epistemic_var.insert(set.to_string(), [ev(b), ev(a)]);
            mean_ess.insert(set.to_string(), mean(a.iter().map(|r| r.summary.ess())));
        }
    }
    let report = UnitReport {
        phi_star: cal.phi_star,
        phi_interior: cal.is_interior(),
        uncalibrated: unit_metrics(meta.kind, st, get("test", false), get("ood", false))?,
        dap: unit_metrics(meta.kind, st, get("test", true), get("ood", true))?,
        mean_epistemic_var,
        mean_ess,
    };
    write_json(&dir.join(art::METRICS), &run.stamp, &report)?;
    Ok(report)
}

fn evaluate(run: &Run<'_>) -> Result<()> {
    let meta = run.meta()?;
    let mut splits = Vec::new();
    for unit in &meta.units {
        let r = evaluate_unit(run, &meta, unit)?;
        splits.push(GapSplitSummary {
            dir: unit.dir.clone(),
            feature_index: unit.feature_index,
            phi_star: r.phi_star,
            test_ll_uncalibrated: r.uncalibrated.nll.map_or(f64::NAN, |v| -v),
            test_ll_dap: r.dap.nll.map_or(f64::NAN, |v| -v),
        });
    }
    if meta.task.is_gap() {
        write_json(&run.root.join(art::METRICS), &run.stamp, &GapSummary { splits })?;
    }
    Ok(())
}

fn sweep_unit(run: &Run<'_>, meta: &DataMeta, unit: &UnitMeta) -> Result<()> {
    use rayon::prelude::*;
    let f = load_fitted(run, meta, unit)?;
    let problem = calibration_problem(run, meta, unit, &f)?;
    let dir = run.dir(unit);
    let mut sets = Vec::new();
    for set in ["test", "ood"] {
        if let Some((x, _)) = load_set(run, meta, &dir, set)? {
            let out = SampleOutputs::compute(&f.model, &f.samples, x.view())?;
            let pre = f.dm.pre_distance(x.view())?;
            sets.push((out, pre));
        }
    }
    let grid = run.cfg.calibration.config.grid();
    let rows = grid
        .par_iter()
        .map(|&phi| {
            let loss = problem.loss(phi).unwrap_or(f64::NAN);
            let mut s = format!("{phi:?},{loss:?}");
            for (out, pre) in &sets {
                let p = predict_batch(out, &f.rw, pre, scale(phi))?;
                let ev = mean(p.iter().map(|q| q.summary.epistemic_var()));
                let ess = mean(p.iter().map(|q| q.summary.ess()));
                s.push_str(&format!(",{ev:?},{ess:?}"));
            }
            Ok(s)
        })
        .collect::<Result<Vec<String>>>()?;
    let mut header = String::from("phi,loss");
    for set in ["test", "ood"] {
        if dir.join(if set == "test" { art::TEST } else { art::OOD }).exists() {
            header.push_str(&format!(",mean_epistemic_var_{set},mean_ess_{set}"));
        }
    }
    write_text(&dir.join(art::SWEEP), &run.stamp, &header, &rows)
}
