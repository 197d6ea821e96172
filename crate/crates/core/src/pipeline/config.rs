use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibrate::{CalibrationConfig, Selection, Target};
use crate::data::synth::{NoiseFn, ShellConfig};
use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::inference::{OptimizerConfig, PositivityMode};
use crate::metrics::ScoreType;
use crate::nnet::{Activation, Curvature};
use crate::weights::RatioMode;

/// One experiment, fully described by a single JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every stage derives its own seed from it.
    pub seed: u64,
    /// Worker threads for parallel sections (all cores when absent). Results
    /// do not depend on it.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub task: TaskSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub inference: InferenceSpec,
    #[serde(default)]
    pub distance: DistanceSpec,
    #[serde(default)]
    pub dap: DapSpec,
    #[serde(default)]
    pub calibration: CalibrationSpec,
    #[serde(default)]
    pub outputs: OutputSpec,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    /// Two interleaving half circles. OOD points lie on a circle `ood_gap`
    /// beyond the farthest training point from the centroid.
    TwoMoons {
        #[serde(default = "d_1000")]
        n: usize,
        #[serde(default = "d_007")]
        noise: f64,
        #[serde(default = "d_500")]
        n_test: usize,
        #[serde(default = "d_200")]
        n_ood: usize,
        #[serde(default = "d_2")]
        ood_gap: f64,
    },
    /// `sin(x)` plus noise, inputs from Gaussian clusters.
    Sinusoid {
        #[serde(default = "d_100")]
        n_per_cluster: usize,
        #[serde(default = "d_centers")]
        centers: Vec<f64>,
        #[serde(default = "d_1")]
        cluster_std: f64,
        #[serde(default = "d_noise")]
        noise: NoiseFn,
        #[serde(default = "d_25")]
        n_test_per_cluster: usize,
    },
    /// One class per center in `centers`; `ood_centers` clusters are held out
    /// entirely as OOD inputs.
    GaussianClusters {
        centers: Vec<Vec<f64>>,
        ood_centers: Vec<Vec<f64>>,
        #[serde(default = "d_05")]
        std: f64,
        #[serde(default = "d_200")]
        per_cluster: usize,
        #[serde(default = "d_100")]
        test_per_cluster: usize,
    },
    /// Synthetic regression with one middle-region split per feature.
    GapSynthetic {
        #[serde(default = "d_1000")]
        n: usize,
        #[serde(default = "d_4")]
        dim: usize,
        #[serde(default = "d_01")]
        noise: f64,
        #[serde(default)]
        gap_fraction: Option<f64>,
        #[serde(default = "d_01")]
        validation_fraction: f64,
    },
    /// A headered CSV with the target in the last column.
    Csv {
        path: PathBuf,
        task: TaskKind,
        #[serde(default)]
        n_classes: Option<usize>,
        /// Run one middle-region split per feature instead of a random split.
        #[serde(default)]
        gap: bool,
        #[serde(default)]
        gap_fraction: Option<f64>,
        #[serde(default = "d_01")]
        validation_fraction: f64,
        #[serde(default = "d_02")]
        test_fraction: f64,
    },
}

fn d_1000() -> usize {
    1000
}
fn d_500() -> usize {
    500
}
fn d_200() -> usize {
    200
}
fn d_100() -> usize {
    100
}
fn d_25() -> usize {
    25
}
fn d_4() -> usize {
    4
}
fn d_007() -> f64 {
    0.07
}
fn d_01() -> f64 {
    0.1
}
fn d_02() -> f64 {
    0.2
}
fn d_05() -> f64 {
    0.5
}
fn d_1() -> f64 {
    1.0
}
fn d_2() -> f64 {
    2.0
}
fn d_centers() -> Vec<f64> {
    vec![-5.0, 5.0]
}
fn d_noise() -> NoiseFn {
    NoiseFn::Constant { std: 0.1 }
}

impl TaskSpec {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskSpec::TwoMoons { .. } | TaskSpec::GaussianClusters { .. } => TaskKind::Classification,
            TaskSpec::Sinusoid { .. } | TaskSpec::GapSynthetic { .. } => TaskKind::Regression,
            TaskSpec::Csv { task, .. } => *task,
        }
    }

    pub fn is_gap(&self) -> bool {
        matches!(self, TaskSpec::GapSynthetic { .. } | TaskSpec::Csv { gap: true, .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    Fixed { std: f64 },
    Homoscedastic {
        #[serde(default)]
        init_log_std: f64,
    },
    /// An independent network for `log σ(x)`.
    Heteroscedastic { hidden: Vec<usize> },
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec::Homoscedastic { init_log_std: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Regression only.
    pub noise: NoiseSpec,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            hidden: vec![16, 16],
            activation: Activation::Tanh,
            noise: NoiseSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMethod {
    Map,
    #[default]
    Advi,
    Laplace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSpec {
    pub method: InferenceMethod,
    pub prior_std: f64,
    /// MAP training, also the starting point of ADVI and Laplace.
    pub map: OptimizerConfig,
    pub vi: OptimizerConfig,
    pub curvature: Curvature,
    /// Posterior samples used at prediction time.
    pub n_samples: usize,
}

impl Default for InferenceSpec {
    fn default() -> Self {
        InferenceSpec {
            method: InferenceMethod::Advi,
            prior_std: 1.0,
            map: OptimizerConfig {
                steps: 2000,
                ..Default::default()
            },
            vi: OptimizerConfig {
                steps: 3000,
                ..Default::default()
            },
            curvature: Curvature::GaussNewton,
            n_samples: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorKind {
    /// Last hidden layer of the posterior-mean (or MAP) network.
    #[default]
    Features,
    Identity,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistanceSpec {
    pub projector: ProjectorKind,
    pub subsample_ref: Option<usize>,
    pub standardize: bool,
}

/// Which parameters the distance-aware prior widens.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskSpec {
    /// Parameters of the classifier or of the regression mean network.
    #[default]
    Primary,
    All,
    /// Selected layers of the primary network, counted from the input.
    Layers { layers: Vec<usize> },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DapSpec {
    pub ratio_mode: RatioMode,
    pub positivity: PositivityMode,
    pub mask: MaskSpec,
}

/// Where calibration inputs come from when the selection rule asks for
/// explicit OOD inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OodGenerator {
    Shell(ShellConfig),
    Blobs {
        centers: Vec<Vec<f64>>,
        std: f64,
        per_center: usize,
    },
}

impl Default for OodGenerator {
    fn default() -> Self {
        OodGenerator::Shell(ShellConfig::default())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSpec {
    #[serde(flatten)]
    pub config: CalibrationConfig,
    pub generator: OodGenerator,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    /// Lattice resolution per axis for two-dimensional inputs.
    pub grid_per_axis: usize,
    /// Relative inflation of the training bounding box for the lattice.
    pub grid_inflate: f64,
    /// `[lo, hi]` and point count of the band CSV for one-dimensional inputs.
    pub band_range: [f64; 2],
    pub band_points: usize,
    /// OOD score for classification; regression always scores with the
    /// epistemic variance.
    pub score_type: ScoreType,
    /// Also write the loss over the calibration grid during `run`.
    pub sweep_phi: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            grid_per_axis: 100,
            grid_inflate: 0.5,
            band_range: [-12.0, 12.0],
            band_points: 241,
            score_type: ScoreType::OneMinusMaxProb,
            sweep_phi: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        if !(self.inference.prior_std > 0.0) {
            return Err(Error::Config("prior_std must be positive".into()));
        }
        if self.inference.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        self.inference.map.validate()?;
        self.inference.vi.validate()?;
        self.calibration.config.validate()?;
        let kind = self.task.kind();
        match (kind, &self.calibration.config.target) {
            (TaskKind::Classification, Target::ClassificationUniform) | (TaskKind::Regression, Target::RegressionQuantile { .. }) => {}
            _ => return Err(Error::Config("calibration target does not match the task".into())),
        }
        match (kind, &self.calibration.config.selection) {
            (TaskKind::Classification, Selection::WorstResidualFraction { .. }) => {
                return Err(Error::Config("worst_residual_fraction selection needs a regression task".into()))
            }
            (TaskKind::Regression, Selection::Misclassified) => {
                return Err(Error::Config("misclassified selection needs a classification task".into()))
            }
            _ => {}
        }
        if let TaskSpec::Csv { path, .. } = &self.task {
            if !path.exists() {
                return Err(Error::Config(format!("data file {} does not exist", path.display())));
            }
        }
        if let TaskSpec::GaussianClusters { centers, ood_centers, .. } = &self.task {
            let dim = centers.first().map_or(0, Vec::len);
            if centers.len() < 2 || dim == 0 || centers.iter().chain(ood_centers).any(|c| c.len() != dim) {
                return Err(Error::Config("gaussian_clusters needs at least two centers of equal dimension".into()));
            }
        }
        if self.model.hidden.is_empty() && self.distance.projector == ProjectorKind::Features {
            return Err(Error::Config("feature projector needs at least one hidden layer".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring `threads` and `output_dir`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("threads");
            m.remove("output_dir");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    /// Seed of a named stage, derived from the root seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(stage.as_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }
}
