//! Training-data posteriors: MAP point estimates, mean-field ADVI and
//! diagonal Laplace approximations, plus seeded posterior sampling.
//!
//! Nothing here depends on distances or on `φ`: the training posterior is the
//! same whatever prior widening is applied at prediction time.

mod laplace;
mod optim;
mod posterior;
mod train;

pub use laplace::fit_laplace;
pub use optim::{Algo, OptimizerConfig};
pub use posterior::{sample_posterior, GaussianPosterior, PositivityMode, PosteriorSamples, PosteriorSource, CLAMP_EPS};
pub use train::{train_advi, train_map, AdviOutcome, MapOutcome};
