//! Small feed-forward networks with exact reverse-mode gradients.
//!
//! The same networks serve as predictive models and, truncated at their last
//! hidden layer, as feature projectors for distance computations.

mod mlp;
mod model;

pub use mlp::{param_count, Activation, Loss, Mlp};
pub use model::{BatchOutput, Curvature, Noise, ProbModel};
