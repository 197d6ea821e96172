//! Parametrized distance to the training set, `d_φ(x*) = e^φ · d₀(x*)`.
//!
//! The pre-distance `d₀` is the Euclidean distance from the projected query to
//! its nearest projected training input. Projection is either the identity or
//! the last hidden layer of a trained network. Because `d₀` does not depend on
//! `φ`, it is computed once per input set and cached; every `φ` after that is
//! a single multiplication.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure_dim, Error, Result};
use crate::nnet::Mlp;

/// Maps inputs into the space where distances are measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Projector {
    Identity,
    /// Hidden features of a trained network.
    Features { net: Mlp },
}

impl Projector {
    pub fn project(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        match self {
            Projector::Identity => Ok(inputs.to_owned()),
            Projector::Features { net } => net.features(inputs),
        }
    }

    fn hash_into(&self, h: &mut Sha256) {
        match self {
            Projector::Identity => h.update(b"identity"),
            Projector::Features { net } => {
                h.update(b"features");
                for s in net.layer_sizes() {
                    h.update((*s as u64).to_le_bytes());
                }
                h.update(format!("{:?}", net.activation()).as_bytes());
                for p in net.params() {
                    h.update(p.to_bits().to_le_bytes());
                }
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistanceOptions {
    /// Keep at most this many training features, chosen by seeded subsampling.
    /// Distances then only approximate the exact nearest neighbour.
    pub subsample_ref: Option<usize>,
    pub seed: u64,
    /// Standardize each feature dimension with training-feature mean and std.
    pub standardize: bool,
}

/// `g(φ) = e^φ`.
pub fn scale(phi: f64) -> f64 {
    phi.exp()
}

/// Pre-distances of one input batch, tied to the projector that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreDistanceCache {
    pub projector_fingerprint: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DistanceModel {
    projector: Projector,
    train_features: Array2<f64>,
    standardization: Option<(Array1<f64>, Array1<f64>)>,
    fingerprint: String,
    pub phi: f64,
    pub prior_std: f64,
}

impl DistanceModel {
    pub fn new(projector: Projector, train_inputs: ArrayView2<'_, f64>, prior_std: f64, opts: &DistanceOptions) -> Result<Self> {
        if train_inputs.nrows() == 0 {
            return Err(Error::Input("distance model needs at least one training input".into()));
        }
        if !(prior_std > 0.0) {
            return Err(Error::Config(format!("prior std must be positive, got {prior_std}")));
        }
        let mut features = projector.project(train_inputs)?;
        if let Some(k) = opts.subsample_ref {
            if k == 0 {
                return Err(Error::Config("subsample_ref must be positive".into()));
            }
            if features.nrows() > k {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                let mut idx = sample(&mut rng, features.nrows(), k).into_vec();
                idx.sort_unstable();
                features = features.select(Axis(0), &idx);
            }
        }
        let standardization = opts.standardize.then(|| {
            let mean = features.mean_axis(Axis(0)).expect("non-empty");
            let std = features.std_axis(Axis(0), 0.0).mapv(|s| if s > 0.0 { s } else { 1.0 });
            (mean, std)
        });
        if let Some((m, s)) = &standardization {
            features = (features - m) / s;
        }
        let mut h = Sha256::new();
        projector.hash_into(&mut h);
        h.update([opts.standardize as u8]);
        h.update(opts.subsample_ref.map_or(u64::MAX, |k| k as u64).to_le_bytes());
        h.update(opts.seed.to_le_bytes());
        let fingerprint = hex::encode(h.finalize());
        Ok(DistanceModel {
            projector,
            train_features: features,
            standardization,
            fingerprint,
            phi: 0.0,
            prior_std,
        })
    }

    pub fn train_features(&self) -> &Array2<f64> {
        &self.train_features
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Projected (and, if enabled, standardized) features of `inputs`.
    pub fn project(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut f = self.projector.project(inputs)?;
        ensure_dim("projected feature dim", self.train_features.ncols(), f.ncols())?;
        if let Some((m, s)) = &self.standardization {
            f = (f - m) / s;
        }
        Ok(f)
    }

    /// `d₀(x*) = min_i ‖P(x*) − P(x_i)‖₂` for each row of `inputs`.
    pub fn pre_distance(&self, inputs: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let q = self.project(inputs)?;
        Ok(nearest_feature_distances(q.view(), self.train_features.view()))
    }

    pub fn cache(&self, inputs: ArrayView2<'_, f64>) -> Result<PreDistanceCache> {
        Ok(PreDistanceCache {
            projector_fingerprint: self.fingerprint.clone(),
            values: self.pre_distance(inputs)?,
        })
    }

    fn check_cache(&self, cache: &PreDistanceCache) -> Result<()> {
        if cache.projector_fingerprint != self.fingerprint {
            return Err(Error::Input(format!(
                "pre-distance cache was built with projector {} but the model uses {}",
                cache.projector_fingerprint, self.fingerprint
            )));
        }
        Ok(())
    }

    /// `d_φ = e^φ·d₀` for every cached pre-distance.
    pub fn scaled_distance(&self, cache: &PreDistanceCache) -> Result<Vec<f64>> {
        self.check_cache(cache)?;
        let g = scale(self.phi);
        Ok(cache.values.iter().map(|d0| g * d0).collect())
    }

    /// Standard deviation `σ₀ + d` of the distance-aware prior at distance `d`.
    pub fn prior_std_at(&self, d: f64) -> f64 {
        self.prior_std + d
    }
}

/// Nearest-neighbour Euclidean distances, parallel over queries. Squared
/// distances are accumulated in order, then one square root is taken.
pub fn nearest_feature_distances(queries: ArrayView2<'_, f64>, reference: ArrayView2<'_, f64>) -> Vec<f64> {
    (0..queries.nrows())
        .into_par_iter()
        .map(|j| {
            let q = queries.row(j);
            reference
                .outer_iter()
                .map(|r| {
                    q.iter()
                        .zip(r.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::Activation;
    use ndarray::array;

    fn identity(train: Array2<f64>) -> DistanceModel {
        DistanceModel::new(Projector::Identity, train.view(), 1.0, &DistanceOptions::default()).unwrap()
    }

    #[test]
    fn one_dimensional_min() {
        let dm = identity(array![[0.0], [10.0]]);
        assert_eq!(dm.pre_distance(array![[3.0]].view()).unwrap(), vec![3.0]);
    }

    #[test]
    fn training_inputs_have_zero_distance() {
        let net = Mlp::new(&[3, 6, 2], Activation::Tanh, 5).unwrap();
        let train = Array2::from_shape_fn((20, 3), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 3.0);
        let dm = DistanceModel::new(Projector::Features { net }, train.view(), 1.0, &DistanceOptions::default()).unwrap();
        assert!(dm.pre_distance(train.view()).unwrap().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn scaling() {
        let mut dm = identity(array![[0.0]]);
        let cache = dm.cache(array![[1.5], [2.0]].view()).unwrap();
        assert_eq!(dm.scaled_distance(&cache).unwrap(), vec![1.5, 2.0]);
        dm.phi = 2f64.ln();
        assert!((dm.scaled_distance(&cache).unwrap()[0] - 3.0).abs() < 1e-15);
        dm.phi = -700.0;
        assert!(dm.scaled_distance(&cache).unwrap().iter().all(|&d| d < 1e-300));
    }

    #[test]
    fn prior_std() {
        let dm = identity(array![[0.0]]);
        assert_eq!(dm.prior_std_at(0.0), 1.0);
        assert_eq!(dm.prior_std_at(2.0), 3.0);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let a = DistanceModel::new(
            Projector::Features { net: Mlp::new(&[1, 3, 1], Activation::Tanh, 1).unwrap() },
            array![[0.0], [1.0]].view(),
            1.0,
            &DistanceOptions::default(),
        )
        .unwrap();
        let b = DistanceModel::new(
            Projector::Features { net: Mlp::new(&[1, 3, 1], Activation::Tanh, 2).unwrap() },
            array![[0.0], [1.0]].view(),
            1.0,
            &DistanceOptions::default(),
        )
        .unwrap();
        let cache = a.cache(array![[0.5]].view()).unwrap();
        assert!(b.scaled_distance(&cache).is_err());
        assert!(a.scaled_distance(&cache).is_ok());
    }

    #[test]
    fn projector_dim_mismatch() {
        let dm = identity(array![[0.0, 1.0]]);
        assert!(matches!(dm.pre_distance(array![[1.0]].view()), Err(Error::Dimension { .. })));
    }

    #[test]
    fn subsampling_keeps_k_rows() {
        let train = Array2::from_shape_fn((100, 2), |(i, j)| (i + j) as f64);
        let opts = DistanceOptions {
            subsample_ref: Some(10),
            seed: 3,
            standardize: false,
        };
        let dm = DistanceModel::new(Projector::Identity, train.view(), 1.0, &opts).unwrap();
        assert_eq!(dm.train_features().nrows(), 10);
    }

    #[test]
    fn standardization_rescales_dimensions() {
        let train = array![[0.0, 0.0], [2.0, 200.0]];
        let opts = DistanceOptions {
            standardize: true,
            ..Default::default()
        };
        let dm = DistanceModel::new(Projector::Identity, train.view(), 1.0, &opts).unwrap();
        let d = dm.pre_distance(array![[1.0, 0.0], [0.0, 100.0]].view()).unwrap();
        assert!((d[0] - d[1]).abs() < 1e-12);
    }
}
