//! Seeded synthetic data generators.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// Two interleaving half circles. Row `i` belongs to class `i % 2`; arc
/// positions are evenly spaced along each half circle, then perturbed by
/// isotropic Gaussian noise of standard deviation `noise`.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Config(format!("two moons needs n >= 2, got {n}")));
    }
    if !(noise >= 0.0) {
        return Err(Error::Config(format!("noise must be >= 0, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = [n.div_ceil(2), n / 2];
    let mut next = [0usize; 2];
    let mut inputs = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let k = next[c];
        next[c] += 1;
        let t = if counts[c] > 1 { PI * k as f64 / (counts[c] - 1) as f64 } else { 0.0 };
        let (x, y) = if c == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
        let ex: f64 = rng.sample(StandardNormal);
        let ey: f64 = rng.sample(StandardNormal);
        inputs[[i, 0]] = x + noise * ex;
        inputs[[i, 1]] = y + noise * ey;
        labels.push(c);
    }
    Dataset::classification(inputs, labels, 2)
}

/// Observation-noise standard deviation as a function of the input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseFn {
    Constant { std: f64 },
    /// `intercept + slope·|x|`
    AbsLinear { intercept: f64, slope: f64 },
}

impl NoiseFn {
    pub fn std_at(&self, x: f64) -> f64 {
        match *self {
            NoiseFn::Constant { std } => std,
            NoiseFn::AbsLinear { intercept, slope } => intercept + slope * x.abs(),
        }
    }
}

/// One-dimensional regression with inputs drawn from a mixture of Gaussians
/// at `centers` and targets `sin(x)` plus noise.
pub fn gen_sinusoid_clusters(
    n_per_cluster: usize,
    centers: &[f64],
    cluster_std: f64,
    noise: NoiseFn,
    seed: u64,
) -> Result<Dataset> {
    if centers.is_empty() {
        return Err(Error::Config("sinusoid generator needs at least one center".into()));
    }
    if !(cluster_std >= 0.0) {
        return Err(Error::Config(format!("cluster_std must be >= 0, got {cluster_std}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_per_cluster * centers.len();
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for &c in centers {
        for _ in 0..n_per_cluster {
            let e: f64 = rng.sample(StandardNormal);
            let x = c + cluster_std * e;
            let e: f64 = rng.sample(StandardNormal);
            xs.push(x);
            ys.push(x.sin() + noise.std_at(x) * e);
        }
    }
    let inputs = Array2::from_shape_vec((n, 1), xs).expect("shape");
    Dataset::regression(inputs, ys)
}

/// Isotropic Gaussian clusters, one class per center.
pub fn gen_gaussian_clusters(centers: &[Vec<f64>], std: f64, per_cluster: usize, seed: u64) -> Result<Dataset> {
    let inputs = gaussian_blobs(centers, std, per_cluster, seed)?;
    let labels = (0..centers.len()).flat_map(|c| std::iter::repeat_n(c, per_cluster)).collect();
    Dataset::classification(inputs, labels, centers.len().max(2))
}

/// Regression data for gap-split experiments: standard normal inputs and a
/// target that is additive in smooth per-feature terms with a bump at the
/// middle of every feature, so held-out middle regions are hard to
/// interpolate.
pub fn gen_gap_regression(n: usize, dim: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 3 || dim == 0 {
        return Err(Error::Config(format!("gap regression needs n >= 3 and dim >= 1, got {n}, {dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = Array2::from_shape_simple_fn((n, dim), || rng.sample::<f64, _>(StandardNormal));
    let targets = inputs
        .outer_iter()
        .map(|row| {
            let f: f64 = row
                .iter()
                .enumerate()
                .map(|(j, &x)| {
                    let w = 1.0 + 0.25 * j as f64;
                    0.5 * w * x + 2.0 * (-2.0 * x * x).exp()
                })
                .sum();
            let e: f64 = rng.sample(StandardNormal);
            f + noise * e
        })
        .collect();
    Dataset::regression(inputs, targets)
}

/// `per_center` Gaussian samples around each center.
pub fn gaussian_blobs(centers: &[Vec<f64>], std: f64, per_center: usize, seed: u64) -> Result<Array2<f64>> {
    let Some(dim) = centers.first().map(Vec::len) else {
        return Err(Error::Config("need at least one center".into()));
    };
    if centers.iter().any(|c| c.len() != dim) {
        return Err(Error::Config("centers have inconsistent dimensions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Array2::zeros((centers.len() * per_center, dim));
    for (k, c) in centers.iter().enumerate() {
        for s in 0..per_center {
            let mut row = out.row_mut(k * per_center + s);
            for (j, v) in row.iter_mut().enumerate() {
                let e: f64 = rng.sample(StandardNormal);
                *v = c[j] + std * e;
            }
        }
    }
    Ok(out)
}

/// Settings for [`shell_centers`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShellConfig {
    pub n_centers: usize,
    /// Relative inflation of the data radius.
    pub margin: f64,
    pub std: f64,
    pub per_center: usize,
}

impl Default for ShellConfig {
    fn default() -> Self {
        ShellConfig {
            n_centers: 16,
            margin: 0.25,
            std: 0.1,
            per_center: 10,
        }
    }
}

/// Centers on a sphere around the training centroid, with radius equal to the
/// largest centroid distance inflated by `margin`. Two-dimensional data get
/// evenly spaced angles; higher dimensions get seeded random directions.
pub fn shell_centers(train: ArrayView2<'_, f64>, n_centers: usize, margin: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    if train.nrows() == 0 || n_centers == 0 {
        return Err(Error::Config("shell needs training inputs and at least one center".into()));
    }
    let centroid: Array1<f64> = train.mean_axis(Axis(0)).expect("non-empty");
    let radius = train
        .outer_iter()
        .map(|r| (&r - &centroid).mapv(|v| v * v).sum().sqrt())
        .fold(0.0, f64::max)
        * (1.0 + margin);
    let dim = train.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = (0..n_centers)
        .map(|k| {
            let dir: Vec<f64> = match dim {
                1 => vec![if k % 2 == 0 { 1.0 } else { -1.0 }],
                2 => {
                    let a = 2.0 * PI * k as f64 / n_centers as f64;
                    vec![a.cos(), a.sin()]
                }
                _ => {
                    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                    v.into_iter().map(|x| x / norm).collect()
                }
            };
            dir.iter().zip(centroid.iter()).map(|(d, c)| c + radius * d).collect()
        })
        .collect();
    Ok(centers)
}

/// Gaussian samples around [`shell_centers`].
pub fn shell_inputs(train: ArrayView2<'_, f64>, cfg: &ShellConfig, seed: u64) -> Result<Array2<f64>> {
    let centers = shell_centers(train, cfg.n_centers, cfg.margin, seed)?;
    gaussian_blobs(&centers, cfg.std, cfg.per_center, seed.wrapping_add(1))
}

/// `n` points evenly spaced on a circle.
pub fn ring(center: [f64; 2], radius: f64, n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, 2), |(i, j)| {
        let a = 2.0 * PI * i as f64 / n as f64;
        center[j] + radius * if j == 0 { a.cos() } else { a.sin() }
    })
}

/// Axis-aligned lattice of `per_axis × per_axis` points over the bounding box
/// of `x` inflated by `inflate` (relative) on every side. Rows vary fastest in
/// the second coordinate.
pub fn lattice_2d(x: ArrayView2<'_, f64>, per_axis: usize, inflate: f64) -> Array2<f64> {
    let lo: Vec<f64> = (0..2).map(|j| x.column(j).fold(f64::INFINITY, |a, &b| a.min(b))).collect();
    let hi: Vec<f64> = (0..2).map(|j| x.column(j).fold(f64::NEG_INFINITY, |a, &b| a.max(b))).collect();
    let axis = |j: usize, k: usize| {
        let pad = (hi[j] - lo[j]) * inflate;
        let (a, b) = (lo[j] - pad, hi[j] + pad);
        if per_axis == 1 { 0.5 * (a + b) } else { a + (b - a) * k as f64 / (per_axis - 1) as f64 }
    };
    Array2::from_shape_fn((per_axis * per_axis, 2), |(i, j)| {
        if j == 0 { axis(0, i / per_axis) } else { axis(1, i % per_axis) }
    })
}

/// Euclidean distance from each row of `queries` to its nearest row of `reference`.
pub fn nearest_distances(queries: ArrayView2<'_, f64>, reference: ArrayView2<'_, f64>) -> Vec<f64> {
    queries
        .outer_iter()
        .map(|q| {
            reference
                .outer_iter()
                .map(|r| q.iter().zip(r.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Targets;

    #[test]
    fn noiseless_moons_lie_on_arcs() {
        let ds = gen_two_moons(101, 0.0, 3).unwrap();
        let Targets::Classes { labels, .. } = ds.targets() else { panic!() };
        for (i, row) in ds.inputs().outer_iter().enumerate() {
            let (x, y) = (row[0], row[1]);
            if labels[i] == 0 {
                assert!((x * x + y * y - 1.0).abs() < 1e-12);
                assert!(y >= -1e-15);
            } else {
                assert!(((x - 1.0).powi(2) + (y - 0.5).powi(2) - 1.0).abs() < 1e-12);
                assert!(y <= 0.5 + 1e-15);
            }
        }
    }

    #[test]
    fn moons_are_balanced_and_seeded() {
        for n in [2, 3, 1000, 1001] {
            let ds = gen_two_moons(n, 0.07, 11).unwrap();
            let Targets::Classes { labels, .. } = ds.targets() else { panic!() };
            let n1 = labels.iter().filter(|&&c| c == 1).count();
            assert!((n - n1).abs_diff(n1) <= 1);
        }
        assert_eq!(gen_two_moons(50, 0.07, 1).unwrap(), gen_two_moons(50, 0.07, 1).unwrap());
        assert_ne!(gen_two_moons(50, 0.07, 1).unwrap(), gen_two_moons(50, 0.07, 2).unwrap());
    }

    #[test]
    fn zero_cluster_std_puts_inputs_on_centers() {
        let ds = gen_sinusoid_clusters(20, &[-5.0, 5.0], 0.0, NoiseFn::Constant { std: 0.1 }, 0).unwrap();
        for (i, x) in ds.inputs().column(0).iter().enumerate() {
            assert_eq!(*x, if i < 20 { -5.0 } else { 5.0 });
        }
    }

    #[test]
    fn sinusoid_is_seeded() {
        let a = gen_sinusoid_clusters(30, &[-5.0, 5.0], 1.0, NoiseFn::Constant { std: 0.1 }, 9).unwrap();
        let b = gen_sinusoid_clusters(30, &[-5.0, 5.0], 1.0, NoiseFn::Constant { std: 0.1 }, 9).unwrap();
        assert_eq!(a, b);
        assert!(gen_sinusoid_clusters(3, &[], 1.0, NoiseFn::Constant { std: 0.1 }, 9).is_err());
    }

    #[test]
    fn shell_lies_outside_data() {
        let ds = gen_two_moons(200, 0.0, 0).unwrap();
        let centers = shell_centers(ds.inputs().view(), 8, 0.2, 0).unwrap();
        let c = Array2::from_shape_vec((8, 2), centers.concat()).unwrap();
        let d = nearest_distances(c.view(), ds.inputs().view());
        assert!(d.iter().all(|&v| v > 0.1));
    }

    #[test]
    fn lattice_covers_inflated_box() {
        let x = ndarray::array![[0.0, 0.0], [2.0, 1.0]];
        let g = lattice_2d(x.view(), 3, 0.5);
        assert_eq!(g.nrows(), 9);
        assert_eq!(g.row(0).to_vec(), vec![-1.0, -0.5]);
        assert_eq!(g.row(8).to_vec(), vec![3.0, 1.5]);
        assert_eq!(g.row(1).to_vec(), vec![-1.0, 0.5]);
    }
}
