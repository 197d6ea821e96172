use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `h`.
    fn derivative(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Per-batch training loss for a single network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Loss {
    /// Softmax cross-entropy; targets are class indices.
    CrossEntropy,
    /// Gaussian negative log-likelihood of a single output with fixed noise std.
    GaussianNll { std: f64 },
    /// Squared error of a single output.
    Mse,
}

/// A dense feed-forward network: hidden layers apply the activation, the
/// output layer is affine.
///
/// Parameters live in one flat vector. Each layer contributes its weight
/// matrix (shape `out × in`, row-major) followed by its bias, layers in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// Number of parameters of a network with the given layer sizes.
pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

struct Trace {
    /// Post-activation values per layer; `acts[0]` is the input.
    acts: Vec<Array2<f64>>,
    /// Pre-activation values of hidden layers.
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer sizes must list at least input and output dims, all positive; got {layer_sizes:?}"
            )));
        }
        Ok(())
    }

    /// Glorot-uniform weights (`±√(6/(fan_in+fan_out))`) and zero biases.
    pub fn new(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        Self::validate_sizes(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(layer_sizes));
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Mlp {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            params,
        })
    }

    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        Self::from_params(layer_sizes, activation, vec![0.0; param_count(layer_sizes)])
    }

    pub fn from_params(layer_sizes: &[usize], activation: Activation, params: Vec<f64>) -> Result<Self> {
        Self::validate_sizes(layer_sizes)?;
        ensure_dim("mlp parameters", param_count(layer_sizes), params.len())?;
        Ok(Mlp {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            params,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Weight matrix and bias of layer `l` inside `params`.
    fn layer<'a>(&self, params: &'a [f64], l: usize) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
        let offset = param_count(&self.layer_sizes[..=l]);
        let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        let w = ArrayView2::from_shape((fan_out, fan_in), &params[offset..offset + fan_in * fan_out])
            .expect("layer shape");
        let b = ArrayView1::from(&params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out]);
        (w, b)
    }

    fn check(&self, params: &[f64], inputs: &ArrayView2<'_, f64>) -> Result<()> {
        ensure_dim("mlp parameters", self.n_params(), params.len())?;
        ensure_dim("mlp input", self.input_dim(), inputs.ncols())
    }

    fn run(&self, params: &[f64], inputs: ArrayView2<'_, f64>, layers: usize, keep: bool) -> Trace {
        let mut acts = vec![inputs.to_owned()];
        let mut pre = Vec::new();
        for l in 0..layers {
            let (w, b) = self.layer(params, l);
            let mut z = acts.last().expect("non-empty").dot(&w.t());
            z += &b;
            if l + 1 < self.n_layers() {
                let h = z.mapv(|v| self.activation.apply(v));
                if keep {
                    pre.push(z);
                } else {
                    acts.clear();
                }
                acts.push(h);
            } else {
                if !keep {
                    acts.clear();
                }
                acts.push(z);
            }
        }
        Trace { acts, pre }
    }

    /// Network outputs for a batch of inputs (`B × D` → `B × out`).
    pub fn forward(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.forward_with(&self.params, inputs)
    }

    /// [`Mlp::forward`] evaluated at an alternative parameter vector.
    pub fn forward_with(&self, params: &[f64], inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check(params, &inputs)?;
        let mut t = self.run(params, inputs, self.n_layers(), false);
        Ok(t.acts.pop().expect("output"))
    }

    /// Post-activation values of the last hidden layer.
    pub fn features(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.features_with(&self.params, inputs)
    }

    pub fn features_with(&self, params: &[f64], inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if self.n_layers() < 2 {
            return Err(Error::Config("feature extraction needs at least one hidden layer".into()));
        }
        self.check(params, &inputs)?;
        let mut t = self.run(params, inputs, self.n_layers() - 1, false);
        Ok(t.acts.pop().expect("features"))
    }

    /// Gradient of `Σ_ij upstream[i,j]·out[i,j]` with respect to the parameters,
    /// i.e. the vector-Jacobian product of the batch outputs with `upstream`.
    pub fn backward_with(
        &self,
        params: &[f64],
        inputs: ArrayView2<'_, f64>,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<Vec<f64>> {
        self.check(params, &inputs)?;
        ensure_dim("mlp upstream rows", inputs.nrows(), upstream.nrows())?;
        ensure_dim("mlp upstream cols", self.output_dim(), upstream.ncols())?;
        let trace = self.run(params, inputs, self.n_layers(), true);
        Ok(self.backprop(params, &trace, upstream.to_owned()))
    }

    fn backprop(&self, params: &[f64], trace: &Trace, mut delta: Array2<f64>) -> Vec<f64> {
        let mut grad = vec![0.0; self.n_params()];
        for l in (0..self.n_layers()).rev() {
            let offset = param_count(&self.layer_sizes[..=l]);
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let h_in = &trace.acts[l];
            let gw = delta.t().dot(h_in);
            let gb = delta.sum_axis(Axis(0));
            // `iter` walks in logical row-major order whatever the memory layout.
            for (g, v) in grad[offset..offset + (fan_in + 1) * fan_out].iter_mut().zip(gw.iter().chain(gb.iter())) {
                *g = *v;
            }
            if l > 0 {
                let (w, _) = self.layer(params, l);
                let mut prev = delta.dot(&w);
                let z = &trace.pre[l - 1];
                let h = &trace.acts[l];
                ndarray::Zip::from(&mut prev)
                    .and(z)
                    .and(h)
                    .for_each(|d, &z, &h| *d *= self.activation.derivative(z, h));
                delta = prev;
            }
        }
        grad
    }

    /// Mean batch loss and its exact gradient with respect to the parameters.
    pub fn grad_loss(&self, inputs: ArrayView2<'_, f64>, targets: &[f64], loss: Loss) -> Result<(f64, Vec<f64>)> {
        self.check(&self.params, &inputs)?;
        let b = inputs.nrows();
        if b == 0 {
            return Err(Error::Input("loss needs a non-empty batch".into()));
        }
        ensure_dim("loss targets", b, targets.len())?;
        let trace = self.run(&self.params, inputs, self.n_layers(), true);
        let out = trace.acts.last().expect("output");
        let scale = 1.0 / b as f64;
        let mut upstream = Array2::zeros(out.raw_dim());
        let mut total = 0.0;
        match loss {
            Loss::CrossEntropy => {
                for (i, (row, mut up)) in out.outer_iter().zip(upstream.outer_iter_mut()).enumerate() {
                    let y = targets[i];
                    if y < 0.0 || y.fract() != 0.0 || y as usize >= row.len() {
                        return Err(Error::Input(format!("class target {y} at row {i} out of range")));
                    }
                    let logp = log_softmax(row);
                    let li = -logp[y as usize];
                    if !li.is_finite() {
                        return Err(Error::numerical("cross-entropy loss", i, format!("loss {li}")));
                    }
                    total += li;
                    for (c, u) in up.iter_mut().enumerate() {
                        let p = logp[c].exp();
                        *u = scale * (p - if c == y as usize { 1.0 } else { 0.0 });
                    }
                }
            }
            Loss::GaussianNll { .. } | Loss::Mse if self.output_dim() != 1 => {
                return Err(Error::Config(format!(
                    "{loss:?} needs a single-output network, got {}",
                    self.output_dim()
                )));
            }
            Loss::GaussianNll { std } => {
                let var = std * std;
                let log_norm = std.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln();
                for i in 0..b {
                    let r = out[[i, 0]] - targets[i];
                    let li = 0.5 * r * r / var + log_norm;
                    if !li.is_finite() {
                        return Err(Error::numerical("gaussian nll", i, format!("loss {li}")));
                    }
                    total += li;
                    upstream[[i, 0]] = scale * r / var;
                }
            }
            Loss::Mse => {
                for i in 0..b {
                    let r = out[[i, 0]] - targets[i];
                    let li = r * r;
                    if !li.is_finite() {
                        return Err(Error::numerical("mse", i, format!("loss {li}")));
                    }
                    total += li;
                    upstream[[i, 0]] = scale * 2.0 * r;
                }
            }
        }
        Ok((total * scale, self.backprop(&self.params, &trace, upstream)))
    }

    /// Per-row Jacobian of output `k` with respect to the parameters, for a
    /// single input row. Used by curvature estimates.
    pub(crate) fn output_jacobian_row(&self, params: &[f64], input: ArrayView1<'_, f64>) -> Vec<Vec<f64>> {
        let x = input.insert_axis(Axis(0));
        let trace = self.run(params, x, self.n_layers(), true);
        (0..self.output_dim())
            .map(|k| {
                let mut up = Array2::zeros((1, self.output_dim()));
                up[[0, k]] = 1.0;
                self.backprop(params, &trace, up)
            })
            .collect()
    }

    /// Gradient of `Σ_ij upstream[i,j]·out[i,j]` for a single row, reusing no state.
    pub(crate) fn vjp_row(&self, params: &[f64], input: ArrayView1<'_, f64>, upstream: &[f64]) -> Vec<f64> {
        let x = input.insert_axis(Axis(0));
        let trace = self.run(params, x, self.n_layers(), true);
        let up = Array1::from(upstream.to_vec()).insert_axis(Axis(0));
        self.backprop(params, &trace, up)
    }

    /// Flat index range of layer `l`'s parameters.
    pub fn layer_range(&self, l: usize) -> std::ops::Range<usize> {
        param_count(&self.layer_sizes[..=l])..param_count(&self.layer_sizes[..=l + 1])
    }
}

pub(crate) fn log_softmax(logits: ArrayView1<'_, f64>) -> Vec<f64> {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

pub(crate) fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let lp = log_softmax(row.view());
        row.iter_mut().zip(lp).for_each(|(v, l)| *v = l.exp());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn param_layout_counts() {
        assert_eq!(param_count(&[2, 3, 2]), 3 * 3 + 4 * 2);
        let m = Mlp::new(&[4, 5, 1], Activation::Tanh, 0).unwrap();
        assert_eq!(m.n_params(), 5 * 5 + 6);
        assert_eq!(m.layer_range(1), 25..31);
        assert!(Mlp::new(&[3], Activation::Tanh, 0).is_err());
        assert!(Mlp::from_params(&[1, 1], Activation::Tanh, vec![0.0]).is_err());
    }

    #[test]
    fn zero_model_outputs_zero() {
        let m = Mlp::zeros(&[3, 4, 2], Activation::Tanh).unwrap();
        let out = m.forward(array![[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]].view()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        assert!(m.features(array![[1.0, 2.0, 3.0]].view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_single_layer() {
        let m = Mlp::from_params(&[2, 2], Activation::Relu, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let out = m.forward(array![[-3.0, 7.5]].view()).unwrap();
        assert_eq!(out, array![[-3.0, 7.5]]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = Mlp::zeros(&[3, 2], Activation::Tanh).unwrap();
        assert!(matches!(m.forward(array![[1.0, 2.0]].view()), Err(Error::Dimension { .. })));
    }

    #[test]
    fn single_layer_has_no_features() {
        let m = Mlp::zeros(&[3, 2], Activation::Tanh).unwrap();
        assert!(matches!(m.features(array![[1.0, 2.0, 3.0]].view()), Err(Error::Config(_))));
    }

    #[test]
    fn constant_output_mse_is_zero() {
        // Zero weights, output bias 1.5.
        let mut m = Mlp::zeros(&[2, 3, 1], Activation::Tanh).unwrap();
        let n = m.n_params();
        m.params_mut()[n - 1] = 1.5;
        let (loss, g) = m.grad_loss(array![[0.3, 1.0], [2.0, -1.0]].view(), &[1.5, 1.5], Loss::Mse).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_m() {
        let m = Mlp::zeros(&[2, 4, 5], Activation::Relu).unwrap();
        let (loss, _) = m
            .grad_loss(array![[0.3, 1.0], [2.0, -1.0]].view(), &[0.0, 4.0], Loss::CrossEntropy)
            .unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn empty_batch_rejected() {
        let m = Mlp::zeros(&[2, 1], Activation::Relu).unwrap();
        assert!(m.grad_loss(Array2::zeros((0, 2)).view(), &[], Loss::Mse).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = Mlp::new(&[3, 7, 2], Activation::Tanh, 42).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: Mlp = serde_json::from_str(&s).unwrap();
        assert_eq!(
            m.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            back.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(m, back);
    }
}
