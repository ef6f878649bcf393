//! Dense-network substrate: multilayer perceptrons with explicit reverse-mode
//! gradients, optional batch normalization, Adam, and a finite-difference
//! gradient checker.
//!
//! Everything is f64 and deterministic. Any non-finite intermediate is
//! surfaced as an error naming the layer, never propagated silently.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative at pre-activation `x`. The ReLU subgradient at exactly 0
    /// is 0.
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Architecture of a dense network.
///
/// `layer_widths` lists input, hidden, and output widths. `activation`
/// follows every layer except the last, whose output stays linear unless
/// `activate_output` is set. `batch_norm[i]` inserts normalization between
/// layer i's linear map and its activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub batch_norm: Vec<bool>,
    #[serde(default)]
    pub activate_output: bool,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let batch_norm = vec![false; layer_widths.len().saturating_sub(1)];
        let spec = MlpSpec {
            layer_widths,
            activation,
            batch_norm,
            activate_output: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_batch_norm(mut self, batch_norm: Vec<bool>) -> Result<Self> {
        self.batch_norm = batch_norm;
        self.validate()?;
        Ok(self)
    }

    /// Apply the activation to the final layer as well.
    pub fn with_output_activation(mut self) -> Self {
        self.activate_output = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidInput(
                "network needs at least input and output widths".into(),
            ));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidInput("layer widths must be at least 1".into()));
        }
        if self.batch_norm.len() != self.layer_widths.len() - 1 {
            return Err(Error::InvalidInput(format!(
                "need one batch-norm flag per layer: {} flags for {} layers",
                self.batch_norm.len(),
                self.layer_widths.len() - 1
            )));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated non-empty")
    }
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Batch-normalization state for one layer: running statistics only, no
/// learnable affine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNormState {
    fn new(width: usize) -> Self {
        BatchNormState {
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layer {
    /// in_dim x out_dim; forward multiplies on the right.
    w: Array2<f64>,
    b: Array1<f64>,
    bn: Option<BatchNormState>,
}

/// Whether batch statistics (training) or running statistics (inference)
/// drive batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
struct BnCache {
    xhat: Array2<f64>,
    /// Per-column sqrt(var + eps) actually used for scaling.
    std: Array1<f64>,
    /// Batch statistics (train mode) need the full chain rule; running
    /// statistics are constants.
    per_batch: bool,
    batch_mean: Array1<f64>,
    batch_var: Array1<f64>,
}

#[derive(Debug)]
struct LayerCache {
    x_in: Array2<f64>,
    pre: Array2<f64>,
    bn: Option<BnCache>,
}

/// Caches from one forward pass, consumed by [`Mlp::backward`].
#[derive(Debug)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    mode: Mode,
}

/// Per-layer parameter gradients from one backward pass.
#[derive(Debug)]
pub struct Gradients {
    pub d_w: Vec<Array2<f64>>,
    pub d_b: Vec<Array1<f64>>,
}

impl Gradients {
    /// Concatenated in the same order as [`Mlp::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.d_w.iter().zip(&self.d_b) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.d_w.iter_mut().zip(&other.d_w) {
            *a += b;
        }
        for (a, b) in self.d_b.iter_mut().zip(&other.d_b) {
            *a += b;
        }
    }
}

/// Dense network with explicit parameters and gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

impl Mlp {
    /// Initialize with uniform weights on ±sqrt(6/(fan_in+fan_out)) and zero
    /// biases. Deterministic given the generator state.
    pub fn init(spec: MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.n_layers());
        for i in 0..spec.n_layers() {
            let fan_in = spec.layer_widths[i];
            let fan_out = spec.layer_widths[i + 1];
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| {
                rng.random::<f64>() * 2.0 * bound - bound
            });
            let bn = spec.batch_norm[i].then(|| BatchNormState::new(fan_out));
            layers.push(Layer {
                w,
                b: Array1::zeros(fan_out),
                bn,
            });
        }
        Ok(Mlp { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// All trainable parameters, layer by layer, weights then bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                flat.len()
            )));
        }
        let mut i = 0;
        for l in &mut self.layers {
            for v in l.w.iter_mut() {
                *v = flat[i];
                i += 1;
            }
            for v in l.b.iter_mut() {
                *v = flat[i];
                i += 1;
            }
        }
        Ok(())
    }

    /// Apply flat gradient updates shaped like [`Mlp::params_flat`].
    pub fn apply_flat_delta(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} deltas, got {}",
                self.n_params(),
                delta.len()
            )));
        }
        let mut i = 0;
        for l in &mut self.layers {
            for v in l.w.iter_mut() {
                *v += delta[i];
                i += 1;
            }
            for v in l.b.iter_mut() {
                *v += delta[i];
                i += 1;
            }
        }
        Ok(())
    }

    /// Run the network. Pure: running statistics are not touched even in
    /// train mode; fold them in afterwards with
    /// [`Mlp::update_running_stats`].
    pub fn forward(&self, x: ArrayView2<'_, f64>, mode: Mode) -> Result<(Array2<f64>, ForwardCache)> {
        if x.ncols() != self.spec.input_width() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.spec.input_width()
            )));
        }
        let mut cur = x.to_owned();
        let mut caches = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let x_in = cur;
            let pre = x_in.dot(&layer.w) + &layer.b;

            let (bn_cache, bn_out) = match &layer.bn {
                Some(state) => {
                    let (cache, out) = batch_norm_forward(&pre, state, mode)?;
                    (Some(cache), out)
                }
                None => (None, pre.clone()),
            };

            let act = if i == last && !self.spec.activate_output {
                Activation::Identity
            } else {
                self.spec.activation
            };
            cur = bn_out.mapv(|v| act.apply(v));

            if let Some(bad) = cur.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {i} output contains {bad}")));
            }
            caches.push(LayerCache { x_in, pre, bn: bn_cache });
        }
        Ok((cur, ForwardCache { layers: caches, mode }))
    }

    /// Reverse-mode pass. `d_out` is the loss gradient at the network
    /// output; returns parameter gradients and the gradient at the input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_out: ArrayView2<'_, f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        if cache.layers.len() != self.layers.len() {
            return Err(Error::ShapeMismatch(
                "forward cache does not match this network".into(),
            ));
        }
        let last = self.layers.len() - 1;
        let mut d_cur = d_out.to_owned();
        let mut d_w = vec![Array2::zeros((0, 0)); self.layers.len()];
        let mut d_b = vec![Array1::zeros(0); self.layers.len()];

        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let lc = &cache.layers[i];
            if d_cur.dim() != lc.pre.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i}: upstream gradient {:?} does not match cache {:?}",
                    d_cur.dim(),
                    lc.pre.dim()
                )));
            }

            let act = if i == last && !self.spec.activate_output {
                Activation::Identity
            } else {
                self.spec.activation
            };
            // activation input = BN output when present, else the linear output
            let mut d_bn_out = match &lc.bn {
                Some(bn) => {
                    // activation derivative is evaluated at the activation
                    // input, which is xhat here
                    let mut d = d_cur;
                    d.zip_mut_with(&bn.xhat, |g, &x| *g *= act.derivative(x));
                    d
                }
                None => {
                    let mut d = d_cur;
                    d.zip_mut_with(&lc.pre, |g, &x| *g *= act.derivative(x));
                    d
                }
            };

            let d_pre = match &lc.bn {
                Some(bn) => batch_norm_backward(&d_bn_out, bn),
                None => std::mem::replace(&mut d_bn_out, Array2::zeros((0, 0))),
            };

            d_w[i] = lc.x_in.t().dot(&d_pre);
            d_b[i] = d_pre.sum_axis(Axis(0));
            d_cur = d_pre.dot(&layer.w.t());

            if d_cur.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {i} input gradient")));
            }
        }
        Ok((Gradients { d_w, d_b }, d_cur))
    }

    /// Fold the batch statistics captured in a train-mode cache into the
    /// running statistics (exponential moving average).
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        if cache.mode != Mode::Train {
            return;
        }
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers) {
            if let (Some(state), Some(bn)) = (&mut layer.bn, &lc.bn) {
                state
                    .running_mean
                    .zip_mut_with(&bn.batch_mean, |r, &b| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b);
                state
                    .running_var
                    .zip_mut_with(&bn.batch_var, |r, &b| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b);
            }
        }
    }
}

fn batch_norm_forward(
    pre: &Array2<f64>,
    state: &BatchNormState,
    mode: Mode,
) -> Result<(BnCache, Array2<f64>)> {
    let b = pre.nrows();
    let (mean, var, per_batch) = match mode {
        Mode::Train => {
            if b < 2 {
                return Err(Error::InvalidInput(format!(
                    "batch normalization needs at least 2 samples, got {b}"
                )));
            }
            let mean = pre.mean_axis(Axis(0)).expect("b >= 2");
            // population variance, matching the normalization convention
            let var = pre.map_axis(Axis(0), |col| {
                let m = col.mean().expect("b >= 2");
                col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / b as f64
            });
            (mean, var, true)
        }
        Mode::Eval => (state.running_mean.clone(), state.running_var.clone(), false),
    };
    let std = var.mapv(|v| (v + BN_EPS).sqrt());
    let mut xhat = pre.clone();
    for mut row in xhat.rows_mut() {
        row -= &mean;
        row /= &std;
    }
    Ok((
        BnCache {
            xhat: xhat.clone(),
            std,
            per_batch,
            batch_mean: mean,
            batch_var: var,
        },
        xhat,
    ))
}

/// Gradient through x̂ = (x − μ)/s with μ, s batch statistics:
/// dx = (g − mean(g) − x̂ ⊙ mean(g ⊙ x̂)) / s, means over the batch.
fn batch_norm_backward(d_xhat: &Array2<f64>, cache: &BnCache) -> Array2<f64> {
    if !cache.per_batch {
        let mut d = d_xhat.clone();
        for mut row in d.rows_mut() {
            row /= &cache.std;
        }
        return d;
    }
    let g_mean = d_xhat.mean_axis(Axis(0)).expect("train mode has b >= 2");
    let gx = d_xhat * &cache.xhat;
    let gx_mean = gx.mean_axis(Axis(0)).expect("train mode has b >= 2");
    let mut d = d_xhat.clone();
    for mut row in d.rows_mut() {
        row -= &g_mean;
    }
    let mut corr = cache.xhat.clone();
    for mut row in corr.rows_mut() {
        row *= &gx_mean;
    }
    d -= &corr;
    for mut row in d.rows_mut() {
        row /= &cache.std;
    }
    d
}

/// Adam optimizer state over one flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One bias-corrected Adam update; writes the parameter deltas into
    /// `delta`.
    pub fn step(&mut self, grads: &[f64], delta: &mut [f64]) -> Result<()> {
        if grads.len() != self.m.len() || delta.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam holds {} parameters, got {} gradients",
                self.m.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..grads.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            delta[i] = -self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Compare an analytic gradient against central finite differences of
/// `lossfn`, returning the maximum relative error over all parameters.
///
/// Relative error per coordinate is |fd − analytic| divided by
/// max(|fd|, |analytic|, 1e-5); the floor keeps near-zero gradients from
/// inflating the ratio.
pub fn finite_diff_check<F>(
    mut lossfn: F,
    params: &[f64],
    analytic_grad: &[f64],
    h: f64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::InvalidInput("step must be positive".into()));
    }
    if params.len() != analytic_grad.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters but {} gradient entries",
            params.len(),
            analytic_grad.len()
        )));
    }
    let mut work = params.to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..params.len() {
        work[i] = params[i] + h;
        let up = lossfn(&work)?;
        work[i] = params[i] - h;
        let down = lossfn(&work)?;
        work[i] = params[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at perturbed parameter {i}"
            )));
        }
        let fd = (up - down) / (2.0 * h);
        let an = analytic_grad[i];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-5);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_net(width: usize) -> Mlp {
        let spec = MlpSpec::new(vec![width, width], Activation::Identity).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::init(spec, &mut rng).unwrap();
        let mut flat = vec![0.0; net.n_params()];
        for i in 0..width {
            flat[i * width + i] = 1.0;
        }
        net.set_params_flat(&flat).unwrap();
        net
    }

    #[test]
    fn identity_network_passes_input_through() {
        let net = identity_net(3);
        let x = array![[1.0, -2.0, 0.5], [0.0, 3.0, -1.0]];
        let (y, _) = net.forward(x.view(), Mode::Eval).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn relu_clamps_negative_preactivations() {
        let spec = MlpSpec::new(vec![2, 2, 2], Activation::Relu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::init(spec, &mut rng).unwrap();
        // both layers identity weights; ReLU applies after the first only
        let mut flat = vec![0.0; net.n_params()];
        flat[0] = 1.0;
        flat[3] = 1.0;
        let off = 2 * 2 + 2;
        flat[off] = 1.0;
        flat[off + 3] = 1.0;
        net.set_params_flat(&flat).unwrap();
        let x = array![[-1.0, 2.0]];
        let (y, _) = net.forward(x.view(), Mode::Eval).unwrap();
        assert_eq!(y, array![[0.0, 2.0]]);
    }

    #[test]
    fn zero_weights_yield_bias_rows() {
        let spec = MlpSpec::new(vec![3, 2], Activation::Identity).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::init(spec, &mut rng).unwrap();
        net.set_params_flat(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.7, -0.3])
            .unwrap();
        let x = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let (y, _) = net.forward(x.view(), Mode::Eval).unwrap();
        assert_eq!(y, array![[0.7, -0.3], [0.7, -0.3]]);
    }

    #[test]
    fn scalar_weight_gradient_is_input() {
        let spec = MlpSpec::new(vec![1, 1], Activation::Identity).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::init(spec, &mut rng).unwrap();
        net.set_params_flat(&[2.0, 0.0]).unwrap();
        let x = array![[3.0]];
        let (_, cache) = net.forward(x.view(), Mode::Train).unwrap();
        let d_out = array![[1.0]];
        let (grads, _) = net.backward(&cache, d_out.view()).unwrap();
        assert_eq!(grads.d_w[0][[0, 0]], 3.0);
        assert_eq!(grads.d_b[0][0], 1.0);
    }

    #[test]
    fn relu_blocks_gradient_at_negative_preactivation() {
        let spec = MlpSpec::new(vec![1, 1, 1], Activation::Relu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::init(spec, &mut rng).unwrap();
        // first layer maps 1 -> -1 (negative pre-activation), second passes through
        net.set_params_flat(&[-1.0, 0.0, 1.0, 0.0]).unwrap();
        let x = array![[1.0]];
        let (_, cache) = net.forward(x.view(), Mode::Train).unwrap();
        let (grads, d_in) = net.backward(&cache, array![[1.0]].view()).unwrap();
        assert_eq!(grads.d_w[0][[0, 0]], 0.0);
        assert_eq!(d_in[[0, 0]], 0.0);
    }

    /// Mean squared loss against zero, summed over output coordinates and
    /// averaged over the batch; simple enough to differentiate by hand.
    fn sq_loss(y: &Array2<f64>) -> (f64, Array2<f64>) {
        let b = y.nrows() as f64;
        let loss = y.iter().map(|v| v * v).sum::<f64>() / b;
        let grad = y.mapv(|v| 2.0 * v / b);
        (loss, grad)
    }

    fn check_net_gradients(spec: MlpSpec, mode: Mode, seed: u64, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::init(spec.clone(), &mut rng).unwrap();
        let x = Array2::from_shape_fn((6, spec.input_width()), |_| {
            rng.random::<f64>() * 2.0 - 1.0
        });
        let (y, cache) = net.forward(x.view(), mode).unwrap();
        let (_, d_y) = sq_loss(&y);
        let (grads, _) = net.backward(&cache, d_y.view()).unwrap();

        let params = net.params_flat();
        let mut probe = net.clone();
        let err = finite_diff_check(
            |p| {
                probe.set_params_flat(p)?;
                let (y, _) = probe.forward(x.view(), mode)?;
                Ok(sq_loss(&y).0)
            },
            &params,
            &grads.flat(),
            1e-5,
        )
        .unwrap();
        assert!(err < tol, "max relative error {err} in {mode:?}");
    }

    #[test]
    fn two_layer_gradients_match_finite_differences() {
        let spec = MlpSpec::new(vec![4, 5, 3], Activation::Relu).unwrap();
        check_net_gradients(spec, Mode::Train, 42, 1e-6);
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let spec = MlpSpec::new(vec![4, 5, 3], Activation::Relu)
            .unwrap()
            .with_batch_norm(vec![true, false])
            .unwrap();
        check_net_gradients(spec, Mode::Train, 43, 1e-5);
        // eval mode: running stats are constants
        let spec = MlpSpec::new(vec![4, 5, 3], Activation::Relu)
            .unwrap()
            .with_batch_norm(vec![true, true])
            .unwrap();
        check_net_gradients(spec, Mode::Eval, 44, 1e-6);
    }

    #[test]
    fn identity_activation_deep_gradients() {
        let spec = MlpSpec::new(vec![3, 4, 4, 2], Activation::Identity).unwrap();
        check_net_gradients(spec, Mode::Train, 45, 1e-6);
    }

    #[test]
    fn batch_norm_train_columns_are_standardized() {
        let spec = MlpSpec::new(vec![3, 4], Activation::Identity)
            .unwrap()
            .with_batch_norm(vec![true])
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::init(spec, &mut rng).unwrap();
        let x = Array2::from_shape_fn((16, 3), |_| rng.random::<f64>() * 3.0);
        let (y, _) = net.forward(x.view(), Mode::Train).unwrap();
        for col in y.columns() {
            let mean = col.mean().unwrap();
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
            // population variance shrinks slightly under the eps guard
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-3);
        }
    }

    #[test]
    fn running_stats_follow_batches() {
        let spec = MlpSpec::new(vec![2, 2], Activation::Identity)
            .unwrap()
            .with_batch_norm(vec![true])
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut net = Mlp::init(spec, &mut rng).unwrap();
        net.set_params_flat(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let x = array![[10.0, 0.0], [14.0, 0.0]]; // mean 12, var 4 in column 0
        for _ in 0..500 {
            let (_, cache) = net.forward(x.view(), Mode::Train).unwrap();
            net.update_running_stats(&cache);
        }
        let bn = net.layers[0].bn.as_ref().unwrap();
        assert_abs_diff_eq!(bn.running_mean[0], 12.0, epsilon = 1e-6);
        assert_abs_diff_eq!(bn.running_var[0], 4.0, epsilon = 1e-6);
        // eval mode now standardizes with the learned statistics
        let (y, _) = net.forward(x.view(), Mode::Eval).unwrap();
        assert_abs_diff_eq!(y[[0, 0]], -2.0 / (4.0f64 + 1e-5).sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut adam = AdamState::new(3, 1e-3);
        let mut delta = vec![0.0; 3];
        adam.step(&[0.0, 0.0, 0.0], &mut delta).unwrap();
        assert_eq!(delta, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn adam_first_step_moves_against_gradient() {
        let mut adam = AdamState::new(2, 1e-3);
        let mut delta = vec![0.0; 2];
        adam.step(&[0.5, -2.0], &mut delta).unwrap();
        assert!(delta[0] < 0.0 && delta[1] > 0.0);
        assert_abs_diff_eq!(delta[0].abs(), 1e-3, epsilon = 1e-7);
        assert_abs_diff_eq!(delta[1].abs(), 1e-3, epsilon = 1e-7);
    }

    #[test]
    fn identical_runs_produce_identical_parameters() {
        let run = || {
            let spec = MlpSpec::new(vec![3, 4, 2], Activation::Relu).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut net = Mlp::init(spec, &mut rng).unwrap();
            let mut adam = AdamState::new(net.n_params(), 1e-3);
            let x = Array2::from_shape_fn((5, 3), |_| rng.random::<f64>());
            let mut delta = vec![0.0; net.n_params()];
            for _ in 0..10 {
                let (y, cache) = net.forward(x.view(), Mode::Train).unwrap();
                let (_, d_y) = sq_loss(&y);
                let (grads, _) = net.backward(&cache, d_y.view()).unwrap();
                adam.step(&grads.flat(), &mut delta).unwrap();
                net.apply_flat_delta(&delta).unwrap();
            }
            net.params_flat()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn finite_diff_exact_on_quadratic() {
        let params = vec![0.3, -1.2, 2.0];
        let grad: Vec<f64> = params.iter().map(|p| 2.0 * p).collect();
        let err = finite_diff_check(
            |p| Ok(p.iter().map(|v| v * v).sum()),
            &params,
            &grad,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "quadratic check error {err}");
    }

    #[test]
    fn finite_diff_rejects_zero_step() {
        let err = finite_diff_check(|_| Ok(0.0), &[1.0], &[0.0], 0.0).unwrap_err();
        assert!(err.to_string().contains("step must be positive"));
    }

    #[test]
    fn non_finite_output_names_layer() {
        let spec = MlpSpec::new(vec![1, 1], Activation::Identity).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::init(spec, &mut rng).unwrap();
        net.set_params_flat(&[1e308, 0.0]).unwrap();
        let x = array![[1e308]];
        let err = net.forward(x.view(), Mode::Eval).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }
}
