//! Small dense function approximators with exact reverse-mode gradients.
//!
//! Everything here operates on f64 batches (rows are samples). Gradients
//! are computed by hand-written backprop and are checked against central
//! finite differences in the tests; keep any change to the math in sync
//! with those checks.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the post-activation value.
    fn derivative_from_output(&self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// out_dim x in_dim.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Feed-forward stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNetwork {
    pub layers: Vec<DenseLayer>,
}

/// Per-layer parameter gradients plus the gradient w.r.t. the network input.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    pub dinput: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub dweight: Array2<f64>,
    pub dbias: Array1<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNetwork, batch: usize) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    dweight: Array2::zeros(l.weight.dim()),
                    dbias: Array1::zeros(l.bias.len()),
                })
                .collect(),
            dinput: Array2::zeros((batch, net.layers[0].in_dim())),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.dweight += &b.dweight;
            a.dbias += &b.dbias;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.layers {
            g.dweight *= s;
            g.dbias *= s;
        }
        self.dinput *= s;
    }
}

/// Cached batch activations from a forward pass: the input followed by each
/// layer's output.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("cache holds at least the input")
    }
}

impl DenseNetwork {
    /// Build a network with the given layer sizes. Hidden layers use
    /// `hidden` activation (He init for relu, Xavier otherwise); the output
    /// layer uses `output` activation with Xavier init.
    pub fn new(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let activation = if i + 2 == dims.len() { output } else { hidden };
            let weight = match activation {
                Activation::Relu => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    Array2::from_shape_fn((fan_out, fan_in), |_| {
                        let z: f64 = rng.sample(StandardNormal);
                        z * std
                    })
                }
                _ => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound))
                }
            };
            layers.push(DenseLayer { weight, bias: Array1::zeros(fan_out), activation });
        }
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, input: &ArrayView2<f64>) -> Result<()> {
        if input.ncols() != self.in_dim() {
            return Err(Error::DimensionMismatch(format!(
                "network expects {} inputs, got {}",
                self.in_dim(),
                input.ncols()
            )));
        }
        Ok(())
    }

    /// Deterministic batched forward pass.
    pub fn forward(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&input)?;
        let mut a = input.to_owned();
        for layer in &self.layers {
            a = layer_forward(layer, &a);
        }
        Ok(a)
    }

    /// Forward pass retaining per-layer activations for [`Self::backward`].
    pub fn forward_cached(&self, input: ArrayView2<f64>) -> Result<ForwardCache> {
        self.check_input(&input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_owned());
        for layer in &self.layers {
            let a = layer_forward(layer, activations.last().unwrap());
            activations.push(a);
        }
        Ok(ForwardCache { activations })
    }

    /// Exact reverse-mode gradients of `sum(output * upstream)` w.r.t. all
    /// parameters and the input.
    pub fn backward(&self, cache: &ForwardCache, upstream: ArrayView2<f64>) -> Gradients {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_owned();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let out = &cache.activations[l + 1];
            // dz = upstream (x) act'(a)
            ndarray::Zip::from(&mut delta).and(out).for_each(|d, &a| {
                *d *= layer.activation.derivative_from_output(a);
            });
            let input = &cache.activations[l];
            let dweight = delta.t().dot(input);
            let dbias = delta.sum_axis(Axis(0));
            let dinput = delta.dot(&layer.weight);
            grads.push(LayerGrad { dweight, dbias });
            delta = dinput;
        }
        grads.reverse();
        Gradients { layers: grads, dinput: delta }
    }

    /// Flatten all parameters (layer order, weights row-major then bias).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut i = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w = flat[i];
                i += 1;
            }
            for b in l.bias.iter_mut() {
                *b = flat[i];
                i += 1;
            }
        }
        Ok(())
    }
}

fn layer_forward(layer: &DenseLayer, input: &Array2<f64>) -> Array2<f64> {
    let mut z = input.dot(&layer.weight.t());
    z += &layer.bias;
    z.mapv_inplace(|v| layer.activation.apply(v));
    z
}

/// Per-parameter Polyak average: `target = (1 - tau) * target + tau * online`.
pub fn polyak(target: &mut DenseNetwork, online: &DenseNetwork, tau: f64) {
    for (t, o) in target.layers.iter_mut().zip(&online.layers) {
        ndarray::Zip::from(&mut t.weight)
            .and(&o.weight)
            .for_each(|t, &o| *t = (1.0 - tau) * *t + tau * o);
        ndarray::Zip::from(&mut t.bias)
            .and(&o.bias)
            .for_each(|t, &o| *t = (1.0 - tau) * *t + tau * o);
    }
}

/// Adam optimizer with per-layer moment buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<LayerGrad>,
    v: Vec<LayerGrad>,
}

impl Adam {
    pub fn new(net: &DenseNetwork, lr: f64) -> Self {
        let zeros = || {
            net.layers
                .iter()
                .map(|l| LayerGrad {
                    dweight: Array2::zeros(l.weight.dim()),
                    dbias: Array1::zeros(l.bias.len()),
                })
                .collect::<Vec<_>>()
        };
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, net: &mut DenseNetwork, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((layer, g), (m, v)) in
            net.layers.iter_mut().zip(&grads.layers).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            update_array(
                &mut layer.weight,
                &g.dweight,
                &mut m.dweight,
                &mut v.dweight,
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
                bc1,
                bc2,
            );
            update_vec(
                &mut layer.bias,
                &g.dbias,
                &mut m.dbias,
                &mut v.dbias,
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
                bc1,
                bc2,
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn update_array(
    p: &mut Array2<f64>,
    g: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    });
}

#[allow(clippy::too_many_arguments)]
fn update_vec(
    p: &mut Array1<f64>,
    g: &Array1<f64>,
    m: &mut Array1<f64>,
    v: &mut Array1<f64>,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    });
}

/// Scalar Adam, used for the entropy temperature.
#[derive(Debug, Clone)]
pub struct AdamScalar {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: f64,
    v: f64,
}

impl AdamScalar {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: 0.0, v: 0.0 }
    }

    pub fn step(&mut self, p: &mut f64, g: f64) {
        self.t += 1;
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g;
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g;
        let mhat = self.m / (1.0 - self.beta1.powi(self.t as i32));
        let vhat = self.v / (1.0 - self.beta2.powi(self.t as i32));
        *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_8;

/// Squashed-Gaussian policy head: a dense trunk whose final layer emits
/// `[mean, log_std]` per action dimension; actions are `tanh` of the
/// reparameterized Gaussian sample, so every component lies in (-1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub net: DenseNetwork,
    pub action_dim: usize,
}

/// Everything produced while sampling that the backward pass needs.
#[derive(Debug, Clone)]
pub struct PolicySample {
    /// B x k actions in (-1, 1).
    pub action: Array2<f64>,
    /// Per-sample log density under the squashed distribution.
    pub log_prob: Array1<f64>,
    sigma: Array2<f64>,
    xi: Array2<f64>,
    clamp_mask: Array2<f64>,
    cache: ForwardCache,
}

impl GaussianPolicy {
    pub fn new(
        obs_dim: usize,
        hidden: &[usize],
        action_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut dims = vec![obs_dim];
        dims.extend_from_slice(hidden);
        dims.push(2 * action_dim);
        let net = DenseNetwork::new(&dims, Activation::Relu, Activation::Identity, rng);
        Self { net, action_dim }
    }

    /// Mean and clamped log-std for a batch of observations.
    pub fn mean_logstd(&self, obs: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let out = self.net.forward(obs)?;
        Ok(self.split_heads(&out))
    }

    fn split_heads(&self, out: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let k = self.action_dim;
        let mu = out.slice(ndarray::s![.., 0..k]).to_owned();
        let logstd = out.slice(ndarray::s![.., k..2 * k]).mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        (mu, logstd)
    }

    /// Reparameterized sample `a = tanh(mu + sigma * xi)` with its log
    /// probability (including the tanh change-of-variables correction).
    pub fn sample(&self, obs: ArrayView2<f64>, rng: &mut ChaCha8Rng) -> Result<PolicySample> {
        let batch = obs.nrows();
        let xi = Array2::from_shape_fn((batch, self.action_dim), |_| rng.sample(StandardNormal));
        self.sample_with_noise(obs, xi)
    }

    /// Deterministic-noise variant (used by gradient checks).
    pub fn sample_with_noise(&self, obs: ArrayView2<f64>, xi: Array2<f64>) -> Result<PolicySample> {
        let cache = self.net.forward_cached(obs)?;
        let out = cache.output();
        let k = self.action_dim;
        let raw = out.slice(ndarray::s![.., k..2 * k]);
        let clamp_mask = raw.mapv(|v| if (LOG_STD_MIN..=LOG_STD_MAX).contains(&v) { 1.0 } else { 0.0 });
        let (mu, logstd) = self.split_heads(out);
        let sigma = logstd.mapv(f64::exp);
        let u = &mu + &(&sigma * &xi);
        let action = u.mapv(f64::tanh);
        let mut log_prob = Array1::zeros(u.nrows());
        for (b, mut row) in u.outer_iter().enumerate().map(|(b, r)| (b, r)) {
            let mut lp = 0.0;
            for i in 0..k {
                let ui = row[i];
                lp += -logstd[(b, i)] - 0.5 * xi[(b, i)] * xi[(b, i)] - HALF_LN_TWO_PI;
                // log(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u))
                lp -= 2.0 * (std::f64::consts::LN_2 - ui - softplus(-2.0 * ui));
            }
            log_prob[b] = lp;
            let _ = &mut row;
        }
        Ok(PolicySample { action, log_prob, sigma, xi, clamp_mask, cache })
    }

    /// Mode of the squashed distribution, `tanh(mu)`.
    pub fn deterministic(&self, obs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (mu, _) = self.mean_logstd(obs)?;
        Ok(mu.mapv(f64::tanh))
    }

    /// Gradients of `sum_b [ d_action[b] . a[b] + d_logp[b] * log_prob[b] ]`
    /// w.r.t. the policy parameters (and observations), with the sampling
    /// noise held fixed.
    pub fn backward(
        &self,
        sample: &PolicySample,
        d_action: &Array2<f64>,
        d_logp: &Array1<f64>,
    ) -> Gradients {
        let k = self.action_dim;
        let batch = sample.action.nrows();
        let mut upstream = Array2::zeros((batch, 2 * k));
        for b in 0..batch {
            for i in 0..k {
                let a = sample.action[(b, i)];
                let du = d_action[(b, i)] * (1.0 - a * a) + d_logp[b] * 2.0 * a;
                let via_u = du * sample.sigma[(b, i)] * sample.xi[(b, i)];
                upstream[(b, i)] = du;
                upstream[(b, k + i)] = (via_u - d_logp[b]) * sample.clamp_mask[(b, i)];
            }
        }
        self.net.backward(&sample.cache, upstream.view())
    }
}
