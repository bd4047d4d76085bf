//! The shared lifting network: a fully connected MLP with hand-written
//! reverse mode and an Adam optimizer.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{shape_err, MakoError, Result};

const MLP_MAGIC: &[u8; 8] = b"MAKOMLP\0";
pub const MLP_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// Smooth variant for tight gradient checks.
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    fn slope(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            t => Err(MakoError::Format(format!("unknown activation tag {t}"))),
        }
    }
}

/// Affine layer `y = W x + b` with `W` of shape `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: DMatrix::zeros(out, inp),
            bias: DVector::zeros(out),
        }
    }
}

/// Network parameters; hidden layers use `activation`, the output layer is
/// linear.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

/// Gradient with the same layout as [`MlpParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Layer>,
}

/// Intermediate values of a batched forward pass.
pub struct ForwardCache {
    input: DMatrix<f64>,
    /// Pre-activations of each hidden layer.
    pre: Vec<DMatrix<f64>>,
    /// Post-activations of each hidden layer.
    post: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

impl MlpParams {
    /// Uniform He-style initialization: weights on `±sqrt(6 / fan_in)`,
    /// zero biases.
    pub fn init(sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        check_sizes(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (inp, out) = (w[0], w[1]);
                let bound = (6.0 / inp as f64).sqrt();
                Layer {
                    weight: DMatrix::from_fn(out, inp, |_, _| rng.random_range(-bound..bound)),
                    bias: DVector::zeros(out),
                }
            })
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        check_sizes(sizes)?;
        Ok(Self {
            layers: sizes.windows(2).map(|w| Layer::zeros(w[1], w[0])).collect(),
            activation,
        })
    }

    /// ReLU network reproducing its input exactly: the first hidden layer
    /// splits `x` into `relu(x)` and `relu(-x)`, later hidden layers pass
    /// both parts through, and the output recombines them. Every hidden
    /// width must be at least `2 n`.
    pub fn passthrough(n: usize, hidden: &[usize]) -> Result<Self> {
        if hidden.is_empty() || hidden.iter().any(|&w| w < 2 * n) {
            return Err(MakoError::InvalidArgument(format!(
                "passthrough needs hidden widths >= {}",
                2 * n
            )));
        }
        let mut sizes = vec![n];
        sizes.extend_from_slice(hidden);
        sizes.push(n);
        let mut p = Self::zeros(&sizes, Activation::Relu)?;
        let last = p.layers.len() - 1;
        for i in 0..n {
            p.layers[0].weight[(i, i)] = 1.0;
            p.layers[0].weight[(n + i, i)] = -1.0;
            for l in 1..last {
                p.layers[l].weight[(i, i)] = 1.0;
                p.layers[l].weight[(n + i, n + i)] = 1.0;
            }
            p.layers[last].weight[(i, i)] = 1.0;
            p.layers[last].weight[(i, n + i)] = -1.0;
        }
        Ok(p)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.weight.nrows()));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.nrows()).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.norm_squared() + l.bias.norm_squared())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite())
        })
    }

    /// Lifts a single (normalized) state.
    pub fn forward(&self, x: &[f64]) -> Result<DVector<f64>> {
        let cache = self.forward_batch(&DMatrix::from_column_slice(x.len(), 1, x))?;
        Ok(cache.output.column(0).into_owned())
    }

    /// Lifts a batch of states stored as columns.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<ForwardCache> {
        if x.nrows() != self.input_dim() {
            return Err(shape_err("mlp_forward", self.input_dim(), x.nrows()));
        }
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(last);
        let mut post = Vec::with_capacity(last);
        let mut h = x.clone();
        for layer in &self.layers[..last] {
            let z = affine(layer, &h);
            h = z.map(|v| self.activation.apply(v));
            pre.push(z);
            post.push(h.clone());
        }
        let output = affine(&self.layers[last], &h);
        Ok(ForwardCache {
            input: x.clone(),
            pre,
            post,
            output,
        })
    }

    /// Reverse pass. `upstream` holds `dL/dg` for each column of the
    /// batch; gradients are summed over the batch.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        upstream: &DMatrix<f64>,
    ) -> Result<(MlpGrads, DMatrix<f64>)> {
        if upstream.shape() != cache.output.shape() {
            return Err(shape_err(
                "mlp_backward",
                format!("{:?}", cache.output.shape()),
                format!("{:?}", upstream.shape()),
            ));
        }
        let last = self.layers.len() - 1;
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.clone();
        for l in (0..=last).rev() {
            let input = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            grads.push(Layer {
                weight: &delta * input.transpose(),
                bias: delta.column_sum(),
            });
            let mut back = self.layers[l].weight.transpose() * &delta;
            if l > 0 {
                let act = self.activation;
                back.zip_apply(&cache.pre[l - 1], |d, z| *d *= act.slope(z));
            }
            delta = back;
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, delta))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = ByteWriter::new();
        self.write_to(&mut w);
        fs::write(path, w.finish())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut r = ByteReader::new(&bytes);
        let p = Self::read_from(&mut r)?;
        r.expect_end()?;
        Ok(p)
    }

    pub(crate) fn write_to(&self, w: &mut ByteWriter) {
        w.bytes(MLP_MAGIC);
        w.u32(MLP_VERSION);
        w.u8(self.activation.tag());
        let sizes = self.sizes();
        w.u64(sizes.len() as u64);
        sizes.iter().for_each(|&s| w.u64(s as u64));
        for l in &self.layers {
            w.f64s(l.weight.as_slice());
            w.f64s(l.bias.as_slice());
        }
    }

    pub(crate) fn read_from(r: &mut ByteReader<'_>) -> Result<Self> {
        r.expect_magic(MLP_MAGIC)?;
        let version = r.u32()?;
        if version != MLP_VERSION {
            return Err(MakoError::Format(format!(
                "network version {version}, expected {MLP_VERSION}"
            )));
        }
        let activation = Activation::from_tag(r.u8()?)?;
        let count = r.usize()?;
        if !(2..=64).contains(&count) {
            return Err(MakoError::Format(format!("implausible layer count {count}")));
        }
        let sizes = (0..count).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let mut layers = Vec::with_capacity(count - 1);
        for w in sizes.windows(2) {
            let (inp, out) = (w[0], w[1]);
            let weight = DMatrix::from_vec(out, inp, r.f64s(out * inp)?);
            let bias = DVector::from_vec(r.f64s(out)?);
            layers.push(Layer { weight, bias });
        }
        Ok(Self { layers, activation })
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(MakoError::InvalidArgument(format!(
            "invalid layer sizes {sizes:?}"
        )));
    }
    Ok(())
}

fn affine(layer: &Layer, h: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = &layer.weight * h;
    for mut col in z.column_iter_mut() {
        col += &layer.bias;
    }
    z
}

impl MlpGrads {
    pub fn zeros_like(p: &MlpParams) -> Self {
        Self {
            layers: p
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight *= s;
            l.bias *= s;
        }
    }

    /// `self += s * theta`, used for the L2 term.
    pub fn add_scaled_params(&mut self, theta: &MlpParams, s: f64) {
        for (g, p) in self.layers.iter_mut().zip(&theta.layers) {
            g.weight += &p.weight * s;
            g.bias += &p.bias * s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .all(|v| v.is_finite())
    }
}

/// Single-sample convenience wrapper around the batched reverse pass.
pub fn mlp_backward(
    theta: &MlpParams,
    x: &[f64],
    upstream: &[f64],
) -> Result<(MlpGrads, DVector<f64>)> {
    let cache = theta.forward_batch(&DMatrix::from_column_slice(x.len(), 1, x))?;
    let up = DMatrix::from_column_slice(upstream.len(), 1, upstream);
    let (g, dx) = theta.backward_batch(&cache, &up)?;
    Ok((g, dx.column(0).into_owned()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for one flat parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            first: vec![0.0; len],
            second: vec![0.0; len],
        }
    }

    /// One bias-corrected Adam update of `params` in place. `step` is the
    /// 1-based step count after this update.
    pub fn update(
        &mut self,
        cfg: &AdamConfig,
        step: u64,
        lr: f64,
        l2: f64,
        params: &mut [f64],
        grads: &[f64],
    ) {
        let c1 = 1.0 - cfg.beta1.powf(step as f64);
        let c2 = 1.0 - cfg.beta2.powf(step as f64);
        for i in 0..params.len() {
            let g = grads[i] + l2 * params[i];
            self.first[i] = cfg.beta1 * self.first[i] + (1.0 - cfg.beta1) * g;
            self.second[i] = cfg.beta2 * self.second[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.first[i] / c1;
            let v_hat = self.second[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    /// Weight and bias moments per layer, in layer order.
    pub moments: Vec<(Moments, Moments)>,
    pub step: u64,
}

impl AdamState {
    pub fn new(theta: &MlpParams) -> Self {
        Self {
            config: AdamConfig::default(),
            moments: theta
                .layers
                .iter()
                .map(|l| (Moments::zeros(l.weight.len()), Moments::zeros(l.bias.len())))
                .collect(),
            step: 0,
        }
    }

    /// In-place update; rejects non-finite gradients without touching
    /// `theta` or the moments.
    pub fn apply(&mut self, theta: &mut MlpParams, grads: &MlpGrads, lr: f64, l2: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(MakoError::InvalidArgument(format!("learning rate {lr}")));
        }
        if grads.layers.len() != theta.layers.len() || self.moments.len() != theta.layers.len() {
            return Err(shape_err("adam_step", theta.layers.len(), grads.layers.len()));
        }
        if !grads.is_finite() {
            return Err(MakoError::NonFinite("network gradient"));
        }
        self.step += 1;
        let cfg = self.config;
        for ((layer, g), (mw, mb)) in theta
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.moments)
        {
            mw.update(&cfg, self.step, lr, l2, layer.weight.as_mut_slice(), g.weight.as_slice());
            mb.update(&cfg, self.step, lr, l2, layer.bias.as_mut_slice(), g.bias.as_slice());
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::apply`].
pub fn adam_step(
    theta: &MlpParams,
    grads: &MlpGrads,
    state: &AdamState,
    lr: f64,
    l2: f64,
) -> Result<(MlpParams, AdamState)> {
    let mut theta = theta.clone();
    let mut state = state.clone();
    state.apply(&mut theta, grads, lr, l2)?;
    Ok((theta, state))
}
