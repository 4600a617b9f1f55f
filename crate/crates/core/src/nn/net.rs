use std::ops::{Deref, DerefMut};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from};

/// Redraw budget per unit in [`DenseNet::init_probed`].
pub const PROBE_ATTEMPTS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative at `z`; the ReLU subgradient at 0 is taken as 0.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerShape {
    pub fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

/// Layer list of a dense network.
///
/// Flat parameter layout is layer-major; within a layer the weight matrix
/// (`outputs x inputs`, row-major) comes first, then the bias vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    layers: Vec<LayerShape>,
}

impl Architecture {
    pub fn new(layers: Vec<LayerShape>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("architecture needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::config(format!(
                    "layer widths do not chain: {} -> {}",
                    pair[0].outputs, pair[1].inputs
                )));
            }
        }
        if layers.iter().any(|l| l.inputs == 0 || l.outputs == 0) {
            return Err(Error::config("zero-width layer"));
        }
        Ok(Architecture { layers })
    }

    /// Two-hidden-layer autoencoder with halving widths and a mirrored
    /// decoder; ReLU after every layer. Only the two feature widths are
    /// supported.
    pub fn autoencoder(input_dim: usize) -> Result<Self> {
        Self::autoencoder_with_output(input_dim, Activation::Relu)
    }

    /// [`Architecture::autoencoder`] with a chosen activation on the output
    /// layer only.
    pub fn autoencoder_with_output(input_dim: usize, output: Activation) -> Result<Self> {
        if input_dim != 27 && input_dim != 69 {
            return Err(Error::config(format!(
                "unsupported autoencoder input width {input_dim} (expected 27 or 69)"
            )));
        }
        let h1 = input_dim / 2;
        let h2 = h1 / 2;
        let widths = [input_dim, h1, h2, h1, input_dim];
        let layers = widths
            .windows(2)
            .map(|w| LayerShape {
                inputs: w[0],
                outputs: w[1],
                activation: Activation::Relu,
            })
            .collect::<Vec<_>>();
        let mut layers = layers;
        layers.last_mut().expect("four layers").activation = output;
        Architecture::new(layers)
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.outputs));
        w
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerShape::param_count).sum()
    }

    /// Start offset of each layer in the flat vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for l in &self.layers {
            off.push(acc);
            acc += l.param_count();
        }
        off
    }

    /// Whether flat index `i` addresses a weight (as opposed to a bias).
    pub fn is_weight(&self, i: usize) -> bool {
        let mut acc = 0;
        for l in &self.layers {
            if i < acc + l.inputs * l.outputs {
                return true;
            }
            acc += l.param_count();
            if i < acc {
                return false;
            }
        }
        false
    }

    /// Layer index that owns flat index `i`.
    pub fn layer_of(&self, i: usize) -> usize {
        let mut acc = 0;
        for (k, l) in self.layers.iter().enumerate() {
            acc += l.param_count();
            if i < acc {
                return k;
            }
        }
        self.layers.len() - 1
    }
}

/// A flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FlatParams(pub Vec<f64>);

impl FlatParams {
    pub fn zeros(n: usize) -> Self {
        FlatParams(vec![0.0; n])
    }

    pub fn sub(&self, other: &FlatParams) -> FlatParams {
        FlatParams(self.iter().zip(other.iter()).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &FlatParams) -> FlatParams {
        FlatParams(self.iter().zip(other.iter()).map(|(a, b)| a + b).collect())
    }

    pub fn scale(&self, f: f64) -> FlatParams {
        FlatParams(self.iter().map(|a| a * f).collect())
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &FlatParams) {
        for (a, b) in self.0.iter_mut().zip(x.iter()) {
            *a += alpha * b;
        }
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.iter().position(|v| !v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl Deref for FlatParams {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for FlatParams {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Dense feed-forward network backed by one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    arch: Architecture,
    params: FlatParams,
}

pub fn mse(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    if x.is_empty() {
        return 0.0;
    }
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64
}

impl DenseNet {
    /// Uniform(-a, a) weights with `a = sqrt(6 / (fan_in + fan_out))`, zero
    /// biases.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let mut params = Vec::with_capacity(arch.param_count());
        for l in arch.layers() {
            let a = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
            for _ in 0..l.inputs * l.outputs {
                params.push(rng.random_range(-a..a));
            }
            params.extend(std::iter::repeat_n(0.0, l.outputs));
        }
        DenseNet {
            arch,
            params: FlatParams(params),
        }
    }

    /// Same draw as [`DenseNet::init`], then any ReLU unit that is inactive
    /// (pre-activation <= 0) on every row of some probe group gets its weight
    /// row redrawn from the same distribution, layer by layer, up to
    /// `PROBE_ATTEMPTS` times; such a unit never receives gradient from that
    /// group. Output units are checked only on rows where their own target is
    /// non-zero, treating the probe as autoencoder input. When the budget runs
    /// out the draw failing the fewest groups is kept. Returns the net and the
    /// number of rows redrawn.
    pub fn init_probed(arch: Architecture, seed: u64, groups: &[Vec<&[f64]>]) -> Result<(Self, usize)> {
        let mut net = Self::init(arch, seed);
        let mut probe: Vec<&[f64]> = Vec::new();
        let mut group_of = Vec::new();
        for (g, rows) in groups.iter().enumerate() {
            for x in rows {
                net.check_input(x)?;
                probe.push(x);
                group_of.push(g);
            }
        }
        if probe.is_empty() {
            return Ok((net, 0));
        }
        let mut rng = rng_from(derive_seed(seed, "redraw"));
        let mut redrawn = 0;
        let mut inputs: Vec<Vec<f64>> = probe.iter().map(|x| x.to_vec()).collect();
        let mut off = 0;
        let n_layers = net.arch.layers().len();
        for (k, l) in net.arch.layers().to_vec().into_iter().enumerate() {
            let a = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
            let z_of = |p: &[f64], o: usize, x: &[f64]| -> f64 {
                let row = &p[off + o * l.inputs..off + (o + 1) * l.inputs];
                row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + p[off + l.inputs * l.outputs + o]
            };
            let last = k + 1 == n_layers;
            if l.activation == Activation::Relu {
                for o in 0..l.outputs {
                    let eligible = |i: usize| !last || probe[i][o] > 0.0;
                    let failing = |p: &[f64]| {
                        let mut seen = vec![false; groups.len()];
                        let mut alive = vec![false; groups.len()];
                        for i in (0..inputs.len()).filter(|&i| eligible(i)) {
                            seen[group_of[i]] = true;
                            alive[group_of[i]] |= z_of(p, o, &inputs[i]) > 0.0;
                        }
                        seen.iter().zip(&alive).filter(|(s, a)| **s && !**a).count()
                    };
                    let rows = off + o * l.inputs..off + (o + 1) * l.inputs;
                    let mut fails = failing(&net.params);
                    let mut best = (fails, net.params[rows.clone()].to_vec());
                    let mut attempt = 0;
                    while fails > 0 && attempt < PROBE_ATTEMPTS {
                        for w in &mut net.params[rows.clone()] {
                            *w = rng.random_range(-a..a);
                        }
                        redrawn += 1;
                        attempt += 1;
                        fails = failing(&net.params);
                        if fails < best.0 {
                            best = (fails, net.params[rows.clone()].to_vec());
                        }
                    }
                    net.params[rows].copy_from_slice(&best.1);
                }
            }
            inputs = inputs
                .iter()
                .map(|x| (0..l.outputs).map(|o| l.activation.apply(z_of(&net.params, o, x))).collect())
                .collect();
            off += l.param_count();
        }
        Ok((net, redrawn))
    }

    pub fn from_flat(arch: Architecture, params: FlatParams) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(Error::Dimension {
                expected: arch.param_count(),
                actual: params.len(),
            });
        }
        Ok(DenseNet { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &FlatParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut FlatParams {
        &mut self.params
    }

    pub fn flatten(&self) -> FlatParams {
        self.params.clone()
    }

    pub fn set_params(&mut self, params: &FlatParams) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Dimension {
                expected: self.params.len(),
                actual: params.len(),
            });
        }
        self.params.0.copy_from_slice(params);
        Ok(())
    }

    /// Rounds every parameter through `f32`, matching what a checkpoint holds.
    pub fn round_to_f32(&mut self) {
        for p in self.params.0.iter_mut() {
            *p = *p as f32 as f64;
        }
    }

    pub fn sum_squared_weights(&self) -> f64 {
        let mut total = 0.0;
        let mut off = 0;
        for l in self.arch.layers() {
            let nw = l.inputs * l.outputs;
            total += self.params[off..off + nw].iter().map(|w| w * w).sum::<f64>();
            off += l.param_count();
        }
        total
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_dim() {
            return Err(Error::Dimension {
                expected: self.arch.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Runs the network. Keeps pre-activations and activations when the
    /// caller needs them for backpropagation.
    fn propagate(&self, x: &[f64], pre: &mut Vec<Vec<f64>>, act: &mut Vec<Vec<f64>>) {
        pre.clear();
        act.clear();
        act.push(x.to_vec());
        let mut off = 0;
        for l in self.arch.layers() {
            let w = &self.params[off..off + l.inputs * l.outputs];
            let b = &self.params[off + l.inputs * l.outputs..off + l.param_count()];
            let input = act.last().expect("input pushed");
            let mut z = Vec::with_capacity(l.outputs);
            for o in 0..l.outputs {
                let row = &w[o * l.inputs..(o + 1) * l.inputs];
                let s: f64 = row.iter().zip(input).map(|(a, b)| a * b).sum();
                z.push(s + b[o]);
            }
            let a = z.iter().map(|&v| l.activation.apply(v)).collect();
            pre.push(z);
            act.push(a);
            off += l.param_count();
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let (mut pre, mut act) = (Vec::new(), Vec::new());
        self.propagate(x, &mut pre, &mut act);
        Ok(act.pop().expect("output layer"))
    }

    /// Reconstruction MSE of one row.
    pub fn reconstruction_error(&self, x: &[f64]) -> Result<f64> {
        let y = self.forward(x)?;
        Ok(mse(x, &y))
    }

    /// Batch-mean reconstruction error plus `l2 * sum(w^2)` over weight
    /// matrices (biases are not regularized).
    pub fn loss(&self, batch: &[&[f64]], l2: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::data("empty batch"));
        }
        let mut total = 0.0;
        for x in batch {
            total += self.reconstruction_error(x)?;
        }
        Ok(total / batch.len() as f64 + l2 * self.sum_squared_weights())
    }

    /// Loss and its exact gradient over `batch`.
    pub fn gradient(&self, batch: &[&[f64]], l2: f64) -> Result<(f64, FlatParams)> {
        if batch.is_empty() {
            return Err(Error::data("empty batch"));
        }
        let layers = self.arch.layers();
        let offsets = self.arch.offsets();
        let mut grad = vec![0.0; self.params.len()];
        let (mut pre, mut act) = (Vec::new(), Vec::new());
        let n_out = self.arch.output_dim() as f64;
        let scale = 2.0 / (n_out * batch.len() as f64);
        let mut data_loss = 0.0;

        for x in batch {
            self.check_input(x)?;
            self.propagate(x, &mut pre, &mut act);
            let out = act.last().expect("output");
            data_loss += mse(x, out);
            let last = layers.len() - 1;
            let mut delta: Vec<f64> = out
                .iter()
                .zip(x.iter())
                .zip(&pre[last])
                .map(|((y, t), z)| scale * (y - t) * layers[last].activation.derivative(*z))
                .collect();
            for k in (0..layers.len()).rev() {
                let l = &layers[k];
                let off = offsets[k];
                let input = &act[k];
                let nw = l.inputs * l.outputs;
                for o in 0..l.outputs {
                    let d = delta[o];
                    if d != 0.0 {
                        let g = &mut grad[off + o * l.inputs..off + (o + 1) * l.inputs];
                        for (gi, xi) in g.iter_mut().zip(input) {
                            *gi += d * xi;
                        }
                    }
                    grad[off + nw + o] += d;
                }
                if k > 0 {
                    let w = &self.params[off..off + nw];
                    let prev = &layers[k - 1];
                    let mut next = vec![0.0; l.inputs];
                    for o in 0..l.outputs {
                        let d = delta[o];
                        if d != 0.0 {
                            for (ni, wi) in next.iter_mut().zip(&w[o * l.inputs..(o + 1) * l.inputs]) {
                                *ni += d * wi;
                            }
                        }
                    }
                    for (ni, z) in next.iter_mut().zip(&pre[k - 1]) {
                        *ni *= prev.activation.derivative(*z);
                    }
                    delta = next;
                }
            }
        }

        if l2 != 0.0 {
            for (k, l) in layers.iter().enumerate() {
                let off = offsets[k];
                for i in off..off + l.inputs * l.outputs {
                    grad[i] += 2.0 * l2 * self.params[i];
                }
            }
        }
        let loss = data_loss / batch.len() as f64 + l2 * self.sum_squared_weights();
        Ok((loss, FlatParams(grad)))
    }
}
