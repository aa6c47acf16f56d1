//! Dense feed-forward Q-network with hand-written backpropagation and Adam.
//!
//! A network maps a state in `R^d` to one value per action. Hidden layers use
//! the configured activation (ReLU by default); the output layer is affine.
//!
//! # Checkpoint format
//!
//! Checkpoints are UTF-8 text, one record per line:
//!
//! ```text
//! rdqn-qnetwork 1
//! activation relu
//! layers 1 32 32 3
//! weights 0 <out*in values, row-major, output-major>
//! biases 0 <out values>
//! weights 1 ...
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting, so a
//! save/load cycle reproduces the parameters bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &str = "rdqn-qnetwork";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
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

    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::input(format!("unknown activation {other:?}"))),
        }
    }
}

/// One affine map `x -> W x + b` with `W` stored row-major (`outputs` rows).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    /// He-uniform weights, zero biases.
    pub fn he_uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Dense {
            inputs,
            outputs,
            weights,
            biases: vec![0.0; outputs],
        }
    }

    #[inline]
    fn apply_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.inputs).zip(&self.biases).map(
            |(row, b)| row.iter().zip(x).fold(*b, |acc, (w, xi)| acc + w * xi),
        ));
    }
}

/// Per-layer activations recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `inputs[l]` is the input fed to layer `l` (post-activation of `l - 1`).
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation values of every layer; the last entry is the network output.
    pub pre_activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.pre_activations.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Reusable buffers for allocation-free forward passes.
#[derive(Debug, Default, Clone)]
pub struct ForwardBuffers {
    a: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    layers: Vec<Dense>,
    activation: Activation,
}

impl QNetwork {
    /// Randomly initialised network with `layer_sizes = [d, h_1, ..., |A|]`.
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let layers = layer_sizes
            .windows(2)
            .map(|w| Dense::he_uniform(w[0], w[1], rng))
            .collect();
        Ok(QNetwork { layers, activation })
    }

    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let layers = layer_sizes
            .windows(2)
            .map(|w| Dense::zeros(w[0], w[1]))
            .collect();
        Ok(QNetwork { layers, activation })
    }

    pub fn from_layers(layers: Vec<Dense>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::input("network needs at least one layer"));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.inputs == 0 || layer.outputs == 0 {
                return Err(Error::input(format!("layer {i} has a zero dimension")));
            }
            if layer.weights.len() != layer.inputs * layer.outputs || layer.biases.len() != layer.outputs {
                return Err(Error::input(format!("layer {i} parameter shapes do not match its dimensions")));
            }
            if i > 0 && layers[i - 1].outputs != layer.inputs {
                return Err(Error::input(format!(
                    "layer {i} expects {} inputs but layer {} emits {}",
                    layer.inputs,
                    i - 1,
                    layers[i - 1].outputs
                )));
            }
        }
        Ok(QNetwork { layers, activation })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs)
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn num_actions(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    fn check_input(&self, state: &[f64]) -> Result<()> {
        if state.len() != self.input_dim() {
            return Err(Error::input(format!(
                "state has dimension {} but the network expects {}",
                state.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// All action values for `state`.
    pub fn forward(&self, state: &[f64]) -> Result<Vec<f64>> {
        let mut buffers = ForwardBuffers::default();
        Ok(self.forward_with(state, &mut buffers)?.to_vec())
    }

    pub fn forward_with<'b>(&self, state: &[f64], buffers: &'b mut ForwardBuffers) -> Result<&'b [f64]> {
        self.check_input(state)?;
        let ForwardBuffers { a, b } = buffers;
        a.clear();
        a.extend_from_slice(state);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            layer.apply_into(a, b);
            if l < last {
                for z in b.iter_mut() {
                    *z = self.activation.apply(*z);
                }
            }
            std::mem::swap(a, b);
        }
        Ok(a.as_slice())
    }

    /// `max_b Q(state, b)`.
    pub fn max_value_with(&self, state: &[f64], buffers: &mut ForwardBuffers) -> Result<f64> {
        let q = self.forward_with(state, buffers)?;
        Ok(q.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }

    pub fn forward_trace(&self, state: &[f64]) -> Result<ForwardTrace> {
        self.check_input(state)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = state.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.apply_into(&x, &mut z);
            let next = if l < last {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                Vec::new()
            };
            inputs.push(std::mem::replace(&mut x, next));
            pre.push(z);
        }
        Ok(ForwardTrace {
            inputs,
            pre_activations: pre,
        })
    }

    /// Exact parameter gradient of `sum_k <output_grads[k], Q(states[k])>`.
    ///
    /// With `output_grads[k] = dL/dQ(states[k])` this is `dL/dθ` for any loss
    /// that depends on the parameters only through the outputs.
    pub fn backward(&self, states: &[Vec<f64>], output_grads: &[Vec<f64>]) -> Result<Gradients> {
        if states.len() != output_grads.len() {
            return Err(Error::input(format!(
                "{} states but {} output gradients",
                states.len(),
                output_grads.len()
            )));
        }
        let mut grads = Gradients::zeros_like(self);
        for (state, out_grad) in states.iter().zip(output_grads) {
            if out_grad.len() != self.num_actions() {
                return Err(Error::input(format!(
                    "output gradient has length {} but the network has {} outputs",
                    out_grad.len(),
                    self.num_actions()
                )));
            }
            let trace = self.forward_trace(state)?;
            self.accumulate(&trace, out_grad, &mut grads);
        }
        Ok(grads)
    }

    /// Adds the gradient for one recorded forward pass into `grads`.
    pub fn accumulate(&self, trace: &ForwardTrace, out_grad: &[f64], grads: &mut Gradients) {
        let mut delta = out_grad.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &trace.inputs[l];
            let g = &mut grads.layers[l];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.biases[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (w, &x) in row.iter_mut().zip(input) {
                    *w += d * x;
                }
            }
            if l == 0 {
                break;
            }
            let prev_pre = &trace.pre_activations[l - 1];
            let mut next = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (acc, &w) in next.iter_mut().zip(row) {
                    *acc += w * d;
                }
            }
            for (v, &z) in next.iter_mut().zip(prev_pre) {
                *v *= self.activation.derivative(z);
            }
            delta = next;
        }
    }

    /// Independent copy for use as a target network.
    pub fn sync_target(&self) -> QNetwork {
        self.clone()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Flat parameter view: per layer, weights then biases.
    pub fn parameter(&self, index: usize) -> f64 {
        let (l, is_bias, i) = locate(self.layers.iter().map(|l| (l.weights.len(), l.biases.len())), index);
        if is_bias {
            self.layers[l].biases[i]
        } else {
            self.layers[l].weights[i]
        }
    }

    pub fn set_parameter(&mut self, index: usize, value: f64) {
        let (l, is_bias, i) = locate(self.layers.iter().map(|l| (l.weights.len(), l.biases.len())), index);
        if is_bias {
            self.layers[l].biases[i] = value;
        } else {
            self.layers[l].weights[i] = value;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        let _ = writeln!(s, "activation {}", self.activation.name());
        let sizes: Vec<String> = self.layer_sizes().iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "layers {}", sizes.join(" "));
        for (l, layer) in self.layers.iter().enumerate() {
            let _ = write!(s, "weights {l}");
            for w in &layer.weights {
                let _ = write!(s, " {w:?}");
            }
            s.push('\n');
            let _ = write!(s, "biases {l}");
            for b in &layer.biases {
                let _ = write!(s, " {b:?}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let bad = |m: String| Error::input(format!("malformed checkpoint: {m}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let activation = match lines.next().map(|l| l.split_whitespace().collect::<Vec<_>>()) {
            Some(p) if p.len() == 2 && p[0] == "activation" => p[1].parse()?,
            _ => return Err(bad("missing activation record".into())),
        };
        let sizes: Vec<usize> = match lines.next() {
            Some(l) if l.starts_with("layers ") => l
                .split_whitespace()
                .skip(1)
                .map(|v| v.parse().map_err(|_| bad(format!("bad layer size {v:?}"))))
                .collect::<Result<_>>()?,
            _ => return Err(bad("missing layers record".into())),
        };
        validate_sizes(&sizes)?;
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for (l, w) in sizes.windows(2).enumerate() {
            let mut read = |tag: &str, expected: usize| -> Result<Vec<f64>> {
                let line = lines.next().ok_or_else(|| bad(format!("missing {tag} {l}")))?;
                let mut it = line.split_whitespace();
                if it.next() != Some(tag) || it.next() != Some(l.to_string().as_str()) {
                    return Err(bad(format!("expected `{tag} {l}` record")));
                }
                let vals: Vec<f64> = it
                    .map(|v| v.parse().map_err(|_| bad(format!("bad number {v:?}"))))
                    .collect::<Result<_>>()?;
                if vals.len() != expected {
                    return Err(bad(format!("{tag} {l} has {} values, expected {expected}", vals.len())));
                }
                Ok(vals)
            };
            let weights = read("weights", w[0] * w[1])?;
            let biases = read("biases", w[1])?;
            layers.push(Dense {
                inputs: w[0],
                outputs: w[1],
                weights,
                biases,
            });
        }
        QNetwork::from_layers(layers, activation)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        QNetwork::from_checkpoint_str(&text).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(Error::input("layer_sizes needs an input and an output size"));
    }
    if sizes.contains(&0) {
        return Err(Error::input("layer sizes must be positive"));
    }
    Ok(())
}

fn locate(shapes: impl Iterator<Item = (usize, usize)>, mut index: usize) -> (usize, bool, usize) {
    for (l, (nw, nb)) in shapes.enumerate() {
        if index < nw {
            return (l, false, index);
        }
        index -= nw;
        if index < nb {
            return (l, true, index);
        }
        index -= nb;
    }
    panic!("parameter index out of range");
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Gradient with the same layout as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

impl Gradients {
    pub fn zeros_like(net: &QNetwork) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    pub fn get(&self, index: usize) -> f64 {
        let (l, is_bias, i) = locate(self.layers.iter().map(|l| (l.weights.len(), l.biases.len())), index);
        if is_bias {
            self.layers[l].biases[i]
        } else {
            self.layers[l].weights[i]
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.biases.iter_mut()).for_each(|v| *v *= factor);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|&v| v == 0.0))
    }

    fn first_non_finite(&self) -> Option<(usize, &'static str, usize)> {
        for (l, g) in self.layers.iter().enumerate() {
            if let Some(i) = g.weights.iter().position(|v| !v.is_finite()) {
                return Some((l, "weight", i));
            }
            if let Some(i) = g.biases.iter().position(|v| !v.is_finite()) {
                return Some((l, "bias", i));
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<LayerGradient>,
    second: Vec<LayerGradient>,
}

impl AdamState {
    pub fn new(net: &QNetwork, config: AdamConfig) -> Self {
        let zeros = Gradients::zeros_like(net).layers;
        AdamState {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One bias-corrected Adam update of `net` along `-grads`.
    ///
    /// Rejects non-finite gradients before touching any parameter.
    pub fn step(&mut self, net: &mut QNetwork, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != net.layers.len()
            || grads.layers.iter().zip(&net.layers).any(|(g, l)| {
                g.weights.len() != l.weights.len() || g.biases.len() != l.biases.len()
            })
        {
            return Err(Error::input("gradient shape does not match the network"));
        }
        if let Some((layer, kind, index)) = grads.first_non_finite() {
            return Err(Error::NonFiniteGradient { layer, kind, index });
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((layer, g), m), v) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
                for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                }
            };
            update(&mut layer.weights, &g.weights, &mut m.weights, &mut v.weights);
            update(&mut layer.biases, &g.biases, &mut m.biases, &mut v.biases);
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(net: &mut QNetwork, grads: &Gradients, opt: &mut AdamState) -> Result<()> {
    opt.step(net, grads)
}
