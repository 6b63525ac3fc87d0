//! Fully-connected networks with hand-written reverse mode and Adam.
//!
//! Batches are row-major matrices, one sample per row. Layer `l` computes
//! `f^(l) = act(f^(l−1) Wᵀ + b)` with `W` stored `outputs × inputs`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::rng::RngStream;

const LEAKY_SLOPE: f64 = 0.2;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::SizeMismatch(rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_cloud(cloud: &PointCloud) -> Self {
        Matrix {
            rows: cloud.len(),
            cols: cloud.dim(),
            data: cloud.as_flat().to_vec(),
        }
    }

    pub fn to_cloud(&self) -> Result<PointCloud> {
        PointCloud::from_flat(self.cols, self.data.clone())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Rows `indices` stacked in order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// `self` on top of `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                got: other.cols,
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// Slope 0.2 for negative inputs.
    LeakyRelu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Identity => x,
        }
    }

    /// Derivative from the pre-activation `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => f64::from(u8::from(x > 0.0)),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }

    fn relu_family(self) -> bool {
        matches!(self, Activation::Relu | Activation::LeakyRelu)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    /// `outputs × inputs`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        LayerSpec {
            inputs: self.inputs,
            outputs: self.outputs,
            activation: self.activation,
        }
    }
}

/// Multilayer perceptron; also its JSON checkpoint format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
    /// Seed the parameters were initialized from, if any.
    seed: Option<u64>,
}

/// Per-layer values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Matrix,
    pub pre_activations: Vec<Matrix>,
    /// `f^(l)` for every layer; the last entry is the network output.
    pub outputs: Vec<Matrix>,
}

/// Gradients of a scalar loss with respect to every parameter and the input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub input: Matrix,
}

impl GradientBundle {
    pub fn zeros_like(net: &Mlp, batch: usize) -> Self {
        GradientBundle {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            input: Matrix::zeros(batch, net.in_dim()),
        }
    }

    /// `self += scale · other` over parameter gradients (input gradients are
    /// added too when the shapes agree).
    pub fn accumulate(&mut self, other: &GradientBundle, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
        if self.input.rows == other.input.rows && self.input.cols == other.input.cols {
            self.input
                .data
                .iter_mut()
                .zip(&other.input.data)
                .for_each(|(x, y)| *x += scale * y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).flatten().all(|v| v.is_finite())
    }
}

impl Mlp {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("network layers"));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.inputs == 0 || l.outputs == 0 {
                return Err(Error::invalid(format!("layer {k} has a zero dimension")));
            }
            if l.weights.len() != l.inputs * l.outputs {
                return Err(Error::SizeMismatch(l.inputs * l.outputs, l.weights.len()));
            }
            if l.bias.len() != l.outputs {
                return Err(Error::SizeMismatch(l.outputs, l.bias.len()));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {k} parameters")));
            }
            if k > 0 && layers[k - 1].outputs != l.inputs {
                return Err(Error::DimensionMismatch {
                    expected: layers[k - 1].outputs,
                    got: l.inputs,
                });
            }
        }
        Ok(Mlp { layers, seed: None })
    }

    /// He-normal weights for relu-family layers, Xavier-normal otherwise;
    /// zero biases.
    pub fn init(specs: &[LayerSpec], rng: &RngStream) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        for (k, s) in specs.iter().enumerate() {
            let mut r = rng.split(k as u64);
            let std = if s.activation.relu_family() {
                (2.0 / s.inputs as f64).sqrt()
            } else {
                (2.0 / (s.inputs + s.outputs) as f64).sqrt()
            };
            layers.push(Layer {
                inputs: s.inputs,
                outputs: s.outputs,
                activation: s.activation,
                weights: (0..s.inputs * s.outputs).map(|_| std * r.normal()).collect(),
                bias: vec![0.0; s.outputs],
            });
        }
        let mut net = Mlp::from_layers(layers)?;
        net.seed = Some(rng.seed());
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardTrace)> {
        if x.cols != self.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim(),
                got: x.cols,
            });
        }
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut outputs: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let input = outputs.last().unwrap_or(x);
            let z = affine(l, input);
            let y = Matrix {
                rows: z.rows,
                cols: z.cols,
                data: z.data.iter().map(|&v| l.activation.apply(v)).collect(),
            };
            pre_activations.push(z);
            outputs.push(y);
        }
        let out = outputs.last().expect("at least one layer").clone();
        Ok((
            out,
            ForwardTrace {
                input: x.clone(),
                pre_activations,
                outputs,
            },
        ))
    }

    /// Output only.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.0)
    }

    /// Reverse mode from a gradient on the output.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &Matrix) -> Result<GradientBundle> {
        let mut injected: Vec<Option<&Matrix>> = vec![None; self.layers.len()];
        injected[self.layers.len() - 1] = Some(upstream);
        self.backward_injected(trace, &injected)
    }

    /// Reverse mode where `injected[l]`, when present, is added to the
    /// gradient flowing into the output of layer `l`. This covers losses on
    /// intermediate features.
    pub fn backward_injected(
        &self,
        trace: &ForwardTrace,
        injected: &[Option<&Matrix>],
    ) -> Result<GradientBundle> {
        let depth = self.layers.len();
        if trace.outputs.len() != depth || trace.pre_activations.len() != depth || injected.len() != depth {
            return Err(Error::invalid("trace or injections do not match the network depth"));
        }
        let batch = trace.input.rows;
        for (l, layer) in self.layers.iter().enumerate() {
            let out = &trace.outputs[l];
            if out.rows != batch || out.cols != layer.outputs {
                return Err(Error::invalid(format!("trace layer {l} has the wrong shape")));
            }
            if let Some(g) = injected[l] {
                if g.rows != batch || g.cols != layer.outputs {
                    return Err(Error::invalid(format!("injected gradient {l} has the wrong shape")));
                }
            }
        }
        let mut grads = GradientBundle::zeros_like(self, batch);
        let mut carry: Option<Matrix> = None;
        for l in (0..depth).rev() {
            let layer = &self.layers[l];
            let mut delta = match (carry.take(), injected[l]) {
                (Some(mut c), Some(g)) => {
                    c.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b);
                    c
                }
                (Some(c), None) => c,
                (None, Some(g)) => g.clone(),
                (None, None) => Matrix::zeros(batch, layer.outputs),
            };
            let (z, y) = (&trace.pre_activations[l], &trace.outputs[l]);
            for k in 0..delta.data.len() {
                delta.data[k] *= layer.activation.derivative(z.data[k], y.data[k]);
            }
            let input = if l == 0 { &trace.input } else { &trace.outputs[l - 1] };
            let (gw, gb) = (&mut grads.weights[l], &mut grads.biases[l]);
            let mut dx = Matrix::zeros(batch, layer.inputs);
            for r in 0..batch {
                let xr = input.row(r);
                let dr = &delta.data[r * layer.outputs..(r + 1) * layer.outputs];
                let dxr = &mut dx.data[r * layer.inputs..(r + 1) * layer.inputs];
                for (o, &d) in dr.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    let wrow = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    let grow = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                    for i in 0..layer.inputs {
                        grow[i] += d * xr[i];
                        dxr[i] += d * wrow[i];
                    }
                }
            }
            carry = Some(dx);
        }
        grads.input = carry.expect("at least one layer");
        Ok(grads)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Mlp = serde_json::from_str(text)?;
        let seed = raw.seed;
        let mut net = Mlp::from_layers(raw.layers)?;
        net.seed = seed;
        Ok(net)
    }
}

fn affine(l: &Layer, x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows, l.outputs);
    for r in 0..x.rows {
        let xr = x.row(r);
        let orow = &mut out.data[r * l.outputs..(r + 1) * l.outputs];
        for (o, v) in orow.iter_mut().enumerate() {
            let wrow = &l.weights[o * l.inputs..(o + 1) * l.inputs];
            *v = l.bias[o] + wrow.iter().zip(xr).map(|(w, x)| w * x).sum::<f64>();
        }
    }
    out
}

/// Adam moments for every parameter of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        let n = net.parameter_count();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One Adam descent step on `net` with bias-corrected moments.
pub fn adam_step(net: &mut Mlp, state: &mut AdamState, grads: &GradientBundle) -> Result<()> {
    if state.m.len() != net.parameter_count()
        || grads.weights.len() != net.layers.len()
        || grads.biases.len() != net.layers.len()
    {
        return Err(Error::invalid("optimizer state or gradients do not match the network"));
    }
    for (l, layer) in net.layers.iter().enumerate() {
        if grads.weights[l].len() != layer.weights.len() || grads.biases[l].len() != layer.bias.len() {
            return Err(Error::invalid(format!("gradient shapes differ at layer {l}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let mut k = 0;
    for (l, layer) in net.layers.iter_mut().enumerate() {
        let params = layer.weights.iter_mut().chain(layer.bias.iter_mut());
        let gs = grads.weights[l].iter().chain(&grads.biases[l]);
        for (p, &g) in params.zip(gs) {
            let m = &mut state.m[k];
            let v = &mut state.v[k];
            *m = state.beta1 * *m + (1.0 - state.beta1) * g;
            *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
            *p -= state.lr * (*m / c1) / ((*v / c2).sqrt() + state.eps);
            k += 1;
        }
    }
    Ok(())
}
