//! Feed-forward chains of dense layers with exact reverse-mode gradients.
//!
//! A [`DenseNet`] is an ordered list of affine maps, each followed by an
//! element-wise (or, for the last layer only, softmax) activation. Weights
//! are stored row-major with shape `(rows, cols) = (out, in)`, which is also
//! the on-disk checkpoint layout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
    Identity,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl Activation {
    fn apply(self, z: &mut Vec<f64>) {
        match self {
            Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Sigmoid => z.iter_mut().for_each(|v| *v = sigmoid(*v)),
            Activation::Softmax => *z = softmax(z),
            Activation::Identity => {}
        }
    }

    /// Maps an upstream gradient on the activation output `y` to a gradient on
    /// the pre-activation, in place.
    fn backprop(self, y: &[f64], g: &mut [f64]) {
        match self {
            Activation::Relu => {
                for (gi, &yi) in g.iter_mut().zip(y) {
                    if yi <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            Activation::Sigmoid => {
                for (gi, &yi) in g.iter_mut().zip(y) {
                    *gi *= yi * (1.0 - yi);
                }
            }
            Activation::Softmax => {
                let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                for (gi, &yi) in g.iter_mut().zip(y) {
                    *gi = yi * (*gi - dot);
                }
            }
            Activation::Identity => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub act: Activation,
}

impl Layer {
    /// Uniform He init for ReLU layers, Xavier otherwise; zero bias.
    pub fn init<R: Rng + ?Sized>(cols: usize, rows: usize, act: Activation, rng: &mut R) -> Self {
        let limit = match act {
            Activation::Relu => (6.0 / cols as f64).sqrt(),
            _ => (6.0 / (cols + rows) as f64).sqrt(),
        };
        let w = (0..rows * cols)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Layer {
            rows,
            cols,
            w,
            b: vec![0.0; rows],
            act,
        }
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.b.clone();
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        out
    }
}

/// Recorded activations of one forward pass: `values[0]` is the input and
/// `values[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct GradTape {
    values: Vec<Vec<f64>>,
}

impl GradTape {
    pub fn input(&self) -> &[f64] {
        &self.values[0]
    }

    pub fn output(&self) -> &[f64] {
        self.values.last().expect("tape always holds the input")
    }
}

/// Parameter gradients with the same layout as the network they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    w: vec![0.0; l.w.len()],
                    b: vec![0.0; l.b.len()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w.iter_mut().zip(&b.w).for_each(|(x, y)| *x += y);
            a.b.iter_mut().zip(&b.b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.w.iter_mut().for_each(|x| *x *= s);
            l.b.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Flattened view in the same order as [`DenseNet::params`].
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(&l.b).copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
}

impl DenseNet {
    /// Builds a chain from `input` through each `(width, activation)` pair.
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        spec: &[(usize, Activation)],
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.len());
        let mut cols = input;
        for &(rows, act) in spec {
            layers.push(Layer::init(cols, rows, act, rng));
            cols = rows;
        }
        let net = DenseNet { layers };
        net.validate()?;
        Ok(net)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let net = DenseNet { layers };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::contract("network has no layers"));
        }
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            if l.rows == 0 || l.cols == 0 {
                return Err(Error::contract(format!("layer {i} has a zero dimension")));
            }
            if l.w.len() != l.rows * l.cols || l.b.len() != l.rows {
                return Err(Error::contract(format!(
                    "layer {i}: weight/bias storage does not match {}x{}",
                    l.rows, l.cols
                )));
            }
            if l.act == Activation::Softmax && i != last {
                return Err(Error::contract(format!(
                    "softmax is only allowed on the final layer (found on layer {i})"
                )));
            }
            if i > 0 && self.layers[i - 1].rows != l.cols {
                return Err(Error::contract(format!(
                    "layer {} outputs {} values but layer {i} expects {}",
                    i - 1,
                    self.layers[i - 1].rows,
                    l.cols
                )));
            }
        }
        if let Some(detail) = self.first_non_finite() {
            return Err(Error::NonFinite {
                context: "network parameters".into(),
                detail,
            });
        }
        Ok(())
    }

    pub(crate) fn first_non_finite(&self) -> Option<String> {
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(k) = l.w.iter().position(|v| !v.is_finite()) {
                return Some(format!("layer {i} weight[{k}] = {}", l.w[k]));
            }
            if let Some(k) = l.b.iter().position(|v| !v.is_finite()) {
                return Some(format!("layer {i} bias[{k}] = {}", l.b[k]));
            }
        }
        None
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].rows
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// All parameters flattened layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(&l.b).copied())
            .collect()
    }

    /// Mutable access to the `k`-th flattened parameter.
    pub fn param_mut(&mut self, mut k: usize) -> &mut f64 {
        for l in &mut self.layers {
            if k < l.w.len() {
                return &mut l.w[k];
            }
            k -= l.w.len();
            if k < l.b.len() {
                return &mut l.b[k];
            }
            k -= l.b.len();
        }
        panic!("parameter index out of range");
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::contract(format!(
                "input has length {} but the network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass without recording a tape.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut h = x.to_vec();
        for l in &self.layers {
            h = l.affine(&h);
            l.act.apply(&mut h);
        }
        Ok(h)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, GradTape)> {
        self.check_input(x)?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.to_vec());
        for l in &self.layers {
            let mut h = l.affine(values.last().unwrap());
            l.act.apply(&mut h);
            values.push(h);
        }
        let y = values.last().unwrap().clone();
        Ok((y, GradTape { values }))
    }

    fn check_tape(&self, tape: &GradTape, upstream: &[f64]) -> Result<()> {
        if tape.values.len() != self.layers.len() + 1 {
            return Err(Error::contract("tape was recorded on a different network"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if tape.values[i].len() != l.cols || tape.values[i + 1].len() != l.rows {
                return Err(Error::contract("tape was recorded on a different network"));
            }
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::contract(format!(
                "upstream gradient has length {} but the network outputs {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// Gradients of `upstreamᵀ·y` with respect to every parameter and the input.
    pub fn backward(&self, tape: &GradTape, upstream: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        let mut grads = Gradients::zeros_like(self);
        let dx = self.backward_accumulate(tape, upstream, Some(&mut grads))?;
        Ok((grads, dx))
    }

    /// Input gradient only; used for frozen networks.
    pub fn input_grad(&self, tape: &GradTape, upstream: &[f64]) -> Result<Vec<f64>> {
        self.backward_accumulate(tape, upstream, None)
    }

    /// Adds parameter gradients into `acc` (when given) and returns the input gradient.
    pub fn backward_accumulate(
        &self,
        tape: &GradTape,
        upstream: &[f64],
        mut acc: Option<&mut Gradients>,
    ) -> Result<Vec<f64>> {
        self.check_tape(tape, upstream)?;
        let mut g = upstream.to_vec();
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            l.act.backprop(&tape.values[i + 1], &mut g);
            let x = &tape.values[i];
            if let Some(acc) = acc.as_deref_mut() {
                let lg = &mut acc.layers[i];
                for r in 0..l.rows {
                    let gr = g[r];
                    lg.b[r] += gr;
                    if gr != 0.0 {
                        let row = &mut lg.w[r * l.cols..(r + 1) * l.cols];
                        row.iter_mut().zip(x).for_each(|(w, xv)| *w += gr * xv);
                    }
                }
            }
            let mut dx = vec![0.0; l.cols];
            for r in 0..l.rows {
                let gr = g[r];
                if gr != 0.0 {
                    let row = &l.w[r * l.cols..(r + 1) * l.cols];
                    dx.iter_mut().zip(row).for_each(|(d, w)| *d += gr * w);
                }
            }
            g = dx;
        }
        Ok(g)
    }
}
