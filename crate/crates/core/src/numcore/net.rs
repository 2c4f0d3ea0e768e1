use serde::{Deserialize, Serialize};

use super::mat::{axpy, Mat};
use crate::error::{check_len, Error, Result};
use crate::rng::SplitMix64;

/// Hidden-layer nonlinearity. The output layer is always the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
}

impl Activation {
    pub fn tag(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Fully connected network: `tanh` on hidden layers, identity on the output.
///
/// `weights[l]` has shape `layer_dims[l + 1] × layer_dims[l]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    layer_dims: Vec<usize>,
    weights: Vec<Mat>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
}

/// Per-layer activations recorded by a forward pass; `acts[0]` is the input.
#[derive(Debug, Clone)]
pub struct Trace {
    pub acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has at least the input")
    }
}

/// Activations of a batched forward pass; `acts[l]` holds one row per input.
#[derive(Debug, Clone)]
pub struct BatchTrace {
    pub acts: Vec<Mat>,
}

impl BatchTrace {
    pub fn output(&self) -> &Mat {
        self.acts.last().expect("trace has at least the input")
    }
}

/// `c = beta·c + a·b` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: (&[f64], isize, isize), b: (&[f64], isize, isize), beta: f64, c: &mut [f64], ldc: usize) {
    // SAFETY: the strides and extents are checked against slice lengths by the callers' shapes.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.0.as_ptr(), a.1, a.2, b.0.as_ptr(), b.1, b.2, beta, c.as_mut_ptr(), ldc as isize, 1);
    }
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub weights: Vec<Mat>,
    pub biases: Vec<Vec<f64>>,
}

impl NetGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            weights: net
                .weights
                .iter()
                .map(|w| Mat::zeros(w.rows, w.cols))
                .collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn clear(&mut self) {
        self.weights.iter_mut().for_each(|w| w.data.fill(0.0));
        self.biases.iter_mut().for_each(|b| b.fill(0.0));
    }

    pub fn scale(&mut self, alpha: f64) {
        for w in &mut self.weights {
            w.data.iter_mut().for_each(|v| *v *= alpha);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    /// Tensors in checkpoint order: `W0, b0, W1, b1, ...`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.data.as_slice(), b.as_slice()])
            .collect()
    }

    pub fn all_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0))
    }
}

impl DenseNet {
    pub fn new(layer_dims: Vec<usize>, weights: Vec<Mat>, biases: Vec<Vec<f64>>) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "layer_dims must hold at least two positive sizes, got {layer_dims:?}"
            )));
        }
        let layers = layer_dims.len() - 1;
        check_len("net weight count", layers, weights.len())?;
        check_len("net bias count", layers, biases.len())?;
        for l in 0..layers {
            check_len("weight rows", layer_dims[l + 1], weights[l].rows)?;
            check_len("weight cols", layer_dims[l], weights[l].cols)?;
            check_len("bias length", layer_dims[l + 1], biases[l].len())?;
        }
        let net = Self {
            layer_dims,
            weights,
            biases,
            activation: Activation::Tanh,
        };
        if !net.is_finite() {
            return Err(Error::Domain("network parameters must be finite".into()));
        }
        Ok(net)
    }

    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        let weights = layer_dims
            .windows(2)
            .map(|w| Mat::zeros(w[1], w[0]))
            .collect();
        let biases = layer_dims.windows(2).map(|w| vec![0.0; w[1]]).collect();
        Self::new(layer_dims.to_vec(), weights, biases)
    }

    /// Glorot-normal weights, zero biases.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(layer_dims)?;
        let mut rng = SplitMix64::new(seed);
        for w in &mut net.weights {
            let std = (2.0 / (w.rows + w.cols) as f64).sqrt();
            w.data.iter_mut().for_each(|v| *v = std * rng.normal());
        }
        Ok(net)
    }

    /// Rebuild from tensors in `W0, b0, W1, b1, ...` order.
    pub fn from_tensors(layer_dims: Vec<usize>, tensors: Vec<Vec<f64>>) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Config("layer_dims needs at least two entries".into()));
        }
        let layers = layer_dims.len() - 1;
        check_len("tensor count", 2 * layers, tensors.len())?;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        let mut it = tensors.into_iter();
        for l in 0..layers {
            let (rows, cols) = (layer_dims[l + 1], layer_dims[l]);
            let w = it.next().unwrap_or_default();
            check_len("weight tensor", rows * cols, w.len())?;
            weights.push(Mat {
                rows,
                cols,
                data: w,
            });
            biases.push(it.next().unwrap_or_default());
        }
        Self::new(layer_dims, weights, biases)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Mat] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Mat] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.weights
            .iter()
            .map(|w| w.data.len())
            .chain(self.biases.iter().map(Vec::len))
            .sum()
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.data.as_slice(), b.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.data.as_mut_slice(), b.as_mut_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Round every parameter through `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_len("net input", self.input_dim(), input.len())?;
        let mut cur = input.to_vec();
        let last = self.num_layers() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut next = b.clone();
            for (o, r) in next.iter_mut().zip(w.data.chunks_exact(w.cols)) {
                *o += super::mat::dot(r, &cur);
            }
            if l < last {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            cur = next;
        }
        Ok(cur)
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        check_len("net input", self.input_dim(), input.len())?;
        let mut acts = Vec::with_capacity(self.num_layers() + 1);
        acts.push(input.to_vec());
        let last = self.num_layers() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let prev = &acts[l];
            let mut next = b.clone();
            for (o, r) in next.iter_mut().zip(w.data.chunks_exact(w.cols)) {
                *o += super::mat::dot(r, prev);
            }
            if l < last {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(next);
        }
        Ok(Trace { acts })
    }

    /// Reverse sweep over a recorded trace. Returns `Jᵀ·cotangent` with respect
    /// to the input and, when `grads` is given, accumulates parameter gradients.
    pub fn backward(
        &self,
        trace: &Trace,
        cotangent: &[f64],
        mut grads: Option<&mut NetGrads>,
    ) -> Result<Vec<f64>> {
        check_len("net cotangent", self.output_dim(), cotangent.len())?;
        let mut delta = cotangent.to_vec();
        for l in (0..self.num_layers()).rev() {
            let w = &self.weights[l];
            let a_in = &trace.acts[l];
            if let Some(g) = grads.as_deref_mut() {
                let gw = &mut g.weights[l];
                for (i, &di) in delta.iter().enumerate() {
                    if di != 0.0 {
                        axpy(di, a_in, gw.row_mut(i));
                    }
                }
                axpy(1.0, &delta, &mut g.biases[l]);
            }
            let mut back = vec![0.0; w.cols];
            w.matvec_t_into(&delta, &mut back);
            if l > 0 {
                for (bk, a) in back.iter_mut().zip(a_in) {
                    *bk *= 1.0 - a * a;
                }
            }
            delta = back;
        }
        Ok(delta)
    }

    /// Forward pass over a batch of inputs, one per row.
    pub fn forward_batch(&self, inputs: &Mat) -> Result<BatchTrace> {
        check_len("net input", self.input_dim(), inputs.cols)?;
        let b = inputs.rows;
        let mut acts = Vec::with_capacity(self.num_layers() + 1);
        acts.push(inputs.clone());
        let last = self.num_layers() - 1;
        for (l, (w, bias)) in self.weights.iter().zip(&self.biases).enumerate() {
            let prev = &acts[l];
            let mut next = Mat::zeros(b, w.rows);
            for r in next.data.chunks_exact_mut(w.rows) {
                r.copy_from_slice(bias);
            }
            gemm(b, w.cols, w.rows, (&prev.data, w.cols as isize, 1), (&w.data, 1, w.cols as isize), 1.0, &mut next.data, w.rows);
            if l < last {
                next.data.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(next);
        }
        Ok(BatchTrace { acts })
    }

    /// Accumulate parameter gradients for a batch given per-row output
    /// cotangents.
    pub fn backward_batch(&self, trace: &BatchTrace, cotangent: &Mat, grads: &mut NetGrads) -> Result<()> {
        check_len("net cotangent", self.output_dim(), cotangent.cols)?;
        let b = cotangent.rows;
        check_len("batch size", trace.acts[0].rows, b)?;
        let mut delta = cotangent.clone();
        for l in (0..self.num_layers()).rev() {
            let w = &self.weights[l];
            let a_in = &trace.acts[l];
            gemm(w.rows, b, w.cols, (&delta.data, 1, w.rows as isize), (&a_in.data, w.cols as isize, 1), 1.0, &mut grads.weights[l].data, w.cols);
            for r in delta.data.chunks_exact(w.rows) {
                axpy(1.0, r, &mut grads.biases[l]);
            }
            if l == 0 {
                break;
            }
            let mut back = Mat::zeros(b, w.cols);
            gemm(b, w.rows, w.cols, (&delta.data, w.rows as isize, 1), (&w.data, w.cols as isize, 1), 0.0, &mut back.data, w.cols);
            for (bk, a) in back.data.iter_mut().zip(&a_in.data) {
                *bk *= 1.0 - a * a;
            }
            delta = back;
        }
        Ok(())
    }

    /// Vector-Jacobian product: `(Jᵀ·cotangent, ∂⟨cotangent, net(input)⟩/∂θ)`.
    pub fn vjp(&self, input: &[f64], cotangent: &[f64]) -> Result<(Vec<f64>, NetGrads)> {
        let trace = self.forward_trace(input)?;
        let mut grads = NetGrads::zeros_like(self);
        let gi = self.backward(&trace, cotangent, Some(&mut grads))?;
        Ok((gi, grads))
    }

    /// Forward-mode Jacobian-vector product `J·tangent`.
    pub fn jvp(&self, input: &[f64], tangent: &[f64]) -> Result<Vec<f64>> {
        let trace = self.forward_trace(input)?;
        self.jvp_traced(&trace, tangent)
    }

    /// `J·tangent` reusing the activations of an earlier forward pass.
    pub fn jvp_traced(&self, trace: &Trace, tangent: &[f64]) -> Result<Vec<f64>> {
        check_len("net tangent", self.input_dim(), tangent.len())?;
        let mut dot_act = tangent.to_vec();
        let last = self.num_layers() - 1;
        for (l, w) in self.weights.iter().enumerate() {
            let mut dz = vec![0.0; w.rows];
            w.matvec_into(&dot_act, &mut dz);
            if l < last {
                for (v, a) in dz.iter_mut().zip(&trace.acts[l + 1]) {
                    *v *= 1.0 - a * a;
                }
            }
            dot_act = dz;
        }
        Ok(dot_act)
    }
}
