//! Single sparse autoencoder layer.
//!
//! Encoder `h = S(W_enc x + b_enc)`, decoder `x̂ = S(W_dec h + b_dec)`, and the
//! sparse objective
//!
//! ```text
//! J = 1/N Σ ½‖x̂ − x‖²  +  λ/2 (‖W_enc‖² + ‖W_dec‖²)  +  β Σ_j KL(ρ ‖ ρ̂_j)
//! ```
//!
//! where `ρ̂_j` is the mean activation of hidden unit `j` over the minibatch.
//! Gradients use the two-pass scheme: `ρ̂` is computed in a full forward pass
//! over the batch and then held fixed per sample in the backward pass.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{dot, sigmoid, Matrix, RngState};

/// Hyperparameters of one autoencoder layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaeHyper {
    pub hidden: usize,
    /// Sparsity target ρ.
    pub rho: f64,
    /// Weight of the KL sparsity penalty.
    pub beta: f64,
    /// Weight decay.
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Minibatch size; a training set no larger than this is used whole.
    pub batch_size: usize,
}

impl Default for SaeHyper {
    fn default() -> Self {
        Self {
            hidden: 100,
            rho: 0.1,
            beta: 0.05,
            lambda: 7e-7,
            lr: 0.05,
            epochs: 500,
            batch_size: 128,
        }
    }
}

impl SaeHyper {
    pub fn with_hidden(hidden: usize) -> Self {
        Self {
            hidden,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidParameter(what));
        if self.hidden == 0 {
            return bad("hidden width must be at least 1".into());
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad(format!("rho must lie in (0, 1), got {}", self.rho));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be finite and >= 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        Ok(())
    }
}

/// Encoder and decoder parameters of one sparse autoencoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeLayer {
    /// `hidden × input`
    pub w_enc: Matrix,
    pub b_enc: Vec<f64>,
    /// `input × hidden`
    pub w_dec: Matrix,
    pub b_dec: Vec<f64>,
}

/// Gradient of the sparse objective, shaped like [`SaeLayer`].
#[derive(Debug, Clone, PartialEq)]
pub struct SaeGrads {
    pub w_enc: Matrix,
    pub b_enc: Vec<f64>,
    pub w_dec: Matrix,
    pub b_dec: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub weight_decay: f64,
    pub sparsity: f64,
    /// Mean hidden activation per unit over the batch.
    pub rho_hat: Vec<f64>,
}

/// `KL(ρ ‖ ρ̂)` between two Bernoulli distributions.
pub fn kl_divergence(rho: f64, rho_hat: f64) -> f64 {
    rho * (rho / rho_hat).ln() + (1.0 - rho) * ((1.0 - rho) / (1.0 - rho_hat)).ln()
}

impl SaeLayer {
    /// Weights uniform in `[-r, r]` with `r = sqrt(6 / (input + hidden + 1))`,
    /// zero biases. Encoder weights are drawn first, row by row, then decoder.
    pub fn random(input: usize, hidden: usize, rng: &mut RngState) -> Self {
        let r = (6.0 / (input + hidden + 1) as f64).sqrt();
        let w_enc = Matrix::from_fn(hidden, input, |_, _| rng.random_range(-r..=r));
        let w_dec = Matrix::from_fn(input, hidden, |_, _| rng.random_range(-r..=r));
        Self {
            w_enc,
            b_enc: vec![0.0; hidden],
            w_dec,
            b_dec: vec![0.0; input],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_enc.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_enc.rows()
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = self.w_enc.mul_vec(x)?;
        for (v, b) in h.iter_mut().zip(&self.b_enc) {
            *v = sigmoid(*v + b);
        }
        Ok(h)
    }

    pub fn decode(&self, h: &[f64]) -> Result<Vec<f64>> {
        let mut x = self.w_dec.mul_vec(h)?;
        for (v, b) in x.iter_mut().zip(&self.b_dec) {
            *v = sigmoid(*v + b);
        }
        Ok(x)
    }

    pub fn encode_batch(&self, x: &Matrix) -> Result<Matrix> {
        affine_sigmoid(x, &self.w_enc, &self.b_enc)
    }

    pub fn decode_batch(&self, h: &Matrix) -> Result<Matrix> {
        affine_sigmoid(h, &self.w_dec, &self.b_dec)
    }

    fn check_batch(&self, batch: &Matrix) -> Result<()> {
        if batch.rows() == 0 {
            return Err(Error::Empty("sparse autoencoder loss"));
        }
        if batch.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                op: "sparse autoencoder batch",
                expected: self.input_dim(),
                actual: batch.cols(),
            });
        }
        Ok(())
    }

    fn apply(&mut self, g: &SaeGrads, lr: f64) {
        axpy(self.w_enc.as_mut_slice(), g.w_enc.as_slice(), -lr);
        axpy(&mut self.b_enc, &g.b_enc, -lr);
        axpy(self.w_dec.as_mut_slice(), g.w_dec.as_slice(), -lr);
        axpy(&mut self.b_dec, &g.b_dec, -lr);
    }
}

/// `S(x Wᵀ + b)` for a row-major batch.
pub(crate) fn affine_sigmoid(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    let mut z = x.matmul_t(w)?;
    z.add_row(b);
    z.map_inplace(sigmoid);
    Ok(z)
}

pub(crate) fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

struct Forward {
    hidden: Matrix,
    output: Matrix,
    loss: SparseLoss,
}

fn forward(layer: &SaeLayer, batch: &Matrix, hyper: &SaeHyper) -> Result<Forward> {
    layer.check_batch(batch)?;
    let n = batch.rows() as f64;
    let hidden = layer.encode_batch(batch)?;
    let output = layer.decode_batch(&hidden)?;

    let sq: f64 = output
        .as_slice()
        .iter()
        .zip(batch.as_slice())
        .map(|(o, x)| (o - x) * (o - x))
        .sum();
    let reconstruction = 0.5 * sq / n;
    let weight_decay = 0.5 * hyper.lambda * (layer.w_enc.sum_of_squares() + layer.w_dec.sum_of_squares());
    let rho_hat = hidden.column_means();
    let sparsity = hyper.beta * rho_hat.iter().map(|&r| kl_divergence(hyper.rho, r)).sum::<f64>();

    Ok(Forward {
        hidden,
        output,
        loss: SparseLoss {
            total: reconstruction + weight_decay + sparsity,
            reconstruction,
            weight_decay,
            sparsity,
            rho_hat,
        },
    })
}

fn backward(layer: &SaeLayer, batch: &Matrix, hyper: &SaeHyper, fw: &Forward) -> Result<SaeGrads> {
    let n = batch.rows() as f64;

    let mut d_out = fw.output.clone();
    for (d, x) in d_out.as_mut_slice().iter_mut().zip(batch.as_slice()) {
        let o = *d;
        *d = (o - x) * o * (1.0 - o) / n;
    }
    let mut w_dec = d_out.t_matmul(&fw.hidden)?;
    axpy(w_dec.as_mut_slice(), layer.w_dec.as_slice(), hyper.lambda);
    let b_dec = d_out.column_sums();

    let sparse: Vec<f64> = fw
        .loss
        .rho_hat
        .iter()
        .map(|&r| hyper.beta * (-hyper.rho / r + (1.0 - hyper.rho) / (1.0 - r)) / n)
        .collect();
    let mut d_hid = d_out.matmul(&layer.w_dec)?;
    d_hid.add_row(&sparse);
    for (d, h) in d_hid.as_mut_slice().iter_mut().zip(fw.hidden.as_slice()) {
        *d *= h * (1.0 - h);
    }
    let mut w_enc = d_hid.t_matmul(batch)?;
    axpy(w_enc.as_mut_slice(), layer.w_enc.as_slice(), hyper.lambda);
    let b_enc = d_hid.column_sums();

    Ok(SaeGrads {
        w_enc,
        b_enc,
        w_dec,
        b_dec,
    })
}

/// Sparse objective of `layer` on a batch (one input per row).
pub fn sparse_loss(layer: &SaeLayer, batch: &Matrix, hyper: &SaeHyper) -> Result<SparseLoss> {
    Ok(forward(layer, batch, hyper)?.loss)
}

/// Analytic gradient of [`sparse_loss`] with respect to all four blocks.
pub fn sparse_grad(layer: &SaeLayer, batch: &Matrix, hyper: &SaeHyper) -> Result<SaeGrads> {
    let fw = forward(layer, batch, hyper)?;
    backward(layer, batch, hyper, &fw)
}

/// Yields the per-epoch minibatch index lists for a training set.
///
/// Sets no larger than `batch_size` are a single unshuffled batch; larger sets
/// are reshuffled every epoch and cut into `batch_size` chunks.
#[derive(Debug, Clone)]
pub struct Minibatches {
    order: Vec<usize>,
    batch_size: usize,
}

impl Minibatches {
    pub fn new(len: usize, batch_size: usize) -> Self {
        Self {
            order: (0..len).collect(),
            batch_size: batch_size.max(1),
        }
    }

    pub fn is_full_batch(&self) -> bool {
        self.order.len() <= self.batch_size
    }

    pub fn epoch(&mut self, rng: &mut RngState) -> Vec<Vec<usize>> {
        if self.is_full_batch() {
            return vec![self.order.clone()];
        }
        self.order.shuffle(rng);
        self.order
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainedSae {
    pub layer: SaeLayer,
    /// Mean minibatch loss of each epoch, measured before that minibatch's update.
    pub loss_trace: Vec<f64>,
}

/// Trains one layer from a fresh random initialization with plain SGD.
pub fn train_sae(data: &Matrix, hyper: &SaeHyper, rng: &mut RngState) -> Result<TrainedSae> {
    hyper.validate()?;
    if data.rows() == 0 {
        return Err(Error::Empty("train_sae"));
    }
    let layer = SaeLayer::random(data.cols(), hyper.hidden, rng);
    train_sae_from(layer, data, hyper, rng)
}

/// Continues SGD training from an existing layer.
pub fn train_sae_from(
    mut layer: SaeLayer,
    data: &Matrix,
    hyper: &SaeHyper,
    rng: &mut RngState,
) -> Result<TrainedSae> {
    hyper.validate()?;
    if data.rows() == 0 {
        return Err(Error::Empty("train_sae"));
    }
    let mut batches = Minibatches::new(data.rows(), hyper.batch_size);
    let full = batches.is_full_batch();
    let mut loss_trace = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let mut total = 0.0;
        let plan = batches.epoch(rng);
        for (mb, idx) in plan.iter().enumerate() {
            let owned;
            let batch = if full {
                data
            } else {
                owned = data.select_rows(idx);
                &owned
            };
            let fw = forward(&layer, batch, hyper)?;
            if !fw.loss.total.is_finite() {
                return Err(Error::Diverged { epoch, minibatch: mb });
            }
            total += fw.loss.total;
            let grads = backward(&layer, batch, hyper, &fw)?;
            layer.apply(&grads, hyper.lr);
        }
        loss_trace.push(total / plan.len() as f64);
    }
    Ok(TrainedSae { layer, loss_trace })
}

/// Scalar reference for a single encoder unit, used where a loop-level
/// evaluation is wanted without the batch machinery.
pub fn encode_unit(layer: &SaeLayer, unit: usize, x: &[f64]) -> f64 {
    sigmoid(dot(layer.w_enc.row(unit), x) + layer.b_enc[unit])
}
