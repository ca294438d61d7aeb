//! Stacked sparse autoencoder networks with a softmax head, and the
//! three-branch joint spectral/spatial/fusion model.
//!
//! Networks are built greedily: each autoencoder is trained on the codes of
//! the layers below it and only its encoder is kept. Supervised training then
//! minimizes mean cross-entropy plus `λ/2 Σ W²` (weights only, head included)
//! with plain SGD, either through every layer or through the head alone.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autoencoder::{affine_sigmoid, axpy, train_sae, Minibatches, SaeHyper};
use crate::data::SampleSet;
use crate::error::{Error, Result};
use crate::numcore::{sigmoid, substream, Matrix, RngState, Stream};

/// One retained encoder `h = S(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    /// `out × in`
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl Encoder {
    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = self.w.mul_vec(x)?;
        for (v, b) in h.iter_mut().zip(&self.b) {
            *v = sigmoid(*v + b);
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxHead {
    /// `classes × features`
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl SoftmaxHead {
    pub fn zeros(classes: usize, features: usize) -> Self {
        Self {
            w: Matrix::zeros(classes, features),
            b: vec![0.0; classes],
        }
    }

    pub fn class_count(&self) -> usize {
        self.w.rows()
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.w.mul_vec(x)?;
        for (v, b) in z.iter_mut().zip(&self.b) {
            *v += b;
        }
        Ok(z)
    }

    fn logits_batch(&self, feats: &Matrix) -> Result<Matrix> {
        let mut z = feats.matmul_t(&self.w)?;
        z.add_row(&self.b);
        Ok(z)
    }

    /// Grows the head to `classes` outputs; new rows start at zero.
    pub fn extend_to(&mut self, classes: usize) {
        let (c, d) = self.w.shape();
        if classes <= c {
            return;
        }
        let extra = Matrix::zeros(classes - c, d);
        self.w = self.w.vcat(&extra).expect("same width");
        self.b.resize(classes, 0.0);
    }
}

/// Probabilities from logits, with the maximum subtracted before
/// exponentiating.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn softmax_rows(mut logits: Matrix) -> Matrix {
    let c = logits.cols();
    for row in logits.as_mut_slice().chunks_exact_mut(c.max(1)) {
        let p = softmax(row);
        row.copy_from_slice(&p);
    }
    logits
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Anything that maps feature rows to class logits.
pub trait Classifier {
    fn input_dim(&self) -> usize;
    fn class_count(&self) -> usize;
    fn logits_batch(&self, x: &Matrix) -> Result<Matrix>;

    fn predict_proba_batch(&self, x: &Matrix) -> Result<Matrix> {
        Ok(softmax_rows(self.logits_batch(x)?))
    }

    fn predict_batch(&self, x: &Matrix) -> Result<Vec<usize>> {
        let logits = self.logits_batch(x)?;
        Ok(logits.row_iter().map(argmax).collect())
    }
}

/// A classifier whose parameters can be trained by backpropagation.
///
/// Parameter blocks alternate weight, bias for every layer in declaration
/// order, finishing with the softmax head; weight decay applies to the
/// even-indexed blocks only.
pub trait Trainable: Classifier + Clone {
    fn param_blocks(&self) -> Vec<&[f64]>;
    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]>;
    /// Output of the last hidden layer, the input of the softmax head.
    fn features_batch(&self, x: &Matrix) -> Result<Matrix>;
    fn head(&self) -> &SoftmaxHead;
    fn head_mut(&mut self) -> &mut SoftmaxHead;
    /// Mean cross-entropy on `x` and its gradient per parameter block,
    /// without the decay term.
    fn cross_entropy_grad(&self, x: &Matrix, labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)>;

    /// Supervised objective: mean cross-entropy plus `λ/2 Σ W²`.
    fn objective(&self, x: &Matrix, labels: &[usize], lambda: f64) -> Result<f64> {
        let logits = self.logits_batch(x)?;
        Ok(cross_entropy(&logits, labels)? + decay_term(&self.param_blocks(), lambda))
    }

    fn objective_and_grad(&self, x: &Matrix, labels: &[usize], lambda: f64) -> Result<(f64, Vec<Vec<f64>>)> {
        let (ce, mut grads) = self.cross_entropy_grad(x, labels)?;
        let blocks = self.param_blocks();
        for (i, (g, p)) in grads.iter_mut().zip(&blocks).enumerate() {
            if i % 2 == 0 {
                axpy(g, p, lambda);
            }
        }
        Ok((ce + decay_term(&blocks, lambda), grads))
    }
}

fn decay_term(blocks: &[&[f64]], lambda: f64) -> f64 {
    let sq: f64 = blocks
        .iter()
        .step_by(2)
        .map(|b| b.iter().map(|v| v * v).sum::<f64>())
        .sum();
    0.5 * lambda * sq
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::DimensionMismatch {
            op: "labels",
            expected: rows,
            actual: labels.len(),
        });
    }
    if rows == 0 {
        return Err(Error::Empty("supervised objective"));
    }
    if let Some(&class) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::ClassOutOfRange {
            class,
            class_count: classes,
        });
    }
    Ok(())
}

fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(labels, logits.rows(), logits.cols())?;
    let mut total = 0.0;
    for (row, &y) in logits.row_iter().zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// Forward through the head: loss, head gradients, and the gradient with
/// respect to the head's input features.
fn head_backward(
    head: &SoftmaxHead,
    feats: &Matrix,
    labels: &[usize],
) -> Result<(f64, Vec<f64>, Vec<f64>, Matrix)> {
    let logits = head.logits_batch(feats)?;
    let loss = cross_entropy(&logits, labels)?;
    let n = labels.len() as f64;
    let mut delta = softmax_rows(logits);
    let c = delta.cols();
    for (row, &y) in delta.as_mut_slice().chunks_exact_mut(c).zip(labels) {
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    let gw = delta.t_matmul(feats)?;
    let gb = delta.column_sums();
    let d_feats = delta.matmul(&head.w)?;
    Ok((loss, gw.into_vec(), gb, d_feats))
}

fn stack_forward(encoders: &[Encoder], x: &Matrix) -> Result<Vec<Matrix>> {
    let mut acts: Vec<Matrix> = Vec::with_capacity(encoders.len());
    for enc in encoders {
        let input = acts.last().unwrap_or(x);
        let a = affine_sigmoid(input, &enc.w, &enc.b)?;
        acts.push(a);
    }
    Ok(acts)
}

/// Backpropagates `d_top` (gradient w.r.t. the stack output) and returns the
/// per-encoder (weight, bias) gradients plus, if asked, the input gradient.
fn stack_backward(
    encoders: &[Encoder],
    x: &Matrix,
    acts: &[Matrix],
    mut d: Matrix,
    want_input_grad: bool,
) -> Result<(Vec<Vec<f64>>, Option<Matrix>)> {
    let mut grads = vec![Vec::new(); 2 * encoders.len()];
    for k in (0..encoders.len()).rev() {
        for (g, a) in d.as_mut_slice().iter_mut().zip(acts[k].as_slice()) {
            *g *= a * (1.0 - a);
        }
        let prev = if k == 0 { x } else { &acts[k - 1] };
        grads[2 * k] = d.t_matmul(prev)?.into_vec();
        grads[2 * k + 1] = d.column_sums();
        if k > 0 || want_input_grad {
            d = d.matmul(&encoders[k].w)?;
        }
    }
    let input_grad = (want_input_grad || encoders.is_empty()).then_some(d);
    Ok((grads, input_grad))
}

/// Stacked encoders with an optional softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct SsaeNetwork {
    input_dim: usize,
    encoders: Vec<Encoder>,
    head: Option<SoftmaxHead>,
}

impl SsaeNetwork {
    pub fn new(input_dim: usize, encoders: Vec<Encoder>, head: Option<SoftmaxHead>) -> Result<Self> {
        let mut dim = input_dim;
        for enc in &encoders {
            if enc.input_dim() != dim || enc.b.len() != enc.output_dim() {
                return Err(Error::DimensionMismatch {
                    op: "SsaeNetwork layer chain",
                    expected: dim,
                    actual: enc.input_dim(),
                });
            }
            dim = enc.output_dim();
        }
        if let Some(h) = &head {
            if h.w.cols() != dim || h.b.len() != h.class_count() {
                return Err(Error::DimensionMismatch {
                    op: "SsaeNetwork softmax head",
                    expected: dim,
                    actual: h.w.cols(),
                });
            }
        }
        Ok(Self {
            input_dim,
            encoders,
            head,
        })
    }

    /// Depth-0 network that passes its input through unchanged.
    pub fn identity(input_dim: usize) -> Self {
        Self {
            input_dim,
            encoders: Vec::new(),
            head: None,
        }
    }

    pub fn encoders(&self) -> &[Encoder] {
        &self.encoders
    }

    pub fn encoders_mut(&mut self) -> &mut [Encoder] {
        &mut self.encoders
    }

    pub fn depth(&self) -> usize {
        self.encoders.len()
    }

    pub fn output_dim(&self) -> usize {
        self.encoders.last().map_or(self.input_dim, Encoder::output_dim)
    }

    pub fn softmax_head(&self) -> Option<&SoftmaxHead> {
        self.head.as_ref()
    }

    pub fn has_head(&self) -> bool {
        self.head.is_some()
    }

    /// Attaches a zero-initialized head with `classes` outputs.
    pub fn with_head(mut self, classes: usize) -> Self {
        self.head = Some(SoftmaxHead::zeros(classes, self.output_dim()));
        self
    }

    pub fn without_head(mut self) -> Self {
        self.head = None;
        self
    }

    /// Drops input dimensions beyond `dim` by cutting the first layer's
    /// weight columns.
    pub fn truncate_inputs(&mut self, dim: usize) {
        if dim >= self.input_dim {
            return;
        }
        match self.encoders.first_mut() {
            Some(first) => first.w = first.w.truncate_cols(dim),
            None => {
                if let Some(h) = &mut self.head {
                    h.w = h.w.truncate_cols(dim);
                }
            }
        }
        self.input_dim = dim;
    }

    /// Last hidden-layer output for one sample.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                op: "SsaeNetwork::forward",
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        let mut h = x.to_vec();
        for enc in &self.encoders {
            h = enc.encode(&h)?;
        }
        Ok(h)
    }

    pub fn encode_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        Ok(stack_forward(&self.encoders, x)?
            .pop()
            .unwrap_or_else(|| x.clone()))
    }

    /// Class probabilities for one sample.
    pub fn softmax_predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let head = self.require_head()?;
        Ok(softmax(&head.logits(&self.forward(x)?)?))
    }

    fn require_head(&self) -> Result<&SoftmaxHead> {
        self.head
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("network has no softmax head".into()))
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                op: "SsaeNetwork input",
                expected: self.input_dim,
                actual: x.cols(),
            });
        }
        Ok(())
    }

    fn blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.encoders.len() + 2);
        for e in &self.encoders {
            out.push(e.w.as_slice());
            out.push(e.b.as_slice());
        }
        if let Some(h) = &self.head {
            out.push(h.w.as_slice());
            out.push(h.b.as_slice());
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.encoders.len() + 2);
        for e in &mut self.encoders {
            out.push(e.w.as_mut_slice());
            out.push(e.b.as_mut_slice());
        }
        if let Some(h) = &mut self.head {
            out.push(h.w.as_mut_slice());
            out.push(h.b.as_mut_slice());
        }
        out
    }
}

impl Classifier for SsaeNetwork {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn class_count(&self) -> usize {
        self.head.as_ref().map_or(0, SoftmaxHead::class_count)
    }

    fn logits_batch(&self, x: &Matrix) -> Result<Matrix> {
        let head = self.require_head()?;
        head.logits_batch(&self.encode_batch(x)?)
    }
}

impl Trainable for SsaeNetwork {
    fn param_blocks(&self) -> Vec<&[f64]> {
        self.blocks()
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.blocks_mut()
    }

    fn features_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.encode_batch(x)
    }

    fn head(&self) -> &SoftmaxHead {
        self.head.as_ref().expect("trainable network has a head")
    }

    fn head_mut(&mut self) -> &mut SoftmaxHead {
        self.head.as_mut().expect("trainable network has a head")
    }

    fn cross_entropy_grad(&self, x: &Matrix, labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
        self.check_input(x)?;
        let head = self.require_head()?;
        let acts = stack_forward(&self.encoders, x)?;
        let feats = acts.last().unwrap_or(x);
        let (loss, gw, gb, d_feats) = head_backward(head, feats, labels)?;
        let (mut grads, _) = stack_backward(&self.encoders, x, &acts, d_feats, false)?;
        grads.push(gw);
        grads.push(gb);
        Ok((loss, grads))
    }
}

/// Spectral and spatial branches feeding a fusion network with the head.
#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    pub spectral: SsaeNetwork,
    pub spatial: SsaeNetwork,
    pub fusion: SsaeNetwork,
}

impl JointModel {
    pub fn new(spectral: SsaeNetwork, spatial: SsaeNetwork, fusion: SsaeNetwork) -> Result<Self> {
        let stacked = spectral.output_dim() + spatial.output_dim();
        if fusion.input_dim != stacked {
            return Err(Error::DimensionMismatch {
                op: "JointModel fusion input",
                expected: stacked,
                actual: fusion.input_dim,
            });
        }
        if !fusion.has_head() {
            return Err(Error::InvalidParameter(
                "fusion network of a joint model needs a softmax head".into(),
            ));
        }
        Ok(Self {
            spectral: spectral.without_head(),
            spatial: spatial.without_head(),
            fusion,
        })
    }

    pub fn spectral_dim(&self) -> usize {
        self.spectral.input_dim
    }

    pub fn spatial_dim(&self) -> usize {
        self.spatial.input_dim
    }

    /// Fused deep feature and class probabilities for one pixel.
    pub fn joint_forward(&self, spectral_x: &[f64], spatial_x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut stacked = self.spectral.forward(spectral_x)?;
        stacked.extend(self.spatial.forward(spatial_x)?);
        let fused = self.fusion.forward(&stacked)?;
        let probs = softmax(&self.fusion.require_head()?.logits(&fused)?);
        Ok((fused, probs))
    }

    /// Stacked branch outputs for rows laid out as `[spectral | spatial]`.
    pub fn stacked_features(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let spe = self
            .spectral
            .encode_batch(&x.column_block(0, self.spectral_dim()))?;
        let spa = self
            .spatial
            .encode_batch(&x.column_block(self.spectral_dim(), self.spatial_dim()))?;
        spe.hcat(&spa)
    }

    /// Cuts the spectral branch to its first `bands` inputs.
    pub fn truncate_spectral(&mut self, bands: usize) {
        let fusion_in = self.fusion.input_dim;
        self.spectral.truncate_inputs(bands);
        // a depth-0 spectral branch feeds raw bands straight into fusion
        if self.spectral.depth() == 0 && fusion_in != self.spectral.output_dim() + self.spatial.output_dim() {
            let keep: Vec<usize> = (0..bands)
                .chain(fusion_in - self.spatial.output_dim()..fusion_in)
                .collect();
            if let Some(first) = self.fusion.encoders.first_mut() {
                let w = first.w.transpose().select_rows(&keep).transpose();
                first.w = w;
            } else if let Some(h) = &mut self.fusion.head {
                h.w = h.w.transpose().select_rows(&keep).transpose();
            }
            self.fusion.input_dim = keep.len();
        }
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        let want = self.spectral_dim() + self.spatial_dim();
        if x.cols() != want {
            return Err(Error::DimensionMismatch {
                op: "JointModel input",
                expected: want,
                actual: x.cols(),
            });
        }
        Ok(())
    }
}

impl Classifier for JointModel {
    fn input_dim(&self) -> usize {
        self.spectral_dim() + self.spatial_dim()
    }

    fn class_count(&self) -> usize {
        self.fusion.class_count()
    }

    fn logits_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.fusion.logits_batch(&self.stacked_features(x)?)
    }
}

impl Trainable for JointModel {
    fn param_blocks(&self) -> Vec<&[f64]> {
        let mut out = self.spectral.blocks();
        out.extend(self.spatial.blocks());
        out.extend(self.fusion.blocks());
        out
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.spectral.blocks_mut();
        out.extend(self.spatial.blocks_mut());
        out.extend(self.fusion.blocks_mut());
        out
    }

    fn features_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.fusion.encode_batch(&self.stacked_features(x)?)
    }

    fn head(&self) -> &SoftmaxHead {
        self.fusion.head()
    }

    fn head_mut(&mut self) -> &mut SoftmaxHead {
        self.fusion.head_mut()
    }

    fn cross_entropy_grad(&self, x: &Matrix, labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
        self.check_input(x)?;
        let spe_x = x.column_block(0, self.spectral_dim());
        let spa_x = x.column_block(self.spectral_dim(), self.spatial_dim());
        let spe_acts = stack_forward(&self.spectral.encoders, &spe_x)?;
        let spa_acts = stack_forward(&self.spatial.encoders, &spa_x)?;
        let stacked = spe_acts
            .last()
            .unwrap_or(&spe_x)
            .hcat(spa_acts.last().unwrap_or(&spa_x))?;

        let (loss, fusion_grads) = self.fusion.cross_entropy_grad_with_input(&stacked, labels)?;
        let (fusion_grads, d_stacked) = fusion_grads;
        let spe_out = self.spectral.output_dim();
        let d_spe = d_stacked.column_block(0, spe_out);
        let d_spa = d_stacked.column_block(spe_out, self.spatial.output_dim());
        let (mut grads, _) = stack_backward(&self.spectral.encoders, &spe_x, &spe_acts, d_spe, false)?;
        let (spa_grads, _) = stack_backward(&self.spatial.encoders, &spa_x, &spa_acts, d_spa, false)?;
        grads.extend(spa_grads);
        grads.extend(fusion_grads);
        Ok((loss, grads))
    }
}

impl SsaeNetwork {
    /// Like `cross_entropy_grad`, also returning the gradient w.r.t. the input.
    #[allow(clippy::type_complexity)]
    fn cross_entropy_grad_with_input(
        &self,
        x: &Matrix,
        labels: &[usize],
    ) -> Result<(f64, (Vec<Vec<f64>>, Matrix))> {
        let head = self.require_head()?;
        let acts = stack_forward(&self.encoders, x)?;
        let feats = acts.last().unwrap_or(x);
        let (loss, gw, gb, d_feats) = head_backward(head, feats, labels)?;
        let (mut grads, d_in) = stack_backward(&self.encoders, x, &acts, d_feats, true)?;
        grads.push(gw);
        grads.push(gb);
        Ok((loss, (grads, d_in.expect("input gradient requested"))))
    }
}

/// Trains a headless stack layer by layer; layer `k` sees the codes produced
/// by layers `1..k`. `template` supplies every hyperparameter except width.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub network: SsaeNetwork,
    pub loss_traces: Vec<Vec<f64>>,
}

pub fn greedy_pretrain(
    inputs: &Matrix,
    hidden_sizes: &[usize],
    template: &SaeHyper,
    rng: &mut RngState,
) -> Result<Pretrained> {
    if hidden_sizes.is_empty() {
        return Err(Error::InvalidParameter(
            "greedy pretraining needs at least one hidden layer".into(),
        ));
    }
    let mut encoders = Vec::with_capacity(hidden_sizes.len());
    let mut loss_traces = Vec::with_capacity(hidden_sizes.len());
    let mut codes = inputs.clone();
    for &width in hidden_sizes {
        let hyper = SaeHyper {
            hidden: width,
            ..template.clone()
        };
        let trained = train_sae(&codes, &hyper, rng)?;
        codes = trained.layer.encode_batch(&codes)?;
        if !codes.is_finite() {
            return Err(Error::NonFinite("greedy pretraining"));
        }
        encoders.push(Encoder {
            w: trained.layer.w_enc,
            b: trained.layer.b_enc,
        });
        loss_traces.push(trained.loss_trace);
    }
    Ok(Pretrained {
        network: SsaeNetwork::new(inputs.cols(), encoders, None)?,
        loss_traces,
    })
}

/// Supervised SGD settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lambda: f64,
    pub batch_size: usize,
    /// Backpropagate into every encoder; `false` retrains the head only.
    pub update_encoders: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 0.05,
            lambda: 7e-7,
            batch_size: 128,
            update_encoders: true,
        }
    }
}

impl FinetuneConfig {
    /// Softmax-only training with the 200-iteration cap.
    pub fn head_only() -> Self {
        Self {
            epochs: 200,
            update_encoders: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "fine-tuning learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "fine-tuning lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter(
                "fine-tuning batch size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneReport {
    /// Mean minibatch objective per epoch, measured before each update.
    pub loss_trace: Vec<f64>,
    /// Objective over the whole training set after the last update.
    pub final_loss: f64,
}

/// Minimizes cross-entropy plus weight decay on a labeled set.
pub fn finetune<M: Trainable>(
    model: &mut M,
    labeled: &SampleSet,
    cfg: &FinetuneConfig,
    rng: &mut RngState,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    let labels = labeled.required_labels()?;
    let x = labeled.features();
    check_labels(&labels, x.rows(), model.class_count())?;
    let loss_trace = if cfg.update_encoders {
        sgd_full(model, x, &labels, cfg, rng)?
    } else {
        sgd_head(model, x, &labels, cfg, rng)?
    };
    let final_loss = model.objective(x, &labels, cfg.lambda)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged {
            epoch: cfg.epochs,
            minibatch: 0,
        });
    }
    Ok(FinetuneReport {
        loss_trace,
        final_loss,
    })
}

fn sgd_full<M: Trainable>(
    model: &mut M,
    x: &Matrix,
    labels: &[usize],
    cfg: &FinetuneConfig,
    rng: &mut RngState,
) -> Result<Vec<f64>> {
    let mut batches = Minibatches::new(x.rows(), cfg.batch_size);
    let full = batches.is_full_batch();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let plan = batches.epoch(rng);
        let mut total = 0.0;
        for (mb, idx) in plan.iter().enumerate() {
            let (loss, grads) = if full {
                model.objective_and_grad(x, labels, cfg.lambda)?
            } else {
                let xb = x.select_rows(idx);
                let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                model.objective_and_grad(&xb, &yb, cfg.lambda)?
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, minibatch: mb });
            }
            total += loss;
            for (p, g) in model.param_blocks_mut().into_iter().zip(&grads) {
                axpy(p, g, -cfg.lr);
            }
        }
        trace.push(total / plan.len() as f64);
    }
    Ok(trace)
}

fn sgd_head<M: Trainable>(
    model: &mut M,
    x: &Matrix,
    labels: &[usize],
    cfg: &FinetuneConfig,
    rng: &mut RngState,
) -> Result<Vec<f64>> {
    let feats = model.features_batch(x)?;
    // constant contribution of the frozen encoder weights to the objective
    let blocks = model.param_blocks();
    let frozen = decay_term(&blocks[..blocks.len() - 2], cfg.lambda);
    let mut batches = Minibatches::new(x.rows(), cfg.batch_size);
    let full = batches.is_full_batch();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let plan = batches.epoch(rng);
        let mut total = 0.0;
        for (mb, idx) in plan.iter().enumerate() {
            let owned;
            let (fb, yb): (&Matrix, Vec<usize>) = if full {
                (&feats, labels.to_vec())
            } else {
                owned = feats.select_rows(idx);
                (&owned, idx.iter().map(|&i| labels[i]).collect())
            };
            let head = model.head_mut();
            let (ce, mut gw, gb, _) = head_backward(head, fb, &yb)?;
            let loss = ce + 0.5 * cfg.lambda * head.w.sum_of_squares() + frozen;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, minibatch: mb });
            }
            total += loss;
            axpy(&mut gw, head.w.as_slice(), cfg.lambda);
            axpy(head.w.as_mut_slice(), &gw, -cfg.lr);
            axpy(&mut head.b, &gb, -cfg.lr);
        }
        trace.push(total / plan.len() as f64);
    }
    Ok(trace)
}

/// Fraction of correctly classified rows.
pub fn accuracy<C: Classifier>(model: &C, set: &SampleSet) -> Result<f64> {
    let labels = set.required_labels()?;
    let pred = model.predict_batch(set.features())?;
    let hits = pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

/// Class probabilities for one row through any classifier.
pub fn predict_one<C: Classifier>(model: &C, x: &[f64]) -> Result<Vec<f64>> {
    let m = Matrix::new(1, x.len(), x.to_vec())?;
    Ok(model.predict_proba_batch(&m)?.row(0).to_vec())
}

/// Margin between the two largest logits of a row.
pub fn logit_margin(logits: &[f64]) -> f64 {
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &z in logits {
        if z > first {
            second = first;
            first = z;
        } else if z > second {
            second = z;
        }
    }
    first - second
}

/// Layer widths and autoencoder settings of the three joint branches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BranchConfig {
    pub spectral_hidden: Vec<usize>,
    pub spatial_hidden: Vec<usize>,
    pub fusion_hidden: Vec<usize>,
    pub spectral_sae: SaeHyper,
    pub spatial_sae: SaeHyper,
    pub fusion_sae: SaeHyper,
}

impl Default for BranchConfig {
    fn default() -> Self {
        Self {
            spectral_hidden: vec![200, 150],
            spatial_hidden: vec![200, 150],
            fusion_hidden: vec![400, 200],
            spectral_sae: SaeHyper::default(),
            spatial_sae: SaeHyper::default(),
            fusion_sae: SaeHyper::default(),
        }
    }
}

impl BranchConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, widths) in [
            ("spectral_hidden", &self.spectral_hidden),
            ("spatial_hidden", &self.spatial_hidden),
            ("fusion_hidden", &self.fusion_hidden),
        ] {
            if widths.is_empty() || widths.contains(&0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must list at least one positive layer width"
                )));
            }
        }
        self.spectral_sae.validate()?;
        self.spatial_sae.validate()?;
        self.fusion_sae.validate()
    }
}

/// Unsupervised construction of the joint model from rows laid out as
/// `[spectral | spatial]`: each branch is pretrained greedily on its own
/// block, then the fusion stack on the stacked branch outputs. The returned
/// model carries a zero softmax head with `class_count` outputs.
///
/// The three stages draw from the spectral, spatial and fusion sub-streams
/// of `seed`.
pub fn pretrain_joint(
    x: &Matrix,
    spectral_dim: usize,
    class_count: usize,
    cfg: &BranchConfig,
    seed: u64,
) -> Result<JointModel> {
    cfg.validate()?;
    if spectral_dim == 0 || spectral_dim >= x.cols() {
        return Err(Error::InvalidParameter(format!(
            "spectral block width {spectral_dim} must lie strictly inside the {} input columns",
            x.cols()
        )));
    }
    let spatial_dim = x.cols() - spectral_dim;
    let spe_x = x.column_block(0, spectral_dim);
    let spa_x = x.column_block(spectral_dim, spatial_dim);
    let spectral = greedy_pretrain(
        &spe_x,
        &cfg.spectral_hidden,
        &cfg.spectral_sae,
        &mut substream(seed, Stream::SpectralBranch),
    )?
    .network;
    let spatial = greedy_pretrain(
        &spa_x,
        &cfg.spatial_hidden,
        &cfg.spatial_sae,
        &mut substream(seed, Stream::SpatialBranch),
    )?
    .network;
    let stacked = spectral
        .encode_batch(&spe_x)?
        .hcat(&spatial.encode_batch(&spa_x)?)?;
    let fusion = greedy_pretrain(
        &stacked,
        &cfg.fusion_hidden,
        &cfg.fusion_sae,
        &mut substream(seed, Stream::FusionBranch),
    )?
    .network
    .with_head(class_count);
    JointModel::new(spectral, spatial, fusion)
}

/// Single-stack counterpart of [`pretrain_joint`], used for the spectral-only
/// and spatial-only models.
pub fn pretrain_single(
    x: &Matrix,
    hidden: &[usize],
    hyper: &SaeHyper,
    class_count: usize,
    seed: u64,
) -> Result<SsaeNetwork> {
    Ok(
        greedy_pretrain(x, hidden, hyper, &mut substream(seed, Stream::SpectralBranch))?
            .network
            .with_head(class_count),
    )
}

/// Supervised schedule after pretraining: softmax-only training on the
/// frozen features, then fine-tuning of the whole network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    pub softmax: FinetuneConfig,
    pub finetune: FinetuneConfig,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            softmax: FinetuneConfig::head_only(),
            finetune: FinetuneConfig::default(),
        }
    }
}

impl SupervisedConfig {
    pub fn validate(&self) -> Result<()> {
        self.softmax.validate()?;
        self.finetune.validate()
    }
}

/// Runs the softmax stage and the fine-tuning stage on `labeled`, both
/// drawing minibatch order from the fine-tuning sub-stream of `seed`.
pub fn train_supervised<M: Trainable>(
    model: &mut M,
    labeled: &SampleSet,
    cfg: &SupervisedConfig,
    seed: u64,
) -> Result<FinetuneReport> {
    let mut rng = substream(seed, Stream::Finetune);
    let softmax = FinetuneConfig {
        update_encoders: false,
        ..cfg.softmax.clone()
    };
    finetune(model, labeled, &softmax, &mut rng)?;
    finetune(model, labeled, &cfg.finetune, &mut rng)
}

// ---------------------------------------------------------------------------
// Model file
//
//   offset 0   "SSAE1"                              5 bytes
//          5   u32 network count K (1 single, 3 joint: spectral, spatial, fusion)
//   then for each network:
//              u32 input dim
//              u32 layer count L
//              L × u32 layer widths
//              u32 class count C (0 = no softmax head)
//              per layer: W (width × previous width, row-major), b (width)
//              head if C > 0: W (C × last width, row-major), b (C)
//   all integers and f64 values little-endian.
// ---------------------------------------------------------------------------

pub const MODEL_MAGIC: &[u8; 5] = b"SSAE1";

/// What a model file holds.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelFile {
    Single(SsaeNetwork),
    Joint(JointModel),
}

impl ModelFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let nets: Vec<&SsaeNetwork> = match self {
            ModelFile::Single(n) => vec![n],
            ModelFile::Joint(j) => vec![&j.spectral, &j.spatial, &j.fusion],
        };
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&(nets.len() as u32).to_le_bytes());
        for net in nets {
            out.extend_from_slice(&(net.input_dim as u32).to_le_bytes());
            out.extend_from_slice(&(net.encoders.len() as u32).to_le_bytes());
            for e in &net.encoders {
                out.extend_from_slice(&(e.output_dim() as u32).to_le_bytes());
            }
            out.extend_from_slice(&(net.class_count() as u32).to_le_bytes());
            for block in net.blocks() {
                for v in block {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0, path };
        if r.take(5)? != MODEL_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "SSAE1",
            });
        }
        let count = r.u32()? as usize;
        let mut nets = Vec::with_capacity(count);
        for _ in 0..count {
            nets.push(r.network()?);
        }
        if r.pos != bytes.len() {
            return Err(r.malformed("trailing bytes after the last network"));
        }
        match count {
            1 => Ok(ModelFile::Single(nets.pop().expect("one network"))),
            3 => {
                let fusion = nets.pop().expect("three networks");
                let spatial = nets.pop().expect("three networks");
                let spectral = nets.pop().expect("three networks");
                JointModel::new(spectral, spatial, fusion)
                    .map(ModelFile::Joint)
                    .map_err(|e| Error::Malformed {
                        path: path.to_path_buf(),
                        offset: 5,
                        reason: e.to_string(),
                    })
            }
            n => Err(Error::Malformed {
                path: path.to_path_buf(),
                offset: 5,
                reason: format!("network count must be 1 or 3, got {n}"),
            }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl ByteReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                offset: self.bytes.len(),
                expected: self.pos + n,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let start = self.pos;
        let raw = self.take(n * 8)?;
        let vals: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(Error::Malformed {
                path: self.path.to_path_buf(),
                offset: start + 8 * i,
                reason: "non-finite parameter".into(),
            });
        }
        Ok(vals)
    }

    fn malformed(&self, reason: &str) -> Error {
        Error::Malformed {
            path: self.path.to_path_buf(),
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn dim(&mut self) -> Result<usize> {
        let v = self.u32()? as usize;
        // each parameter costs 8 bytes, so no real dimension can exceed this
        if v > self.bytes.len() {
            return Err(self.malformed("dimension larger than the file"));
        }
        Ok(v)
    }

    fn network(&mut self) -> Result<SsaeNetwork> {
        let input = self.dim()?;
        let layers = self.dim()?;
        let widths = (0..layers).map(|_| self.dim()).collect::<Result<Vec<_>>>()?;
        let classes = self.dim()?;
        let mut encoders = Vec::with_capacity(layers);
        let mut prev = input;
        for &w in &widths {
            let weights = Matrix::new(w, prev, self.f64s(w * prev)?)?;
            encoders.push(Encoder {
                w: weights,
                b: self.f64s(w)?,
            });
            prev = w;
        }
        let head = if classes > 0 {
            Some(SoftmaxHead {
                w: Matrix::new(classes, prev, self.f64s(classes * prev)?)?,
                b: self.f64s(classes)?,
            })
        } else {
            None
        };
        SsaeNetwork::new(input, encoders, head)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;
    use crate::numcore::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_matrix(rng: &mut RngState, rows: usize, cols: usize, scale: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
    }

    fn random_vec(rng: &mut RngState, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    }

    fn random_net(rng: &mut RngState, dims: &[usize], classes: usize) -> SsaeNetwork {
        let encoders = dims
            .windows(2)
            .map(|w| Encoder {
                w: random_matrix(rng, w[1], w[0], 1.0),
                b: random_vec(rng, w[1], 0.5),
            })
            .collect();
        let last = *dims.last().unwrap();
        let head = SoftmaxHead {
            w: random_matrix(rng, classes, last, 1.0),
            b: random_vec(rng, classes, 0.5),
        };
        SsaeNetwork::new(dims[0], encoders, Some(head)).unwrap()
    }

    fn random_joint(rng: &mut RngState) -> JointModel {
        let spectral = random_net(rng, &[4, 3, 2], 1).without_head();
        let spatial = random_net(rng, &[3, 2], 1).without_head();
        let fusion = random_net(rng, &[4, 3], 3);
        JointModel::new(spectral, spatial, fusion).unwrap()
    }

    fn labeled(x: Matrix, labels: Vec<usize>) -> SampleSet {
        let n = x.rows();
        SampleSet::new(
            x,
            labels.into_iter().map(Some).collect(),
            (0..n).collect(),
            vec![Domain::Source; n],
        )
        .unwrap()
    }

    /// Central differences of the objective over every parameter.
    fn numeric_grad<M: Trainable>(model: &M, x: &Matrix, y: &[usize], lambda: f64) -> Vec<Vec<f64>> {
        let eps = 1e-5;
        let sizes: Vec<usize> = model.param_blocks().iter().map(|b| b.len()).collect();
        let mut out = Vec::new();
        for (bi, &len) in sizes.iter().enumerate() {
            let mut g = vec![0.0; len];
            for (i, gi) in g.iter_mut().enumerate() {
                let mut plus = model.clone();
                plus.param_blocks_mut()[bi][i] += eps;
                let mut minus = model.clone();
                minus.param_blocks_mut()[bi][i] -= eps;
                *gi = (plus.objective(x, y, lambda).unwrap() - minus.objective(x, y, lambda).unwrap())
                    / (2.0 * eps);
            }
            out.push(g);
        }
        out
    }

    fn rel_err(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        let diff: f64 = a
            .iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| (x - y).powi(2))
            .sum();
        let na: f64 = a.iter().flatten().map(|v| v * v).sum();
        let nb: f64 = b.iter().flatten().map(|v| v * v).sum();
        diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-12)
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let net = SsaeNetwork::identity(3).with_head(4);
        let p = net.softmax_predict(&[0.3, -1.0, 2.0]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut rng = seeded_rng(1);
        for _ in 0..20 {
            let z = random_vec(&mut rng, 3, 2.0);
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            for (p, zi) in softmax(&z).iter().zip(&z) {
                assert!((p - zi.exp() / denom).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax(&[1000.0, 999.0, -1000.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn forward_is_composition_of_encoders() {
        let mut rng = seeded_rng(2);
        let net = random_net(&mut rng, &[5, 4, 3], 2);
        let x = random_vec(&mut rng, 5, 1.0);
        let manual = net.encoders()[1]
            .encode(&net.encoders()[0].encode(&x).unwrap())
            .unwrap();
        assert_eq!(net.forward(&x).unwrap(), manual);
        let batch = Matrix::new(1, 5, x.clone()).unwrap();
        assert_eq!(net.encode_batch(&batch).unwrap().row(0), manual.as_slice());
        assert!(net.forward(&x[..4]).is_err());
    }

    #[test]
    fn pretraining_gives_sparse_finite_codes() {
        let mut rng = seeded_rng(3);
        let x = Matrix::from_fn(200, 30, |i, j| {
            0.5 + 0.3 * ((i % 5) as f64 * 0.7 + j as f64 * 0.2).sin() + rng.random_range(-0.05..0.05)
        });
        let hyper = SaeHyper {
            epochs: 20,
            ..SaeHyper::default()
        };
        let pre = greedy_pretrain(&x, &[40, 20], &hyper, &mut seeded_rng(4)).unwrap();
        assert_eq!(pre.network.depth(), 2);
        assert_eq!(pre.network.output_dim(), 20);
        assert_eq!(pre.loss_traces.len(), 2);
        let h1 = Encoder::clone(&pre.network.encoders()[0]);
        let codes = SsaeNetwork::new(30, vec![h1], None)
            .unwrap()
            .encode_batch(&x)
            .unwrap();
        assert!(codes.is_finite());
        for rho in codes.column_means() {
            assert!(rho > 0.0 && rho < 1.0);
        }
        assert!(pre.network.encode_batch(&x).unwrap().is_finite());
        assert!(greedy_pretrain(&x, &[], &hyper, &mut seeded_rng(4)).is_err());
    }

    #[test]
    fn supervised_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(5);
        for depth in 0..3 {
            let dims: Vec<usize> = [4, 3, 3][..=depth].to_vec();
            let net = random_net(&mut rng, &dims, 3);
            let x = random_matrix(&mut rng, 6, 4, 1.0);
            let y: Vec<usize> = (0..6).map(|i| i % 3).collect();
            let lambda = 0.01;
            let (loss, g) = net.objective_and_grad(&x, &y, lambda).unwrap();
            assert!((loss - net.objective(&x, &y, lambda).unwrap()).abs() < 1e-12);
            let err = rel_err(&g, &numeric_grad(&net, &x, &y, lambda));
            assert!(err <= 1e-6, "depth {depth}: relative error {err}");
        }
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(6);
        let jm = random_joint(&mut rng);
        let x = random_matrix(&mut rng, 5, 7, 1.0);
        let y = vec![0, 1, 2, 1, 0];
        let (_, g) = jm.objective_and_grad(&x, &y, 0.02).unwrap();
        let err = rel_err(&g, &numeric_grad(&jm, &x, &y, 0.02));
        assert!(err <= 1e-6, "relative error {err}");
    }

    #[test]
    fn joint_forward_is_three_stage_composition() {
        let mut rng = seeded_rng(7);
        let jm = random_joint(&mut rng);
        let spe = random_vec(&mut rng, 4, 1.0);
        let spa = random_vec(&mut rng, 3, 1.0);
        let (fused, probs) = jm.joint_forward(&spe, &spa).unwrap();

        let mut stacked = spe.clone();
        for e in jm.spectral.encoders() {
            stacked = e.encode(&stacked).unwrap();
        }
        let mut s2 = spa.clone();
        for e in jm.spatial.encoders() {
            s2 = e.encode(&s2).unwrap();
        }
        stacked.extend(s2);
        let manual = jm.fusion.encoders()[0].encode(&stacked).unwrap();
        assert_eq!(fused, manual);
        let head = jm.fusion.softmax_head().unwrap();
        assert_eq!(probs, softmax(&head.logits(&manual).unwrap()));

        let mut row = spe.clone();
        row.extend(&spa);
        let batch = jm.predict_proba_batch(&Matrix::new(1, 7, row).unwrap()).unwrap();
        for (a, b) in batch.row(0).iter().zip(&probs) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn pass_through_branches_stack_raw_inputs() {
        let fusion = SsaeNetwork::identity(5).with_head(2);
        let jm = JointModel::new(SsaeNetwork::identity(2), SsaeNetwork::identity(3), fusion).unwrap();
        let (fused, probs) = jm.joint_forward(&[1.0, 2.0], &[3.0, 4.0, 5.0]).unwrap();
        assert_eq!(fused, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(probs, vec![0.5, 0.5]);
        let bad = JointModel::new(
            SsaeNetwork::identity(2),
            SsaeNetwork::identity(2),
            SsaeNetwork::identity(5).with_head(2),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut rng = seeded_rng(8);
        let net = random_net(&mut rng, &[3, 4], 2);
        let set = labeled(
            random_matrix(&mut rng, 10, 3, 1.0),
            (0..10).map(|i| i % 2).collect(),
        );
        for update_encoders in [true, false] {
            let mut trained = net.clone();
            let cfg = FinetuneConfig {
                lr: 0.0,
                epochs: 3,
                update_encoders,
                ..FinetuneConfig::default()
            };
            finetune(&mut trained, &set, &cfg, &mut seeded_rng(0)).unwrap();
            assert_eq!(trained, net);
        }
    }

    #[test]
    fn head_only_training_freezes_encoders() {
        let mut rng = seeded_rng(9);
        let net = random_net(&mut rng, &[3, 4], 2);
        let set = labeled(
            random_matrix(&mut rng, 10, 3, 1.0),
            (0..10).map(|i| i % 2).collect(),
        );
        let mut trained = net.clone();
        let cfg = FinetuneConfig {
            epochs: 5,
            ..FinetuneConfig::head_only()
        };
        let report = finetune(&mut trained, &set, &cfg, &mut seeded_rng(0)).unwrap();
        assert_eq!(trained.encoders(), net.encoders());
        assert_ne!(trained.softmax_head(), net.softmax_head());
        assert_eq!(report.loss_trace.len(), 5);
    }

    #[test]
    fn separable_toy_is_learned_exactly() {
        let mut rng = seeded_rng(10);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..40 {
            let class = i % 2;
            let cx = if class == 0 { 0.2 } else { 0.8 };
            rows.push(vec![cx + rng.random_range(-0.1..0.1), rng.random_range(0.0..1.0)]);
            y.push(class);
        }
        let set = labeled(Matrix::from_rows(&rows).unwrap(), y);
        let hyper = SaeHyper {
            epochs: 50,
            ..SaeHyper::with_hidden(6)
        };
        let mut net = greedy_pretrain(set.features(), &[6], &hyper, &mut seeded_rng(11))
            .unwrap()
            .network
            .with_head(2);
        let cfg = FinetuneConfig {
            lr: 0.5,
            ..FinetuneConfig::default()
        };
        finetune(&mut net, &set, &cfg, &mut seeded_rng(12)).unwrap();
        assert_eq!(accuracy(&net, &set).unwrap(), 1.0);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut rng = seeded_rng(13);
        let net = random_net(&mut rng, &[2, 2], 2);
        let set = labeled(random_matrix(&mut rng, 4, 2, 1.0), vec![0, 1, 0, 1]);
        let cfg = FinetuneConfig {
            lr: 1e300,
            epochs: 5,
            ..FinetuneConfig::default()
        };
        let err = finetune(&mut net.clone(), &set, &cfg, &mut seeded_rng(0)).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err:?}");
    }

    #[test]
    fn model_file_round_trip() {
        let mut rng = seeded_rng(14);
        let jm = random_joint(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ssae");
        ModelFile::Joint(jm.clone()).save(&path).unwrap();
        let ModelFile::Joint(back) = ModelFile::load(&path).unwrap() else {
            panic!("expected a joint model");
        };
        let x = random_matrix(&mut rng, 8, 7, 1.0);
        let a = jm.predict_proba_batch(&x).unwrap();
        let b = back.predict_proba_batch(&x).unwrap();
        assert!(a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(p, q)| p.to_bits() == q.to_bits()));

        let net = random_net(&mut rng, &[3, 2], 4);
        let bytes = ModelFile::Single(net.clone()).to_bytes();
        assert_eq!(&bytes[..5], b"SSAE1");
        // magic, count, input, layers, one width, classes, then 6+2+8+4 reals
        assert_eq!(bytes.len(), 5 + 4 * 5 + 8 * (6 + 2 + 8 + 4));
        assert_eq!(
            ModelFile::from_bytes(&bytes, &path).unwrap(),
            ModelFile::Single(net)
        );
        assert!(matches!(
            ModelFile::from_bytes(&bytes[..bytes.len() - 1], &path),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            ModelFile::from_bytes(b"NOPE!", &path),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn truncating_inputs_drops_weight_columns() {
        let mut rng = seeded_rng(15);
        let mut net = random_net(&mut rng, &[5, 3], 2);
        let original = net.clone();
        net.truncate_inputs(3);
        assert_eq!(net.input_dim(), 3);
        let x = [0.1, 0.2, 0.3];
        let padded = [0.1, 0.2, 0.3, 0.0, 0.0];
        assert_eq!(net.forward(&x).unwrap(), original.forward(&padded).unwrap());
    }

    #[test]
    fn extending_the_head_keeps_old_rows() {
        let mut head = SoftmaxHead {
            w: Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap(),
            b: vec![0.5],
        };
        head.extend_to(3);
        assert_eq!(head.class_count(), 3);
        assert_eq!(head.w.row(0), &[1.0, 2.0]);
        assert_eq!(head.w.row(2), &[0.0, 0.0]);
        assert_eq!(head.b, vec![0.5, 0.0, 0.0]);
    }

    #[test]
    fn margins_and_argmax() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(logit_margin(&[1.0, 3.0, 2.5]), 0.5);
        assert_eq!(logit_margin(&[2.0, 2.0]), 0.0);
    }

    proptest! {
        #[test]
        fn softmax_is_normalized_and_shift_invariant(
            z in proptest::collection::vec(-50.0f64..50.0, 1..8),
            c in -100.0f64..100.0
        ) {
            let p = softmax(&z);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            for (a, b) in p.iter().zip(softmax(&shifted)) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn joint_probabilities_sum_to_one(seed in any::<u64>()) {
            let mut rng = seeded_rng(seed);
            let jm = random_joint(&mut rng);
            let x = random_matrix(&mut rng, 100, 7, 3.0);
            let p = jm.predict_proba_batch(&x).unwrap();
            for row in p.row_iter() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}
