//! Tiny differentiable models: dense layers, ReLU, per-batch normalization and
//! identity-shortcut residual blocks, topped by a classifier head.
//!
//! Parameters live in one flat [`Tensor`] laid out in layer order, and inside
//! each layer as (weights, bias, gamma, beta). Gradients use the same layout so
//! that replicas on different workers produce directly comparable buffers.
//!
//! The loss returned by [`Model::forward_loss`] is only the sample-dependent
//! term; L2 regularization is handled by the solver after aggregation.

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_STAT_MOMENTUM: f64 = 0.9;
pub const CLASSIFIER_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Sample-dependent loss term placed on top of the classifier outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Softmax cross-entropy against the label.
    CrossEntropy,
    /// Sum of the classifier outputs, ignoring the label. Its gradient with
    /// respect to the classifier parameters does not depend on them, which
    /// makes small-step and large-step SGD exactly comparable.
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub residual_blocks: usize,
    pub batch_norm: bool,
    pub classes: usize,
    pub loss: LossKind,
}

impl ModelSpec {
    /// Multinomial logistic regression: no hidden layers.
    pub fn logistic(input_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            hidden: Vec::new(),
            residual_blocks: 0,
            batch_norm: false,
            classes,
            loss: LossKind::CrossEntropy,
        }
    }

    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize, batch_norm: bool) -> Self {
        Self {
            input_dim,
            hidden: hidden.to_vec(),
            residual_blocks: 0,
            batch_norm,
            classes,
            loss: LossKind::CrossEntropy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim", "must be at least 1"));
        }
        if self.classes == 0 {
            return Err(Error::config("model.classes", "must be at least 1"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "widths must be positive"));
        }
        Ok(())
    }
}

/// A minibatch: `inputs` is `n x dim`, one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if inputs.shape().len() != 2 || inputs.shape()[0] != labels.len() {
            return Err(Error::BadShape {
                len: inputs.len(),
                shape: inputs.shape().to_vec(),
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Each sample repeated `times` times, preserving order of first appearance.
    pub fn repeated(&self, times: usize) -> Batch {
        let dim = self.dim();
        let mut data = Vec::with_capacity(self.inputs.len() * times);
        let mut labels = Vec::with_capacity(self.len() * times);
        for _ in 0..times {
            data.extend_from_slice(self.inputs.data());
            labels.extend_from_slice(&self.labels);
        }
        let n = labels.len();
        Batch {
            inputs: Tensor::new(data, vec![n, dim]).expect("shape by construction"),
            labels,
        }
    }

    /// Concatenate batches row-wise.
    pub fn concat(batches: &[Batch]) -> Result<Batch> {
        let first = batches.first().ok_or(Error::EmptyBatch)?;
        let dim = first.dim();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for b in batches {
            if b.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: b.dim(),
                });
            }
            data.extend_from_slice(b.inputs.data());
            labels.extend_from_slice(&b.labels);
        }
        let n = labels.len();
        Batch::new(Tensor::new(data, vec![n, dim])?, labels)
    }
}

#[derive(Debug, Clone)]
struct Dense {
    in_dim: usize,
    out_dim: usize,
    offset: usize,
}

impl Dense {
    fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.in_dim * self.out_dim
    }

    fn bias(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.in_dim * self.out_dim;
        start..start + self.out_dim
    }

    fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Batch normalization over the rows of one worker's minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct BnLayer {
    pub dim: usize,
    offset: usize,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub stat_momentum: f64,
}

impl BnLayer {
    fn new(dim: usize, offset: usize) -> Self {
        Self {
            dim,
            offset,
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            eps: BN_EPS,
            stat_momentum: BN_STAT_MOMENTUM,
        }
    }

    fn gamma(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.dim
    }

    fn beta(&self) -> std::ops::Range<usize> {
        self.offset + self.dim..self.offset + 2 * self.dim
    }
}

#[derive(Debug, Clone)]
enum Op {
    Dense(Dense),
    BatchNorm(BnLayer),
    Relu,
    /// Opens a residual block: remembers the block input.
    SkipSave,
    /// Closes a residual block: adds the remembered input.
    SkipAdd,
}

/// Per-op state retained by a train-mode forward pass.
#[derive(Debug, Clone)]
enum Cache {
    Dense { input: Vec<f64> },
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    Relu { mask: Vec<bool> },
    Skip,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    n: usize,
    ops: Vec<Cache>,
    logits: Vec<f64>,
    labels: Vec<usize>,
}

/// Running statistics of every BN layer, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState(pub Vec<(Vec<f64>, Vec<f64>)>);

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    ops: Vec<Op>,
    params: Tensor,
    classifier: usize,
    cache: Option<ForwardCache>,
    relu_signature: u64,
}

impl Model {
    /// Build the layer graph with every parameter zeroed.
    pub fn zeroed(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut ops = Vec::new();
        let mut offset = 0;
        let mut width = spec.input_dim;
        let push_dense = |ops: &mut Vec<Op>, offset: &mut usize, i: usize, o: usize| {
            let d = Dense {
                in_dim: i,
                out_dim: o,
                offset: *offset,
            };
            *offset += d.param_count();
            ops.push(Op::Dense(d));
        };
        for &h in &spec.hidden {
            push_dense(&mut ops, &mut offset, width, h);
            if spec.batch_norm {
                ops.push(Op::BatchNorm(BnLayer::new(h, offset)));
                offset += 2 * h;
            }
            ops.push(Op::Relu);
            width = h;
        }
        for _ in 0..spec.residual_blocks {
            ops.push(Op::SkipSave);
            for _ in 0..2 {
                push_dense(&mut ops, &mut offset, width, width);
                ops.push(Op::BatchNorm(BnLayer::new(width, offset)));
                offset += 2 * width;
                ops.push(Op::Relu);
            }
            ops.push(Op::SkipAdd);
        }
        let classifier = ops.len();
        push_dense(&mut ops, &mut offset, width, spec.classes);
        Ok(Self {
            spec: spec.clone(),
            ops,
            params: Tensor::zeros(&[offset]),
            classifier,
            cache: None,
            relu_signature: 0,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &Tensor {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Tensor {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Tensor) -> Result<()> {
        if params.shape() != self.params.shape() {
            return Err(Error::ShapeMismatch {
                left: self.params.shape().to_vec(),
                right: params.shape().to_vec(),
            });
        }
        self.params = params;
        Ok(())
    }

    /// 1.0 for parameters subject to weight decay, 0.0 for BN scale/shift.
    pub fn decay_mask(&self) -> Tensor {
        let mut mask = vec![1.0; self.params.len()];
        for op in &self.ops {
            if let Op::BatchNorm(bn) = op {
                for i in bn.gamma().chain(bn.beta()) {
                    mask[i] = 0.0;
                }
            }
        }
        Tensor::from_vec(mask)
    }

    pub fn bn_state(&self) -> BnState {
        BnState(
            self.bn_layers()
                .map(|bn| (bn.running_mean.clone(), bn.running_var.clone()))
                .collect(),
        )
    }

    pub fn set_bn_state(&mut self, state: &BnState) {
        let mut it = state.0.iter();
        for op in &mut self.ops {
            if let Op::BatchNorm(bn) = op {
                let (m, v) = it.next().expect("BN state length matches model");
                bn.running_mean.clone_from(m);
                bn.running_var.clone_from(v);
            }
        }
    }

    pub fn bn_layers(&self) -> impl Iterator<Item = &BnLayer> {
        self.ops.iter().filter_map(|op| match op {
            Op::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    /// Parameter ranges of each layer that owns parameters, in flattening order.
    /// These are the natural allreduce buckets.
    pub fn param_groups(&self) -> Vec<std::ops::Range<usize>> {
        self.ops
            .iter()
            .filter_map(|op| match op {
                Op::Dense(d) => Some(d.offset..d.offset + d.param_count()),
                Op::BatchNorm(bn) => Some(bn.offset..bn.offset + 2 * bn.dim),
                _ => None,
            })
            .collect()
    }

    /// Hash of the ReLU on/off pattern seen by the last train-mode forward.
    pub fn relu_signature(&self) -> u64 {
        self.relu_signature
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if batch.dim() != self.spec.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.spec.input_dim,
                got: batch.dim(),
            });
        }
        if self.spec.loss == LossKind::CrossEntropy {
            if let Some(&label) = batch.labels.iter().find(|&&l| l >= self.spec.classes) {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: self.spec.classes,
                });
            }
        }
        Ok(())
    }

    /// Run the ops in `0..upto` over the batch. Returns the activations and,
    /// when `keep` is set, the per-op caches plus the ReLU pattern hash.
    fn run(
        &mut self,
        batch: &Batch,
        mode: Mode,
        upto: usize,
        keep: bool,
    ) -> Result<(Vec<f64>, usize, Vec<Cache>, u64)> {
        self.check_batch(batch)?;
        let n = batch.len();
        let mut act = batch.inputs.data().to_vec();
        let mut width = self.spec.input_dim;
        let mut caches = Vec::new();
        let mut skips: Vec<Vec<f64>> = Vec::new();
        let mut sig: u64 = 0xcbf2_9ce4_8422_2325;
        let params = self.params.data();
        for op in self.ops[..upto].iter_mut() {
            let cache = match op {
                Op::Dense(d) => {
                    let out = dense_forward(d, params, &act, n);
                    width = d.out_dim;
                    Cache::Dense {
                        input: std::mem::replace(&mut act, out),
                    }
                }
                Op::BatchNorm(bn) => {
                    let (out, cache) = bn_apply(bn, params, &act, n, mode)?;
                    act = out;
                    cache
                }
                Op::Relu => {
                    let mask: Vec<bool> = act.iter().map(|&v| v > 0.0).collect();
                    for (v, &m) in act.iter_mut().zip(&mask) {
                        if !m {
                            *v = 0.0;
                        }
                        sig = (sig ^ m as u64).wrapping_mul(0x0000_0100_0000_01b3);
                    }
                    Cache::Relu { mask }
                }
                Op::SkipSave => {
                    skips.push(act.clone());
                    Cache::Skip
                }
                Op::SkipAdd => {
                    let skip = skips.pop().expect("balanced residual blocks");
                    for (v, s) in act.iter_mut().zip(skip) {
                        *v += s;
                    }
                    Cache::Skip
                }
            };
            if keep {
                caches.push(cache);
            }
        }
        Ok((act, width, caches, sig))
    }

    /// Classifier outputs, `n x classes`.
    pub fn logits(&mut self, batch: &Batch, mode: Mode) -> Result<Tensor> {
        let (act, width, _, _) = self.run(batch, mode, self.ops.len(), false)?;
        Tensor::new(act, vec![batch.len(), width])
    }

    /// Per-sample losses `l_B(x, w)` for every row of the batch. In train
    /// mode BN uses this batch's statistics, so each entry depends on the
    /// whole batch.
    pub fn forward_per_sample(&mut self, batch: &Batch, mode: Mode) -> Result<Vec<f64>> {
        let keep = mode == Mode::Train;
        let (logits, _, caches, sig) = self.run(batch, mode, self.ops.len(), keep)?;
        let losses = sample_losses(self.spec.loss, &logits, &batch.labels, self.spec.classes);
        if keep {
            self.relu_signature = sig;
            self.cache = Some(ForwardCache {
                n: batch.len(),
                ops: caches,
                logits,
                labels: batch.labels.clone(),
            });
        }
        Ok(losses)
    }

    /// Mean sample-dependent loss over the batch.
    pub fn forward_loss(&mut self, batch: &Batch, mode: Mode) -> Result<f64> {
        let losses = self.forward_per_sample(batch, mode)?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Gradient of the batch-mean sample-dependent loss, i.e. `(1/n) sum grad eps`.
    pub fn backward(&mut self) -> Result<Tensor> {
        let n = self.cache.as_ref().ok_or(Error::NoForwardCache)?.n;
        self.backward_normalized(n as f64)
    }

    /// Gradient of `(1/norm) sum grad eps` over the cached batch. The
    /// normalization is applied once, at the loss output, so callers choosing
    /// `norm = k*n` get a gradient that sums directly across `k` workers.
    pub fn backward_normalized(&mut self, norm: f64) -> Result<Tensor> {
        let cache = self.cache.take().ok_or(Error::NoForwardCache)?;
        let n = cache.n;
        let classes = self.spec.classes;
        let mut grad = vec![0.0; self.params.len()];
        let mut delta =
            loss_output_grad(self.spec.loss, &cache.logits, &cache.labels, classes, norm);
        let params = self.params.data();
        let mut skip_grads: Vec<Vec<f64>> = Vec::new();
        for (op, c) in self.ops.iter().zip(&cache.ops).rev() {
            match (op, c) {
                (Op::Dense(d), Cache::Dense { input }) => {
                    delta = dense_backward(d, params, input, &delta, n, &mut grad);
                }
                (Op::BatchNorm(bn), Cache::BatchNorm { xhat, inv_std }) => {
                    delta = bn_backward(bn, params, xhat, inv_std, &delta, n, &mut grad);
                }
                (Op::Relu, Cache::Relu { mask }) => {
                    for (g, &m) in delta.iter_mut().zip(mask) {
                        if !m {
                            *g = 0.0;
                        }
                    }
                }
                (Op::SkipAdd, Cache::Skip) => skip_grads.push(delta.clone()),
                (Op::SkipSave, Cache::Skip) => {
                    let s = skip_grads.pop().expect("balanced residual blocks");
                    for (g, sg) in delta.iter_mut().zip(s) {
                        *g += sg;
                    }
                }
                _ => unreachable!("cache mirrors op list"),
            }
        }
        Ok(Tensor::from_vec(grad))
    }

    /// Output of the network body before the classifier.
    pub fn features(&mut self, batch: &Batch, mode: Mode) -> Result<Tensor> {
        let (act, width, _, _) = self.run(batch, mode, self.classifier, false)?;
        Tensor::new(act, vec![batch.len(), width])
    }

    /// Fraction of rows whose arg-max classifier output matches the label.
    pub fn accuracy(&mut self, batch: &Batch) -> Result<f64> {
        let logits = self.logits(batch, Mode::Eval)?;
        let correct = logits
            .data()
            .chunks(self.spec.classes)
            .zip(&batch.labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
        Ok(correct as f64 / batch.len() as f64)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// He-initialized model. Hidden dense weights use std `sqrt(2/fan_in)`, the
/// classifier uses [`CLASSIFIER_INIT_STD`], biases and BN shifts start at 0,
/// and BN scales at 1 except the last BN of each residual block, which gets
/// `gamma_last_init`.
pub fn init_model(spec: &ModelSpec, seed: u64, gamma_last_init: f64) -> Result<Model> {
    let mut model = Model::zeroed(spec)?;
    let mut rng = Rng::new(seed);
    let classifier = model.classifier;
    let mut bn_in_block = 0;
    let mut in_block = false;
    let p = model.params.data_mut();
    for (idx, op) in model.ops.iter().enumerate() {
        match op {
            Op::Dense(d) => {
                let std = if idx == classifier {
                    CLASSIFIER_INIT_STD
                } else {
                    he_std(d.in_dim)
                };
                for i in d.weights() {
                    p[i] = std * rng.normal();
                }
            }
            Op::BatchNorm(bn) => {
                let last_in_block = in_block && bn_in_block == 1;
                let g = if last_in_block { gamma_last_init } else { 1.0 };
                for i in bn.gamma() {
                    p[i] = g;
                }
                if in_block {
                    bn_in_block += 1;
                }
            }
            Op::SkipSave => {
                in_block = true;
                bn_in_block = 0;
            }
            Op::SkipAdd => in_block = false,
            Op::Relu => {}
        }
    }
    Ok(model)
}

pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

fn dense_forward(d: &Dense, params: &[f64], input: &[f64], n: usize) -> Vec<f64> {
    let w = &params[d.weights()];
    let b = &params[d.bias()];
    let mut out = vec![0.0; n * d.out_dim];
    for r in 0..n {
        let x = &input[r * d.in_dim..(r + 1) * d.in_dim];
        for o in 0..d.out_dim {
            let wrow = &w[o * d.in_dim..(o + 1) * d.in_dim];
            let mut acc = b[o];
            for (wi, xi) in wrow.iter().zip(x) {
                acc += wi * xi;
            }
            out[r * d.out_dim + o] = acc;
        }
    }
    out
}

fn dense_backward(
    d: &Dense,
    params: &[f64],
    input: &[f64],
    delta: &[f64],
    n: usize,
    grad: &mut [f64],
) -> Vec<f64> {
    let w = &params[d.weights()];
    let (wr, br) = (d.weights(), d.bias());
    let mut dx = vec![0.0; n * d.in_dim];
    for r in 0..n {
        let x = &input[r * d.in_dim..(r + 1) * d.in_dim];
        let dy = &delta[r * d.out_dim..(r + 1) * d.out_dim];
        let dxr = &mut dx[r * d.in_dim..(r + 1) * d.in_dim];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[br.start + o] += g;
            let gw = &mut grad[wr.start + o * d.in_dim..wr.start + (o + 1) * d.in_dim];
            for (gwi, xi) in gw.iter_mut().zip(x) {
                *gwi += g * xi;
            }
            let wrow = &w[o * d.in_dim..(o + 1) * d.in_dim];
            for (dxi, wi) in dxr.iter_mut().zip(wrow) {
                *dxi += g * wi;
            }
        }
    }
    dx
}

/// Normalize each column of an `n x d` activation matrix, then scale and shift.
/// Train mode uses the biased batch variance and folds the batch statistics
/// into the running averages.
fn bn_apply(
    bn: &mut BnLayer,
    params: &[f64],
    act: &[f64],
    n: usize,
    mode: Mode,
) -> Result<(Vec<f64>, Cache)> {
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let d = bn.dim;
    let gamma = &params[bn.gamma()];
    let beta = &params[bn.beta()];
    let (mean, var) = match mode {
        Mode::Train => column_stats(act, n, d),
        Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
    let mut xhat = vec![0.0; n * d];
    let mut out = vec![0.0; n * d];
    for r in 0..n {
        for c in 0..d {
            let i = r * d + c;
            xhat[i] = (act[i] - mean[c]) * inv_std[c];
            out[i] = gamma[c] * xhat[i] + beta[c];
        }
    }
    if mode == Mode::Train {
        let m = bn.stat_momentum;
        for c in 0..d {
            bn.running_mean[c] = m * bn.running_mean[c] + (1.0 - m) * mean[c];
            bn.running_var[c] = m * bn.running_var[c] + (1.0 - m) * var[c];
        }
    }
    Ok((out, Cache::BatchNorm { xhat, inv_std }))
}

fn column_stats(act: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    for row in act.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in act.chunks(d) {
        for c in 0..d {
            var[c] += (row[c] - mean[c]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= n as f64);
    (mean, var)
}

fn bn_backward(
    bn: &BnLayer,
    params: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    delta: &[f64],
    n: usize,
    grad: &mut [f64],
) -> Vec<f64> {
    let d = bn.dim;
    let gamma = &params[bn.gamma()];
    let (gr, br) = (bn.gamma(), bn.beta());
    let mut sum_dxhat = vec![0.0; d];
    let mut sum_dxhat_xhat = vec![0.0; d];
    for r in 0..n {
        for c in 0..d {
            let i = r * d + c;
            grad[gr.start + c] += delta[i] * xhat[i];
            grad[br.start + c] += delta[i];
            let dxh = delta[i] * gamma[c];
            sum_dxhat[c] += dxh;
            sum_dxhat_xhat[c] += dxh * xhat[i];
        }
    }
    let nf = n as f64;
    let mut dx = vec![0.0; n * d];
    for r in 0..n {
        for c in 0..d {
            let i = r * d + c;
            let dxh = delta[i] * gamma[c];
            dx[i] = inv_std[c] / nf * (nf * dxh - sum_dxhat[c] - xhat[i] * sum_dxhat_xhat[c]);
        }
    }
    dx
}

/// Stand-alone batch normalization of an `n x d` tensor through `layer`, whose
/// scale and shift are given explicitly. Used for inspecting BN in isolation.
pub fn bn_forward(
    activations: &Tensor,
    layer: &mut BnLayer,
    gamma: &[f64],
    beta: &[f64],
    mode: Mode,
) -> Result<Tensor> {
    let shape = activations.shape();
    if shape.len() != 2 || shape[1] != layer.dim {
        return Err(Error::DimensionMismatch {
            expected: layer.dim,
            got: shape.get(1).copied().unwrap_or(0),
        });
    }
    let n = shape[0];
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut params = gamma.to_vec();
    params.extend_from_slice(beta);
    let mut local = layer.clone();
    local.offset = 0;
    let (out, _) = bn_apply(&mut local, &params, activations.data(), n, mode)?;
    layer.running_mean = local.running_mean;
    layer.running_var = local.running_var;
    Tensor::new(out, vec![n, layer.dim])
}

/// Fresh BN layer with default eps and statistic momentum.
pub fn bn_layer(dim: usize) -> BnLayer {
    BnLayer::new(dim, 0)
}

fn sample_losses(kind: LossKind, logits: &[f64], labels: &[usize], classes: usize) -> Vec<f64> {
    logits
        .chunks(classes)
        .zip(labels)
        .map(|(row, &y)| match kind {
            LossKind::CrossEntropy => log_sum_exp(row) - row[y],
            LossKind::Linear => row.iter().sum(),
        })
        .collect()
}

fn loss_output_grad(
    kind: LossKind,
    logits: &[f64],
    labels: &[usize],
    classes: usize,
    norm: f64,
) -> Vec<f64> {
    let mut delta = vec![0.0; logits.len()];
    for ((row, drow), &y) in logits
        .chunks(classes)
        .zip(delta.chunks_mut(classes))
        .zip(labels)
    {
        match kind {
            LossKind::CrossEntropy => {
                let lse = log_sum_exp(row);
                for (c, (d, &z)) in drow.iter_mut().zip(row).enumerate() {
                    let p = (z - lse).exp();
                    *d = (p - if c == y { 1.0 } else { 0.0 }) / norm;
                }
            }
            LossKind::Linear => drow.iter_mut().for_each(|d| *d = 1.0 / norm),
        }
    }
    delta
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}
