//! Fully-connected ReLU classifier with a softmax cross-entropy head.
//!
//! Weights of layer `k` live in segment `fcK.weight` as a row-major
//! `fan_in x fan_out` matrix, so a minibatch forward pass is `X · W + b`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::io::Dataset;
use crate::objective::Objective;
use crate::rng::{self, Stream};
use crate::scalar::{all_finite, Real};
use crate::space::{LayerLayout, Mask, ParamSpace};

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel<T> {
    space: ParamSpace<T>,
    layer_sizes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be > 0",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay {} must be >= 0",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
    pub learning_rate: f64,
}

struct Forward<T> {
    /// Post-activation output of every hidden layer.
    hidden: Vec<Array2<T>>,
    logits: Array2<T>,
}

impl<T: Real> MlpModel<T> {
    /// Glorot-uniform weights, zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        let layout = LayerLayout::mlp(layer_sizes)?;
        let mut rng = rng::stream(seed, Stream::Init);
        let mut values = vec![T::zero(); layout.dim()];
        for seg in layout.segments().iter().filter(|s| s.is_prunable()) {
            let bound = (6.0 / (seg.fan_in + seg.fan_out) as f64).sqrt();
            for v in &mut values[seg.range()] {
                *v = T::of(rng.random_range(-bound..bound));
            }
        }
        Self::from_space(ParamSpace::new(values, layout)?, layer_sizes)
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        let layout = LayerLayout::mlp(layer_sizes)?;
        Self::from_space(ParamSpace::zeros(layout), layer_sizes)
    }

    pub fn from_space(space: ParamSpace<T>, layer_sizes: &[usize]) -> Result<Self> {
        let expected = LayerLayout::mlp(layer_sizes)?;
        if &expected != space.layout() {
            return Err(Error::Structural(format!(
                "parameter layout does not match layer sizes {layer_sizes:?}"
            )));
        }
        Ok(Self {
            space,
            layer_sizes: layer_sizes.to_vec(),
        })
    }

    pub fn space(&self) -> &ParamSpace<T> {
        &self.space
    }

    pub fn space_mut(&mut self) -> &mut ParamSpace<T> {
        &mut self.space
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn in_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().expect("at least two layers")
    }

    fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Same architecture with the weights replaced by `w`.
    pub fn with_weights(&self, w: &[T]) -> Result<Self> {
        let mut out = self.clone();
        out.space.set_values(w.to_vec())?;
        Ok(out)
    }

    fn weight<'a>(&self, w: &'a [T], k: usize) -> ArrayView2<'a, T> {
        let seg = &self.space.layout().segments()[2 * k];
        ArrayView2::from_shape((seg.fan_in, seg.fan_out), &w[seg.range()]).expect("segment shape")
    }

    fn bias<'a>(&self, w: &'a [T], k: usize) -> &'a [T] {
        &w[self.space.layout().segments()[2 * k + 1].range()]
    }

    fn forward_with(&self, w: &[T], inputs: ArrayView2<T>) -> Result<Forward<T>> {
        if inputs.ncols() != self.in_dim() {
            return Err(Error::Structural(format!(
                "input dimension {}, model expects {}",
                inputs.ncols(),
                self.in_dim()
            )));
        }
        let mut hidden: Vec<Array2<T>> = Vec::with_capacity(self.n_layers() - 1);
        for k in 0..self.n_layers() {
            let x = if k == 0 {
                inputs.view()
            } else {
                hidden[k - 1].view()
            };
            let mut z = x.dot(&self.weight(w, k));
            let b = self.bias(w, k);
            for mut row in z.rows_mut() {
                for (zi, &bi) in row.iter_mut().zip(b) {
                    *zi += bi;
                }
            }
            if !z.iter().all(|v| v.is_finite()) {
                return Err(Error::numeric(
                    format!("forward pass, layer fc{}", k + 1),
                    "non-finite activation",
                ));
            }
            if k + 1 == self.n_layers() {
                return Ok(Forward { hidden, logits: z });
            }
            z.mapv_inplace(|v| v.max(T::zero()));
            hidden.push(z);
        }
        unreachable!("loop returns at the output layer")
    }

    /// Logits for a minibatch.
    pub fn forward(&self, inputs: ArrayView2<T>) -> Result<Array2<T>> {
        Ok(self.forward_with(self.space.values(), inputs)?.logits)
    }

    /// Mean cross-entropy and its gradient over a minibatch, evaluated at `w`.
    pub fn batch_loss_and_grad_at(
        &self,
        w: &[T],
        inputs: ArrayView2<T>,
        labels: &[usize],
    ) -> Result<(T, Vec<T>)> {
        check_len("labels", labels.len(), inputs.nrows())?;
        let b = inputs.nrows();
        if b == 0 {
            return Err(Error::Data("empty minibatch".into()));
        }
        let fwd = self.forward_with(w, inputs.view())?;
        let (loss, mut delta) = softmax_xent(&fwd.logits, labels, self.classes())?;
        let inv_b = T::one() / T::of_usize(b);
        delta.mapv_inplace(|v| v * inv_b);

        let mut grad = vec![T::zero(); w.len()];
        let segs = self.space.layout().segments();
        for k in (0..self.n_layers()).rev() {
            let wseg = &segs[2 * k];
            let bseg = &segs[2 * k + 1];
            let x = if k == 0 {
                inputs.view()
            } else {
                fwd.hidden[k - 1].view()
            };
            {
                let gw =
                    ArrayViewMut2::from_shape((wseg.fan_in, wseg.fan_out), &mut grad[wseg.range()])
                        .expect("segment shape");
                general_mat_mul(T::one(), &x.t(), &delta, T::zero(), &mut { gw });
            }
            for (g, s) in grad[bseg.range()].iter_mut().zip(delta.sum_axis(Axis(0))) {
                *g = s;
            }
            if k > 0 {
                let mut up = delta.dot(&self.weight(w, k).t());
                for (u, &a) in up.iter_mut().zip(fwd.hidden[k - 1].iter()) {
                    if a <= T::zero() {
                        *u = T::zero();
                    }
                }
                delta = up;
            }
        }
        if !all_finite(&grad) {
            return Err(Error::numeric("backward pass", "non-finite gradient"));
        }
        Ok((loss * inv_b, grad))
    }

    pub fn batch_loss_and_grad(
        &self,
        inputs: ArrayView2<T>,
        labels: &[usize],
    ) -> Result<(T, Vec<T>)> {
        self.batch_loss_and_grad_at(self.space.values(), inputs, labels)
    }

    /// Cross-entropy and gradient for one example.
    pub fn loss_and_grad(&self, input: &[T], label: usize) -> Result<(T, Vec<T>)> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Structural(e.to_string()))?;
        self.batch_loss_and_grad(x, &[label])
    }

    pub fn probabilities(&self, input: &[T]) -> Result<Vec<T>> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Structural(e.to_string()))?;
        let logits = self.forward(x)?;
        Ok(softmax(logits.row(0).as_slice().expect("contiguous row")))
    }

    /// Draws a label from the model's softmax at `input`.
    pub fn sample_label<R: Rng + ?Sized>(&self, input: &[T], rng: &mut R) -> Result<usize> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Structural(e.to_string()))?;
        let logits = self.forward(x)?;
        sample_categorical(logits.row(0).as_slice().expect("contiguous row"), rng)
    }

    /// Mean loss and accuracy, evaluated in blocks of 1000 examples.
    pub fn evaluate(&self, data: &Dataset<T>) -> Result<Metrics> {
        self.evaluate_at(self.space.values(), data)
    }

    pub fn evaluate_at(&self, w: &[T], data: &Dataset<T>) -> Result<Metrics> {
        if data.is_empty() {
            return Err(Error::Data("cannot evaluate on an empty dataset".into()));
        }
        let mut loss = 0.0;
        let mut correct = 0usize;
        let n = data.len();
        for start in (0..n).step_by(1000) {
            let end = (start + 1000).min(n);
            let x = data.inputs().slice(ndarray::s![start..end, ..]);
            let labels = &data.labels()[start..end];
            let logits = self.forward_with(w, x)?.logits;
            let (l, _) = softmax_xent(&logits, labels, self.classes())?;
            loss += l.as_f64();
            for (row, &y) in logits.rows().into_iter().zip(labels) {
                if argmax(row.iter().copied()) == y {
                    correct += 1;
                }
            }
        }
        Ok(Metrics {
            loss: loss / n as f64,
            accuracy: correct as f64 / n as f64,
        })
    }
}

/// Summed cross-entropy over rows and `softmax - onehot`.
fn softmax_xent<T: Real>(
    logits: &Array2<T>,
    labels: &[usize],
    classes: usize,
) -> Result<(T, Array2<T>)> {
    let mut delta = logits.clone();
    let mut total = T::zero();
    for (mut row, &y) in delta.rows_mut().into_iter().zip(labels) {
        if y >= classes {
            return Err(Error::Data(format!("label {y} outside 0..{classes}")));
        }
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let shifted_y = row[y] - max;
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        total += sum.ln() - shifted_y;
        for v in row.iter_mut() {
            *v /= sum;
        }
        row[y] -= T::one();
    }
    if !total.is_finite() {
        return Err(Error::numeric("loss", "non-finite cross-entropy"));
    }
    Ok((total, delta))
}

pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Samples an index with probability `softmax(logits)`.
pub fn sample_categorical<T: Real, R: Rng + ?Sized>(logits: &[T], rng: &mut R) -> Result<usize> {
    if logits.is_empty() || !all_finite(logits) {
        return Err(Error::numeric(
            "label sampling",
            "logits empty or non-finite",
        ));
    }
    let p = softmax(logits);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, pk) in p.iter().enumerate() {
        acc += pk.as_f64();
        if u < acc {
            return Ok(k);
        }
    }
    Ok(p.len() - 1)
}

fn argmax<T: Real>(it: impl Iterator<Item = T>) -> usize {
    let mut best = (0, T::neg_infinity());
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// SGD with momentum and weight decay that never updates masked weights.
pub struct Sgd<T> {
    velocity: Vec<T>,
}

impl<T: Real> Sgd<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            velocity: vec![T::zero(); dim],
        }
    }

    /// Clears momentum at newly masked entries.
    pub fn apply_mask(&mut self, mask: &Mask) {
        mask.apply(&mut self.velocity);
    }

    /// One pass over `data` in shuffled minibatches; returns the mean loss.
    #[allow(clippy::too_many_arguments)]
    pub fn epoch<R: Rng + ?Sized>(
        &mut self,
        model: &mut MlpModel<T>,
        data: &Dataset<T>,
        mask: &Mask,
        lr: f64,
        cfg: &TrainConfig,
        rng: &mut R,
        epoch: usize,
    ) -> Result<f64> {
        check_len("mask", mask.len(), model.space.dim())?;
        check_len("optimizer state", self.velocity.len(), model.space.dim())?;
        if data.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(rng);
        let (lr, mu, wd) = (T::of(lr), T::of(cfg.momentum), T::of(cfg.weight_decay));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = data.inputs().select(Axis(0), batch);
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
            let (loss, grad) = model.batch_loss_and_grad(x.view(), &labels)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            total += loss * batch.len() as f64;
            let w = model.space.values_mut();
            for (i, &active) in mask.active().iter().enumerate() {
                if !active {
                    w[i] = T::zero();
                    continue;
                }
                let g = grad[i] + wd * w[i];
                self.velocity[i] = mu * self.velocity[i] + g;
                w[i] -= lr * self.velocity[i];
            }
            if !all_finite(model.space.values()) {
                return Err(Error::Divergence {
                    epoch,
                    loss: f64::NAN,
                });
            }
        }
        Ok(total / data.len() as f64)
    }
}

/// Trains `model` in place for `cfg.epochs` epochs.
pub fn sgd_train<T: Real>(
    model: &mut MlpModel<T>,
    train: &Dataset<T>,
    test: Option<&Dataset<T>>,
    cfg: &TrainConfig,
    mask: &Mask,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    check_len("mask", mask.len(), model.space.dim())?;
    let mut rng = rng::stream(cfg.seed, Stream::TrainShuffle);
    let mut opt = Sgd::new(model.space.dim());
    mask.apply(model.space.values_mut());
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let train_loss = opt.epoch(model, train, mask, cfg.learning_rate, cfg, &mut rng, epoch)?;
        let test_accuracy = test
            .map(|t| model.evaluate(t))
            .transpose()?
            .map(|m| m.accuracy);
        trace.push(EpochRecord {
            epoch,
            train_loss,
            test_accuracy,
            learning_rate: cfg.learning_rate,
        });
    }
    Ok(trace)
}

/// Mean training loss of an architecture over a dataset, as a function of
/// the flat weights.
pub struct DatasetLoss<'a, T> {
    pub model: &'a MlpModel<T>,
    pub data: &'a Dataset<T>,
}

impl<T: Real> Objective<T> for DatasetLoss<'_, T> {
    fn dim(&self) -> usize {
        self.model.space.dim()
    }

    fn loss(&self, w: &[T]) -> Result<T> {
        check_len("weights", w.len(), self.dim())?;
        Ok(T::of(self.model.evaluate_at(w, self.data)?.loss))
    }

    fn gradient(&self, w: &[T]) -> Result<Vec<T>> {
        check_len("weights", w.len(), self.dim())?;
        let n = self.data.len();
        let mut total = vec![T::zero(); w.len()];
        for start in (0..n).step_by(1000) {
            let end = (start + 1000).min(n);
            let x = self.data.inputs().slice(ndarray::s![start..end, ..]);
            let (_, g) =
                self.model
                    .batch_loss_and_grad_at(w, x, &self.data.labels()[start..end])?;
            let scale = T::of_usize(end - start) / T::of_usize(n);
            crate::scalar::axpy(scale, &g, &mut total);
        }
        Ok(total)
    }
}
