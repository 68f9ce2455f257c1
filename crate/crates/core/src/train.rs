//! Mini-batch SGD with momentum and weight decay, and evaluation.
//!
//! Gradients are hand-derived for the fixed layer set. Shuffling uses a
//! stream derived from the config seed and the epoch only, so two models
//! trained with the same config see the same batches in the same order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Layer, ModelGraph, ModelMeta};
use crate::tensor::{
    self, conv2d_backward_opt, max_pool2d_backward, max_pool2d_indexed, relu_backward,
    softmax_cross_entropy, softmax_cross_entropy_backward, topk, transpose2d, SeededRng, Tensor,
};

/// Stream ids below this are free for model initialisation; epoch `e` shuffles
/// with stream `SHUFFLE_STREAM + e`.
pub const SHUFFLE_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    /// `lr * gamma^(epoch / step_size)`.
    Step { gamma: f64, step_size: usize },
    /// Half-cosine from the base rate at epoch 0 to `min_lr` at the last epoch.
    Cosine { min_lr: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl TrainConfig {
    /// 5 epochs, batch 128, lr 0.05, momentum 0.9, weight decay 1e-4, and the
    /// rate divided by 10 every 3 epochs.
    pub fn desk_default(seed: u64) -> Self {
        Self {
            epochs: 5,
            batch_size: 128,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: LrSchedule::Step {
                gamma: 0.1,
                step_size: 3,
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Argument("epochs and batch size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Argument(format!("learning rate {} is invalid", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Argument(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Argument("weight decay must be non-negative".into()));
        }
        match self.schedule {
            LrSchedule::Step { step_size: 0, .. } => {
                Err(Error::Argument("step schedule needs step_size >= 1".into()))
            }
            LrSchedule::Cosine { min_lr } if min_lr < 0.0 || min_lr > self.lr => {
                Err(Error::Argument("cosine min_lr must lie in [0, lr]".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Step { gamma, step_size } => self.lr * gamma.powi((epoch / step_size) as i32),
            LrSchedule::Cosine { min_lr } => {
                if self.epochs <= 1 {
                    return min_lr;
                }
                let t = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
                min_lr + (self.lr - min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// What each layer needs from the forward pass to compute its gradients.
enum Saved {
    Input(Tensor),
    Pool { input_shape: Vec<usize>, argmax: Vec<usize> },
    Shape(Vec<usize>),
}

fn forward_train(model: &ModelGraph, x: &Tensor) -> Result<(Tensor, Vec<Saved>)> {
    let mut saved = Vec::with_capacity(model.layers().len());
    let mut current = x.clone();
    for layer in model.layers() {
        let next = match layer {
            Layer::MaxPool { size } => {
                let (out, argmax) = max_pool2d_indexed(&current, *size)?;
                saved.push(Saved::Pool {
                    input_shape: current.shape().to_vec(),
                    argmax,
                });
                out
            }
            Layer::Flatten => {
                saved.push(Saved::Shape(current.shape().to_vec()));
                layer.forward(&current)?
            }
            _ => {
                let out = layer.forward(&current)?;
                saved.push(Saved::Input(current));
                out
            }
        };
        current = next;
    }
    Ok((current, saved))
}

/// Parameter gradients per layer (empty for parameter-free layers).
fn backward(model: &ModelGraph, saved: Vec<Saved>, grad_logits: Tensor) -> Result<Vec<Vec<Tensor>>> {
    let n = model.layers().len();
    let mut grads: Vec<Vec<Tensor>> = vec![Vec::new(); n];
    let mut g = grad_logits;
    for (i, (layer, s)) in model.layers().iter().zip(saved).enumerate().rev() {
        let need_input_grad = i > 0;
        g = match (layer, s) {
            (Layer::Linear { weight, .. }, Saved::Input(x)) => {
                let gt = transpose2d(&g)?;
                let gw = tensor::matmul(&gt, &x)?;
                let out = weight.shape()[0];
                let mut gb = vec![0.0f32; out];
                for row in g.data().chunks_exact(out) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                grads[i] = vec![gw, Tensor::new(vec![out], gb)?];
                if need_input_grad {
                    tensor::matmul(&g, weight)?
                } else {
                    g
                }
            }
            (Layer::Conv2d { weight, stride, pad, .. }, Saved::Input(x)) => {
                let (gx, gw, gb) = conv2d_backward_opt(&x, weight, &g, *stride, *pad, need_input_grad)?;
                grads[i] = vec![gw, gb];
                gx.unwrap_or(g)
            }
            (Layer::Relu, Saved::Input(x)) => relu_backward(&x, &g)?,
            (Layer::BatchNorm { scale, .. }, Saved::Input(x)) => {
                let c = scale.len();
                let b = x.shape()[0];
                let inner = x.len().checked_div(b * c).unwrap_or(0);
                let mut gs = vec![0.0f32; c];
                let mut gt = vec![0.0f32; c];
                let mut gx = g.data().to_vec();
                for (plane, (gchunk, xchunk)) in gx.chunks_mut(inner.max(1)).zip(x.data().chunks(inner.max(1))).enumerate() {
                    let ch = plane % c;
                    for (gv, xv) in gchunk.iter_mut().zip(xchunk) {
                        gs[ch] += *gv * xv;
                        gt[ch] += *gv;
                        *gv *= scale.data()[ch];
                    }
                }
                grads[i] = vec![Tensor::new(vec![c], gs)?, Tensor::new(vec![c], gt)?];
                Tensor::new(x.shape().to_vec(), gx)?
            }
            (Layer::MaxPool { .. }, Saved::Pool { input_shape, argmax }) => {
                max_pool2d_backward(&input_shape, &argmax, &g)?
            }
            (Layer::Flatten, Saved::Shape(shape)) => g.reshape(&shape)?,
            _ => unreachable!("forward cache does not match layer {i}"),
        };
    }
    Ok(grads)
}

/// Per-layer parameter gradients of the mean cross-entropy on one batch, in
/// layer order. Exposed for gradient checking.
pub fn loss_and_gradients(model: &ModelGraph, x: &Tensor, labels: &[usize]) -> Result<(f32, Vec<Vec<Tensor>>)> {
    let (logits, saved) = forward_train(model, x)?;
    let (loss, probs) = softmax_cross_entropy(&logits, labels)?;
    let g = softmax_cross_entropy_backward(&probs, labels)?;
    Ok((loss, backward(model, saved, g)?))
}

pub fn sgd_train(model: &ModelGraph, data: &Dataset, cfg: &TrainConfig) -> Result<(ModelGraph, Vec<f32>)> {
    sgd_train_with(model, data, cfg, |_, _| {})
}

/// [`sgd_train`] with a callback receiving `(epoch, mean training loss)`.
pub fn sgd_train_with(
    model: &ModelGraph,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f32),
) -> Result<(ModelGraph, Vec<f32>)> {
    cfg.validate()?;
    if data.sample_shape() != model.input_shape() {
        return Err(Error::Dimension(format!(
            "dataset samples are {:?}, model expects {:?}",
            data.sample_shape(),
            model.input_shape()
        )));
    }
    if data.classes() != model.classes() {
        return Err(Error::Dimension(format!(
            "dataset has {} classes, model has {}",
            data.classes(),
            model.classes()
        )));
    }
    if data.is_empty() {
        return Err(Error::Argument("cannot train on an empty dataset".into()));
    }

    let mut model = model.clone();
    let mut velocity: Vec<Tensor> = model.params().map(|p| Tensor::zeros(p.shape())).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let momentum = cfg.momentum as f32;
    let decay = cfg.weight_decay as f32;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch) as f32;
        let mut order: Vec<usize> = (0..data.len()).collect();
        SeededRng::new(cfg.seed, SHUFFLE_STREAM + epoch as u64).shuffle(&mut order);

        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(chunk)?;
            let (loss, grads) = loss_and_gradients(&model, &x, &y)?;
            if !loss.is_finite() {
                return Err(Error::Training { epoch, loss });
            }
            loss_sum += loss as f64 * chunk.len() as f64;

            for ((p, v), g) in model
                .params_mut()
                .zip(velocity.iter_mut())
                .zip(grads.iter().flatten())
            {
                for ((w, vel), &grad) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vel = momentum * *vel + (grad + decay * *w);
                    *w -= lr * *vel;
                }
            }
        }
        let mean = (loss_sum / data.len() as f64) as f32;
        if !mean.is_finite() {
            return Err(Error::Training { epoch, loss: mean });
        }
        curve.push(mean);
        on_epoch(epoch, mean);
    }
    model.meta = ModelMeta {
        seed: cfg.seed,
        epoch: model.meta.epoch + cfg.epochs,
    };
    Ok((model, curve))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub label: usize,
    pub predicted: usize,
    pub top1_prob: f32,
    pub top2_prob: f32,
}

impl SampleRecord {
    pub fn correct(&self) -> bool {
        self.label == self.predicted
    }

    /// `100 * (p1 - p2)` in percentage points.
    pub fn top2diff(&self) -> f64 {
        100.0 * (self.top1_prob as f64 - self.top2_prob as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Mean Top2Diff over correctly classified samples.
    pub mean_top2diff: f64,
    /// Mean Top2Diff over all samples.
    pub mean_top2diff_all: f64,
    pub records: Vec<SampleRecord>,
}

impl EvalReport {
    pub fn from_records(records: Vec<SampleRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Argument("cannot evaluate an empty dataset".into()));
        }
        let total = records.len();
        let correct = records.iter().filter(|r| r.correct()).count();
        let sum_all: f64 = records.iter().map(SampleRecord::top2diff).sum();
        let sum_correct: f64 = records.iter().filter(|r| r.correct()).map(SampleRecord::top2diff).sum();
        Ok(Self {
            accuracy: accuracy_fraction(correct, total),
            correct,
            total,
            mean_top2diff: if correct == 0 { 0.0 } else { sum_correct / correct as f64 },
            mean_top2diff_all: sum_all / total as f64,
            records,
        })
    }
}

pub(crate) fn accuracy_fraction(count: usize, total: usize) -> f64 {
    count as f64 / total as f64
}

/// Per-sample records from a batch of logits.
pub fn records_from_logits(logits: &Tensor, labels: &[usize]) -> Result<Vec<SampleRecord>> {
    let (_, probs) = softmax_cross_entropy(logits, labels)?;
    let c = probs.shape()[1];
    probs
        .data()
        .chunks_exact(c)
        .zip(labels)
        .map(|(row, &label)| {
            let top = topk(row, 2)?;
            Ok(SampleRecord {
                label,
                predicted: top[0].0,
                top1_prob: top[0].1,
                top2_prob: top[1].1,
            })
        })
        .collect()
}

const EVAL_BATCH: usize = 500;

pub fn evaluate(model: &ModelGraph, data: &Dataset) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty dataset".into()));
    }
    let starts: Vec<usize> = (0..data.len()).step_by(EVAL_BATCH).collect();
    let parts: Result<Vec<Vec<SampleRecord>>> = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + EVAL_BATCH).min(data.len())).collect();
            let (x, y) = data.batch(&idx)?;
            records_from_logits(&model.forward(&x)?, &y)
        })
        .collect();
    EvalReport::from_records(parts?.into_iter().flatten().collect())
}
