//! Small image classifiers and their optimizers.
//!
//! Checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size        field
//! 0       8           magic  b"AUGSWTS\0"
//! 8       4           version (u32, currently 1)
//! 12      4           tensor count T (u32)
//! 16      ...         T index entries:
//!                       u32 ndim, ndim x u64 dims, u64 data offset (in f64 units)
//! ...     8 x total   concatenated f64 data
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::Image;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Mlp { hidden: usize },
    SmallCnn { kernel: usize, channels1: usize, channels2: usize },
}

impl Architecture {
    pub fn mlp() -> Self {
        Self::Mlp { hidden: 128 }
    }

    pub fn small_cnn() -> Self {
        Self::SmallCnn {
            kernel: 3,
            channels1: 16,
            channels2: 32,
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::mlp()),
            "smallcnn" | "small_cnn" => Ok(Self::small_cnn()),
            other => Err(Error::InvalidConfig(format!("unknown model `{other}`"))),
        }
    }
}

/// Input geometry of a classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputShape {
    pub fn of(image: &Image) -> Self {
        Self {
            height: image.height,
            width: image.width,
            channels: image.channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub arch: Architecture,
    pub input: InputShape,
    pub classes: usize,
    pub weights: Vec<Tensor>,
}

/// Result of one forward/backward pass over a batch.
#[derive(Clone, Debug, Default)]
pub struct BatchEval {
    /// Mean cross-entropy.
    pub loss: f64,
    pub per_sample: Vec<f64>,
    pub weight_grads: Vec<Vec<f64>>,
    /// `d loss / d x` for each image, row-major `[batch, pixels]`.
    pub input_grads: Option<Vec<f64>>,
}

fn he<R: Rng + ?Sized>(fan_in: usize, shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("sized")
}

fn pooled(n: usize) -> usize {
    n / 2
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(arch: Architecture, input: InputShape, classes: usize, rng: &mut R) -> Result<Self> {
        if classes < 2 || input.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "classifier needs >= 2 classes and a non-empty input, got {classes} and {input:?}"
            )));
        }
        let d = input.len();
        let weights = match arch {
            Architecture::Mlp { hidden } => vec![
                he(d, &[d, hidden], rng),
                Tensor::zeros(&[hidden]),
                he(hidden, &[hidden, hidden], rng),
                Tensor::zeros(&[hidden]),
                he(hidden, &[hidden, classes], rng),
                Tensor::zeros(&[classes]),
            ],
            Architecture::SmallCnn {
                kernel,
                channels1,
                channels2,
            } => {
                if kernel % 2 == 0 || input.height < 4 || input.width < 4 {
                    return Err(Error::InvalidConfig(format!(
                        "smallcnn needs an odd kernel and at least 4x4 input, got {kernel} and {input:?}"
                    )));
                }
                let c = input.channels;
                let flat = pooled(pooled(input.height)) * pooled(pooled(input.width)) * channels2;
                vec![
                    he(kernel * kernel * c, &[kernel * kernel * c, channels1], rng),
                    Tensor::zeros(&[channels1]),
                    he(kernel * kernel * channels1, &[kernel * kernel * channels1, channels2], rng),
                    Tensor::zeros(&[channels2]),
                    he(flat, &[flat, classes], rng),
                    Tensor::zeros(&[classes]),
                ]
            }
        };
        Ok(Self {
            arch,
            input,
            classes,
            weights,
        })
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }

    pub fn zero_weights(&mut self) {
        for w in &mut self.weights {
            w.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Logits `[batch, classes]` for `x: [batch, pixels]`.
    pub fn forward(&self, tape: &mut Tape, w: &[Var], x: Var) -> Result<Var> {
        let batch = tape.shape(x)[0];
        match self.arch {
            Architecture::Mlp { .. } => {
                let h = tape.affine(x, w[0], w[1])?;
                let h = tape.relu(h)?;
                let h = tape.affine(h, w[2], w[3])?;
                let h = tape.relu(h)?;
                tape.affine(h, w[4], w[5])
            }
            Architecture::SmallCnn {
                kernel,
                channels1,
                channels2,
            } => {
                let (h, wd, c) = (self.input.height, self.input.width, self.input.channels);
                let y = conv2d(tape, x, batch, h, wd, c, kernel, w[0], w[1])?;
                let y = tape.relu(y)?;
                let y = avg_pool2(tape, y, batch, h, wd, channels1)?;
                let (h, wd) = (pooled(h), pooled(wd));
                let y = conv2d(tape, y, batch, h, wd, channels1, kernel, w[2], w[3])?;
                let y = tape.relu(y)?;
                let y = avg_pool2(tape, y, batch, h, wd, channels2)?;
                let flat = pooled(h) * pooled(wd) * channels2;
                let y = tape.reshape(y, &[batch, flat])?;
                tape.affine(y, w[4], w[5])
            }
        }
    }

    fn flatten(&self, images: &[Image]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::InvalidDataset("empty batch".into()));
        }
        let d = self.input.len();
        let mut data = Vec::with_capacity(images.len() * d);
        for im in images {
            if InputShape::of(im) != self.input {
                return Err(Error::shape(
                    "classifier input",
                    format!("{:?} vs {:?}", InputShape::of(im), self.input),
                ));
            }
            data.extend_from_slice(&im.pixels);
        }
        Tensor::new(vec![images.len(), d], data)
    }

    /// Mean cross-entropy over the batch, on the given tape.
    pub fn forward_loss(&self, tape: &mut Tape, w: &[Var], x: Var, labels: &[usize]) -> Result<(Var, Var)> {
        let logits = self.forward(tape, w, x)?;
        let per = tape.cross_entropy(logits, labels)?;
        let mean = tape.mean(per)?;
        Ok((mean, per))
    }

    /// Forward and backward pass; weight gradients always, input gradients on request.
    pub fn eval_batch(&self, images: &[Image], labels: &[usize], input_grads: bool) -> Result<BatchEval> {
        self.eval_with(&self.weights, images, labels, input_grads)
    }

    /// Same as [`Classifier::eval_batch`] with substitute weights.
    pub fn eval_with(&self, weights: &[Tensor], images: &[Image], labels: &[usize], input_grads: bool) -> Result<BatchEval> {
        let mut tape = Tape::new();
        let w: Vec<Var> = weights.iter().map(|t| tape.param(t.clone())).collect();
        let xt = self.flatten(images)?;
        let x = if input_grads {
            tape.param(xt)
        } else {
            tape.constant(xt)
        };
        let (loss, per) = self.forward_loss(&mut tape, &w, x, labels)?;
        tape.backward(loss)?;
        Ok(BatchEval {
            loss: tape.item(loss),
            per_sample: tape.value(per).to_vec(),
            weight_grads: w.iter().map(|&v| tape.grad_or_zero(v)).collect(),
            input_grads: input_grads.then(|| tape.grad_or_zero(x)),
        })
    }

    /// Per-sample losses without a backward pass.
    pub fn losses(&self, images: &[Image], labels: &[usize]) -> Result<Vec<f64>> {
        self.losses_with(&self.weights, images, labels)
    }

    /// Per-sample losses at `weights`, forward only.
    pub fn losses_with(&self, weights: &[Tensor], images: &[Image], labels: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let w: Vec<Var> = weights.iter().map(|t| tape.constant(t.clone())).collect();
        let x = tape.constant(self.flatten(images)?);
        let (_, per) = self.forward_loss(&mut tape, &w, x, labels)?;
        Ok(tape.value(per).to_vec())
    }

    pub fn predict(&self, images: &[Image]) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let w: Vec<Var> = self.weights.iter().map(|t| tape.constant(t.clone())).collect();
        let x = tape.constant(self.flatten(images)?);
        let logits = self.forward(&mut tape, &w, x)?;
        Ok(tape
            .value(logits)
            .chunks(self.classes)
            .map(crate::distributions::argmax)
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.weights)
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let w = load_checkpoint(path)?;
        if w.len() != self.weights.len() || w.iter().zip(&self.weights).any(|(a, b)| a.shape != b.shape) {
            return Err(Error::shape("checkpoint", "tensor shapes do not match the architecture"));
        }
        self.weights = w;
        Ok(())
    }
}

/// Same-padded, stride-1 convolution by im2col. `x` is channel-last
/// `[batch, h*w*c]` (or any shape with that many elements); returns
/// `[batch*h*w, out_channels]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    tape: &mut Tape,
    x: Var,
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    kernel: usize,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let r = (kernel / 2) as isize;
    let cols = kernel * kernel * c;
    let mut idx = Vec::with_capacity(batch * h * w * cols);
    for b in 0..batch {
        for y in 0..h as isize {
            for xx in 0..w as isize {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (sy, sx) = (y + dy, xx + dx);
                        let inside = sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize;
                        for ch in 0..c {
                            idx.push(inside.then(|| ((b * h + sy as usize) * w + sx as usize) * c + ch));
                        }
                    }
                }
            }
        }
    }
    let patches = tape.gather(x, idx, &[batch * h * w, cols])?;
    tape.affine(patches, weight, bias)
}

/// 2x2 average pooling with stride 2 over `[batch*h*w, c]`; odd trailing
/// rows and columns are dropped.
pub fn avg_pool2(tape: &mut Tape, x: Var, batch: usize, h: usize, w: usize, c: usize) -> Result<Var> {
    let (ph, pw) = (pooled(h), pooled(w));
    let mut idx = Vec::with_capacity(batch * ph * pw * c * 4);
    for b in 0..batch {
        for y in 0..ph {
            for xx in 0..pw {
                for ch in 0..c {
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        idx.push(Some(((b * h + 2 * y + dy) * w + 2 * xx + dx) * c + ch));
                    }
                }
            }
        }
    }
    let g = tape.gather(x, idx, &[batch * ph * pw * c, 4])?;
    let s = tape.sum_last_axis(g)?;
    let s = tape.mul_scalar(s, 0.25)?;
    tape.reshape(s, &[batch * ph * pw, c])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64, weight_decay: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

pub const WEIGHT_MOMENTUM: f64 = 0.9;
pub const WEIGHT_DECAY: f64 = 5e-4;
pub const POLICY_LR: f64 = 5e-3;

/// `0.1 * batch / 256`
pub fn linear_rule_lr(batch_size: usize) -> f64 {
    0.1 * batch_size as f64 / 256.0
}

impl OptimizerState {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self::with_kind(OptimizerKind::Sgd { momentum, weight_decay }, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::with_kind(
            OptimizerKind::Adam {
                beta1: 0.5,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
            },
            lr,
        )
    }

    pub fn with_kind(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            steps: 0,
            first: vec![],
            second: vec![],
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
            return Err(Error::shape("optimizer step", "gradients do not match parameters"));
        }
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite { op: "optimizer gradient" });
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
        } else if self.first.len() != params.len() || self.first.iter().zip(params.iter()).any(|(s, p)| s.len() != p.len()) {
            return Err(Error::shape("optimizer step", "state buffers do not match parameters"));
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd { momentum, weight_decay } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((w, &gi), vi) in p.iter_mut().zip(*g).zip(v.iter_mut()) {
                        *vi = momentum * *vi + gi;
                        *w -= self.lr * (*vi + weight_decay * *w);
                    }
                }
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (((w, &gi), mi), vi) in p.iter_mut().zip(*g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let gi = gi + weight_decay * *w;
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Steps a list of tensors.
    pub fn step_tensors(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<()> {
        let mut p: Vec<&mut [f64]> = params.iter_mut().map(|t| t.data.as_mut_slice()).collect();
        let g: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        self.step(&mut p, &g)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"AUGSWTS\0";
const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut out: W, tensors: &[Tensor]) -> std::io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    let mut offset = 0u64;
    for t in tensors {
        out.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        out.write_all(&offset.to_le_bytes())?;
        offset += t.len() as u64;
    }
    for t in tensors {
        for x in &t.data {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let bad = |why: &str| Error::shape("checkpoint", why.to_string());
    let mut cur = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(bad("truncated"));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(8)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let u64_of = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
    let version = u32_of(take(4)?);
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u32_of(take(4)?) as usize;
    let mut index = Vec::with_capacity(count);
    for _ in 0..count {
        let ndim = u32_of(take(4)?) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64_of(take(8)?) as usize);
        }
        let offset = u64_of(take(8)?) as usize;
        index.push((shape, offset));
    }
    let floats: Vec<f64> = cur
        .chunks(8)
        .map(|c| c.try_into().map(f64::from_le_bytes))
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad("data section is not a whole number of floats"))?;
    let mut out = Vec::with_capacity(count);
    for (shape, offset) in index {
        let n: usize = shape.iter().product();
        let slice = floats.get(offset..offset + n).ok_or_else(|| bad("tensor data out of range"))?;
        out.push(Tensor::new(shape, slice.to_vec())?);
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(&mut w, tensors).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<Tensor>> {
    let mut bytes = vec![];
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
