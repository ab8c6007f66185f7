//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Every operation appends a node to a [`Tape`]; nodes only keep their parent
//! links when at least one parent requires a gradient, so constant
//! sub-expressions cost nothing on the backward pass. Tensors are row-major.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(v);
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn rows_cols(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    SumLastAxis(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Square(Var),
    Neg(Var),
    SoftmaxLast(Var),
    Broadcast(Var),
    Reshape(Var),
    IndexSelect(Var, Vec<usize>),
    Gather(Var, Vec<Option<usize>>),
    CrossEntropy(Var, Vec<usize>, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a leaf. Its `requires_grad` flag decides whether
    /// gradients are accumulated into it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn tensor(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Gradient of `v`, or zeros when nothing reached it.
    pub fn grad_or_zero(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()])
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = parents(&op).into_iter().any(|p| self.needs(p));
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, data, op)
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let data = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("mul_scalar", a, |x| x * c, Op::MulScalar(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.map("negate", a, |x| -x, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map("log", a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map("square", a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push("sum", vec![], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", vec![], vec![m], Op::Mean(a))
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last_axis(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let Some((&n, lead)) = shape.split_last() else {
            return Err(Error::shape("sum_last_axis", "scalar input"));
        };
        let data = if n == 0 {
            vec![0.0; lead.iter().product()]
        } else {
            self.value(a).chunks(n).map(|c| c.iter().sum()).collect()
        };
        self.push("sum_last_axis", lead.to_vec(), data, Op::SumLastAxis(a))
    }

    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        if n == 0 {
            return Err(Error::shape("softmax", "empty last axis"));
        }
        let mut data = self.value(a).to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push("softmax", shape, data, Op::SoftmaxLast(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.tensor(a).rows_cols().ok_or_else(|| {
            Error::shape("matmul", format!("lhs must be 2-D, got {:?}", self.shape(a)))
        })?;
        let (k2, n) = self.tensor(b).rows_cols().ok_or_else(|| {
            Error::shape("matmul", format!("rhs must be 2-D, got {:?}", self.shape(b)))
        })?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
        }
        let data = matmul_raw(self.value(a), self.value(b), m, k, n);
        self.push("matmul", vec![m, n], data, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self
            .tensor(a)
            .rows_cols()
            .ok_or_else(|| Error::shape("transpose", format!("{:?}", self.shape(a))))?;
        let data = transpose_raw(self.value(a), r, c);
        self.push("transpose", vec![c, r], data, Op::Transpose(a))
    }

    /// Broadcasts a scalar to any shape, or a tensor of shape `s` to `[n, s..]`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a);
        let src_len = self.tensor(a).len();
        let ok = src_len == 1 || (!shape.is_empty() && src == &shape[1..]) || src == shape;
        if !ok {
            return Err(Error::shape(
                "broadcast",
                format!("cannot broadcast {src:?} to {shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        let v = self.value(a);
        let data = (0..n).map(|i| v[i % src_len]).collect();
        self.push("broadcast", shape.to_vec(), data, Op::Broadcast(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.tensor(a).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} to {shape:?}", self.shape(a)),
            ));
        }
        let data = self.value(a).to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(a))
    }

    /// Selects rows (indices along axis 0).
    pub fn index_select(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let Some((&rows, rest)) = shape.split_first() else {
            return Err(Error::shape("index_select", "scalar input"));
        };
        let w: usize = rest.iter().product();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("index_select", format!("index {bad} >= {rows}")));
        }
        let v = self.value(a);
        let data = idx.iter().flat_map(|&i| v[i * w..(i + 1) * w].iter().copied()).collect();
        let mut out_shape = vec![idx.len()];
        out_shape.extend_from_slice(rest);
        self.push("index_select", out_shape, data, Op::IndexSelect(a, idx.to_vec()))
    }

    /// General flat gather: output element `i` is `a[idx[i]]`, or zero for `None`.
    pub fn gather(&mut self, a: Var, idx: Vec<Option<usize>>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != idx.len() {
            return Err(Error::shape("gather", format!("{} indices for shape {shape:?}", idx.len())));
        }
        let v = self.value(a);
        if let Some(bad) = idx.iter().flatten().find(|&&i| i >= v.len()) {
            return Err(Error::shape("gather", format!("index {bad} >= {}", v.len())));
        }
        let data = idx.iter().map(|i| i.map_or(0.0, |i| v[i])).collect();
        self.push("gather", shape.to_vec(), data, Op::Gather(a, idx))
    }

    /// Per-row cross-entropy of `[batch, classes]` logits; returns `[batch]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self
            .tensor(logits)
            .rows_cols()
            .ok_or_else(|| Error::shape("cross_entropy", format!("{:?}", self.shape(logits))))?;
        if labels.len() != b {
            return Err(Error::shape("cross_entropy", format!("{} labels for {b} rows", labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label: l, classes: c });
        }
        let mut probs = self.value(logits).to_vec();
        let mut losses = Vec::with_capacity(b);
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            losses.push(lse - row[y]);
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        self.push(
            "cross_entropy",
            vec![b],
            losses,
            Op::CrossEntropy(logits, labels.to_vec(), probs),
        )
    }

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let shape = self.shape(xw).to_vec();
        let bb = self.broadcast(b, &shape)?;
        self.add(xw, bb)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        self.backward_done = false;
    }

    /// Accumulates `d loss / d t` into every reachable tensor that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.tensor(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        if !self.needs(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) || self.nodes[i].value.requires_grad {
                self.nodes[i].value.grad = Some(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value.data;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.needs(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * bv[j];
                    }
                });
                acc(*b, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * av[j];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] / bv[j];
                    }
                });
                acc(*b, &mut |s| {
                    for j in 0..s.len() {
                        s[j] -= g[j] * av[j] / (bv[j] * bv[j]);
                    }
                });
            }
            Op::AddScalar(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::MulScalar(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g)),
            Op::Neg(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g)),
            Op::Exp(a) => acc(*a, &mut |s| {
                for j in 0..s.len() {
                    s[j] += g[j] * out[j];
                }
            }),
            Op::Log(a) => {
                let av = self.value(*a);
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] / av[j];
                    }
                })
            }
            Op::Tanh(a) => acc(*a, &mut |s| {
                for j in 0..s.len() {
                    s[j] += g[j] * (1.0 - out[j] * out[j]);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |s| {
                for j in 0..s.len() {
                    s[j] += g[j] * out[j] * (1.0 - out[j]);
                }
            }),
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        if av[j] > 0.0 {
                            s[j] += g[j];
                        }
                    }
                })
            }
            Op::Square(a) => {
                let av = self.value(*a);
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += 2.0 * av[j] * g[j];
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let n = self.tensor(*a).len() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n))
            }
            Op::SumLastAxis(a) => {
                let n = *self.shape(*a).last().unwrap_or(&1);
                acc(*a, &mut |s| {
                    for (j, s) in s.iter_mut().enumerate() {
                        *s += g[j / n.max(1)];
                    }
                })
            }
            Op::SoftmaxLast(a) => {
                let n = *self.shape(*a).last().unwrap_or(&1);
                acc(*a, &mut |s| {
                    for ((s, y), g) in s.chunks_mut(n).zip(out.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            s[j] += y[j] * (g[j] - dot);
                        }
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.tensor(*a).rows_cols().unwrap_or((0, 0));
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |s| {
                    // dA = G B^T
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let br = &bv[p * n..(p + 1) * n];
                            s[i * k + p] += gi.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |s| {
                    // dB = A^T G
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            let sr = &mut s[p * n..(p + 1) * n];
                            for (x, y) in sr.iter_mut().zip(gi) {
                                *x += a_ip * y;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = self.tensor(*a).rows_cols().unwrap_or((0, 0));
                acc(*a, &mut |s| add_into(s, &transpose_raw(g, c, r)));
            }
            Op::Broadcast(a) => {
                let src = self.tensor(*a).len();
                acc(*a, &mut |s| {
                    for (j, g) in g.iter().enumerate() {
                        s[j % src] += g;
                    }
                })
            }
            Op::Reshape(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::IndexSelect(a, idx) => {
                let w: usize = self.shape(*a)[1..].iter().product();
                acc(*a, &mut |s| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut s[i * w..(i + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                })
            }
            Op::Gather(a, idx) => acc(*a, &mut |s| {
                for (g, i) in g.iter().zip(idx) {
                    if let Some(i) = i {
                        s[*i] += g;
                    }
                }
            }),
            Op::CrossEntropy(a, labels, probs) => {
                let c = self.shape(*a)[1];
                acc(*a, &mut |s| {
                    for (r, &y) in labels.iter().enumerate() {
                        let row = &mut s[r * c..(r + 1) * c];
                        let p = &probs[r * c..(r + 1) * c];
                        for j in 0..c {
                            let t = if j == y { 1.0 } else { 0.0 };
                            row[j] += g[r] * (p[j] - t);
                        }
                    }
                })
            }
        }
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
            vec![*a, *b]
        }
        Op::AddScalar(a)
        | Op::MulScalar(a, _)
        | Op::Transpose(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SumLastAxis(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Tanh(a)
        | Op::Sigmoid(a)
        | Op::Relu(a)
        | Op::Square(a)
        | Op::Neg(a)
        | Op::SoftmaxLast(a)
        | Op::Broadcast(a)
        | Op::Reshape(a)
        | Op::IndexSelect(a, _)
        | Op::Gather(a, _)
        | Op::CrossEntropy(a, _, _) => vec![*a],
    }
}

fn add_into(s: &mut [f64], g: &[f64]) {
    for (s, g) in s.iter_mut().zip(g) {
        *s += g;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, x) in orow.iter_mut().zip(brow) {
                *o += a_ip * x;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Hidden-layer nonlinearity of the surrogate network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Identity,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => Ok(x),
            Activation::Relu => tape.relu(x),
        }
    }

    /// Derivative of the activation expressed through its output `h`, on the tape.
    fn derivative_from_output(self, tape: &mut Tape, h: Var) -> Result<Option<Var>> {
        match self {
            Activation::Tanh => {
                let h2 = tape.square(h)?;
                let neg = tape.neg(h2)?;
                Ok(Some(tape.add_scalar(neg, 1.0)?))
            }
            Activation::Sigmoid => {
                let h2 = tape.square(h)?;
                Ok(Some(tape.sub(h, h2)?))
            }
            Activation::Identity => Ok(None),
            Activation::Relu => Err(Error::UnsupportedActivation("relu")),
        }
    }
}

/// Gradient of a one-hidden-layer network `f(z) = act(z W1 + b1) w2 + b2`
/// with respect to its input rows, built from tape ops so that it stays
/// differentiable in the network parameters.
///
/// `z` is `[batch, d]`, `w1` is `[d, h]`, `b1` is `[h]`, `w2` is `[h, 1]`.
/// Returns `[batch, d]`.
pub fn mlp_input_gradient(
    tape: &mut Tape,
    w1: Var,
    b1: Var,
    w2: Var,
    activation: Activation,
    z: Var,
) -> Result<Var> {
    let batch = tape.shape(z)[0];
    let hidden = tape.shape(w1)[1];
    let w2_row = tape.reshape(w2, &[hidden])?;
    let w2_rows = tape.broadcast(w2_row, &[batch, hidden])?;
    let pre = tape.affine(z, w1, b1)?;
    let h = activation.apply(tape, pre)?;
    let upstream = match activation.derivative_from_output(tape, h)? {
        Some(d) => tape.mul(d, w2_rows)?,
        None => w2_rows,
    };
    let w1t = tape.transpose(w1)?;
    tape.matmul(upstream, w1t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn elementwise_add() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c), &[4.0, 6.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![0.0; 3]));
        let s = t.softmax_last(a).unwrap();
        for &v in t.value(s) {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let l = t.cross_entropy(a, &[0]).unwrap();
        assert!(close(t.value(l)[0], 2f64.ln(), 1e-15));
    }

    #[test]
    fn square_sum_gradient() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = t.square(w).unwrap();
        let l = t.sum(sq).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(0.0));
        let y = t.sigmoid(x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeat() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = t.square(w).unwrap();
        assert!(matches!(t.backward(sq), Err(Error::NonScalarLoss(_))));
        let l = t.sum(sq).unwrap();
        t.backward(l).unwrap();
        assert!(matches!(t.backward(l), Err(Error::BackwardTwice)));
        t.zero_grad();
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0]));
        assert!(matches!(t.log(x), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(t.add(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(t.matmul(a, b).is_err());
    }

    #[test]
    fn independent_leaf_gets_exact_zero() {
        let mut t = Tape::new();
        let a = t.param(Tensor::vector(vec![1.0, 2.0]));
        let b = t.param(Tensor::vector(vec![3.0, 4.0]));
        let sa = t.sum(a).unwrap();
        let zero_b = t.mul_scalar(b, 0.0).unwrap();
        let sb = t.sum(zero_b).unwrap();
        let l = t.add(sa, sb).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(b).unwrap(), &[0.0, 0.0]);
        let unused = t.param(Tensor::vector(vec![5.0]));
        assert!(t.grad(unused).is_none());
    }

    #[test]
    fn constant_only_ops_do_not_record_parents() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0]));
        let b = t.exp(a).unwrap();
        assert!(!t.tensor(b).requires_grad);
    }

    #[test]
    fn zero_weight_mlp_has_zero_input_gradient() {
        let mut t = Tape::new();
        let w1 = t.param(Tensor::zeros(&[3, 4]));
        let b1 = t.param(Tensor::zeros(&[4]));
        let w2 = t.param(Tensor::zeros(&[4, 1]));
        let z = t.constant(Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 0.1, 0.2, 0.3]).unwrap());
        let g = mlp_input_gradient(&mut t, w1, b1, w2, Activation::Tanh, z).unwrap();
        assert!(t.value(g).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_surrogate_input_gradient_is_its_weight() {
        let mut t = Tape::new();
        let w1 = t.param(Tensor::matrix(2, 1, vec![0.7, -1.5]).unwrap());
        let b1 = t.param(Tensor::zeros(&[1]));
        let w2 = t.param(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        for zs in [[0.0, 0.0], [3.0, -2.0]] {
            let z = t.constant(Tensor::matrix(1, 2, zs.to_vec()).unwrap());
            let g = mlp_input_gradient(&mut t, w1, b1, w2, Activation::Identity, z).unwrap();
            assert_eq!(t.value(g), &[0.7, -1.5]);
        }
    }

    #[test]
    fn relu_surrogate_input_gradient_is_rejected() {
        let mut t = Tape::new();
        let w1 = t.param(Tensor::zeros(&[1, 1]));
        let b1 = t.param(Tensor::zeros(&[1]));
        let w2 = t.param(Tensor::zeros(&[1, 1]));
        let z = t.constant(Tensor::zeros(&[1, 1]));
        assert!(matches!(
            mlp_input_gradient(&mut t, w1, b1, w2, Activation::Relu, z),
            Err(Error::UnsupportedActivation(_))
        ));
    }

    #[test]
    fn broadcast_rules() {
        let mut t = Tape::new();
        let s = t.constant(Tensor::scalar(2.0));
        let b = t.broadcast(s, &[2, 2]).unwrap();
        assert_eq!(t.value(b), &[2.0; 4]);
        let r = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = t.broadcast(r, &[3, 2]).unwrap();
        assert_eq!(t.value(b), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(t.broadcast(r, &[2, 3]).is_err());
    }
}
