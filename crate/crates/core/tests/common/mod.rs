#![allow(dead_code)]

use augsearch::autodiff::{mlp_input_gradient, Activation, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const R: usize = 3;
const C: usize = 4;

#[derive(Clone, Debug)]
enum Step {
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Square(usize),
    Neg(usize),
    AddScalar(usize, f64),
    MulScalar(usize, f64),
    Softmax(usize),
    Matmul(usize),
    Affine(usize),
    Gram(usize),
    ReshapeTranspose(usize),
    ColumnMean(usize),
    Reduce(usize, usize, u8),
    IndexSelect(usize, Vec<usize>),
    Gather(usize, Vec<Option<usize>>),
    CrossEntropy(usize, Vec<usize>),
    InputGradient(usize),
}

pub const STEP_KINDS: usize = 24;

/// A random expression over two `[3,4]` inputs, a `[4,4]` weight and a `[4]`
/// bias that ends in a scalar.
#[derive(Clone, Debug)]
pub struct RandomGraph {
    steps: Vec<Step>,
    pub leaves: Vec<Tensor>,
}

impl RandomGraph {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut leaf = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let leaves = vec![leaf(&[R, C]), leaf(&[R, C]), leaf(&[C, C]), leaf(&[C])];
        let len = rng.gen_range(4..12);
        let mut steps = Vec::with_capacity(len);
        // every kind appears once across the first graphs
        let first = (seed as usize) % STEP_KINDS;
        for s in 0..len {
            let pool = 2 + s;
            let i = if s == 0 { rng.gen_range(0..2) } else { pool - 1 };
            let j = rng.gen_range(0..pool);
            let kind = if s == 0 { first } else { rng.gen_range(0..STEP_KINDS) };
            steps.push(match kind {
                0 => Step::Add(i, j),
                1 => Step::Sub(i, j),
                2 => Step::Mul(i, j),
                3 => Step::Div(i, j),
                4 => Step::Exp(i),
                5 => Step::Log(i),
                6 => Step::Tanh(i),
                7 => Step::Sigmoid(i),
                8 => Step::Relu(i),
                9 => Step::Square(i),
                10 => Step::Neg(i),
                11 => Step::AddScalar(i, rng.gen_range(-1.0..1.0)),
                12 => Step::MulScalar(i, rng.gen_range(-1.5..1.5)),
                13 => Step::Softmax(i),
                14 => Step::Matmul(i),
                15 => Step::Affine(i),
                16 => Step::Gram(i),
                17 => Step::ReshapeTranspose(i),
                18 => Step::ColumnMean(i),
                19 => Step::Reduce(i, j, rng.gen_range(0..3)),
                20 => Step::IndexSelect(i, (0..R).map(|_| rng.gen_range(0..R)).collect()),
                21 => Step::Gather(
                    i,
                    (0..R * C)
                        .map(|_| rng.gen_bool(0.8).then(|| rng.gen_range(0..R * C)))
                        .collect(),
                ),
                22 => Step::CrossEntropy(i, (0..R).map(|_| rng.gen_range(0..C)).collect()),
                _ => Step::InputGradient(i),
            });
        }
        Self { steps, leaves }
    }

    fn squash(t: &mut Tape, v: Var) -> Var {
        // keeps chained products bounded
        t.tanh(v).unwrap()
    }

    /// Builds the graph on `tape` from the leaf vars; returns the scalar output.
    pub fn build(&self, t: &mut Tape, leaves: &[Var]) -> Var {
        let (w, b) = (leaves[2], leaves[3]);
        let mut pool = vec![leaves[0], leaves[1]];
        for step in &self.steps {
            let p = |k: usize| pool[k];
            let out = match step {
                Step::Add(i, j) => t.add(p(*i), p(*j)).unwrap(),
                Step::Sub(i, j) => t.sub(p(*i), p(*j)).unwrap(),
                Step::Mul(i, j) => {
                    let m = t.mul(p(*i), p(*j)).unwrap();
                    Self::squash(t, m)
                }
                Step::Div(i, j) => {
                    let sq = t.square(p(*j)).unwrap();
                    let den = t.add_scalar(sq, 1.0).unwrap();
                    t.div(p(*i), den).unwrap()
                }
                Step::Exp(i) => {
                    let s = Self::squash(t, p(*i));
                    t.exp(s).unwrap()
                }
                Step::Log(i) => {
                    let sq = t.square(p(*i)).unwrap();
                    let s = t.add_scalar(sq, 0.5).unwrap();
                    t.log(s).unwrap()
                }
                Step::Tanh(i) => t.tanh(p(*i)).unwrap(),
                Step::Sigmoid(i) => t.sigmoid(p(*i)).unwrap(),
                Step::Relu(i) => {
                    let shifted = t.add_scalar(p(*i), 0.0123).unwrap();
                    t.relu(shifted).unwrap()
                }
                Step::Square(i) => {
                    let s = t.square(p(*i)).unwrap();
                    Self::squash(t, s)
                }
                Step::Neg(i) => t.neg(p(*i)).unwrap(),
                Step::AddScalar(i, c) => t.add_scalar(p(*i), *c).unwrap(),
                Step::MulScalar(i, c) => t.mul_scalar(p(*i), *c).unwrap(),
                Step::Softmax(i) => t.softmax_last(p(*i)).unwrap(),
                Step::Matmul(i) => {
                    let m = t.matmul(p(*i), w).unwrap();
                    Self::squash(t, m)
                }
                Step::Affine(i) => {
                    let m = t.affine(p(*i), w, b).unwrap();
                    Self::squash(t, m)
                }
                Step::Gram(i) => {
                    let at = t.transpose(p(*i)).unwrap();
                    let g = t.matmul(at, p(*i)).unwrap();
                    let m = t.matmul(p(*i), g).unwrap();
                    Self::squash(t, m)
                }
                Step::ReshapeTranspose(i) => {
                    let r = t.reshape(p(*i), &[C, R]).unwrap();
                    t.transpose(r).unwrap()
                }
                Step::ColumnMean(i) => {
                    let at = t.transpose(p(*i)).unwrap();
                    let s = t.sum_last_axis(at).unwrap();
                    let m = t.mul_scalar(s, 1.0 / R as f64).unwrap();
                    let bm = t.broadcast(m, &[R, C]).unwrap();
                    t.mul(bm, p(*i)).unwrap()
                }
                Step::Reduce(i, j, kind) => {
                    let s = match kind {
                        0 => t.sum(p(*i)).unwrap(),
                        1 => t.mean(p(*i)).unwrap(),
                        _ => t.dot(p(*i), p(*j)).unwrap(),
                    };
                    let s = Self::squash(t, s);
                    let bs = t.broadcast(s, &[R, C]).unwrap();
                    t.mul(bs, p(*j)).unwrap()
                }
                Step::IndexSelect(i, idx) => t.index_select(p(*i), idx).unwrap(),
                Step::Gather(i, idx) => t.gather(p(*i), idx.clone(), &[R, C]).unwrap(),
                Step::CrossEntropy(i, labels) => {
                    let ce = t.cross_entropy(p(*i), labels).unwrap();
                    let spread: Vec<Option<usize>> = (0..R * C).map(|k| Some(k / C)).collect();
                    let g = t.gather(ce, spread, &[R, C]).unwrap();
                    t.mul(g, p(*i)).unwrap()
                }
                Step::InputGradient(i) => {
                    let w2 = t.reshape(b, &[C, 1]).unwrap();
                    mlp_input_gradient(t, w, b, w2, Activation::Tanh, p(*i)).unwrap()
                }
            };
            pool.push(out);
        }
        let last = *pool.last().unwrap();
        let s = t.sum(last).unwrap();
        let lin = t.dot(last, leaves[0]).unwrap();
        t.add(s, lin).unwrap()
    }

    pub fn value(&self, leaves: &[Tensor]) -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|l| t.constant(l.clone())).collect();
        let out = self.build(&mut t, &vars);
        t.item(out)
    }

    /// Worst relative error of autodiff gradients against central
    /// differences (step 1e-5). Fails on any entry off by more than 1e-4
    /// relative and 1e-7 absolute.
    pub fn check(&self) -> Result<f64, String> {
        let mut t = Tape::new();
        let vars: Vec<Var> = self.leaves.iter().map(|l| t.param(l.clone())).collect();
        let out = self.build(&mut t, &vars);
        t.backward(out).map_err(|e| e.to_string())?;
        let h = 1e-5;
        let mut worst = 0.0f64;
        for (li, leaf) in self.leaves.iter().enumerate() {
            let g = t.grad_or_zero(vars[li]);
            for e in 0..leaf.len() {
                let mut plus = self.leaves.clone();
                plus[li].data[e] += h;
                let mut minus = self.leaves.clone();
                minus[li].data[e] -= h;
                let fd = (self.value(&plus) - self.value(&minus)) / (2.0 * h);
                let err = (fd - g[e]).abs();
                let scale = fd.abs().max(g[e].abs());
                worst = worst.max(err / scale.max(1e-3));
                if err > 1e-7 && err > 1e-4 * scale {
                    return Err(format!("leaf {li}[{e}]: autodiff {} vs fd {fd} ({:?})", g[e], self.steps));
                }
            }
        }
        Ok(worst)
    }
}
