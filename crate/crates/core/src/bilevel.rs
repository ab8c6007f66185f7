//! One-pass joint search: weight steps on augmented training batches
//! alternating with policy steps driven by a finite-difference hypergradient.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_subpolicy, Image, OpKind, DEFAULT_OPS};
use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::distributions::bernoulli_hard;
use crate::error::{Error, Result};
use crate::estimators::{
    gumbel_st_grad_batch, relax_grad_batch, score_grad_batch, update_surrogate, EstimatorKind, GradEstimate,
    StUpstream,
};
use crate::models::{
    linear_rule_lr, Architecture, BatchEval, Classifier, InputShape, OptimizerState, POLICY_LR, WEIGHT_DECAY,
    WEIGHT_MOMENTUM,
};
use crate::policy::{
    augment_batch, augment_with_bit, build_space, export_policy, init_params, FixedPolicy, PairingMode,
    PolicyFile, PolicyParams, Relaxation, SampledPolicy, SearchSpace, DEFAULT_TOP_N,
};

/// The six ops of the desk-scale toy space.
pub const TOY_OPS: [OpKind; 6] = [
    OpKind::Rotate,
    OpKind::Invert,
    OpKind::Equalize,
    OpKind::TranslateY,
    OpKind::Brightness,
    OpKind::Contrast,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight learning rate; `None` applies the linear rule `0.1 * batch / 256`.
    pub weight_lr: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub cosine: bool,
    pub policy_lr: f64,
    pub surrogate_lr: f64,
    pub epsilon_scale: f64,
    pub tau: f64,
    pub lambda: f64,
    pub estimator: EstimatorKind,
    pub seed: u64,
    pub model: String,
    pub ops: Vec<String>,
    pub k: usize,
    pub pairing: PairingMode,
    pub top_n: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            weight_lr: None,
            momentum: WEIGHT_MOMENTUM,
            weight_decay: WEIGHT_DECAY,
            cosine: false,
            policy_lr: POLICY_LR,
            surrogate_lr: POLICY_LR,
            epsilon_scale: 0.01,
            tau: 0.5,
            lambda: 0.5,
            estimator: EstimatorKind::Relax,
            seed: 0,
            model: "mlp".into(),
            ops: DEFAULT_OPS.iter().map(|o| o.name().to_string()).collect(),
            k: 2,
            pairing: PairingMode::Unordered,
            top_n: DEFAULT_TOP_N,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.tau > 0.0 && self.lambda > 0.0) {
            return bad(format!("temperatures must be positive, got tau={} lambda={}", self.tau, self.lambda));
        }
        if !(self.epsilon_scale > 0.0) {
            return bad("epsilon_scale must be positive".into());
        }
        if self.policy_lr < 0.0 || self.surrogate_lr < 0.0 || self.weight_lr.is_some_and(|l| !(l > 0.0)) {
            return bad("learning rates must be non-negative (weight lr positive)".into());
        }
        if self.top_n == 0 {
            return bad("top_n must be positive".into());
        }
        self.architecture()?;
        self.space()?;
        Ok(())
    }

    pub fn architecture(&self) -> Result<Architecture> {
        self.model.parse()
    }

    pub fn op_kinds(&self) -> Result<Vec<OpKind>> {
        self.ops.iter().map(|s| s.parse()).collect()
    }

    pub fn space(&self) -> Result<SearchSpace> {
        build_space(&self.op_kinds()?, self.k, self.pairing)
    }

    pub fn relaxation(&self) -> Relaxation {
        Relaxation {
            tau: self.tau,
            lambda: self.lambda,
        }
    }

    pub fn base_weight_lr(&self) -> f64 {
        self.weight_lr.unwrap_or_else(|| linear_rule_lr(self.batch_size))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub pi_entropy: f64,
    pub mean_beta: f64,
    pub mean_m: f64,
    pub skipped_steps: usize,
}

#[derive(Clone, Debug)]
pub struct SearchState {
    pub config: SearchConfig,
    pub space: SearchSpace,
    pub model: Classifier,
    pub params: PolicyParams,
    pub weight_opt: OptimizerState,
    pub policy_opt: OptimizerState,
    pub surrogate_opt: OptimizerState,
    pub step: usize,
    pub skipped_steps: usize,
    pub rng: ChaCha8Rng,
    pub log: Vec<MetricsRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PolicyStepOutcome {
    Applied { val_loss: f64, hypergradient: GradEstimate },
    Skipped { reason: String },
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl SearchState {
    pub fn new(config: SearchConfig, input: InputShape, classes: usize) -> Result<Self> {
        config.validate()?;
        let space = config.space()?;
        let model = Classifier::new(config.architecture()?, input, classes, &mut stream(config.seed, 1))?;
        let params = init_params(&space, &mut stream(config.seed, 2));
        Ok(Self {
            weight_opt: OptimizerState::sgd(config.base_weight_lr(), config.momentum, config.weight_decay),
            policy_opt: OptimizerState::adam(config.policy_lr),
            surrogate_opt: OptimizerState::adam(config.surrogate_lr),
            rng: stream(config.seed, 3),
            config,
            space,
            model,
            params,
            step: 0,
            skipped_steps: 0,
            log: vec![],
        })
    }

    /// One SGD step on the classifier using a freshly sampled augmentation
    /// of the batch. Returns the batch loss.
    pub fn weight_step(&mut self, images: &[Image], labels: &[usize]) -> Result<f64> {
        let (aug, _) = augment_batch(&self.params, &self.space, images, self.config.relaxation(), &mut self.rng)?;
        let ev = self.model.eval_batch(&aug, labels, false)?;
        self.weight_opt.step_tensors(&mut self.model.weights, &ev.weight_grads)?;
        Ok(ev.loss)
    }

    /// One policy update from the finite-difference hypergradient. The
    /// classifier weights are left untouched.
    pub fn policy_step(
        &mut self,
        train_images: &[Image],
        train_labels: &[usize],
        val_images: &[Image],
        val_labels: &[usize],
    ) -> Result<PolicyStepOutcome> {
        if train_images.is_empty() || val_images.is_empty() {
            return Err(Error::InvalidDataset("policy step needs non-empty batches".into()));
        }
        let temps = self.config.relaxation();
        let (aug, samples) = augment_batch(&self.params, &self.space, train_images, temps, &mut self.rng)?;
        let at_w = self.model.eval_batch(&aug, train_labels, false)?;
        let zeta = self.weight_opt.lr;
        let virtual_w = axpy(&self.model.weights, &at_w.weight_grads, -zeta);
        let val = self.model.eval_with(&virtual_w, val_images, val_labels, false)?;

        let gates = match self.config.estimator {
            EstimatorKind::GumbelSt => Some(gate_images(&self.space, &self.params, train_images, &samples)?),
            _ => None,
        };
        let flipped = match self.config.estimator {
            EstimatorKind::GumbelSt => Some(flipped_images(&self.space, train_images, &samples)?),
            _ => None,
        };
        let model = &self.model;
        let params = &self.params;
        let space = &self.space;
        let estimator = self.config.estimator;
        let policy_grad_at = |w: &[Tensor]| -> Result<GradEstimate> {
            let ev = model.eval_with(w, &aug, train_labels, true)?;
            let mut g = match estimator {
                // The surrogate terms are identical at w+ and w- and cancel in
                // the difference. The clean-image loss is a per-image control
                // variate that does not.
                EstimatorKind::Relax => {
                    let clean = model.losses_with(w, train_images, train_labels)?;
                    let f: Vec<f64> = ev.per_sample.iter().zip(&clean).map(|(a, b)| a - b).collect();
                    score_grad_batch(&f, &samples, params)?
                }
                EstimatorKind::Score => score_grad_batch(&ev.per_sample, &samples, params)?,
                EstimatorKind::GumbelSt => {
                    let up = st_upstream(&ev, &aug, gates.as_ref().expect("gates"), flipped.as_ref().expect("flips"), &samples);
                    gumbel_st_grad_batch(&up, &samples, params, temps)?
                }
            };
            g.d_m = magnitude_grads(&ev, space, &samples, params);
            Ok(g)
        };
        let hyper = fd_hypergradient(
            &self.model.weights,
            &val.weight_grads,
            zeta,
            self.config.epsilon_scale,
            policy_grad_at,
        )?;
        let Some(hyper) = hyper else {
            self.skipped_steps += 1;
            return Ok(PolicyStepOutcome::Skipped {
                reason: "validation gradient norm below 1e-12".into(),
            });
        };
        if !hyper.is_finite() {
            self.skipped_steps += 1;
            return Ok(PolicyStepOutcome::Skipped {
                reason: "non-finite hypergradient".into(),
            });
        }

        if self.config.estimator == EstimatorKind::Relax {
            let (_, phi) = relax_grad_batch(&at_w.per_sample, &samples, &self.params, temps, true)?;
            if let Some(phi) = phi {
                update_surrogate(&mut self.params.phi, &phi, &mut self.surrogate_opt)?;
            }
        }
        {
            let p = &mut self.params;
            let mut slices: Vec<&mut [f64]> = vec![&mut p.alpha, &mut p.beta_logits, &mut p.magnitudes];
            let grads: Vec<&[f64]> = vec![&hyper.d_alpha, &hyper.d_beta, &hyper.d_m];
            self.policy_opt.step(&mut slices, &grads)?;
            p.project();
        }
        Ok(PolicyStepOutcome::Applied {
            val_loss: val.loss,
            hypergradient: hyper,
        })
    }

    fn set_lr(&mut self, progress: f64) {
        let base = self.config.base_weight_lr();
        self.weight_opt.lr = if self.config.cosine {
            0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
        } else {
            base
        };
    }
}

fn axpy(w: &[Tensor], g: &[Vec<f64>], a: f64) -> Vec<Tensor> {
    w.iter()
        .zip(g)
        .map(|(t, gi)| {
            let mut t = t.clone();
            t.data.iter_mut().zip(gi).for_each(|(x, y)| *x += a * y);
            t
        })
        .collect()
}

/// Finite-difference hypergradient
/// `-zeta * (grad_d(w + eps g) - grad_d(w - eps g)) / (2 eps)` with
/// `eps = epsilon_scale / |g|`. Returns `None` when `|g| < 1e-12`.
pub fn fd_hypergradient(
    w: &[Tensor],
    val_grad: &[Vec<f64>],
    zeta: f64,
    epsilon_scale: f64,
    grad_d: impl Fn(&[Tensor]) -> Result<GradEstimate>,
) -> Result<Option<GradEstimate>> {
    let norm = val_grad.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm >= 1e-12) {
        return Ok(None);
    }
    let eps = epsilon_scale / norm;
    let plus = grad_d(&axpy(w, val_grad, eps))?;
    let minus = grad_d(&axpy(w, val_grad, -eps))?;
    Ok(Some(plus.scaled_difference(&minus, -zeta / (2.0 * eps))))
}

/// `O_s(x)` for every sub-policy `s`, using each slot's sampled bit.
fn gate_images(space: &SearchSpace, params: &PolicyParams, images: &[Image], samples: &[SampledPolicy]) -> Result<Vec<Vec<Image>>> {
    let k = space.k;
    images
        .iter()
        .zip(samples)
        .map(|(x, smp)| {
            (0..space.len())
                .map(|s| {
                    let bits: Vec<bool> = (0..k).map(|j| bernoulli_hard(smp.slot_relaxed[s * k + j]) == 1).collect();
                    let mags: Vec<f64> = (0..k).map(|j| params.magnitude(s, j)).collect();
                    apply_subpolicy(&space.subpolicies[s], x, &bits, &mags, smp.aug_seed)
                })
                .collect()
        })
        .collect()
}

/// The augmented image with each slot's bit flipped.
fn flipped_images(space: &SearchSpace, images: &[Image], samples: &[SampledPolicy]) -> Result<Vec<Vec<Image>>> {
    images
        .iter()
        .zip(samples)
        .map(|(x, smp)| {
            let bits = smp.bits();
            (0..space.k)
                .map(|j| augment_with_bit(space, x, smp, j, !bits[j]))
                .collect()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-draw straight-through upstream from the batch input gradients.
fn st_upstream(
    ev: &BatchEval,
    aug: &[Image],
    gates: &[Vec<Image>],
    flipped: &[Vec<Image>],
    samples: &[SampledPolicy],
) -> Vec<StUpstream> {
    let grads = ev.input_grads.as_ref().expect("input gradients requested");
    let batch = aug.len();
    let p = grads.len() / batch;
    (0..batch)
        .map(|i| {
            let g: Vec<f64> = grads[i * p..(i + 1) * p].iter().map(|x| x * batch as f64).collect();
            let bits = samples[i].bits();
            let d_gates = gates[i].iter().map(|im| dot(&g, &im.pixels)).collect();
            let d_bits = bits
                .iter()
                .zip(&flipped[i])
                .map(|(&b, f)| {
                    let (on, off) = if b { (&aug[i], f) } else { (f, &aug[i]) };
                    on.pixels.iter().zip(&off.pixels).zip(&g).map(|((a, c), gi)| (a - c) * gi).sum()
                })
                .collect();
            StUpstream { d_gates, d_bits }
        })
        .collect()
}

/// Straight-through magnitude gradients: the summed input gradient of each
/// image, credited to its applied, magnitude-using slots.
fn magnitude_grads(ev: &BatchEval, space: &SearchSpace, samples: &[SampledPolicy], params: &PolicyParams) -> Vec<f64> {
    let k = params.k;
    let mut d_m = vec![0.0; params.n() * k];
    let grads = ev.input_grads.as_ref().expect("input gradients requested");
    let p = grads.len() / samples.len();
    for (i, smp) in samples.iter().enumerate() {
        let total: f64 = grads[i * p..(i + 1) * p].iter().sum();
        let c = smp.subpolicy_index;
        for (j, b) in smp.bits().into_iter().enumerate() {
            if b && space.subpolicies[c].slots[j].uses_magnitude() {
                d_m[c * k + j] += total;
            }
        }
    }
    d_m
}

/// Result of a full search.
#[derive(Clone, Debug)]
pub struct SearchResult {
    pub params: PolicyParams,
    pub space: SearchSpace,
    pub policy: PolicyFile,
    pub metrics: Vec<MetricsRow>,
    pub skipped_steps: usize,
}

fn batches(n: usize, size: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n.div_ceil(size)).map(move |b| b * size..((b + 1) * size).min(n))
}

fn pick(ds: &Dataset, idx: &[usize]) -> (Vec<Image>, Vec<usize>) {
    (
        idx.iter().map(|&i| ds.images[i].clone()).collect(),
        idx.iter().map(|&i| ds.labels[i]).collect(),
    )
}

pub fn mean_loss(model: &Classifier, ds: &Dataset, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for r in batches(ds.len(), batch_size.max(1)) {
        total += model.losses(&ds.images[r.clone()], &ds.labels[r])?.iter().sum::<f64>();
    }
    Ok(total / ds.len() as f64)
}

pub fn accuracy(model: &Classifier, ds: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    for r in batches(ds.len(), 512) {
        let pred = model.predict(&ds.images[r.clone()])?;
        correct += pred.iter().zip(&ds.labels[r]).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Alternates weight and policy steps over `train`, drawing a fresh
/// validation batch for each policy step.
pub fn run_search(config: &SearchConfig, train: &Dataset, val: &Dataset) -> Result<SearchResult> {
    run_search_with(config, train, val, |_| {})
}

pub fn run_search_with(
    config: &SearchConfig,
    train: &Dataset,
    val: &Dataset,
    mut on_epoch: impl FnMut(&MetricsRow),
) -> Result<SearchResult> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidDataset("search needs non-empty train and validation sets".into()));
    }
    let classes = train.class_count.max(val.class_count);
    let mut st = SearchState::new(config.clone(), InputShape::of(&train.images[0]), classes)?;
    let mut order_rng = stream(config.seed, 4);
    let mut val_order: Vec<usize> = (0..val.len()).collect();
    let mut val_pos = val.len();
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = (steps_per_epoch * config.epochs) as f64;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut order_rng);
        let mut train_loss = 0.0;
        for r in batches(order.len(), config.batch_size) {
            st.set_lr(st.step as f64 / total_steps);
            let (xs, ys) = pick(train, &order[r]);
            train_loss += st.weight_step(&xs, &ys)?;
            let mut vidx = Vec::with_capacity(config.batch_size);
            while vidx.len() < config.batch_size.min(val.len()) {
                if val_pos == val.len() {
                    val_order.shuffle(&mut order_rng);
                    val_pos = 0;
                }
                vidx.push(val_order[val_pos]);
                val_pos += 1;
            }
            let (vx, vy) = pick(val, &vidx);
            st.policy_step(&xs, &ys, &vx, &vy)?;
            st.step += 1;
        }
        let row = MetricsRow {
            epoch: epoch + 1,
            step: st.step,
            train_loss: train_loss / steps_per_epoch as f64,
            val_loss: mean_loss(&st.model, val, 512)?,
            pi_entropy: st.params.pi_entropy(),
            mean_beta: st.params.mean_beta(),
            mean_m: st.params.mean_magnitude(),
            skipped_steps: st.skipped_steps,
        };
        on_epoch(&row);
        st.log.push(row);
    }
    Ok(SearchResult {
        policy: export_policy(&st.params, &st.space, config.top_n),
        params: st.params,
        space: st.space,
        metrics: st.log,
        skipped_steps: st.skipped_steps,
    })
}

/// Settings for training a fresh classifier under a fixed policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub cosine: bool,
    pub model: String,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 128,
            lr: None,
            momentum: WEIGHT_MOMENTUM,
            weight_decay: WEIGHT_DECAY,
            cosine: true,
            model: "mlp".into(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub epoch: usize,
    pub train_loss: f64,
}

/// Trains a classifier from scratch with `policy` applied to every image.
pub fn train_classifier(train: &Dataset, policy: &FixedPolicy, cfg: &TrainConfig) -> Result<(Classifier, Vec<TrainMetrics>)> {
    if train.is_empty() {
        return Err(Error::InvalidDataset("training set is empty".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("epochs and batch_size must be positive".into()));
    }
    let arch: Architecture = cfg.model.parse()?;
    let mut model = Classifier::new(arch, InputShape::of(&train.images[0]), train.class_count, &mut stream(cfg.seed, 11))?;
    let base = cfg.lr.unwrap_or_else(|| linear_rule_lr(cfg.batch_size));
    let mut opt = OptimizerState::sgd(base, cfg.momentum, cfg.weight_decay);
    let mut rng = stream(cfg.seed, 12);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = (steps_per_epoch * cfg.epochs) as f64;
    let mut step = 0usize;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        for r in batches(order.len(), cfg.batch_size) {
            if cfg.cosine {
                opt.lr = 0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total).cos());
            }
            let (xs, ys) = pick(train, &order[r]);
            let xs = xs
                .iter()
                .map(|x| policy.apply(x, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let ev = model.eval_batch(&xs, &ys, false)?;
            opt.step_tensors(&mut model.weights, &ev.weight_grads)?;
            loss += ev.loss;
            step += 1;
        }
        log.push(TrainMetrics {
            epoch: epoch + 1,
            train_loss: loss / steps_per_epoch as f64,
        });
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_probe_closed_form() {
        let (w, d, zeta) = (0.7, -0.3, 0.1);
        let wt = vec![Tensor::vector(vec![w])];
        let w_prime = w - zeta * 2.0 * (w - d);
        let g_val = vec![vec![2.0 * w_prime]];
        let h = fd_hypergradient(&wt, &g_val, zeta, 0.01, |ws| {
            let mut g = GradEstimate::zeros(1, 0);
            g.d_alpha = vec![-2.0 * (ws[0].data[0] - d)];
            Ok(g)
        })
        .unwrap()
        .unwrap();
        assert!((h.d_alpha[0] - 4.0 * zeta * w_prime).abs() < 1e-10);
        let none = fd_hypergradient(&wt, &[vec![0.0]], zeta, 0.01, |_| Ok(GradEstimate::zeros(1, 0))).unwrap();
        assert!(none.is_none());
    }
}
