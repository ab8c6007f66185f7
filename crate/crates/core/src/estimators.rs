//! Gradient estimators for the expected loss under a sampled policy.
//!
//! * score function: `L(q) * d log p(q)`;
//! * Gumbel-Softmax straight-through: backward through the relaxed draw;
//! * RELAX: score function with a learned surrogate `c_phi` as control
//!   variate, evaluated at the relaxed draw `z` and the conditional draw
//!   `z_tilde`;
//! * exact enumeration, for small spaces only.
//!
//! The RELAX estimate for the policy is assembled hierarchically. The
//! sub-policy logits use a surrogate fed with the relaxed categorical draw and
//! the `pi`-weighted mixture of the relaxed apply draws of every slot, which
//! is smooth in the categorical relaxation. The apply logits of the chosen
//! sub-policy use a surrogate fed with the relaxed categorical draw (held
//! fixed) and that sub-policy's relaxed apply draws. Both pieces are
//! conditionally unbiased.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::OpKind;

use crate::autodiff::{mlp_input_gradient, Activation, Tape, Tensor, Var};
use crate::distributions::{
    bernoulli_score, bernoulli_z_derivative, bernoulli_z_tilde_derivative, categorical_score,
    categorical_z_jacobian, categorical_z_tilde_jacobian, gumbel, relaxed_bernoulli_on_tape,
    relaxed_categorical_on_tape, BernoulliParams,
};
use crate::error::{Error, Result};
use crate::models::OptimizerState;
use crate::policy::{build_space, init_params, sample_policy, PairingMode, PolicyParams, Relaxation, SampledPolicy, SearchSpace};
use crate::stats::Moments;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    #[default]
    Relax,
    GumbelSt,
    Score,
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relax" => Ok(Self::Relax),
            "gumbel_st" | "gumbel-st" => Ok(Self::GumbelSt),
            "score" => Ok(Self::Score),
            other => Err(Error::InvalidConfig(format!("unknown estimator `{other}`"))),
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Relax => "relax",
            Self::GumbelSt => "gumbel_st",
            Self::Score => "score",
        })
    }
}

/// Control-variate network `c_phi`: `act(x W1 + b1) W2 + b2`, scalar output.
#[derive(Clone, Debug, PartialEq)]
pub struct Surrogate {
    /// `[W1 (d x h), b1 (h), W2 (h x 1), b2 (1)]`
    pub params: Vec<Tensor>,
    pub activation: Activation,
}

impl Surrogate {
    pub fn mlp<R: Rng + ?Sized>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let s1 = (1.0 / input_dim as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        let w1 = (0..input_dim * hidden).map(|_| rng.gen_range(-s1..s1)).collect();
        let w2 = (0..hidden).map(|_| rng.gen_range(-s2..s2)).collect();
        Self {
            params: vec![
                Tensor::new(vec![input_dim, hidden], w1).expect("sized"),
                Tensor::zeros(&[hidden]),
                Tensor::new(vec![hidden, 1], w2).expect("sized"),
                Tensor::zeros(&[1]),
            ],
            activation: Activation::Tanh,
        }
    }

    /// `c(x) = w . x + b`, starting from zero.
    pub fn linear(input_dim: usize) -> Self {
        Self {
            params: vec![
                Tensor::zeros(&[input_dim, 1]),
                Tensor::zeros(&[1]),
                Tensor::full(&[1, 1], 1.0),
                Tensor::zeros(&[1]),
            ],
            activation: Activation::Identity,
        }
    }

    /// `c(x) = value` everywhere (until trained).
    pub fn constant(input_dim: usize, value: f64) -> Self {
        let mut s = Self::linear(input_dim);
        s.params[2].data[0] = 0.0;
        s.params[3].data[0] = value;
        s
    }

    pub fn input_dim(&self) -> usize {
        self.params[0].shape[0]
    }

    fn leaves(&self, tape: &mut Tape, trainable: bool) -> [Var; 4] {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        [
            put(&self.params[0]),
            put(&self.params[1]),
            put(&self.params[2]),
            put(&self.params[3]),
        ]
    }

    /// `[batch, d] -> [batch]`
    fn forward(&self, tape: &mut Tape, p: &[Var; 4], x: Var) -> Result<Var> {
        let batch = tape.shape(x)[0];
        let pre = tape.affine(x, p[0], p[1])?;
        let h = self.activation.apply(tape, pre)?;
        let out = tape.affine(h, p[2], p[3])?;
        tape.reshape(out, &[batch])
    }

    /// Surrogate values for a batch of inputs (row-major `[batch, d]`).
    pub fn eval(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        let d = self.input_dim();
        let mut tape = Tape::new();
        let p = self.leaves(&mut tape, false);
        let x = tape.constant(Tensor::new(vec![inputs.len() / d, d], inputs.to_vec())?);
        let y = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).to_vec())
    }

    /// Input gradients for a batch of inputs.
    pub fn input_grad(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        let d = self.input_dim();
        let mut tape = Tape::new();
        let p = self.leaves(&mut tape, false);
        let x = tape.constant(Tensor::new(vec![inputs.len() / d, d], inputs.to_vec())?);
        let g = mlp_input_gradient(&mut tape, p[0], p[1], p[2], self.activation, x)?;
        Ok(tape.value(g).to_vec())
    }
}

/// One single-sample RELAX estimate in generic form.
///
/// With parameters `theta` (length `P`) and surrogate input of length `D`,
/// the estimate is
/// `(loss - c(input_tilde)) * score + jac^T grad c(input) - jac_tilde^T grad c(input_tilde)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxTerm {
    pub loss: f64,
    pub score: Vec<f64>,
    pub input: Vec<f64>,
    pub input_tilde: Vec<f64>,
    /// Row-major `[D, P]`: `d input_d / d theta_p`.
    pub jac: Vec<f64>,
    pub jac_tilde: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct RelaxOutput {
    /// Per-group, per-term estimates (`[terms][P]`).
    pub estimates: Vec<Vec<Vec<f64>>>,
    /// Per-group mean surrogate value at `input_tilde`.
    pub surrogate_mean: Vec<f64>,
    /// Single-sample variance objective: mean over terms of the squared
    /// estimate norm, summed over groups.
    pub variance_objective: f64,
    /// Gradient of the variance objective with respect to each surrogate tensor.
    pub phi_grad: Option<Vec<Vec<f64>>>,
}

/// Evaluates groups of RELAX terms on one tape. Terms inside a group share
/// `P` and `D`. With `phi_grad`, the estimates are built as tape expressions
/// of the surrogate parameters and the variance objective is differentiated.
pub fn relax_estimates(surrogate: &Surrogate, groups: &[Vec<RelaxTerm>], phi_grad: bool) -> Result<RelaxOutput> {
    let d = surrogate.input_dim();
    let mut tape = Tape::new();
    let p = surrogate.leaves(&mut tape, phi_grad);
    let mut out = RelaxOutput::default();
    let mut objective: Option<Var> = None;
    for terms in groups {
        if terms.is_empty() {
            out.estimates.push(vec![]);
            out.surrogate_mean.push(0.0);
            continue;
        }
        let m = terms.len();
        let pd = terms[0].score.len();
        for t in terms {
            if t.input.len() != d || t.input_tilde.len() != d {
                return Err(Error::shape("relax", format!("surrogate input {} vs {d}", t.input.len())));
            }
            if t.score.len() != pd || t.jac.len() != d * pd || t.jac_tilde.len() != d * pd {
                return Err(Error::shape("relax", "inconsistent term sizes"));
            }
        }
        let x = tape.constant(Tensor::new(vec![m, d], terms.iter().flat_map(|t| t.input.clone()).collect())?);
        let xt = tape.constant(Tensor::new(
            vec![m, d],
            terms.iter().flat_map(|t| t.input_tilde.clone()).collect(),
        )?);
        let c_tilde = surrogate.forward(&mut tape, &p, xt)?;
        let losses = tape.constant(Tensor::vector(terms.iter().map(|t| t.loss).collect()));
        let coef = tape.sub(losses, c_tilde)?;
        let idx = (0..m).flat_map(|i| std::iter::repeat_n(Some(i), pd)).collect();
        let coef_p = tape.gather(coef, idx, &[m, pd])?;
        let scores = tape.constant(Tensor::new(vec![m, pd], terms.iter().flat_map(|t| t.score.clone()).collect())?);
        let score_part = tape.mul(coef_p, scores)?;

        let pathwise = |tape: &mut Tape, input: Var, jac: &dyn Fn(&RelaxTerm) -> &[f64]| -> Result<Var> {
            let g = mlp_input_gradient(tape, p[0], p[1], p[2], surrogate.activation, input)?;
            let idx = (0..m)
                .flat_map(|i| (0..pd).flat_map(move |_| (0..d).map(move |dd| Some(i * d + dd))))
                .collect();
            let gexp = tape.gather(g, idx, &[m * pd, d])?;
            let mut jdata = Vec::with_capacity(m * pd * d);
            for t in terms {
                let j = jac(t);
                for pp in 0..pd {
                    for dd in 0..d {
                        jdata.push(j[dd * pd + pp]);
                    }
                }
            }
            let jt = tape.constant(Tensor::new(vec![m * pd, d], jdata)?);
            let prod = tape.mul(gexp, jt)?;
            let s = tape.sum_last_axis(prod)?;
            tape.reshape(s, &[m, pd])
        };
        let at_z = pathwise(&mut tape, x, &|t| &t.jac)?;
        let at_zt = pathwise(&mut tape, xt, &|t| &t.jac_tilde)?;
        let est = tape.add(score_part, at_z)?;
        let est = tape.sub(est, at_zt)?;

        let vals = tape.value(est);
        out.estimates.push(vals.chunks(pd).map(<[f64]>::to_vec).collect());
        out.surrogate_mean
            .push(tape.value(c_tilde).iter().sum::<f64>() / m as f64);
        let sq = tape.square(est)?;
        let s = tape.sum(sq)?;
        let s = tape.mul_scalar(s, 1.0 / m as f64)?;
        objective = Some(match objective {
            Some(o) => tape.add(o, s)?,
            None => s,
        });
    }
    if let Some(obj) = objective {
        out.variance_objective = tape.item(obj);
        if phi_grad {
            tape.backward(obj)?;
            out.phi_grad = Some(p.iter().map(|&v| tape.grad_or_zero(v)).collect());
        }
    }
    Ok(out)
}

/// Gradient estimate for the policy parameters.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GradEstimate {
    pub d_alpha: Vec<f64>,
    /// `[N, k]`; only sampled slots are nonzero.
    pub d_beta: Vec<f64>,
    /// `[N, k]`; only sampled, applied, magnitude-using slots are nonzero.
    pub d_m: Vec<f64>,
    pub diagnostics: EstimateDiagnostics,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct EstimateDiagnostics {
    pub loss_mean: f64,
    pub surrogate_mean: f64,
    pub samples: usize,
    pub variance_objective: f64,
}

impl GradEstimate {
    pub fn zeros(n: usize, k: usize) -> Self {
        Self {
            d_alpha: vec![0.0; n],
            d_beta: vec![0.0; n * k],
            d_m: vec![0.0; n * k],
            diagnostics: EstimateDiagnostics::default(),
        }
    }

    /// `(self - other) * scale`, componentwise.
    pub fn scaled_difference(&self, other: &GradEstimate, scale: f64) -> GradEstimate {
        let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * scale).collect();
        GradEstimate {
            d_alpha: diff(&self.d_alpha, &other.d_alpha),
            d_beta: diff(&self.d_beta, &other.d_beta),
            d_m: diff(&self.d_m, &other.d_m),
            diagnostics: self.diagnostics.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_alpha
            .iter()
            .chain(&self.d_beta)
            .chain(&self.d_m)
            .all(|x| x.is_finite())
    }
}

/// The two RELAX terms (sub-policy logits, chosen apply logits) of one draw.
pub fn policy_relax_terms(loss: f64, sample: &SampledPolicy, params: &PolicyParams, temps: Relaxation) -> (RelaxTerm, RelaxTerm) {
    let n = params.n();
    let k = params.k;
    let d = n + k;
    let cat = &sample.categorical_sample;
    let c = sample.subpolicy_index;
    let catp = params.categorical();

    // Sub-policy logits: input [y, sum_s y_s zb[s]] for y = z and y = z_tilde.
    let jz = categorical_z_jacobian(cat, temps.tau);
    let jzt = categorical_z_tilde_jacobian(&catp, cat, temps.tau);
    let zb = &sample.slot_relaxed;
    let mix_input = |y: &[f64]| -> Vec<f64> {
        let mut v = y.to_vec();
        for j in 0..k {
            v.push((0..n).map(|s| y[s] * zb[s * k + j]).sum());
        }
        v
    };
    let mix_jac = |jy: &[f64]| -> Vec<f64> {
        let mut out = jy.to_vec();
        for j in 0..k {
            for a in 0..n {
                out.push((0..n).map(|s| zb[s * k + j] * jy[s * n + a]).sum());
            }
        }
        out
    };
    let alpha_term = RelaxTerm {
        loss,
        score: categorical_score(&catp, c),
        input: mix_input(&cat.z),
        input_tilde: mix_input(&cat.z_tilde),
        jac: mix_jac(&jz),
        jac_tilde: mix_jac(&jzt),
    };

    // Chosen apply logits: input [z, zb_c] vs [z, zb_tilde_c].
    let mut input = cat.z.clone();
    let mut input_tilde = cat.z.clone();
    let mut jac = vec![0.0; d * k];
    let mut jac_tilde = vec![0.0; d * k];
    let mut score = Vec::with_capacity(k);
    for (j, b) in sample.bernoulli_samples.iter().enumerate() {
        let bp = params.bernoulli(c, j);
        input.push(b.z[0]);
        input_tilde.push(b.z_tilde[0]);
        jac[(n + j) * k + j] = bernoulli_z_derivative(b, temps.lambda);
        jac_tilde[(n + j) * k + j] = bernoulli_z_tilde_derivative(bp, b, temps.lambda);
        score.push(bernoulli_score(bp, b.hard));
    }
    let beta_term = RelaxTerm {
        loss,
        score,
        input,
        input_tilde,
        jac,
        jac_tilde,
    };
    (alpha_term, beta_term)
}

/// Batch RELAX estimate (mean over draws) and, optionally, the surrogate
/// gradient of the single-sample variance objective.
pub fn relax_grad_batch(
    losses: &[f64],
    samples: &[SampledPolicy],
    params: &PolicyParams,
    temps: Relaxation,
    phi_grad: bool,
) -> Result<(GradEstimate, Option<Vec<Vec<f64>>>)> {
    if losses.len() != samples.len() {
        return Err(Error::Arity {
            expected: samples.len(),
            got: losses.len(),
        });
    }
    if let Some(l) = losses.iter().find(|l| !l.is_finite()) {
        return Err(Error::InvalidSample(format!("non-finite loss {l}")));
    }
    let (alpha_terms, beta_terms): (Vec<_>, Vec<_>) = losses
        .iter()
        .zip(samples)
        .map(|(&l, s)| policy_relax_terms(l, s, params, temps))
        .unzip();
    let out = relax_estimates(&params.phi, &[alpha_terms, beta_terms], phi_grad)?;
    let n = params.n();
    let k = params.k;
    let m = samples.len() as f64;
    let mut g = GradEstimate::zeros(n, k);
    for (est, s) in out.estimates[0].iter().zip(samples) {
        debug_assert_eq!(est.len(), n);
        for (a, e) in g.d_alpha.iter_mut().zip(est) {
            *a += e / m;
        }
        let _ = s;
    }
    for (est, s) in out.estimates[1].iter().zip(samples) {
        for j in 0..k {
            g.d_beta[s.subpolicy_index * k + j] += est[j] / m;
        }
    }
    g.diagnostics = EstimateDiagnostics {
        loss_mean: losses.iter().sum::<f64>() / m,
        surrogate_mean: out.surrogate_mean.first().copied().unwrap_or(0.0),
        samples: samples.len(),
        variance_objective: out.variance_objective,
    };
    if !g.is_finite() {
        return Err(Error::NonFinite { op: "relax estimate" });
    }
    Ok((g, out.phi_grad))
}

/// Single-draw RELAX estimate.
pub fn relax_grad(loss: f64, sample: &SampledPolicy, params: &PolicyParams, temps: Relaxation) -> Result<GradEstimate> {
    Ok(relax_grad_batch(&[loss], std::slice::from_ref(sample), params, temps, false)?.0)
}

/// Score-function estimate, mean over draws.
pub fn score_grad_batch(losses: &[f64], samples: &[SampledPolicy], params: &PolicyParams) -> Result<GradEstimate> {
    if losses.len() != samples.len() {
        return Err(Error::Arity {
            expected: samples.len(),
            got: losses.len(),
        });
    }
    let n = params.n();
    let k = params.k;
    let m = samples.len() as f64;
    let catp = params.categorical();
    let mut g = GradEstimate::zeros(n, k);
    for (&l, s) in losses.iter().zip(samples) {
        let c = s.subpolicy_index;
        for (a, sc) in g.d_alpha.iter_mut().zip(categorical_score(&catp, c)) {
            *a += l * sc / m;
        }
        for (j, b) in s.bernoulli_samples.iter().enumerate() {
            g.d_beta[c * k + j] += l * bernoulli_score(params.bernoulli(c, j), b.hard) / m;
        }
    }
    g.diagnostics.loss_mean = losses.iter().sum::<f64>() / m;
    g.diagnostics.samples = samples.len();
    Ok(g)
}

/// Upstream derivatives of one draw's loss with respect to the straight-through
/// variables: every sub-policy gate (length `N`) and the chosen sub-policy's
/// apply bits (length `k`).
#[derive(Clone, Debug, PartialEq)]
pub struct StUpstream {
    pub d_gates: Vec<f64>,
    pub d_bits: Vec<f64>,
}

/// Gumbel-Softmax straight-through estimate, mean over draws. The hard
/// forward pass is linearized at the sampled outcome and the relaxed draws are
/// spliced in on the tape, so the backward pass runs through the
/// reparameterizations.
pub fn gumbel_st_grad_batch(
    upstream: &[StUpstream],
    samples: &[SampledPolicy],
    params: &PolicyParams,
    temps: Relaxation,
) -> Result<GradEstimate> {
    if upstream.len() != samples.len() {
        return Err(Error::Arity {
            expected: samples.len(),
            got: upstream.len(),
        });
    }
    let n = params.n();
    let k = params.k;
    let m = samples.len();
    if m == 0 {
        return Ok(GradEstimate::zeros(n, k));
    }
    let mut tape = Tape::new();
    let alpha = tape.param(Tensor::vector(params.alpha.clone()));
    let logits = tape.param(Tensor::vector(params.beta_logits.clone()));

    let gumbels: Vec<f64> = samples
        .iter()
        .flat_map(|s| s.categorical_sample.u().iter().map(|&u| gumbel(u)).collect::<Vec<_>>())
        .collect();
    let z = relaxed_categorical_on_tape(&mut tape, alpha, Tensor::new(vec![m, n], gumbels)?, temps.tau)?;
    let dg: Vec<f64> = upstream.iter().flat_map(|u| u.d_gates.clone()).collect();
    if dg.len() != m * n {
        return Err(Error::Arity {
            expected: m * n,
            got: dg.len(),
        });
    }
    let dg = tape.constant(Tensor::new(vec![m, n], dg)?);
    let lin_c = tape.dot(z, dg)?;

    let slots = samples
        .iter()
        .flat_map(|s| (0..k).map(move |j| Some(s.subpolicy_index * k + j)))
        .collect();
    let t = tape.gather(logits, slots, &[m, k])?;
    let u: Vec<f64> = samples
        .iter()
        .flat_map(|s| s.bernoulli_samples.iter().map(|b| b.u()[0]).collect::<Vec<_>>())
        .collect();
    let zb = relaxed_bernoulli_on_tape(&mut tape, t, &u, temps.lambda)?;
    let db: Vec<f64> = upstream.iter().flat_map(|u| u.d_bits.clone()).collect();
    if db.len() != m * k {
        return Err(Error::Arity {
            expected: m * k,
            got: db.len(),
        });
    }
    let db = tape.constant(Tensor::new(vec![m, k], db)?);
    let lin_b = tape.dot(zb, db)?;
    let total = tape.add(lin_c, lin_b)?;
    let total = tape.mul_scalar(total, 1.0 / m as f64)?;
    tape.backward(total)?;
    let mut g = GradEstimate::zeros(n, k);
    g.d_alpha = tape.grad_or_zero(alpha);
    g.d_beta = tape.grad_or_zero(logits);
    g.diagnostics.samples = m;
    Ok(g)
}

pub fn gumbel_st_grad(upstream: &StUpstream, sample: &SampledPolicy, params: &PolicyParams, temps: Relaxation) -> Result<GradEstimate> {
    gumbel_st_grad_batch(std::slice::from_ref(upstream), std::slice::from_ref(sample), params, temps)
}

pub const ENUMERATION_LIMIT: usize = 4096;

/// Exact gradient of `sum_{c,b} p(c,b) loss(c,b)` with respect to the
/// sub-policy logits and apply logits, by full enumeration.
pub fn enumerate_exact_grad(
    space: &SearchSpace,
    params: &PolicyParams,
    loss_fn: impl Fn(usize, &[bool]) -> f64,
) -> Result<GradEstimate> {
    let n = space.len();
    let k = space.k;
    let size = n.saturating_mul(1usize.checked_shl(k as u32).unwrap_or(usize::MAX));
    if size > ENUMERATION_LIMIT {
        return Err(Error::SpaceTooLarge {
            size,
            limit: ENUMERATION_LIMIT,
        });
    }
    let pi = params.probs();
    let mut cond = vec![0.0; n];
    let mut g = GradEstimate::zeros(n, k);
    let mut bits = vec![false; k];
    for (s, cond_s) in cond.iter_mut().enumerate() {
        let betas: Vec<f64> = (0..k).map(|j| params.beta(s, j)).collect();
        for pattern in 0..(1usize << k) {
            let mut p = 1.0;
            for (j, b) in bits.iter_mut().enumerate() {
                *b = pattern >> j & 1 == 1;
                p *= if *b { betas[j] } else { 1.0 - betas[j] };
            }
            let l = loss_fn(s, &bits);
            *cond_s += p * l;
            for j in 0..k {
                let score = f64::from(u8::from(bits[j])) - betas[j];
                g.d_beta[s * k + j] += pi[s] * p * l * score;
            }
        }
    }
    let total: f64 = pi.iter().zip(&cond).map(|(p, c)| p * c).sum();
    for s in 0..n {
        g.d_alpha[s] = pi[s] * (cond[s] - total);
    }
    g.diagnostics.loss_mean = total;
    Ok(g)
}

/// One optimizer step on the surrogate from the variance-objective gradient.
pub fn update_surrogate(surrogate: &mut Surrogate, phi_grad: &[Vec<f64>], optimizer: &mut OptimizerState) -> Result<()> {
    let grads: Vec<&[f64]> = phi_grad.iter().map(Vec::as_slice).collect();
    let mut params: Vec<&mut [f64]> = surrogate.params.iter_mut().map(|t| t.data.as_mut_slice()).collect();
    optimizer.step(&mut params, &grads)
}

/// A small enumerable problem: a search space, fixed policy parameters and a
/// loss table over every `(sub-policy, apply bits)` outcome.
#[derive(Clone, Debug)]
pub struct ToyProblem {
    pub name: String,
    pub space: SearchSpace,
    pub params: PolicyParams,
    /// `table[c * 2^k + sum_j b_j 2^j]`
    pub table: Vec<f64>,
}

impl ToyProblem {
    /// One sub-policy with one slot and loss `f(b) = b`.
    pub fn bernoulli(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::InvalidConfig(format!("beta must lie in (0,1), got {beta}")));
        }
        let space = build_space(&[OpKind::Rotate], 1, PairingMode::Unordered)?;
        let params = PolicyParams {
            alpha: vec![0.0],
            beta_logits: vec![BernoulliParams::from_prob(beta).logit()],
            magnitudes: vec![0.5],
            phi: Surrogate::linear(2),
            k: 1,
        };
        Ok(Self {
            name: "bernoulli".into(),
            space,
            params,
            table: vec![0.0, 1.0],
        })
    }

    /// Random logits, random surrogate and a random loss table in `[-1, 1]`.
    pub fn random_table(ops: &[OpKind], k: usize, pairing: PairingMode, seed: u64) -> Result<Self> {
        let space = build_space(ops, k, pairing)?;
        let size = space.len().saturating_mul(1usize.checked_shl(k as u32).unwrap_or(usize::MAX));
        if size > ENUMERATION_LIMIT {
            return Err(Error::SpaceTooLarge {
                size,
                limit: ENUMERATION_LIMIT,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = init_params(&space, &mut rng);
        params.alpha.iter_mut().for_each(|a| *a = rng.gen_range(-1.0..1.0));
        params.beta_logits.iter_mut().for_each(|t| *t = rng.gen_range(-1.0..1.0));
        let table = (0..size).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Ok(Self {
            name: "table".into(),
            space,
            params,
            table,
        })
    }

    pub fn loss(&self, c: usize, bits: &[bool]) -> f64 {
        let code: usize = bits.iter().enumerate().map(|(j, &b)| usize::from(b) << j).sum();
        self.table[(c << self.space.k) + code]
    }

    /// Names of the reported components, matching [`ToyProblem::flatten`].
    pub fn components(&self) -> Vec<String> {
        let n = self.space.len();
        let k = self.space.k;
        let mut v = vec![];
        if n > 1 {
            v.extend((0..n).map(|s| format!("alpha[{s}]")));
        }
        for s in 0..n {
            v.extend((0..k).map(|j| if n > 1 { format!("beta[{s},{j}]") } else { format!("beta[{j}]") }));
        }
        v
    }

    pub fn flatten(&self, g: &GradEstimate) -> Vec<f64> {
        let mut v = vec![];
        if self.space.len() > 1 {
            v.extend_from_slice(&g.d_alpha);
        }
        v.extend_from_slice(&g.d_beta);
        v
    }

    pub fn exact(&self) -> Result<Vec<f64>> {
        Ok(self.flatten(&enumerate_exact_grad(&self.space, &self.params, |c, b| self.loss(c, b))?))
    }

    pub fn sample<R: Rng + ?Sized>(&self, temps: Relaxation, rng: &mut R) -> Result<SampledPolicy> {
        sample_policy(&self.params, &self.space, temps, rng)
    }

    fn st_upstream(&self, s: &SampledPolicy) -> StUpstream {
        let k = self.space.k;
        let d_gates = (0..self.space.len())
            .map(|c| {
                let bits: Vec<bool> = (0..k).map(|j| s.slot_relaxed[c * k + j] > 0.5).collect();
                self.loss(c, &bits)
            })
            .collect();
        let bits = s.bits();
        let d_bits = (0..k)
            .map(|j| {
                let mut on = bits.clone();
                on[j] = true;
                let mut off = bits.clone();
                off[j] = false;
                self.loss(s.subpolicy_index, &on) - self.loss(s.subpolicy_index, &off)
            })
            .collect();
        StUpstream { d_gates, d_bits }
    }

    /// Single-draw estimates, one flattened vector per draw.
    pub fn estimates(&self, kind: EstimatorKind, samples: &[SampledPolicy], temps: Relaxation) -> Result<Vec<Vec<f64>>> {
        let losses: Vec<f64> = samples.iter().map(|s| self.loss(s.subpolicy_index, &s.bits())).collect();
        let n = self.space.len();
        let k = self.space.k;
        match kind {
            EstimatorKind::Score => samples
                .iter()
                .zip(&losses)
                .map(|(s, &l)| Ok(self.flatten(&score_grad_batch(&[l], std::slice::from_ref(s), &self.params)?)))
                .collect(),
            EstimatorKind::GumbelSt => samples
                .iter()
                .map(|s| Ok(self.flatten(&gumbel_st_grad(&self.st_upstream(s), s, &self.params, temps)?)))
                .collect(),
            EstimatorKind::Relax => {
                let (a, b): (Vec<_>, Vec<_>) = losses
                    .iter()
                    .zip(samples)
                    .map(|(&l, s)| policy_relax_terms(l, s, &self.params, temps))
                    .unzip();
                let out = relax_estimates(&self.params.phi, &[a, b], false)?;
                Ok(samples
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let mut g = GradEstimate::zeros(n, k);
                        g.d_alpha.copy_from_slice(&out.estimates[0][i]);
                        let c = s.subpolicy_index;
                        g.d_beta[c * k..(c + 1) * k].copy_from_slice(&out.estimates[1][i]);
                        self.flatten(&g)
                    })
                    .collect())
            }
        }
    }

    /// Fits the surrogate by descending the single-sample variance objective.
    pub fn train_surrogate(&mut self, steps: usize, batch: usize, lr: f64, temps: Relaxation, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut opt = OptimizerState::adam(lr);
        for _ in 0..steps {
            let samples: Vec<SampledPolicy> = (0..batch).map(|_| self.sample(temps, &mut rng)).collect::<Result<_>>()?;
            let losses: Vec<f64> = samples.iter().map(|s| self.loss(s.subpolicy_index, &s.bits())).collect();
            let (_, phi) = relax_grad_batch(&losses, &samples, &self.params, temps, true)?;
            if let Some(phi) = phi {
                update_surrogate(&mut self.params.phi, &phi, &mut opt)?;
            }
        }
        Ok(())
    }
}

/// One row of the estimator bias report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub estimator: String,
    pub parameter: String,
    pub mc_mean: f64,
    pub exact: f64,
    pub std_err: f64,
    pub bias_sigma: f64,
}

/// Monte Carlo mean and standard error of each estimator against the exact
/// gradient, on shared draws.
pub fn bias_table(toy: &ToyProblem, kinds: &[EstimatorKind], temps: Relaxation, samples: usize, seed: u64) -> Result<Vec<BiasRow>> {
    let exact = toy.exact()?;
    let names = toy.components();
    let mut moments: Vec<Moments> = kinds.iter().map(|_| Moments::new(exact.len())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut left = samples;
    while left > 0 {
        let chunk = left.min(4096);
        left -= chunk;
        let draws: Vec<SampledPolicy> = (0..chunk).map(|_| toy.sample(temps, &mut rng)).collect::<Result<_>>()?;
        for (kind, m) in kinds.iter().zip(&mut moments) {
            for e in toy.estimates(*kind, &draws, temps)? {
                m.push(&e);
            }
        }
    }
    let mut rows = vec![];
    for (kind, m) in kinds.iter().zip(&moments) {
        let se = m.std_err();
        for (i, name) in names.iter().enumerate() {
            let diff = m.mean()[i] - exact[i];
            let bias_sigma = if se[i] > 0.0 {
                diff / se[i]
            } else if diff.abs() < 1e-12 {
                0.0
            } else {
                diff.signum() * f64::INFINITY
            };
            rows.push(BiasRow {
                estimator: kind.to_string(),
                parameter: name.clone(),
                mc_mean: m.mean()[i],
                exact: exact[i],
                std_err: se[i],
                bias_sigma,
            });
        }
    }
    Ok(rows)
}

/// Per-component estimator variances on fresh draws.
pub fn estimator_variance(toy: &ToyProblem, kind: EstimatorKind, temps: Relaxation, samples: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<SampledPolicy> = (0..samples).map(|_| toy.sample(temps, &mut rng)).collect::<Result<_>>()?;
    let mut m = Moments::new(toy.components().len());
    for e in toy.estimates(kind, &draws, temps)? {
        m.push(&e);
    }
    Ok(m.variance())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::DEFAULT_OPS;

    fn toy() -> (SearchSpace, PolicyParams) {
        let space = build_space(&DEFAULT_OPS[..3], 2, PairingMode::Unordered).unwrap();
        let params = init_params(&space, &mut ChaCha8Rng::seed_from_u64(0));
        (space, params)
    }

    #[test]
    fn constant_surrogate_reduces_to_score_function() {
        let (space, mut params) = toy();
        params.phi = Surrogate::constant(params.n() + params.k, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<_> = (0..20)
            .map(|_| sample_policy(&params, &space, Relaxation::default(), &mut rng).unwrap())
            .collect();
        let losses: Vec<f64> = (0..20).map(|i| 0.3 * i as f64 - 1.0).collect();
        let (r, _) = relax_grad_batch(&losses, &samples, &params, Relaxation::default(), false).unwrap();
        let s = score_grad_batch(&losses, &samples, &params).unwrap();
        for (a, b) in r.d_alpha.iter().zip(&s.d_alpha).chain(r.d_beta.iter().zip(&s.d_beta)) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn matched_constant_loss_and_surrogate_give_zero() {
        let (space, mut params) = toy();
        params.phi = Surrogate::constant(params.n() + params.k, 1.7);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let s = sample_policy(&params, &space, Relaxation::default(), &mut rng).unwrap();
            let g = relax_grad(1.7, &s, &params, Relaxation::default()).unwrap();
            assert!(g.d_alpha.iter().chain(&g.d_beta).all(|v| v.abs() < 1e-14));
        }
    }

    #[test]
    fn unsampled_slots_receive_zero() {
        let (space, params) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = sample_policy(&params, &space, Relaxation::default(), &mut rng).unwrap();
        let g = relax_grad(0.8, &s, &params, Relaxation::default()).unwrap();
        for row in 0..params.n() {
            if row != s.subpolicy_index {
                assert_eq!(&g.d_beta[row * 2..row * 2 + 2], &[0.0, 0.0]);
            }
        }
        assert!(g.d_m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn exact_gradient_cases() {
        let (space, params) = toy();
        let g = enumerate_exact_grad(&space, &params, |_, _| 2.5).unwrap();
        assert!(g.d_alpha.iter().chain(&g.d_beta).all(|v| v.abs() < 1e-15));

        let space = build_space(&DEFAULT_OPS[..2], 1, PairingMode::Unordered).unwrap();
        let mut params = init_params(&space, &mut ChaCha8Rng::seed_from_u64(0));
        params.alpha = vec![0.3, -0.4];
        let g = enumerate_exact_grad(&space, &params, |c, _| f64::from(u8::from(c == 1))).unwrap();
        let pi = params.probs();
        assert!((g.d_alpha[1] - pi[1] * (1.0 - pi[1])).abs() < 1e-15);

        let big = build_space(&DEFAULT_OPS, 3, PairingMode::Ordered).unwrap();
        let bp = PolicyParams {
            alpha: vec![0.0; big.len()],
            beta_logits: vec![0.0; big.len() * 3],
            magnitudes: vec![0.5; big.len() * 3],
            phi: Surrogate::linear(big.len() + 3),
            k: 3,
        };
        assert!(matches!(
            enumerate_exact_grad(&big, &bp, |_, _| 0.0),
            Err(Error::SpaceTooLarge { .. })
        ));
    }

    #[test]
    fn exact_gradient_matches_finite_differences() {
        let (space, mut params) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for a in &mut params.alpha {
            *a = rng.gen_range(-1.0..1.0);
        }
        for t in &mut params.beta_logits {
            *t = rng.gen_range(-1.0..1.0);
        }
        let table: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let loss = |c: usize, b: &[bool]| table[c * 4 + usize::from(b[0]) + 2 * usize::from(b[1])];
        let g = enumerate_exact_grad(&space, &params, loss).unwrap();
        let value = |p: &PolicyParams| enumerate_exact_grad(&space, p, loss).unwrap().diagnostics.loss_mean;
        let h = 1e-5;
        for i in 0..3 {
            let mut hi = params.clone();
            hi.alpha[i] += h;
            let mut lo = params.clone();
            lo.alpha[i] -= h;
            assert!(((value(&hi) - value(&lo)) / (2.0 * h) - g.d_alpha[i]).abs() < 1e-6);
        }
        for i in 0..6 {
            let mut hi = params.clone();
            hi.beta_logits[i] += h;
            let mut lo = params.clone();
            lo.beta_logits[i] -= h;
            assert!(((value(&hi) - value(&lo)) / (2.0 * h) - g.d_beta[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn hot_temperature_straight_through_vanishes() {
        let (space, params) = toy();
        let temps = Relaxation::uniform(1e6);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = sample_policy(&params, &space, temps, &mut rng).unwrap();
        let up = StUpstream {
            d_gates: vec![1.0, 0.5, -2.0],
            d_bits: vec![1.0, -1.0],
        };
        let g = gumbel_st_grad(&up, &s, &params, temps).unwrap();
        assert!(g.d_alpha.iter().chain(&g.d_beta).all(|v| v.abs() < 1e-5));
    }

    #[test]
    fn saturated_choice_straight_through_is_flat() {
        let (space, mut params) = toy();
        params.alpha[1] = 50.0;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = sample_policy(&params, &space, Relaxation::default(), &mut rng).unwrap();
        let up = StUpstream {
            d_gates: vec![1.0, 0.5, -2.0],
            d_bits: vec![0.0, 0.0],
        };
        let g = gumbel_st_grad(&up, &s, &params, Relaxation::default()).unwrap();
        assert!(g.d_alpha[0].abs() < 1e-12 && g.d_alpha[2].abs() < 1e-12);
    }

    #[test]
    fn phi_gradient_matches_finite_differences() {
        let (space, mut params) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        params.phi = Surrogate::mlp(5, 6, &mut rng);
        let samples: Vec<_> = (0..8)
            .map(|_| sample_policy(&params, &space, Relaxation::default(), &mut rng).unwrap())
            .collect();
        let losses: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..2.0)).collect();
        let (_, grad) = relax_grad_batch(&losses, &samples, &params, Relaxation::default(), true).unwrap();
        let grad = grad.unwrap();
        let objective = |p: &PolicyParams| {
            let terms: (Vec<_>, Vec<_>) = losses
                .iter()
                .zip(&samples)
                .map(|(&l, s)| policy_relax_terms(l, s, p, Relaxation::default()))
                .unzip();
            relax_estimates(&p.phi, &[terms.0, terms.1], false).unwrap().variance_objective
        };
        let h = 1e-5;
        for (ti, g) in grad.iter().enumerate() {
            for ei in (0..g.len()).step_by(3) {
                let mut hi = params.clone();
                hi.phi.params[ti].data[ei] += h;
                let mut lo = params.clone();
                lo.phi.params[ti].data[ei] -= h;
                let fd = (objective(&hi) - objective(&lo)) / (2.0 * h);
                let tol = 1e-3 * fd.abs().max(g[ei].abs()) + 1e-7;
                assert!((fd - g[ei]).abs() <= tol, "tensor {ti} elem {ei}: fd {fd} vs {}", g[ei]);
            }
        }
        let zero = relax_estimates(&Surrogate::constant(5, 0.0), &[vec![]], true).unwrap();
        assert!(zero.phi_grad.is_none() || zero.phi_grad.unwrap().iter().flatten().all(|&v| v == 0.0));
    }
}
