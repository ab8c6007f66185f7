//! Relaxed Categorical and Bernoulli sampling.
//!
//! A [`RelaxedSample`] carries the continuous draw `z`, the hard outcome
//! `H(z)`, a second relaxed draw `z_tilde` conditioned on that hard outcome,
//! and the uniforms used, so any draw can be replayed exactly.

use rand::Rng;

use crate::autodiff::{sigmoid, softmax, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Uniform noise is clamped into `[NOISE_EPS, 1 - NOISE_EPS]` before any log.
pub const NOISE_EPS: f64 = 1e-12;
/// Bernoulli logits live in `[-LOGIT_CLAMP, LOGIT_CLAMP]`.
pub const LOGIT_CLAMP: f64 = 12.0;

// Smallest pre-activation margin (in units of temperature) that keeps a
// conditional draw strictly on the side of its hard outcome after rounding.
const HARD_MARGIN: f64 = 1e-12;

pub fn clamp_unit(u: f64) -> f64 {
    u.clamp(NOISE_EPS, 1.0 - NOISE_EPS)
}

/// Standard Gumbel sample from a uniform draw.
pub fn gumbel(u: f64) -> f64 {
    -(-clamp_unit(u).ln()).ln()
}

pub fn logit(p: f64) -> f64 {
    p.ln() - (1.0 - p).ln()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalParams {
    pub alpha: Vec<f64>,
}

impl CategoricalParams {
    pub fn new(alpha: Vec<f64>) -> Self {
        Self { alpha }
    }

    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.alpha)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BernoulliParams {
    beta_logit: f64,
}

impl BernoulliParams {
    pub fn from_logit(beta_logit: f64) -> Self {
        Self {
            beta_logit: beta_logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP),
        }
    }

    pub fn from_prob(beta: f64) -> Self {
        Self::from_logit(logit(beta.clamp(NOISE_EPS, 1.0 - NOISE_EPS)))
    }

    pub fn logit(&self) -> f64 {
        self.beta_logit
    }

    pub fn beta(&self) -> f64 {
        sigmoid(self.beta_logit)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedSample {
    /// Relaxed draw: a simplex vector (Categorical) or a single value in (0,1) (Bernoulli).
    pub z: Vec<f64>,
    /// Hard outcome: category index, or 0/1 for a Bernoulli bit.
    pub hard: usize,
    /// Relaxed draw conditioned on `hard`.
    pub z_tilde: Vec<f64>,
    /// Uniforms consumed: the `u` draws followed by the conditional `v` draws.
    pub u_noise: Vec<f64>,
}

impl RelaxedSample {
    pub fn bit(&self) -> bool {
        self.hard == 1
    }

    /// One-hot encoding of a categorical hard outcome.
    pub fn one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.z.len()];
        v[self.hard] = 1.0;
        v
    }

    pub fn u(&self) -> &[f64] {
        &self.u_noise[..self.u_noise.len() / 2]
    }

    pub fn v(&self) -> &[f64] {
        &self.u_noise[self.u_noise.len() / 2..]
    }
}

/// Bernoulli hard threshold; exactly 0.5 maps to 0.
pub fn bernoulli_hard(z: f64) -> usize {
    usize::from(z > 0.5)
}

/// Perturbed logits `alpha + g` for fixed uniforms.
pub fn perturbed_logits(params: &CategoricalParams, u: &[f64]) -> Vec<f64> {
    params.alpha.iter().zip(u).map(|(a, &u)| a + gumbel(u)).collect()
}

fn tempered_softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|x| x / tau).collect();
    softmax(&scaled)
}

/// Relaxed categorical draw from explicit uniforms `u` (length N) and conditional uniforms `v`.
pub fn relaxed_categorical_from_noise(
    params: &CategoricalParams,
    tau: f64,
    u: &[f64],
    v: &[f64],
) -> Result<RelaxedSample> {
    let n = params.alpha.len();
    if n == 0 || u.len() != n || v.len() != n {
        return Err(Error::Arity {
            expected: n.max(1),
            got: u.len().min(v.len()),
        });
    }
    let z = tempered_softmax(&perturbed_logits(params, u), tau);
    let hard = argmax(&z);
    let z_tilde = conditional_categorical(params, hard, v, tau)?;
    let mut u_noise = u.to_vec();
    u_noise.extend_from_slice(v);
    Ok(RelaxedSample {
        z,
        hard,
        z_tilde,
        u_noise,
    })
}

pub fn sample_relaxed_categorical<R: Rng + ?Sized>(
    params: &CategoricalParams,
    tau: f64,
    rng: &mut R,
) -> Result<RelaxedSample> {
    let n = params.alpha.len();
    let u: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    relaxed_categorical_from_noise(params, tau, &u, &v)
}

/// Conditional Gumbel logits given the hard class `c`, as a function of `log pi`.
///
/// The chosen class gets `-log(-log v_c)`; every other class gets
/// `-log(-log(v_i)/pi_i - log v_c)`, which is strictly smaller.
pub fn conditional_gumbel_logits(probs: &[f64], c: usize, v: &[f64], tau: f64) -> Vec<f64> {
    let top_neg_log = -clamp_unit(v[c]).ln();
    let top = -top_neg_log.ln();
    let margin = HARD_MARGIN * tau * (1.0 + top.abs());
    probs
        .iter()
        .zip(v)
        .enumerate()
        .map(|(i, (&p, &vi))| {
            if i == c {
                top
            } else {
                let g = -((-clamp_unit(vi).ln()) / p + top_neg_log).ln();
                g.min(top - margin)
            }
        })
        .collect()
}

fn conditional_categorical(params: &CategoricalParams, c: usize, v: &[f64], tau: f64) -> Result<Vec<f64>> {
    if c >= params.alpha.len() {
        return Err(Error::InvalidSample(format!(
            "class {c} out of range for {} classes",
            params.alpha.len()
        )));
    }
    let logits = conditional_gumbel_logits(&params.probs(), c, v, tau);
    Ok(tempered_softmax(&logits, tau))
}

/// `v'` of the conditional Bernoulli draw: uniform restricted to the region producing `bit`.
pub fn conditional_uniform(beta: f64, bit: usize, v: f64) -> f64 {
    let v = clamp_unit(v);
    if bit == 0 {
        v * (1.0 - beta)
    } else {
        v * beta + (1.0 - beta)
    }
}

fn bernoulli_preactivation(params: BernoulliParams, u: f64) -> f64 {
    params.logit() + logit(clamp_unit(u))
}

fn conditional_bernoulli(params: BernoulliParams, bit: usize, v: f64, lambda: f64) -> f64 {
    let vp = clamp_unit(conditional_uniform(params.beta(), bit, v));
    let mut a = params.logit() + logit(vp);
    let margin = HARD_MARGIN * lambda;
    if bit == 1 {
        a = a.max(margin);
    } else {
        a = a.min(0.0);
    }
    sigmoid(a / lambda)
}

pub fn relaxed_bernoulli_from_noise(params: BernoulliParams, lambda: f64, u: f64, v: f64) -> RelaxedSample {
    let z = sigmoid(bernoulli_preactivation(params, u) / lambda);
    let hard = bernoulli_hard(z);
    let z_tilde = conditional_bernoulli(params, hard, v, lambda);
    RelaxedSample {
        z: vec![z],
        hard,
        z_tilde: vec![z_tilde],
        u_noise: vec![u, v],
    }
}

pub fn sample_relaxed_bernoulli<R: Rng + ?Sized>(params: BernoulliParams, lambda: f64, rng: &mut R) -> RelaxedSample {
    let u = rng.gen::<f64>();
    let v = rng.gen::<f64>();
    relaxed_bernoulli_from_noise(params, lambda, u, v)
}

/// Either distribution's parameters, for the generic conditional entry point.
#[derive(Clone, Debug)]
pub enum DistParams {
    Categorical(CategoricalParams),
    Bernoulli(BernoulliParams),
}

/// Draws `z_tilde ~ p(z | q)` for a given hard outcome `q`.
pub fn conditional_relaxed<R: Rng + ?Sized>(
    params: &DistParams,
    q: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    match params {
        DistParams::Categorical(p) => {
            let v: Vec<f64> = (0..p.alpha.len()).map(|_| rng.gen::<f64>()).collect();
            conditional_categorical(p, q, &v, temperature)
        }
        DistParams::Bernoulli(p) => {
            if q > 1 {
                return Err(Error::InvalidSample(format!("bit value {q}")));
            }
            Ok(vec![conditional_bernoulli(*p, q, rng.gen::<f64>(), temperature)])
        }
    }
}

/// `d log p(c) / d alpha = one_hot(c) - pi`.
pub fn categorical_score(params: &CategoricalParams, c: usize) -> Vec<f64> {
    let mut s: Vec<f64> = params.probs().iter().map(|p| -p).collect();
    s[c] += 1.0;
    s
}

/// `d log p(b) / d logit = b - sigmoid(logit)`.
pub fn bernoulli_score(params: BernoulliParams, bit: usize) -> f64 {
    bit as f64 - params.beta()
}

/// Jacobian `dz/dalpha` (row-major `[N, N]`, entry `[i, j] = dz_i / dalpha_j`) of the relaxed draw.
pub fn categorical_z_jacobian(sample: &RelaxedSample, tau: f64) -> Vec<f64> {
    softmax_jacobian(&sample.z, tau)
}

fn softmax_jacobian(z: &[f64], tau: f64) -> Vec<f64> {
    let n = z.len();
    let mut j = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            let d = if a == b { z[a] } else { 0.0 };
            j[a * n + b] = (d - z[a] * z[b]) / tau;
        }
    }
    j
}

/// Jacobian `dz_tilde/dalpha` of the conditional draw, holding `v` fixed.
pub fn categorical_z_tilde_jacobian(params: &CategoricalParams, sample: &RelaxedSample, tau: f64) -> Vec<f64> {
    let n = sample.z.len();
    let c = sample.hard;
    let probs = params.probs();
    let v = sample.v();
    let top_neg_log = -clamp_unit(v[c]).ln();
    // dg_i/dlog(pi_i) for i != c; the chosen logit does not depend on alpha.
    let mut dg_dlogpi = vec![0.0; n];
    for i in 0..n {
        if i != c {
            let a = -clamp_unit(v[i]).ln() / probs[i];
            dg_dlogpi[i] = a / (a + top_neg_log);
        }
    }
    let sj = softmax_jacobian(&sample.z_tilde, tau);
    // dlog(pi_i)/dalpha_j = delta_ij - pi_j
    let mut out = vec![0.0; n * n];
    for a in 0..n {
        for i in 0..n {
            let s = sj[a * n + i] * dg_dlogpi[i];
            if s == 0.0 {
                continue;
            }
            for j in 0..n {
                let d = if i == j { 1.0 } else { 0.0 };
                out[a * n + j] += s * (d - probs[j]);
            }
        }
    }
    out
}

/// `dz/dlogit` of a relaxed Bernoulli draw with fixed `u`.
pub fn bernoulli_z_derivative(sample: &RelaxedSample, lambda: f64) -> f64 {
    let z = sample.z[0];
    z * (1.0 - z) / lambda
}

/// `dz_tilde/dlogit` of the conditional Bernoulli draw with fixed `v`.
pub fn bernoulli_z_tilde_derivative(params: BernoulliParams, sample: &RelaxedSample, lambda: f64) -> f64 {
    let zt = sample.z_tilde[0];
    let beta = params.beta();
    let v = clamp_unit(sample.v()[0]);
    let vp = clamp_unit(conditional_uniform(beta, sample.hard, v));
    let dvp_dbeta = if sample.hard == 0 { -v } else { v - 1.0 };
    let dlogit_vp = dvp_dbeta * beta * (1.0 - beta) / (vp * (1.0 - vp));
    zt * (1.0 - zt) / lambda * (1.0 + dlogit_vp)
}

/// Builds the relaxed categorical draw `softmax((alpha + g)/tau)` on the tape.
/// `alpha` is `[N]` or `[B, N]`; `gumbels` must match its shape.
pub fn relaxed_categorical_on_tape(tape: &mut Tape, alpha: Var, gumbels: Tensor, tau: f64) -> Result<Var> {
    let g = tape.constant(gumbels);
    let shape = tape.shape(g).to_vec();
    let a = if tape.shape(alpha) == shape.as_slice() {
        alpha
    } else {
        tape.broadcast(alpha, &shape)?
    };
    let s = tape.add(a, g)?;
    let s = tape.mul_scalar(s, 1.0 / tau)?;
    tape.softmax_last(s)
}

/// Builds the relaxed Bernoulli draw `sigmoid((t + logit u)/lambda)` on the tape.
pub fn relaxed_bernoulli_on_tape(tape: &mut Tape, logits: Var, u: &[f64], lambda: f64) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let lu = Tensor::new(shape, u.iter().map(|&u| logit(clamp_unit(u))).collect())?;
    let lu = tape.constant(lu);
    let s = tape.add(logits, lu)?;
    let s = tape.mul_scalar(s, 1.0 / lambda)?;
    tape.sigmoid(s)
}
