//! Search space enumeration, learnable policy parameters, sampling and export.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_op, apply_subpolicy, slot_rng, Image, OpKind, SubPolicy};
use crate::distributions::{
    relaxed_bernoulli_from_noise, sample_relaxed_categorical, BernoulliParams, CategoricalParams, RelaxedSample,
};
use crate::error::{Error, Result};
use crate::estimators::Surrogate;

/// Temperatures of the relaxed Categorical (`tau`) and Bernoulli (`lambda`) draws.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Relaxation {
    pub tau: f64,
    pub lambda: f64,
}

impl Default for Relaxation {
    fn default() -> Self {
        Self { tau: 0.5, lambda: 0.5 }
    }
}

impl Relaxation {
    pub fn uniform(t: f64) -> Self {
        Self { tau: t, lambda: t }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairingMode {
    /// Combinations without replacement.
    #[default]
    Unordered,
    /// Every ordered k-tuple, repeats included.
    Ordered,
}

impl std::str::FromStr for PairingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unordered" => Ok(Self::Unordered),
            "ordered" => Ok(Self::Ordered),
            other => Err(Error::InvalidConfig(format!("unknown pairing mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    pub ops: Vec<OpKind>,
    pub k: usize,
    pub subpolicies: Vec<SubPolicy>,
    pub pairing: PairingMode,
}

impl SearchSpace {
    pub fn len(&self) -> usize {
        self.subpolicies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subpolicies.is_empty()
    }
}

/// Enumerates sub-policies lexicographically by op index.
pub fn build_space(ops: &[OpKind], k: usize, pairing: PairingMode) -> Result<SearchSpace> {
    if k == 0 || ops.len() < k {
        return Err(Error::InvalidSpace(format!("need |ops| >= k >= 1, got {} ops and k={k}", ops.len())));
    }
    for (i, a) in ops.iter().enumerate() {
        if ops[..i].contains(a) {
            return Err(Error::InvalidSpace(format!("duplicate op `{a}`")));
        }
    }
    let mut subpolicies = Vec::new();
    let mut idx = vec![0usize; k];
    match pairing {
        PairingMode::Unordered => {
            for (j, v) in idx.iter_mut().enumerate() {
                *v = j;
            }
            loop {
                subpolicies.push(SubPolicy::new(idx.iter().map(|&i| ops[i]).collect()));
                // next combination
                let n = ops.len();
                let Some(pos) = (0..k).rev().find(|&p| idx[p] < n - k + p) else { break };
                idx[pos] += 1;
                for q in pos + 1..k {
                    idx[q] = idx[q - 1] + 1;
                }
            }
        }
        PairingMode::Ordered => loop {
            subpolicies.push(SubPolicy::new(idx.iter().map(|&i| ops[i]).collect()));
            let Some(pos) = (0..k).rev().find(|&p| idx[p] + 1 < ops.len()) else { break };
            idx[pos] += 1;
            for v in &mut idx[pos + 1..] {
                *v = 0;
            }
        },
    }
    Ok(SearchSpace {
        ops: ops.to_vec(),
        k,
        subpolicies,
        pairing,
    })
}

/// Learnable parameters: sub-policy logits, per-slot apply logits and
/// magnitudes, and the control-variate network.
#[derive(Clone, Debug)]
pub struct PolicyParams {
    pub alpha: Vec<f64>,
    /// Row-major `[N, k]`.
    pub beta_logits: Vec<f64>,
    /// Row-major `[N, k]`, kept in `[0,1]`.
    pub magnitudes: Vec<f64>,
    pub phi: Surrogate,
    pub k: usize,
}

pub const ALPHA_INIT: f64 = 1e-3;
pub const BETA_INIT: f64 = 0.5;
pub const MAGNITUDE_INIT: f64 = 0.5;
pub const SURROGATE_HIDDEN: usize = 100;

pub fn init_params<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> PolicyParams {
    let n = space.len();
    let k = space.k;
    PolicyParams {
        alpha: vec![ALPHA_INIT; n],
        beta_logits: vec![crate::distributions::logit(BETA_INIT); n * k],
        magnitudes: vec![MAGNITUDE_INIT; n * k],
        phi: Surrogate::mlp(n + k, SURROGATE_HIDDEN, rng),
        k,
    }
}

impl PolicyParams {
    pub fn n(&self) -> usize {
        self.alpha.len()
    }

    pub fn categorical(&self) -> CategoricalParams {
        CategoricalParams::new(self.alpha.clone())
    }

    pub fn bernoulli(&self, s: usize, j: usize) -> BernoulliParams {
        BernoulliParams::from_logit(self.beta_logits[s * self.k + j])
    }

    pub fn probs(&self) -> Vec<f64> {
        self.categorical().probs()
    }

    pub fn beta(&self, s: usize, j: usize) -> f64 {
        self.bernoulli(s, j).beta()
    }

    pub fn magnitude(&self, s: usize, j: usize) -> f64 {
        self.magnitudes[s * self.k + j]
    }

    /// Projects magnitudes into `[0,1]` and logits into their clamp range.
    pub fn project(&mut self) {
        for m in &mut self.magnitudes {
            *m = m.clamp(0.0, 1.0);
        }
        for t in &mut self.beta_logits {
            *t = t.clamp(-crate::distributions::LOGIT_CLAMP, crate::distributions::LOGIT_CLAMP);
        }
    }

    /// Entropy of the sub-policy distribution, in nats.
    pub fn pi_entropy(&self) -> f64 {
        -self.probs().iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }

    pub fn mean_beta(&self) -> f64 {
        let n = self.beta_logits.len() as f64;
        self.beta_logits
            .iter()
            .map(|&t| BernoulliParams::from_logit(t).beta())
            .sum::<f64>()
            / n
    }

    pub fn mean_magnitude(&self) -> f64 {
        self.magnitudes.iter().sum::<f64>() / self.magnitudes.len() as f64
    }
}

/// One Monte Carlo draw of a sub-policy and its apply bits.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledPolicy {
    pub subpolicy_index: usize,
    pub categorical_sample: RelaxedSample,
    /// The chosen sub-policy's slots, in slot order.
    pub bernoulli_samples: Vec<RelaxedSample>,
    /// Relaxed apply draws for every `[N, k]` slot; the chosen row equals
    /// `bernoulli_samples[..].z`. Used to feed the surrogate a smooth
    /// mixture over sub-policies.
    pub slot_relaxed: Vec<f64>,
    pub magnitudes_used: Vec<f64>,
    /// Seeds the per-slot op randomness (signs, cutout position).
    pub aug_seed: u64,
}

impl SampledPolicy {
    pub fn bits(&self) -> Vec<bool> {
        self.bernoulli_samples.iter().map(RelaxedSample::bit).collect()
    }
}

pub fn sample_policy<R: Rng + ?Sized>(
    params: &PolicyParams,
    space: &SearchSpace,
    temps: Relaxation,
    rng: &mut R,
) -> Result<SampledPolicy> {
    let n = space.len();
    let k = space.k;
    if params.n() != n || params.k != k {
        return Err(Error::InvalidSpace(format!(
            "params sized for N={} k={}, space has N={n} k={k}",
            params.n(),
            params.k
        )));
    }
    let cat = sample_relaxed_categorical(&params.categorical(), temps.tau, rng)?;
    let c = cat.hard;
    let mut slot_relaxed = Vec::with_capacity(n * k);
    let mut bernoulli_samples = Vec::with_capacity(k);
    for s in 0..n {
        for j in 0..k {
            let u = rng.gen::<f64>();
            if s == c {
                let v = rng.gen::<f64>();
                let smp = relaxed_bernoulli_from_noise(params.bernoulli(s, j), temps.lambda, u, v);
                slot_relaxed.push(smp.z[0]);
                bernoulli_samples.push(smp);
            } else {
                // Only `z` is needed for unchosen slots.
                let smp = relaxed_bernoulli_from_noise(params.bernoulli(s, j), temps.lambda, u, 0.5);
                slot_relaxed.push(smp.z[0]);
            }
        }
    }
    let magnitudes_used = (0..k).map(|j| params.magnitude(c, j)).collect();
    Ok(SampledPolicy {
        subpolicy_index: c,
        categorical_sample: cat,
        bernoulli_samples,
        slot_relaxed,
        magnitudes_used,
        aug_seed: rng.gen(),
    })
}

/// Hard forward of a recorded sample on one image.
pub fn augment_with(space: &SearchSpace, image: &Image, sample: &SampledPolicy) -> Result<Image> {
    let sp = &space.subpolicies[sample.subpolicy_index];
    apply_subpolicy(sp, image, &sample.bits(), &sample.magnitudes_used, sample.aug_seed)
}

/// The same application with slot `slot`'s bit forced to `bit`.
pub fn augment_with_bit(
    space: &SearchSpace,
    image: &Image,
    sample: &SampledPolicy,
    slot: usize,
    bit: bool,
) -> Result<Image> {
    let sp = &space.subpolicies[sample.subpolicy_index];
    let mut bits = sample.bits();
    bits[slot] = bit;
    apply_subpolicy(sp, image, &bits, &sample.magnitudes_used, sample.aug_seed)
}

/// Augments each image with its own independent policy draw.
pub fn augment_batch<R: Rng + ?Sized>(
    params: &PolicyParams,
    space: &SearchSpace,
    images: &[Image],
    temps: Relaxation,
    rng: &mut R,
) -> Result<(Vec<Image>, Vec<SampledPolicy>)> {
    if images.is_empty() {
        return Err(Error::InvalidDataset("empty batch".into()));
    }
    let mut out = Vec::with_capacity(images.len());
    let mut samples = Vec::with_capacity(images.len());
    for img in images {
        let s = sample_policy(params, space, temps, rng)?;
        out.push(augment_with(space, img, &s)?);
        samples.push(s);
    }
    Ok((out, samples))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyOp {
    pub name: String,
    pub prob: f64,
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedSubPolicy {
    pub rank: usize,
    pub pi: f64,
    pub ops: Vec<PolicyOp>,
}

/// Exported policy document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub version: u32,
    pub k: usize,
    pub subpolicies: Vec<RankedSubPolicy>,
}

pub const POLICY_VERSION: u32 = 1;
pub const DEFAULT_TOP_N: usize = 25;

/// Sub-policy indices sorted by probability, descending, ties by index.
pub fn ranking(params: &PolicyParams) -> Vec<usize> {
    let pi = params.probs();
    let mut idx: Vec<usize> = (0..pi.len()).collect();
    idx.sort_by(|&a, &b| pi[b].total_cmp(&pi[a]).then(a.cmp(&b)));
    idx
}

pub fn export_policy(params: &PolicyParams, space: &SearchSpace, top_n: usize) -> PolicyFile {
    let pi = params.probs();
    let subpolicies = ranking(params)
        .into_iter()
        .take(top_n)
        .enumerate()
        .map(|(rank, s)| RankedSubPolicy {
            rank: rank + 1,
            pi: pi[s],
            ops: space.subpolicies[s]
                .slots
                .iter()
                .enumerate()
                .map(|(j, op)| PolicyOp {
                    name: op.name().to_string(),
                    prob: params.beta(s, j),
                    magnitude: params.magnitude(s, j),
                })
                .collect(),
        })
        .collect();
    PolicyFile {
        version: POLICY_VERSION,
        k: space.k,
        subpolicies,
    }
}

impl PolicyFile {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: PolicyFile = serde_json::from_str(s).map_err(|e| Error::InvalidPolicy(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != POLICY_VERSION {
            return Err(Error::InvalidPolicy(format!("unsupported version {}", self.version)));
        }
        for sp in &self.subpolicies {
            if !(0.0..=1.0).contains(&sp.pi) {
                return Err(Error::InvalidPolicy(format!("sub-policy rank {} has pi {} outside [0,1]", sp.rank, sp.pi)));
            }
            if sp.ops.len() != self.k {
                return Err(Error::InvalidPolicy(format!(
                    "sub-policy rank {} has {} ops, expected {}",
                    sp.rank,
                    sp.ops.len(),
                    self.k
                )));
            }
            for op in &sp.ops {
                op.name.parse::<OpKind>().map_err(|e| Error::InvalidPolicy(e.to_string()))?;
                if !(0.0..=1.0).contains(&op.prob) || !(0.0..=1.0).contains(&op.magnitude) {
                    return Err(Error::InvalidPolicy(format!(
                        "op {} has prob {} / magnitude {} outside [0,1]",
                        op.name, op.prob, op.magnitude
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A fixed exported policy applied at training time: one sub-policy chosen
/// per image in proportion to its exported `pi`, each op applied with its
/// probability.
#[derive(Clone, Debug)]
pub struct FixedPolicy {
    pub subpolicies: Vec<Vec<(OpKind, f64, f64)>>,
    pub weights: Vec<f64>,
}

impl FixedPolicy {
    pub fn from_file(p: &PolicyFile) -> Result<Self> {
        p.validate()?;
        let subpolicies = p
            .subpolicies
            .iter()
            .map(|sp| {
                sp.ops
                    .iter()
                    .map(|op| Ok((op.name.parse::<OpKind>()?, op.prob, op.magnitude)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let total: f64 = p.subpolicies.iter().map(|sp| sp.pi.max(0.0)).sum();
        let weights = if total > 0.0 && total.is_finite() {
            p.subpolicies.iter().map(|sp| sp.pi.max(0.0) / total).collect()
        } else {
            vec![1.0 / subpolicies.len().max(1) as f64; subpolicies.len()]
        };
        Ok(Self { subpolicies, weights })
    }

    pub fn identity() -> Self {
        Self {
            subpolicies: vec![],
            weights: vec![],
        }
    }

    fn choose<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total: f64 = self.weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        for (i, w) in self.weights.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        self.subpolicies.len() - 1
    }

    pub fn is_identity(&self) -> bool {
        self.subpolicies.is_empty()
    }

    pub fn apply<R: Rng + ?Sized>(&self, image: &Image, rng: &mut R) -> Result<Image> {
        if self.subpolicies.is_empty() {
            return Ok(image.clone());
        }
        let sp = &self.subpolicies[self.choose(rng)];
        let seed: u64 = rng.gen();
        let mut cur = image.clone();
        for (j, &(op, prob, mag)) in sp.iter().enumerate() {
            if rng.gen::<f64>() < prob {
                cur = apply_op(&op.spec(), &cur, mag, &mut slot_rng(seed, j))?;
            }
        }
        Ok(cur)
    }
}
