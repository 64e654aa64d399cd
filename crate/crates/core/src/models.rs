//! Small differentiable models: a one-hidden-layer tanh reward network and a
//! softmax policy over per-prompt candidate sets, both with hand-written
//! backward passes and a central-difference gradient checker.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::allocation::ImplicitRewardInputs;
use crate::error::{Error, Result};
use crate::losses::{evaluate, Objective};

pub const DEFAULT_HIDDEN: usize = 32;
const INIT_SCALE: f64 = 0.1;

/// `r(x) = w2 . tanh(W1 x + b1) + b2`.
///
/// Parameters are stored flat as `[W1 (row-major, hidden x dim), b1, w2, b2]`
/// so optimizers can treat them as one slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardNet {
    feature_dim: usize,
    hidden: usize,
    params: Vec<f64>,
}

impl RewardNet {
    pub fn num_params_for(feature_dim: usize, hidden: usize) -> usize {
        hidden * feature_dim + 2 * hidden + 1
    }

    pub fn zeros(feature_dim: usize, hidden: usize) -> Result<Self> {
        Self::from_params(
            feature_dim,
            hidden,
            vec![0.0; Self::num_params_for(feature_dim, hidden)],
        )
    }

    /// Weights uniform in `[-0.1, 0.1]`, biases zero.
    pub fn init(feature_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(feature_dim, hidden)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w1, rest) = net.params.split_at_mut(hidden * feature_dim);
        for w in w1 {
            *w = rng.random_range(-INIT_SCALE..=INIT_SCALE);
        }
        for w in &mut rest[hidden..2 * hidden] {
            *w = rng.random_range(-INIT_SCALE..=INIT_SCALE);
        }
        Ok(net)
    }

    pub fn from_params(feature_dim: usize, hidden: usize, params: Vec<f64>) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::invalid("feature_dim", "must be >= 1"));
        }
        if hidden == 0 {
            return Err(Error::invalid("hidden", "must be >= 1"));
        }
        let expected = Self::num_params_for(feature_dim, hidden);
        if params.len() != expected {
            return Err(Error::Dimension {
                context: "reward net parameters",
                expected,
                actual: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("params", "non-finite parameter"));
        }
        Ok(Self {
            feature_dim,
            hidden,
            params,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_dim {
            return Err(Error::Dimension {
                context: "reward net input",
                expected: self.feature_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn w1_row(&self, h: usize) -> &[f64] {
        &self.params[h * self.feature_dim..(h + 1) * self.feature_dim]
    }

    fn b1(&self) -> &[f64] {
        let o = self.hidden * self.feature_dim;
        &self.params[o..o + self.hidden]
    }

    fn w2(&self) -> &[f64] {
        let o = self.hidden * self.feature_dim + self.hidden;
        &self.params[o..o + self.hidden]
    }

    fn b2(&self) -> f64 {
        self.params[self.params.len() - 1]
    }

    fn forward_into(&self, x: &[f64], act: &mut Vec<f64>) -> f64 {
        act.clear();
        let b1 = self.b1();
        for h in 0..self.hidden {
            let z: f64 = self.w1_row(h).iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b1[h];
            act.push(z.tanh());
        }
        act.iter().zip(self.w2()).map(|(a, w)| a * w).sum::<f64>() + self.b2()
    }

    /// Scalar reward for one feature vector.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let mut act = Vec::with_capacity(self.hidden);
        Ok(self.forward_into(x, &mut act))
    }

    /// `grad += scale * d r(x) / d params`.
    fn accumulate_grad(&self, x: &[f64], scale: f64, act: &mut Vec<f64>, grad: &mut [f64]) {
        self.forward_into(x, act);
        let d = self.feature_dim;
        let hd = self.hidden * d;
        let w2 = self.w2();
        for h in 0..self.hidden {
            let t = act[h];
            let dz = scale * w2[h] * (1.0 - t * t);
            for (g, v) in grad[h * d..(h + 1) * d].iter_mut().zip(x) {
                *g += dz * v;
            }
            grad[hd + h] += dz;
            grad[hd + self.hidden + h] += scale * t;
        }
        let last = grad.len() - 1;
        grad[last] += scale;
    }
}

/// Borrowed (chosen, rejected) feature vectors for one preference pair.
pub type PairRef<'a> = (&'a [f64], &'a [f64]);

/// `r(chosen) - r(rejected)` for every pair.
pub fn reward_gaps(net: &RewardNet, batch: &[PairRef<'_>]) -> Result<Vec<f64>> {
    let mut act = Vec::with_capacity(net.hidden);
    batch
        .iter()
        .map(|(c, r)| {
            net.check_dim(c)?;
            net.check_dim(r)?;
            Ok(net.forward_into(c, &mut act) - net.forward_into(r, &mut act))
        })
        .collect()
}

/// Chain rule from `d loss / d gap_i` to parameter gradients.
pub fn reward_backward(net: &RewardNet, batch: &[PairRef<'_>], dgaps: &[f64]) -> Result<Vec<f64>> {
    if batch.len() != dgaps.len() {
        return Err(Error::Dimension {
            context: "reward_backward gradients",
            expected: batch.len(),
            actual: dgaps.len(),
        });
    }
    let mut grad = vec![0.0; net.num_params()];
    let mut act = Vec::with_capacity(net.hidden);
    for ((c, r), &dg) in batch.iter().zip(dgaps) {
        net.check_dim(c)?;
        net.check_dim(r)?;
        if dg == 0.0 {
            continue;
        }
        net.accumulate_grad(c, dg, &mut act, &mut grad);
        net.accumulate_grad(r, -dg, &mut act, &mut grad);
    }
    Ok(grad)
}

/// One prompt's finite candidate set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub group_id: u32,
    pub candidates: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PromptBank {
    pub prompts: Vec<Prompt>,
}

impl PromptBank {
    fn candidates(&self, prompt_id: usize) -> Result<&[Vec<f64>]> {
        self.prompts
            .get(prompt_id)
            .map(|p| p.candidates.as_slice())
            .ok_or_else(|| Error::invalid("prompt_id", format!("unknown prompt {prompt_id}")))
    }
}

/// A preference between two candidates of the same prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoPair {
    pub prompt: usize,
    pub chosen: usize,
    pub rejected: usize,
    pub group_id: u32,
}

/// Softmax policy over each prompt's candidates, scored by a [`RewardNet`],
/// with a frozen reference copy taken at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePolicy {
    net: RewardNet,
    reference: RewardNet,
}

fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    (logits[k] - lse).min(0.0)
}

impl CandidatePolicy {
    pub fn new(net: RewardNet) -> Self {
        Self {
            reference: net.clone(),
            net,
        }
    }

    pub fn from_parts(net: RewardNet, reference: RewardNet) -> Result<Self> {
        if net.feature_dim != reference.feature_dim || net.hidden != reference.hidden {
            return Err(Error::Checkpoint("policy and reference shapes differ".into()));
        }
        Ok(Self { net, reference })
    }

    pub fn net(&self) -> &RewardNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut RewardNet {
        &mut self.net
    }

    pub fn reference(&self) -> &RewardNet {
        &self.reference
    }

    fn logits(net: &RewardNet, candidates: &[Vec<f64>]) -> Result<Vec<f64>> {
        candidates.iter().map(|c| net.forward(c)).collect()
    }

    fn logprob(net: &RewardNet, bank: &PromptBank, prompt_id: usize, candidate: usize) -> Result<f64> {
        let cands = bank.candidates(prompt_id)?;
        if candidate >= cands.len() {
            return Err(Error::invalid(
                "candidate_id",
                format!("prompt {prompt_id} has {} candidates, got {candidate}", cands.len()),
            ));
        }
        Ok(log_softmax_at(&Self::logits(net, cands)?, candidate))
    }

    /// `log pi_theta(candidate | prompt)`.
    pub fn policy_logprob(&self, bank: &PromptBank, prompt_id: usize, candidate: usize) -> Result<f64> {
        Self::logprob(&self.net, bank, prompt_id, candidate)
    }

    pub fn reference_logprob(&self, bank: &PromptBank, prompt_id: usize, candidate: usize) -> Result<f64> {
        Self::logprob(&self.reference, bank, prompt_id, candidate)
    }

    /// Log-probabilities of chosen/rejected under policy and reference.
    pub fn implicit_inputs(&self, bank: &PromptBank, pairs: &[DpoPair], beta: f64) -> Result<ImplicitRewardInputs> {
        let mut out = ImplicitRewardInputs {
            logp_policy_chosen: Vec::with_capacity(pairs.len()),
            logp_policy_rejected: Vec::with_capacity(pairs.len()),
            logp_ref_chosen: Vec::with_capacity(pairs.len()),
            logp_ref_rejected: Vec::with_capacity(pairs.len()),
            beta,
        };
        for p in pairs {
            out.logp_policy_chosen.push(self.policy_logprob(bank, p.prompt, p.chosen)?);
            out.logp_policy_rejected.push(self.policy_logprob(bank, p.prompt, p.rejected)?);
            out.logp_ref_chosen.push(self.reference_logprob(bank, p.prompt, p.chosen)?);
            out.logp_ref_rejected.push(self.reference_logprob(bank, p.prompt, p.rejected)?);
        }
        Ok(out)
    }
}

/// Chain rule from `d loss / d gap_i` through the implicit-reward gaps to the
/// policy parameters. The reference network is never differentiated.
pub fn policy_backward(
    policy: &CandidatePolicy,
    bank: &PromptBank,
    pairs: &[DpoPair],
    beta: f64,
    dgaps: &[f64],
) -> Result<Vec<f64>> {
    if pairs.len() != dgaps.len() {
        return Err(Error::Dimension {
            context: "policy_backward gradients",
            expected: pairs.len(),
            actual: dgaps.len(),
        });
    }
    let net = &policy.net;
    let mut grad = vec![0.0; net.num_params()];
    let mut act = Vec::with_capacity(net.hidden);
    for (p, &dg) in pairs.iter().zip(dgaps) {
        if dg == 0.0 {
            continue;
        }
        let cands = bank.candidates(p.prompt)?;
        for idx in [p.chosen, p.rejected] {
            if idx >= cands.len() {
                return Err(Error::invalid("candidate_id", format!("{idx} out of range")));
            }
            net.check_dim(&cands[idx])?;
        }
        // Both candidates share the prompt's softmax normalizer, so its
        // gradient cancels and only the score difference remains.
        let scale = dg * beta;
        net.accumulate_grad(&cands[p.chosen], scale, &mut act, &mut grad);
        net.accumulate_grad(&cands[p.rejected], -scale, &mut act, &mut grad);
    }
    Ok(grad)
}

/// Result of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub num_params: usize,
    pub passed: bool,
}

/// Gradient magnitudes below this are compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Central differences over every parameter of `params`.
pub fn finite_diff_check(
    params: &[f64],
    analytic: &[f64],
    mut loss: impl FnMut(&[f64]) -> Result<f64>,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::invalid("step", "must be > 0"));
    }
    if params.len() != analytic.len() {
        return Err(Error::Dimension {
            context: "finite_diff_check",
            expected: params.len(),
            actual: analytic.len(),
        });
    }
    let mut probe = params.to_vec();
    let mut worst = (0.0f64, 0usize);
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let up = loss(&probe)?;
        probe[i] = params[i] - step;
        let down = loss(&probe)?;
        probe[i] = params[i];
        let numeric = (up - down) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > worst.0 || rel.is_nan() {
            worst = (rel, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        num_params: params.len(),
        passed: worst.0 < tol,
    })
}

/// Gradient check of `objective` through a reward net over `batch`.
pub fn check_reward_gradients(
    net: &RewardNet,
    batch: &[PairRef<'_>],
    objective: &Objective,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let gaps = reward_gaps(net, batch)?;
    let (_, dgaps) = evaluate(&gaps, objective)?;
    let analytic = reward_backward(net, batch, &dgaps)?;
    let mut probe = net.clone();
    finite_diff_check(
        net.params(),
        &analytic,
        |p| {
            probe.params_mut().copy_from_slice(p);
            Ok(evaluate(&reward_gaps(&probe, batch)?, objective)?.0.total)
        },
        step,
        tol,
    )
}

/// DPO-style loss through the implicit-reward gaps of a policy.
pub fn dpo_loss_and_gaps(
    policy: &CandidatePolicy,
    bank: &PromptBank,
    pairs: &[DpoPair],
    beta: f64,
    objective: &Objective,
) -> Result<(crate::losses::LossValue, Vec<f64>, Vec<f64>)> {
    let inputs = policy.implicit_inputs(bank, pairs, beta)?;
    let gaps = crate::allocation::dpo_allocation(&inputs)?.gaps;
    let (value, dgaps) = evaluate(&gaps, objective)?;
    Ok((value, gaps, dgaps))
}

pub fn check_policy_gradients(
    policy: &CandidatePolicy,
    bank: &PromptBank,
    pairs: &[DpoPair],
    beta: f64,
    objective: &Objective,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let (_, _, dgaps) = dpo_loss_and_gaps(policy, bank, pairs, beta, objective)?;
    let analytic = policy_backward(policy, bank, pairs, beta, &dgaps)?;
    let mut probe = policy.clone();
    finite_diff_check(
        policy.net.params(),
        &analytic,
        |p| {
            probe.net_mut().params_mut().copy_from_slice(p);
            Ok(dpo_loss_and_gaps(&probe, bank, pairs, beta, objective)?.0.total)
        },
        step,
        tol,
    )
}
