//! Allocation vectors built from reward gaps.
//!
//! Explicit reward models allocate `r(chosen) - r(rejected)` to each pair;
//! DPO allocates the difference of implicit rewards
//! `beta * (log pi/pi_ref (chosen) - log pi/pi_ref (rejected))`. Both can be
//! negative, so the fairness metric consumes a positivized copy while the
//! utility term keeps the raw gaps.

use crate::error::{Error, Result};
use crate::fairness::{AllocationVector, FairnessSpec, Positivize};

/// Default DPO temperature.
pub const DEFAULT_BETA: f64 = 0.1;

/// Raw per-pair reward gaps with aligned group labels.
///
/// Groups are reporting metadata; nothing in the loss path reads them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RewardGapBatch {
    pub gaps: Vec<f64>,
    pub group_ids: Vec<u32>,
    pub lengths_chosen: Option<Vec<u32>>,
    pub lengths_rejected: Option<Vec<u32>>,
}

impl RewardGapBatch {
    /// Batch with every pair in group 0.
    pub fn from_gaps(gaps: Vec<f64>) -> Self {
        let group_ids = vec![0; gaps.len()];
        Self {
            gaps,
            group_ids,
            lengths_chosen: None,
            lengths_rejected: None,
        }
    }

    pub fn with_groups(mut self, group_ids: Vec<u32>) -> Result<Self> {
        if group_ids.len() != self.gaps.len() {
            return Err(Error::Dimension {
                context: "group ids",
                expected: self.gaps.len(),
                actual: group_ids.len(),
            });
        }
        self.group_ids = group_ids;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.gaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaps.is_empty()
    }
}

/// Sequence-level log-probabilities for DPO implicit rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitRewardInputs {
    pub logp_policy_chosen: Vec<f64>,
    pub logp_policy_rejected: Vec<f64>,
    pub logp_ref_chosen: Vec<f64>,
    pub logp_ref_rejected: Vec<f64>,
    pub beta: f64,
}

impl ImplicitRewardInputs {
    pub fn validate(&self) -> Result<()> {
        let n = self.logp_policy_chosen.len();
        for (name, v) in [
            ("logp_policy_rejected", &self.logp_policy_rejected),
            ("logp_ref_chosen", &self.logp_ref_chosen),
            ("logp_ref_rejected", &self.logp_ref_rejected),
        ] {
            if v.len() != n {
                return Err(Error::invalid(name, format!("length {} != {n}", v.len())));
            }
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("beta", format!("must be > 0, got {}", self.beta)));
        }
        for (name, v) in [
            ("logp_policy_chosen", &self.logp_policy_chosen),
            ("logp_policy_rejected", &self.logp_policy_rejected),
            ("logp_ref_chosen", &self.logp_ref_chosen),
            ("logp_ref_rejected", &self.logp_ref_rejected),
        ] {
            if let Some(x) = v.iter().find(|x| !(**x <= 0.0)) {
                return Err(Error::invalid(name, format!("log-probability {x} > 0")));
            }
        }
        Ok(())
    }
}

pub fn rm_allocation(chosen_rewards: &[f64], rejected_rewards: &[f64]) -> Result<RewardGapBatch> {
    if chosen_rewards.len() != rejected_rewards.len() {
        return Err(Error::Dimension {
            context: "rm_allocation",
            expected: chosen_rewards.len(),
            actual: rejected_rewards.len(),
        });
    }
    if chosen_rewards.is_empty() {
        return Err(Error::Domain("rm_allocation needs at least one pair".into()));
    }
    Ok(RewardGapBatch::from_gaps(
        chosen_rewards
            .iter()
            .zip(rejected_rewards)
            .map(|(c, r)| c - r)
            .collect(),
    ))
}

pub fn dpo_allocation(inputs: &ImplicitRewardInputs) -> Result<RewardGapBatch> {
    inputs.validate()?;
    let gaps = (0..inputs.logp_policy_chosen.len())
        .map(|i| {
            let chosen = inputs.logp_policy_chosen[i] - inputs.logp_ref_chosen[i];
            let rejected = inputs.logp_policy_rejected[i] - inputs.logp_ref_rejected[i];
            inputs.beta * (chosen - rejected)
        })
        .collect();
    Ok(RewardGapBatch::from_gaps(gaps))
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln sigma(x) = -softplus(-x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

fn positivize_one(gap: f64, spec: &FairnessSpec) -> f64 {
    match spec.positivize {
        // softplus underflows to 0 below about -745.
        Positivize::Softplus => softplus(gap).max(f64::MIN_POSITIVE),
        Positivize::Clamp => gap.max(spec.epsilon),
    }
}

/// Map raw gaps into the strictly positive domain of the fairness metric.
pub fn positivize(gaps: &[f64], spec: &FairnessSpec) -> Result<AllocationVector> {
    spec.validate()?;
    AllocationVector::new(gaps.iter().map(|&g| positivize_one(g, spec)).collect())
}

/// `d positivize(gap) / d gap`, entry by entry.
pub fn positivize_jacobian(gaps: &[f64], spec: &FairnessSpec) -> Vec<f64> {
    gaps.iter()
        .map(|&g| match spec.positivize {
            Positivize::Softplus => sigmoid(g),
            Positivize::Clamp => {
                if g > spec.epsilon {
                    1.0
                } else {
                    0.0
                }
            }
        })
        .collect()
}
