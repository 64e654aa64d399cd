//! Unified allocation-fairness metric.
//!
//! For a positive allocation `a` of length `n` and a shape parameter `tau`
//! (anything except 0 and 1):
//!
//! ```text
//! f_tau(a) = sign(1 - tau) * [ sum_i (a_i / sum_j a_j)^(1 - tau) ]^(1 / tau)
//! ```
//!
//! `tau = -1` gives `(sum a)^2 / sum a^2`, i.e. `n` times Jain's index. For
//! `tau < 1` the metric lives in `(0, n]`, for `tau > 1` in `(-inf, -n]`; in
//! both cases the uniform allocation is the maximum.
//!
//! All evaluation goes through log-shares so that large `|1 - tau|` does not
//! overflow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A batch of (positive) resources allocated to entities.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationVector(Vec<f64>);

impl AllocationVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("allocation vector must be non-empty".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite allocation entry {v}")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for AllocationVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// How fairness is combined with utility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FairnessMode {
    /// Additive regularization, weight `alpha`.
    Fr,
    /// Multiplicative coefficient, exponent `gamma`.
    Fc,
}

/// Map from raw reward gaps to the positive domain of the metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positivize {
    Softplus,
    Clamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FairnessSpec {
    pub tau: f64,
    pub mode: FairnessMode,
    pub alpha: f64,
    pub gamma: f64,
    pub positivize: Positivize,
    /// Floor used by clamp positivization.
    pub epsilon: f64,
}

impl Default for FairnessSpec {
    fn default() -> Self {
        Self {
            tau: -1.0,
            mode: FairnessMode::Fr,
            alpha: 0.1,
            gamma: 0.5,
            positivize: Positivize::Softplus,
            epsilon: 1e-3,
        }
    }
}

impl FairnessSpec {
    pub fn fr(tau: f64, alpha: f64) -> Self {
        Self {
            tau,
            mode: FairnessMode::Fr,
            alpha,
            ..Self::default()
        }
    }

    pub fn fc(tau: f64, gamma: f64) -> Self {
        Self {
            tau,
            mode: FairnessMode::Fc,
            gamma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau).map_err(|_| {
            Error::invalid("fairness.tau", format!("{} is a singular value (0 or 1)", self.tau))
        })?;
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("fairness.alpha", "must be finite and >= 0"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("fairness.gamma", "must be finite and >= 0"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("fairness.epsilon", "must be finite and > 0"));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !tau.is_finite() || tau == 0.0 || tau == 1.0 {
        return Err(Error::Domain(format!(
            "tau must be finite and not in {{0, 1}}, got {tau}"
        )));
    }
    Ok(())
}

fn check_positive(a: &[f64]) -> Result<()> {
    if a.is_empty() {
        return Err(Error::Domain("allocation vector must be non-empty".into()));
    }
    for (i, &v) in a.iter().enumerate() {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Domain(format!(
                "allocation entry {i} must be finite and > 0, got {v}"
            )));
        }
    }
    Ok(())
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Log-shares `ln(a_i / sum a)` and `ln P` where `P = sum_i share_i^(1 - tau)`.
struct LogTerms {
    log_shares: Vec<f64>,
    log_p: f64,
    sum: f64,
}

fn log_terms(a: &[f64], tau: f64) -> Result<LogTerms> {
    check_tau(tau)?;
    check_positive(a)?;
    let logs: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let log_total = log_sum_exp(logs.iter().copied());
    let log_shares: Vec<f64> = logs.iter().map(|l| l - log_total).collect();
    let log_p = log_sum_exp(log_shares.iter().map(|s| (1.0 - tau) * s));
    Ok(LogTerms {
        log_shares,
        log_p,
        sum: a.iter().sum(),
    })
}

fn sign_one_minus(tau: f64) -> f64 {
    if tau < 1.0 {
        1.0
    } else {
        -1.0
    }
}

/// The unified fairness metric `f_tau(a)`.
pub fn unified_fairness(a: &[f64], tau: f64) -> Result<f64> {
    let t = log_terms(a, tau)?;
    Ok(sign_one_minus(tau) * (t.log_p / tau).exp())
}

/// Jain's index `(sum a)^2 / (n * sum a^2)`.
pub fn jain_index(a: &[f64]) -> Result<f64> {
    check_positive(a)?;
    Ok(jain_unchecked(a))
}

fn jain_unchecked(a: &[f64]) -> f64 {
    let n = a.len() as f64;
    // Scale by the max to keep the squares in range.
    let max = a.iter().copied().fold(0.0, f64::max);
    let (s, q) = a.iter().fold((0.0, 0.0), |(s, q), &v| {
        let x = v / max;
        (s + x, q + x * x)
    });
    s * s / (n * q)
}

/// `f_tau` rescaled into `(0, 1]`, with 1 exactly at the uniform allocation.
///
/// For `tau < 1` this is `f_tau(a) / n`; for `tau > 1`, where `f_tau` is
/// negative, it is `-n / f_tau(a)`.
pub fn normalized_fairness(a: &[f64], tau: f64) -> Result<f64> {
    let t = log_terms(a, tau)?;
    Ok(log_normalized(&t, tau, a.len()).exp())
}

fn log_normalized(t: &LogTerms, tau: f64, n: usize) -> f64 {
    (sign_one_minus(tau) * (t.log_p / tau - (n as f64).ln())).min(0.0)
}

/// Per-entry `d ln P / d a_k` up to the common factor, i.e.
/// `(1 - tau) / S * (share_k^(-tau) / P - 1)`.
fn dlogp(t: &LogTerms, tau: f64) -> Vec<f64> {
    let c = (1.0 - tau) / t.sum;
    t.log_shares
        .iter()
        .map(|ls| c * ((-tau * ls - t.log_p).exp() - 1.0))
        .collect()
}

/// Analytic gradient of [`unified_fairness`] with respect to `a`.
pub fn fairness_gradient(a: &[f64], tau: f64) -> Result<Vec<f64>> {
    let t = log_terms(a, tau)?;
    let f = sign_one_minus(tau) * (t.log_p / tau).exp();
    Ok(dlogp(&t, tau).into_iter().map(|d| f * d / tau).collect())
}

/// Value and gradient of [`normalized_fairness`].
pub fn normalized_fairness_with_gradient(a: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
    let t = log_terms(a, tau)?;
    let value = log_normalized(&t, tau, a.len()).exp();
    let scale = value * sign_one_minus(tau) / tau;
    let grad = dlogp(&t, tau).into_iter().map(|d| scale * d).collect();
    Ok((value, grad))
}

/// Value and gradient of [`unified_fairness`] in one pass.
pub fn unified_fairness_with_gradient(a: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
    let t = log_terms(a, tau)?;
    let f = sign_one_minus(tau) * (t.log_p / tau).exp();
    let grad = dlogp(&t, tau).into_iter().map(|d| f * d / tau).collect();
    Ok((f, grad))
}
