//! Utility, Bradley-Terry, fairness-regularized (FR) and fairness-coefficient
//! (FC) losses over a minibatch of reward gaps, with analytic gradients.
//!
//! * utility `U(a) = mean_i ln sigma(a_i)` on raw gaps
//! * BT: `-U(a)`
//! * FR: `-U(a) - alpha * f_tau(p(a))`
//! * FC: `-U(a) * F(p(a))^gamma`, `F` the normalized metric in `(0, 1]`
//!
//! where `p` is the positivization chosen in the [`FairnessSpec`].

use serde::{Deserialize, Serialize};

use crate::allocation::{log_sigmoid, positivize, positivize_jacobian, sigmoid};
use crate::error::{Error, Result};
use crate::fairness::{
    normalized_fairness_with_gradient, unified_fairness_with_gradient, FairnessMode, FairnessSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    Bt,
    Fr,
    Fc,
}

/// Which objective to evaluate on a batch of gaps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Bt,
    Fair(FairnessSpec),
}

impl Objective {
    pub fn mode(&self) -> LossMode {
        match self {
            Objective::Bt => LossMode::Bt,
            Objective::Fair(s) => match s.mode {
                FairnessMode::Fr => LossMode::Fr,
                FairnessMode::Fc => LossMode::Fc,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    /// `-U(a)`, always >= 0.
    pub utility_term: f64,
    /// FR: raw `f_tau`; FC: normalized fairness. `None` for BT.
    pub fairness_value: Option<f64>,
    pub mode: LossMode,
}

fn require_nonempty(gaps: &[f64]) -> Result<()> {
    if gaps.is_empty() {
        return Err(Error::Domain("loss needs a non-empty batch".into()));
    }
    Ok(())
}

/// Mean log-sigmoid of the gaps; always <= 0.
pub fn utility(gaps: &[f64]) -> Result<f64> {
    require_nonempty(gaps)?;
    Ok(gaps.iter().map(|&g| log_sigmoid(g)).sum::<f64>() / gaps.len() as f64)
}

pub fn bt_loss(gaps: &[f64]) -> Result<LossValue> {
    let u = -utility(gaps)?;
    Ok(LossValue {
        total: u,
        utility_term: u,
        fairness_value: None,
        mode: LossMode::Bt,
    })
}

pub fn fr_loss(gaps: &[f64], spec: &FairnessSpec) -> Result<LossValue> {
    require_mode(spec, FairnessMode::Fr)?;
    Ok(evaluate(gaps, &Objective::Fair(*spec))?.0)
}

pub fn fc_loss(gaps: &[f64], spec: &FairnessSpec) -> Result<LossValue> {
    require_mode(spec, FairnessMode::Fc)?;
    Ok(evaluate(gaps, &Objective::Fair(*spec))?.0)
}

fn require_mode(spec: &FairnessSpec, mode: FairnessMode) -> Result<()> {
    if spec.mode != mode {
        return Err(Error::invalid(
            "fairness.mode",
            format!("expected {mode:?}, got {:?}", spec.mode),
        ));
    }
    Ok(())
}

/// `d total / d gap_i` for every pair.
pub fn loss_gradient(gaps: &[f64], objective: &Objective) -> Result<Vec<f64>> {
    Ok(evaluate(gaps, objective)?.1)
}

/// Loss value and gradient with respect to the raw gaps.
pub fn evaluate(gaps: &[f64], objective: &Objective) -> Result<(LossValue, Vec<f64>)> {
    require_nonempty(gaps)?;
    let n = gaps.len() as f64;
    let utility_term = -gaps.iter().map(|&g| log_sigmoid(g)).sum::<f64>() / n;
    // d(-ln sigma(x))/dx = -sigma(-x)
    let utility_grad: Vec<f64> = gaps.iter().map(|&g| -sigmoid(-g) / n).collect();

    let spec = match objective {
        Objective::Bt => {
            return Ok((
                LossValue {
                    total: utility_term,
                    utility_term,
                    fairness_value: None,
                    mode: LossMode::Bt,
                },
                utility_grad,
            ))
        }
        Objective::Fair(spec) => spec,
    };

    let alloc = positivize(gaps, spec)?;
    let jac = positivize_jacobian(gaps, spec);
    match spec.mode {
        FairnessMode::Fr => {
            let (f, df) = unified_fairness_with_gradient(alloc.as_slice(), spec.tau)?;
            let mut grad = utility_grad;
            if spec.alpha != 0.0 {
                for ((g, d), j) in grad.iter_mut().zip(&df).zip(&jac) {
                    *g -= spec.alpha * d * j;
                }
            }
            Ok((
                LossValue {
                    total: utility_term - spec.alpha * f,
                    utility_term,
                    fairness_value: Some(f),
                    mode: LossMode::Fr,
                },
                grad,
            ))
        }
        FairnessMode::Fc => {
            let (fhat, dfhat) = normalized_fairness_with_gradient(alloc.as_slice(), spec.tau)?;
            let coeff = fhat.powf(spec.gamma);
            let mut grad: Vec<f64> = utility_grad.iter().map(|g| g * coeff).collect();
            if spec.gamma != 0.0 {
                let scale = utility_term * spec.gamma * fhat.powf(spec.gamma - 1.0);
                for ((g, d), j) in grad.iter_mut().zip(&dfhat).zip(&jac) {
                    *g += scale * d * j;
                }
            }
            Ok((
                LossValue {
                    total: utility_term * coeff,
                    utility_term,
                    fairness_value: Some(fhat),
                    mode: LossMode::Fc,
                },
                grad,
            ))
        }
    }
}
