//! Continuous F-beta machinery.
//!
//! Predictions are continuous in `[0, 1]` while targets stay binary, which
//! makes the contingency totals (and hence the F-measure) differentiable in
//! every prediction value:
//!
//! ```text
//! tp = Σ p·t    fp = Σ p·(1 − t)    fn = Σ (1 − p)·t
//! P  = (tp + ε)/(tp + fp + ε)       R  = (tp + ε)/(tp + fn + ε)
//! F  = (1 + β²)·P·R / (β²·P + R)    L  = 1 − F
//! ```
//!
//! With the ε-smoothing an empty target scored against an empty prediction
//! gives `F = 1`; an empty target against a non-empty prediction is penalized
//! through `fp`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, SaliencyMap};
use crate::scalar::Scalar;

/// Weight of precision relative to recall used throughout training and evaluation.
pub const DEFAULT_BETA_SQ: f64 = 0.3;
pub const DEFAULT_EPSILON: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub beta_sq: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta_sq: DEFAULT_BETA_SQ,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_sq > 0.0) {
            return Err(Error::invalid("beta_sq must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        Ok(())
    }
}

/// Soft true-positive / false-positive / false-negative aggregates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContingencyTotals<T: Scalar = f64> {
    pub tp: T,
    pub fp: T,
    pub fn_: T,
}

impl<T: Scalar> ContingencyTotals<T> {
    pub fn new(tp: T, fp: T, fn_: T) -> Self {
        Self { tp, fp, fn_ }
    }

    pub fn scaled(&self, c: T) -> Self {
        Self::new(self.tp * c, self.fp * c, self.fn_ * c)
    }

    pub fn precision(&self, epsilon: T) -> T {
        (self.tp + epsilon) / (self.tp + self.fp + epsilon)
    }

    pub fn recall(&self, epsilon: T) -> T {
        (self.tp + epsilon) / (self.tp + self.fn_ + epsilon)
    }
}

impl<T: Scalar> std::ops::Add for ContingencyTotals<T> {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self::new(self.tp + rhs.tp, self.fp + rhs.fp, self.fn_ + rhs.fn_)
    }
}

fn check_dims<T: Scalar>(pred: &SaliencyMap<T>, target: &BinaryMask) -> Result<()> {
    if pred.dims() != target.dims() {
        return Err(Error::invalid(format!(
            "prediction is {}x{} but target is {}x{}",
            pred.width(),
            pred.height(),
            target.width(),
            target.height()
        )));
    }
    Ok(())
}

/// Soft contingency totals of a continuous prediction against a binary target.
/// Summation runs in pixel order.
pub fn soft_contingency<T: Scalar>(pred: &SaliencyMap<T>, target: &BinaryMask) -> Result<ContingencyTotals<T>> {
    check_dims(pred, target)?;
    let mut tp = T::zero();
    let mut fp = T::zero();
    let mut fn_ = T::zero();
    for (&p, &t) in pred.values().iter().zip(target.values()) {
        if t == 1 {
            tp = tp + p;
            fn_ = fn_ + (T::one() - p);
        } else {
            fp = fp + p;
        }
    }
    Ok(ContingencyTotals { tp, fp, fn_ })
}

/// Combines precision and recall into the weighted harmonic mean.
pub fn f_beta_from_pr<T: Scalar>(precision: T, recall: T, beta_sq: T) -> T {
    let denom = beta_sq * precision + recall;
    if denom <= T::zero() {
        return T::zero();
    }
    (T::one() + beta_sq) * precision * recall / denom
}

/// ε-smoothed F-beta of contingency totals.
pub fn f_beta<T: Scalar>(totals: &ContingencyTotals<T>, cfg: &LossConfig) -> T {
    let eps = T::of(cfg.epsilon);
    f_beta_from_pr(totals.precision(eps), totals.recall(eps), T::of(cfg.beta_sq))
}

/// Image-level loss `1 − F_β`.
pub fn image_level_loss<T: Scalar>(pred: &SaliencyMap<T>, target: &BinaryMask, cfg: &LossConfig) -> Result<T> {
    let totals = soft_contingency(pred, target)?;
    Ok(T::one() - f_beta(&totals, cfg))
}

/// Loss value together with its gradient in every prediction value.
pub fn loss_and_gradient<T: Scalar>(
    pred: &SaliencyMap<T>,
    target: &BinaryMask,
    cfg: &LossConfig,
) -> Result<(T, Vec<T>)> {
    let totals = soft_contingency(pred, target)?;
    let eps = T::of(cfg.epsilon);
    let b = T::of(cfg.beta_sq);
    let one = T::one();

    // tp + fp = Σp and tp + fn = Σt, so recall's denominator does not move with p.
    let sum_p = totals.tp + totals.fp + eps;
    let sum_t = totals.tp + totals.fn_ + eps;
    let tp = totals.tp + eps;
    let precision = tp / sum_p;
    let recall = tp / sum_t;
    let denom = b * precision + recall;
    let f = (one + b) * precision * recall / denom;

    let d_f_d_p = (one + b) * recall * recall / (denom * denom);
    let d_f_d_r = (one + b) * b * precision * precision / (denom * denom);

    let sum_p_sq = sum_p * sum_p;
    let grad = target
        .values()
        .iter()
        .map(|&t| {
            let t = if t == 1 { one } else { T::zero() };
            let d_precision = (t * sum_p - tp) / sum_p_sq;
            let d_recall = t / sum_t;
            -(d_f_d_p * d_precision + d_f_d_r * d_recall)
        })
        .collect();
    Ok((one - f, grad))
}

/// Analytic gradient of [`image_level_loss`] with respect to each prediction value.
pub fn loss_gradient<T: Scalar>(pred: &SaliencyMap<T>, target: &BinaryMask, cfg: &LossConfig) -> Result<Vec<T>> {
    loss_and_gradient(pred, target, cfg).map(|(_, g)| g)
}

/// Mean image-level loss over several targets and the matching mean gradient.
pub fn fusion_loss_and_gradient<T: Scalar>(
    pred: &SaliencyMap<T>,
    targets: &[&BinaryMask],
    cfg: &LossConfig,
) -> Result<(T, Vec<T>)> {
    if targets.is_empty() {
        return Err(Error::invalid("fusion loss needs at least one target"));
    }
    let n = T::of_usize(targets.len());
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); pred.len()];
    for target in targets {
        let (l, g) = loss_and_gradient(pred, target, cfg)?;
        loss = loss + l;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b);
    }
    grad.iter_mut().for_each(|v| *v = *v / n);
    Ok((loss / n, grad))
}

/// Mean of the per-target image-level losses.
pub fn fusion_loss<T: Scalar>(pred: &SaliencyMap<T>, targets: &[&BinaryMask], cfg: &LossConfig) -> Result<T> {
    if targets.is_empty() {
        return Err(Error::invalid("fusion loss needs at least one target"));
    }
    let mut total = T::zero();
    for target in targets {
        total = total + image_level_loss(pred, target, cfg)?;
    }
    Ok(total / T::of_usize(targets.len()))
}
