//! Ensemble pooling: generalized means of member confidences, and p-merging
//! functions for member p-variables.

use super::{ConformalError, Result};

/// Power mean `((1/K) Σ x^r)^(1/r)` with the limits `r = 0` (geometric),
/// `r = ±∞` (max/min). The sum is taken relative to the extreme element so
/// that large exponents do not underflow.
pub fn power_mean(values: &[f64], r: f64) -> f64 {
    assert!(!values.is_empty(), "power mean of nothing");
    if values.len() == 1 {
        return values[0];
    }
    let k = values.len() as f64;
    if r == f64::INFINITY {
        return values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    if r == f64::NEG_INFINITY {
        return values.iter().copied().fold(f64::INFINITY, f64::min);
    }
    if r == 1.0 {
        return values.iter().sum::<f64>() / k;
    }
    if r == 0.0 {
        if values.contains(&0.0) {
            return 0.0;
        }
        return (values.iter().map(|v| v.ln()).sum::<f64>() / k).exp();
    }
    let pivot = if r > 0.0 {
        values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    } else {
        values.iter().copied().fold(f64::INFINITY, f64::min)
    };
    if pivot == 0.0 {
        // r > 0: everything is zero. r < 0: a zero term sends the mean to zero.
        return 0.0;
    }
    let s: f64 = values.iter().map(|&v| (v / pivot).powf(r)).sum::<f64>() / k;
    pivot * s.powf(1.0 / r)
}

/// Confidence merging: per class, the power mean of the member confidences.
/// `confidences` is `K x C`. The result is not renormalized across classes.
pub fn cm_pool(confidences: &[Vec<f64>], r: f64) -> Vec<f64> {
    assert!(!confidences.is_empty(), "no ensemble members");
    if confidences.len() == 1 {
        return confidences[0].clone();
    }
    let classes = confidences[0].len();
    let mut column = Vec::with_capacity(confidences.len());
    (0..classes)
        .map(|c| {
            column.clear();
            column.extend(confidences.iter().map(|f| f[c]));
            power_mean(&column, r)
        })
        .collect()
}

/// Supported p-merging functions `a_r * M_r(p)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PMerge {
    /// `K * min`, the Bonferroni merge (`r = -∞`, `a_r = K`).
    ScaledMin,
    /// `max` (`r = +∞`, `a_r = 1`).
    Max,
    /// `K^(1/r) * M_r = (Σ p^r)^(1/r)` for finite `r > 0`.
    Power(f64),
}

impl PMerge {
    pub fn from_exponent(r: f64) -> Result<Self> {
        if r == f64::NEG_INFINITY {
            Ok(PMerge::ScaledMin)
        } else if r == f64::INFINITY {
            Ok(PMerge::Max)
        } else if r.is_finite() && r > 0.0 {
            Ok(PMerge::Power(r))
        } else {
            Err(ConformalError::UnsupportedMerge(r))
        }
    }

    pub fn exponent(self) -> f64 {
        match self {
            PMerge::ScaledMin => f64::NEG_INFINITY,
            PMerge::Max => f64::INFINITY,
            PMerge::Power(r) => r,
        }
    }

    /// `a_r` for an ensemble of `k` members.
    pub fn constant(self, k: usize) -> f64 {
        match self {
            PMerge::ScaledMin => k as f64,
            PMerge::Max => 1.0,
            PMerge::Power(r) => (k as f64).powf(1.0 / r),
        }
    }

    /// Merged value before clamping; may exceed 1.
    pub fn merge_raw(self, p: &[f64]) -> f64 {
        assert!(!p.is_empty(), "no p-variables to merge");
        let k = p.len();
        match self {
            PMerge::ScaledMin => k as f64 * p.iter().copied().fold(f64::INFINITY, f64::min),
            PMerge::Max => p.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            PMerge::Power(r) => {
                if k == 1 {
                    return p[0];
                }
                // (Σ p^r)^(1/r) relative to the largest term; the sum is >= 1.
                let top = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if top == 0.0 {
                    return 0.0;
                }
                let s: f64 = p.iter().map(|&v| (v / top).powf(r)).sum();
                top * s.powf(1.0 / r)
            }
        }
    }

    /// Merged p-variable, clamped to at most 1.
    pub fn merge(self, p: &[f64]) -> f64 {
        self.merge_raw(p).min(1.0)
    }
}

/// p-variable merging with exponent `r`; see [`PMerge`] for the supported values.
pub fn pm_pool(p: &[f64], r: f64) -> Result<f64> {
    if p.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
        return Err(ConformalError::NonFinite("p-variable outside (0,1]"));
    }
    Ok(PMerge::from_exponent(r)?.merge(p))
}
