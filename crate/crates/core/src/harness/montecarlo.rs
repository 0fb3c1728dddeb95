use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::conformal::{p_value, PMerge};
use crate::par;
use crate::seed::{child_seed, rng_from_seed};

/// Empirical `Pr(p <= alpha)` at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exceedance {
    pub alpha: f64,
    pub rate: f64,
    pub trials: usize,
}

fn check_trials(trials: usize) -> Result<()> {
    if trials < 1000 {
        return Err(HarnessError::InvalidConfig(format!(
            "Monte Carlo needs at least 1000 trials, got {trials}"
        )));
    }
    Ok(())
}

fn check_alphas(alphas: &[f64]) -> Result<()> {
    if alphas.is_empty() || alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
        return Err(HarnessError::InvalidConfig(
            "significance levels must lie in (0,1]".into(),
        ));
    }
    Ok(())
}

fn rates(p: &[f64], alphas: &[f64]) -> Vec<Exceedance> {
    alphas
        .iter()
        .map(|&alpha| Exceedance {
            alpha,
            rate: p.iter().filter(|&&v| v <= alpha).count() as f64 / p.len() as f64,
            trials: p.len(),
        })
        .collect()
}

/// Exceedance rates of the conformal p-variable of a test loss exchangeable
/// with `n_cal` calibration losses (all i.i.d. standard normal).
pub fn validity_monte_carlo(trials: usize, n_cal: usize, alphas: &[f64], seed: u64) -> Result<Vec<Exceedance>> {
    check_trials(trials)?;
    check_alphas(alphas)?;
    if n_cal == 0 {
        return Err(HarnessError::InvalidConfig(
            "calibration size must be at least 1".into(),
        ));
    }
    let p = par::map_indexed(trials, |i| {
        let mut rng = rng_from_seed(child_seed(seed, i as u64));
        let cal: Vec<f64> = (0..n_cal).map(|_| rng.sample(StandardNormal)).collect();
        let test: f64 = rng.sample(StandardNormal);
        p_value(test, &cal).expect("finite losses")
    });
    Ok(rates(&p, alphas))
}

/// Exceedance rates of `merge` applied to `k` dependent conformal
/// p-variables. Member `j`'s loss on example `i` is
/// `sqrt(rho) z_i + sqrt(1 - rho) e_ij`, so every member's p-variable is
/// valid on its own while the members are correlated through `z`.
pub fn merging_monte_carlo(
    trials: usize,
    n_cal: usize,
    k: usize,
    merge: PMerge,
    rho: f64,
    alphas: &[f64],
    seed: u64,
) -> Result<Vec<Exceedance>> {
    check_trials(trials)?;
    check_alphas(alphas)?;
    if n_cal == 0 || k == 0 || !(0.0..=1.0).contains(&rho) {
        return Err(HarnessError::InvalidConfig(
            "need n_cal >= 1, k >= 1 and correlation in [0,1]".into(),
        ));
    }
    let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
    let p = par::map_indexed(trials, |i| {
        let mut rng = rng_from_seed(child_seed(seed, i as u64));
        let mut losses = vec![vec![0.0; n_cal + 1]; k];
        for ex in 0..=n_cal {
            let z: f64 = StandardNormal.sample(&mut rng);
            for member in losses.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                member[ex] = a * z + b * e;
            }
        }
        let per_member: Vec<f64> = losses
            .iter()
            .map(|l| p_value(l[n_cal], &l[..n_cal]).expect("finite losses"))
            .collect();
        merge.merge(&per_member)
    });
    Ok(rates(&p, alphas))
}

/// One line of a validation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
}

impl Check {
    fn at_most(name: String, value: f64, limit: f64) -> Self {
        // Limits are level + tolerance; trim the binary representation noise.
        let limit = (limit * 1e12).round() / 1e12;
        Self {
            pass: value <= limit,
            name,
            value,
            limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSettings {
    pub trials: usize,
    pub n_cal: usize,
    pub alphas: Vec<f64>,
    /// Allowed excess of an empirical exceedance rate over its level.
    pub tolerance: f64,
    pub ensemble_size: usize,
    pub correlation: f64,
    pub power_exponent: f64,
    /// Random inputs for the exact-identity and dominance checks.
    pub dominance_samples: usize,
    pub seed: u64,
}

impl Default for ValidationSettings {
    fn default() -> Self {
        Self {
            trials: 10_000,
            n_cal: 50,
            alphas: vec![0.05, 0.1, 0.25, 0.5],
            tolerance: 0.02,
            ensemble_size: 6,
            correlation: 0.5,
            power_exponent: 45.0,
            dominance_samples: 100_000,
            seed: 0,
        }
    }
}

/// p-variable validity, p-merging validity for `K*min`, `max` and the power
/// merge, and pointwise identities of the merges on random inputs.
pub fn validation_suite(s: &ValidationSettings) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for row in validity_monte_carlo(s.trials, s.n_cal, &s.alphas, child_seed(s.seed, 0))? {
        checks.push(Check::at_most(
            format!("p-value alpha={}", row.alpha),
            row.rate,
            row.alpha + s.tolerance,
        ));
    }
    let merges = [
        ("kmin", PMerge::ScaledMin),
        ("max", PMerge::Max),
        ("power", PMerge::from_exponent(s.power_exponent)?),
    ];
    for (j, (name, merge)) in merges.iter().enumerate() {
        let rows = merging_monte_carlo(
            s.trials,
            s.n_cal,
            s.ensemble_size,
            *merge,
            s.correlation,
            &s.alphas,
            child_seed(s.seed, 1 + j as u64),
        )?;
        for row in rows {
            checks.push(Check::at_most(
                format!("merge-{name} alpha={}", row.alpha),
                row.rate,
                row.alpha + s.tolerance,
            ));
        }
    }
    let mut rng = rng_from_seed(child_seed(s.seed, 10));
    let k = s.ensemble_size;
    let (mut kmin_err, mut max_err, mut below_max) = (0.0f64, 0.0f64, 0usize);
    let power = PMerge::from_exponent(s.power_exponent)?;
    for _ in 0..s.dominance_samples {
        let p: Vec<f64> = (0..k).map(|_| 1.0 - rng.random::<f64>()).collect();
        let lo = p.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = p.iter().copied().fold(0.0, f64::max);
        kmin_err = kmin_err.max((PMerge::ScaledMin.merge_raw(&p) - k as f64 * lo).abs());
        max_err = max_err.max((PMerge::Max.merge_raw(&p) - hi).abs());
        if power.merge_raw(&p) < hi {
            below_max += 1;
        }
    }
    checks.push(Check::at_most("kmin equals K*min".into(), kmin_err, 0.0));
    checks.push(Check::at_most("max equals max".into(), max_err, 0.0));
    checks.push(Check::at_most(
        format!("power r={} below max", s.power_exponent),
        below_max as f64,
        0.0,
    ));
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_one_always_exceeded() {
        let rows = validity_monte_carlo(1000, 10, &[1.0], 4).unwrap();
        assert_eq!(rows[0].rate, 1.0);
    }

    #[test]
    fn rates_sit_on_the_rank_grid() {
        // For continuous losses the rank of the test point is uniform on
        // 1..=n+1, so Pr(p <= a) = floor(a (n+1)) / (n+1).
        let rows = validity_monte_carlo(20_000, 50, &[0.05, 0.1, 0.5], 1).unwrap();
        for row in rows {
            let exact = (row.alpha * 51.0).floor() / 51.0;
            let sd = (exact * (1.0 - exact) / 20_000.0).sqrt();
            assert!((row.rate - exact).abs() < 4.0 * sd + 1e-12, "{row:?} vs {exact}");
        }
    }

    #[test]
    fn rejects_small_runs() {
        assert!(validity_monte_carlo(999, 50, &[0.1], 0).is_err());
        assert!(validity_monte_carlo(1000, 50, &[0.0], 0).is_err());
        assert!(merging_monte_carlo(1000, 50, 3, PMerge::Max, 1.5, &[0.1], 0).is_err());
    }

    #[test]
    fn deterministic() {
        let a = merging_monte_carlo(1000, 20, 3, PMerge::ScaledMin, 0.3, &[0.1], 8).unwrap();
        let b = merging_monte_carlo(1000, 20, 3, PMerge::ScaledMin, 0.3, &[0.1], 8).unwrap();
        assert_eq!(a, b);
    }
}
