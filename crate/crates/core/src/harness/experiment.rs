use serde::{Deserialize, Serialize};

use super::data::split_indices;
use super::{HarnessError, Result};
use crate::conformal::{
    calibrate_dc_threshold, cm_pool, dc_grid, dc_snn_decide, CalibrationTable, Merge, SpikeCp, SpikeCpConfig,
};
use crate::formats::{config_hash, ensemble_hash, exponent_serde, short_hash};
use crate::par;
use crate::seed::child_seed;
use crate::snn::{forward, InputSequence, ScoreTrace};
use crate::training::{sample_ensemble, Ensemble, EnsembleKind, VariationalPosterior};

/// When a variational ensemble is redrawn from the posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResamplePolicy {
    /// One draw shared by every realization.
    Once,
    /// A fresh draw per calibration/test realization.
    PerRealization,
    /// A fresh draw per input within each realization.
    PerInput,
}

/// Where the ensemble members come from.
#[derive(Debug, Clone)]
pub enum ModelSource {
    Ensemble(Ensemble),
    Posterior {
        posterior: VariationalPosterior,
        k: usize,
        policy: ResamplePolicy,
        seed: u64,
    },
}

impl ModelSource {
    pub fn mode(&self) -> &'static str {
        match self {
            ModelSource::Ensemble(e) if e.kind == EnsembleKind::DeepEnsemble => "de",
            _ => "vi",
        }
    }

    pub fn k(&self) -> usize {
        match self {
            ModelSource::Ensemble(e) => e.len(),
            ModelSource::Posterior { k, .. } => *k,
        }
    }

    /// The same source restricted or extended to `k` members. Fixed ensembles
    /// keep their first `k` members; posterior draws are nested in `k`.
    pub fn with_k(&self, k: usize) -> Result<Self> {
        match self {
            ModelSource::Ensemble(e) => Ok(ModelSource::Ensemble(e.truncate(k)?)),
            ModelSource::Posterior {
                posterior,
                policy,
                seed,
                ..
            } => {
                if k == 0 {
                    return Err(HarnessError::InvalidConfig("ensemble size must be at least 1".into()));
                }
                Ok(ModelSource::Posterior {
                    posterior: posterior.clone(),
                    k,
                    policy: *policy,
                    seed: *seed,
                })
            }
        }
    }

    fn identity(&self) -> String {
        match self {
            ModelSource::Ensemble(e) => ensemble_hash(e),
            ModelSource::Posterior {
                posterior,
                k,
                policy,
                seed,
            } => {
                let mut bytes = Vec::new();
                for v in posterior.mu.iter().chain(&posterior.rho) {
                    bytes.extend_from_slice(&v.to_bits().to_le_bytes());
                }
                format!("{}:{k}:{policy:?}:{seed}", short_hash(&bytes))
            }
        }
    }

    fn seeds(&self) -> Vec<u64> {
        match self {
            ModelSource::Ensemble(e) => e.seeds.clone(),
            ModelSource::Posterior { seed, .. } => vec![*seed],
        }
    }

    fn fixed_ensemble(&self) -> Result<Option<Ensemble>> {
        match self {
            ModelSource::Ensemble(e) => Ok(Some(e.clone())),
            ModelSource::Posterior {
                posterior,
                k,
                policy: ResamplePolicy::Once,
                seed,
            } => Ok(Some(sample_ensemble(posterior, *k, *seed)?)),
            ModelSource::Posterior { .. } => Ok(None),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeKind {
    Cm,
    Pm,
}

impl MergeKind {
    pub fn name(self) -> &'static str {
        match self {
            MergeKind::Cm => "cm",
            MergeKind::Pm => "pm",
        }
    }
}

/// Dynamic-confidence baseline run alongside SpikeCP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DcBaseline {
    /// Check the threshold at every step instead of only at the checkpoints.
    pub every_step: bool,
    /// Fixed threshold; calibrated on each realization's calibration set when absent.
    pub p_th: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub merge: MergeKind,
    #[serde(with = "exponent_serde")]
    pub r: f64,
    pub p_targ: f64,
    pub checkpoints: Vec<usize>,
    pub set_size_threshold: usize,
    pub horizon: usize,
    pub cal_size: usize,
    pub test_size: usize,
    pub resamples: usize,
    pub seed: u64,
    pub dc_baseline: Option<DcBaseline>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            merge: MergeKind::Pm,
            r: 45.0,
            p_targ: 0.9,
            checkpoints: vec![20, 40, 60, 80],
            set_size_threshold: 3,
            horizon: 80,
            cal_size: 50,
            test_size: 200,
            resamples: 20,
            seed: 0,
            dc_baseline: None,
        }
    }
}

impl ExperimentConfig {
    pub fn spikecp(&self) -> Result<SpikeCpConfig> {
        let merge = match self.merge {
            MergeKind::Cm => Merge::confidence(self.r)?,
            MergeKind::Pm => Merge::p_value(self.r)?,
        };
        Ok(SpikeCpConfig::new(
            self.p_targ,
            self.checkpoints.clone(),
            self.set_size_threshold,
            merge,
        )?)
    }

    fn validate(&self, pool: &[InputSequence]) -> Result<SpikeCpConfig> {
        let cp = self.spikecp()?;
        let bad = |msg: String| Err(HarnessError::InvalidConfig(msg));
        if self.resamples == 0 {
            return bad("resamples must be at least 1".into());
        }
        if self.test_size == 0 {
            return bad("test size must be at least 1".into());
        }
        if self.cal_size + self.test_size > pool.len() {
            return bad(format!(
                "calibration ({}) plus test ({}) exceed the pool of {}",
                self.cal_size,
                self.test_size,
                pool.len()
            ));
        }
        if *cp.checkpoints.last().expect("validated") > self.horizon {
            return bad(format!(
                "checkpoints {:?} run past the horizon {}",
                cp.checkpoints, self.horizon
            ));
        }
        if let Some(i) = pool.iter().position(|x| x.label().is_none()) {
            return bad(format!("pool example {i} has no label"));
        }
        if let Some(i) = pool.iter().position(|x| x.steps() < self.horizon) {
            return bad(format!("pool example {i} is shorter than the horizon {}", self.horizon));
        }
        if let Some(dc) = &self.dc_baseline {
            if let Some(p) = dc.p_th {
                if !(0.0..=1.0).contains(&p) {
                    return bad(format!("DC threshold must lie in [0,1], got {p}"));
                }
            }
        }
        Ok(cp)
    }
}

/// Outcome for one test input in one realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub resample: usize,
    /// Index into the pool.
    pub example: usize,
    pub label: usize,
    pub stop_time: usize,
    pub set: Vec<usize>,
    pub covered: bool,
}

/// Metrics and raw records for one method on one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// `<ensemble>-<method>`, e.g. `vi-pm` or `de-dc`.
    pub mode: String,
    pub k: usize,
    #[serde(with = "exponent_serde")]
    pub r: f64,
    pub p_targ: f64,
    pub horizon: usize,
    pub config_hash: String,
    pub seed: u64,
    pub source_seeds: Vec<u64>,
    pub resamples: usize,
    pub test_size: usize,
    /// DC threshold used in each realization; empty for SpikeCP.
    pub thresholds: Vec<f64>,
    pub records: Vec<DecisionRecord>,
}

impl ExperimentReport {
    /// Fraction of records whose set contains the label.
    pub fn coverage(&self) -> f64 {
        self.records.iter().filter(|r| r.covered).count() as f64 / self.records.len() as f64
    }

    /// Mean stopping time over the horizon.
    pub fn latency(&self) -> f64 {
        self.records.iter().map(|r| r.stop_time as f64).sum::<f64>() / (self.records.len() * self.horizon) as f64
    }

    pub fn set_size(&self) -> f64 {
        self.records.iter().map(|r| r.set.len() as f64).sum::<f64>() / self.records.len() as f64
    }

    /// Normal-approximation 95% half-width of the coverage estimate.
    pub fn ci_halfwidth(&self) -> f64 {
        let c = self.coverage();
        1.96 * (c * (1.0 - c) / self.records.len() as f64).sqrt()
    }

    /// Mean latency of each realization.
    pub fn latency_by_resample(&self) -> Vec<f64> {
        let mut sum = vec![0.0; self.resamples];
        let mut n = vec![0usize; self.resamples];
        for r in &self.records {
            sum[r.resample] += r.stop_time as f64;
            n[r.resample] += 1;
        }
        sum.iter()
            .zip(&n)
            .map(|(&s, &c)| s / (c * self.horizon) as f64)
            .collect()
    }
}

/// Traces of every input under every member, indexed `[input][member]`.
pub fn member_traces(ensemble: &Ensemble, inputs: &[&InputSequence], times: &[usize]) -> Result<Vec<Vec<ScoreTrace>>> {
    par::map_indexed(inputs.len(), |i| {
        ensemble
            .members
            .iter()
            .map(|m| forward(inputs[i], m, times))
            .collect::<std::result::Result<Vec<_>, _>>()
    })
    .into_iter()
    .map(|r| r.map_err(HarnessError::from))
    .collect()
}

fn restrict(traces: &[ScoreTrace], times: &[usize]) -> Result<Vec<ScoreTrace>> {
    if traces.first().is_some_and(|t| t.checkpoints == times) {
        return Ok(traces.to_vec());
    }
    traces
        .iter()
        .map(|t| t.select(times).map_err(HarnessError::from))
        .collect()
}

fn pooled_mean(traces: &[ScoreTrace]) -> Vec<Vec<f64>> {
    (0..traces[0].len())
        .map(|t| {
            let members: Vec<Vec<f64>> = traces.iter().map(|tr| tr.confidences[t].clone()).collect();
            cm_pool(&members, 1.0)
        })
        .collect()
}

struct Realization {
    spikecp: Vec<DecisionRecord>,
    dc: Option<(f64, Vec<DecisionRecord>)>,
}

/// Runs SpikeCP (and the DC baseline, if configured) over `cfg.resamples`
/// random calibration/test splits of `pool`. Returns the SpikeCP report,
/// followed by the DC report when enabled.
///
/// Realization `r` splits with seed `child(cfg.seed, r)`; posterior draws for
/// that realization use `child(source seed, r)` (and `child(that, example)`
/// per input), so results do not depend on execution order.
pub fn run_experiment(
    source: &ModelSource,
    pool: &[InputSequence],
    cfg: &ExperimentConfig,
) -> Result<Vec<ExperimentReport>> {
    let cp_cfg = cfg.validate(pool)?;
    let dc = cfg.dc_baseline.clone();
    let trace_times: Vec<usize> = match &dc {
        Some(d) if d.every_step => (1..=cfg.horizon).collect(),
        _ => cp_cfg.checkpoints.clone(),
    };
    let all: Vec<&InputSequence> = pool.iter().collect();
    let precomputed = match source.fixed_ensemble()? {
        Some(e) => Some(member_traces(&e, &all, &trace_times)?),
        None => None,
    };
    let grid = dc_grid();

    let run_one = |r: usize| -> Result<Realization> {
        let (cal_idx, mut test_idx) = split_indices(pool.len(), cfg.cal_size, child_seed(cfg.seed, r as u64))?;
        test_idx.truncate(cfg.test_size);
        let needed: Vec<usize> = cal_idx.iter().chain(&test_idx).copied().collect();
        let traces: Vec<Vec<ScoreTrace>> = match (&precomputed, source) {
            (Some(pre), _) => needed.iter().map(|&i| pre[i].clone()).collect(),
            (
                None,
                ModelSource::Posterior {
                    posterior,
                    k,
                    policy,
                    seed,
                },
            ) => {
                let draw_seed = child_seed(*seed, r as u64);
                if *policy == ResamplePolicy::PerRealization {
                    let e = sample_ensemble(posterior, *k, draw_seed)?;
                    let inputs: Vec<&InputSequence> = needed.iter().map(|&i| &pool[i]).collect();
                    member_traces(&e, &inputs, &trace_times)?
                } else {
                    par::map_indexed(needed.len(), |j| -> Result<Vec<ScoreTrace>> {
                        let i = needed[j];
                        let e = sample_ensemble(posterior, *k, child_seed(draw_seed, i as u64))?;
                        Ok(member_traces(&e, &[&pool[i]], &trace_times)?.remove(0))
                    })
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?
                }
            }
            (None, ModelSource::Ensemble(_)) => unreachable!("fixed ensembles are precomputed"),
        };
        let (cal_traces, test_traces) = traces.split_at(cal_idx.len());
        let cal_labels: Vec<usize> = cal_idx.iter().map(|&i| pool[i].label().expect("validated")).collect();

        let cal_cp = cal_traces
            .iter()
            .map(|t| restrict(t, &cp_cfg.checkpoints))
            .collect::<Result<Vec<_>>>()?;
        let table = CalibrationTable::from_traces(&cal_cp, &cal_labels)?;
        let predictor = SpikeCp::new(&table, &cp_cfg)?;
        let spikecp = test_idx
            .iter()
            .zip(test_traces)
            .map(|(&i, tr)| {
                let d = predictor.decide(&restrict(tr, &cp_cfg.checkpoints)?)?;
                let label = pool[i].label().expect("validated");
                Ok(DecisionRecord {
                    resample: r,
                    example: i,
                    label,
                    stop_time: d.stop_time,
                    covered: d.covers(label),
                    set: d.set,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let dc_records = match &dc {
            None => None,
            Some(d) => {
                let p_th = match d.p_th {
                    Some(p) => p,
                    None => {
                        let pooled: Vec<Vec<Vec<f64>>> = cal_traces.iter().map(|t| pooled_mean(t)).collect();
                        calibrate_dc_threshold(&pooled, &cal_labels, cfg.p_targ, &grid)
                    }
                };
                let records = test_idx
                    .iter()
                    .zip(test_traces)
                    .map(|(&i, tr)| {
                        let dec = dc_snn_decide(
                            &pooled_mean(tr),
                            &trace_times,
                            p_th,
                            cfg.horizon,
                            cfg.set_size_threshold,
                        );
                        let label = pool[i].label().expect("validated");
                        DecisionRecord {
                            resample: r,
                            example: i,
                            label,
                            stop_time: dec.stop_time,
                            covered: dec.covers(label),
                            set: dec.set,
                        }
                    })
                    .collect();
                Some((p_th, records))
            }
        };
        Ok(Realization {
            spikecp,
            dc: dc_records,
        })
    };

    let realizations = par::map_indexed(cfg.resamples, run_one)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let hash = config_hash(&(cfg, source.identity()));
    let base = |mode: String, r: f64| ExperimentReport {
        mode,
        k: source.k(),
        r,
        p_targ: cfg.p_targ,
        horizon: cfg.horizon,
        config_hash: hash.clone(),
        seed: cfg.seed,
        source_seeds: source.seeds(),
        resamples: cfg.resamples,
        test_size: cfg.test_size,
        thresholds: Vec::new(),
        records: Vec::new(),
    };
    let mut main = base(format!("{}-{}", source.mode(), cfg.merge.name()), cfg.r);
    let mut dc_report = dc.as_ref().map(|_| base(format!("{}-dc", source.mode()), 1.0));
    for real in realizations {
        main.records.extend(real.spikecp);
        if let (Some(rep), Some((p_th, recs))) = (dc_report.as_mut(), real.dc) {
            rep.thresholds.push(p_th);
            rep.records.extend(recs);
        }
    }
    let mut out = vec![main];
    out.extend(dc_report);
    Ok(out)
}

/// Swept hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    PTarg,
    K,
    R,
}

impl std::str::FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "p-targ" | "p_targ" | "ptarg" => Ok(SweepParam::PTarg),
            "k" => Ok(SweepParam::K),
            "r" => Ok(SweepParam::R),
            other => Err(format!("unknown sweep parameter '{other}' (expected p-targ, k or r)")),
        }
    }
}

/// A report tagged with the swept value that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub report: ExperimentReport,
}

/// One [`run_experiment`] per value with everything else, seeds included, held fixed.
pub fn sweep(
    param: SweepParam,
    values: &[f64],
    source: &ModelSource,
    pool: &[InputSequence],
    base: &ExperimentConfig,
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(HarnessError::InvalidConfig("sweep needs at least one value".into()));
    }
    let mut out = Vec::new();
    for &v in values {
        let mut cfg = base.clone();
        let mut src = source.clone();
        match param {
            SweepParam::PTarg => cfg.p_targ = v,
            SweepParam::R => cfg.r = v,
            SweepParam::K => {
                if !(v >= 1.0 && v.fract() == 0.0) {
                    return Err(HarnessError::InvalidConfig(format!(
                        "ensemble size must be a positive integer, got {v}"
                    )));
                }
                src = source.with_k(v as usize)?;
            }
        }
        out.extend(
            run_experiment(&src, pool, &cfg)?
                .into_iter()
                .map(|report| SweepPoint { value: v, report }),
        );
    }
    Ok(out)
}
