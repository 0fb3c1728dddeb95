//! Conformal p-variables, ensemble pooling and adaptive stopping.
//!
//! A [`SpikeCp`] predictor is built once from a [`CalibrationTable`] and a
//! [`SpikeCpConfig`], then decides test inputs independently: at each
//! checkpoint it forms per-class p-variables (from pooled confidences or by
//! merging per-member p-variables), keeps the classes whose p-variable
//! exceeds `alpha = (1 - p_targ) / |checkpoints|`, and stops at the first
//! checkpoint whose set has at most `set_size_threshold` classes.
//!
//! Class indices are 0-based throughout.

mod dcsnn;
mod pooling;
mod pvalue;

pub use dcsnn::{
    calibrate_dc_threshold, dc_calibration_accuracy, dc_grid, dc_snn_decide, select_threshold, top_classes,
};
pub use pooling::{cm_pool, pm_pool, power_mean, PMerge};
pub use pvalue::{p_value, CalibrationScores};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::snn::{neg_log, ScoreTrace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConformalError {
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("unsupported p-merging exponent r={0}; supported: -inf, +inf, finite r > 0")]
    UnsupportedMerge(f64),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, ConformalError>;

/// How member outputs are pooled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Merge {
    /// Power mean of member confidences with exponent `r`, then log-loss.
    Confidence { r: f64 },
    /// Per-member p-variables combined by a p-merging function.
    PValue(PMerge),
}

impl Merge {
    pub fn confidence(r: f64) -> Result<Self> {
        if r.is_nan() {
            return Err(ConformalError::InvalidConfig("pooling exponent is NaN".into()));
        }
        Ok(Merge::Confidence { r })
    }

    pub fn p_value(r: f64) -> Result<Self> {
        Ok(Merge::PValue(PMerge::from_exponent(r)?))
    }

    pub fn exponent(self) -> f64 {
        match self {
            Merge::Confidence { r } => r,
            Merge::PValue(m) => m.exponent(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Merge::Confidence { .. } => "cm",
            Merge::PValue(_) => "pm",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpikeCpConfig {
    pub p_targ: f64,
    /// 1-based checkpoint times, strictly increasing.
    pub checkpoints: Vec<usize>,
    pub set_size_threshold: usize,
    pub merge: Merge,
}

impl SpikeCpConfig {
    pub fn new(p_targ: f64, checkpoints: Vec<usize>, set_size_threshold: usize, merge: Merge) -> Result<Self> {
        let cfg = Self {
            p_targ,
            checkpoints,
            set_size_threshold,
            merge,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Per-checkpoint miscoverage budget `(1 - p_targ) / |checkpoints|`.
    pub fn alpha(&self) -> f64 {
        (1.0 - self.p_targ) / self.checkpoints.len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_targ > 0.0 && self.p_targ < 1.0) {
            return Err(ConformalError::InvalidConfig(format!(
                "p_targ must lie in (0,1), got {}",
                self.p_targ
            )));
        }
        if self.checkpoints.is_empty() || self.checkpoints[0] == 0 {
            return Err(ConformalError::InvalidConfig(
                "checkpoints must be non-empty 1-based times".into(),
            ));
        }
        if self.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ConformalError::InvalidConfig(
                "checkpoints must be strictly increasing".into(),
            ));
        }
        if self.set_size_threshold == 0 {
            return Err(ConformalError::InvalidConfig(
                "set size threshold must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-model, per-checkpoint confidences of every calibration example,
/// together with its label. Losses are the clamped log-loss of the stored
/// confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    checkpoints: Vec<usize>,
    num_models: usize,
    num_classes: usize,
    labels: Vec<usize>,
    /// Indexed `[model][checkpoint][example][class]`, flattened.
    confidences: Vec<f64>,
    losses: Vec<f64>,
}

impl CalibrationTable {
    /// `traces[i][k]` is the trace of calibration example `i` under model `k`.
    pub fn from_traces(traces: &[Vec<ScoreTrace>], labels: &[usize]) -> Result<Self> {
        if traces.is_empty() {
            return Err(ConformalError::EmptyCalibration);
        }
        if traces.len() != labels.len() {
            return Err(ConformalError::ShapeMismatch(format!(
                "{} calibration examples but {} labels",
                traces.len(),
                labels.len()
            )));
        }
        let num_models = traces[0].len();
        if num_models == 0 {
            return Err(ConformalError::ShapeMismatch("no models".into()));
        }
        let checkpoints = traces[0][0].checkpoints.clone();
        let num_classes = traces[0][0].num_classes();
        let n = traces.len();
        let t_len = checkpoints.len();
        let mut confidences = vec![0.0; num_models * t_len * n * num_classes];
        for (i, per_model) in traces.iter().enumerate() {
            if per_model.len() != num_models {
                return Err(ConformalError::ShapeMismatch(format!(
                    "example {i} has {} model traces, expected {num_models}",
                    per_model.len()
                )));
            }
            for (k, trace) in per_model.iter().enumerate() {
                if trace.checkpoints != checkpoints {
                    return Err(ConformalError::CheckpointMismatch(format!(
                        "example {i}, model {k}: {:?} vs {:?}",
                        trace.checkpoints, checkpoints
                    )));
                }
                for (t, f) in trace.confidences.iter().enumerate() {
                    if f.len() != num_classes {
                        return Err(ConformalError::ShapeMismatch("class count differs".into()));
                    }
                    let at = ((k * t_len + t) * n + i) * num_classes;
                    confidences[at..at + num_classes].copy_from_slice(f);
                }
            }
        }
        Self::from_parts(checkpoints, num_models, num_classes, labels.to_vec(), confidences)
    }

    pub fn from_parts(
        checkpoints: Vec<usize>,
        num_models: usize,
        num_classes: usize,
        labels: Vec<usize>,
        confidences: Vec<f64>,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(ConformalError::EmptyCalibration);
        }
        if num_models == 0 || num_classes == 0 || checkpoints.is_empty() {
            return Err(ConformalError::ShapeMismatch("empty table dimension".into()));
        }
        if confidences.len() != num_models * checkpoints.len() * n * num_classes {
            return Err(ConformalError::ShapeMismatch(format!(
                "expected {} confidences, got {}",
                num_models * checkpoints.len() * n * num_classes,
                confidences.len()
            )));
        }
        if let Some(&c) = labels.iter().find(|&&c| c >= num_classes) {
            return Err(ConformalError::ShapeMismatch(format!("label {c} out of range")));
        }
        if confidences.iter().any(|f| !(f.is_finite() && (0.0..=1.0).contains(f))) {
            return Err(ConformalError::NonFinite("calibration confidence"));
        }
        let losses = confidences.iter().map(|&f| neg_log(f)).collect();
        Ok(Self {
            checkpoints,
            num_models,
            num_classes,
            labels,
            confidences,
            losses,
        })
    }

    pub fn checkpoints(&self) -> &[usize] {
        &self.checkpoints
    }

    pub fn num_models(&self) -> usize {
        self.num_models
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn raw_confidences(&self) -> &[f64] {
        &self.confidences
    }

    fn offset(&self, model: usize, checkpoint: usize, example: usize) -> usize {
        ((model * self.checkpoints.len() + checkpoint) * self.labels.len() + example) * self.num_classes
    }

    /// Confidence vector of `example` under `model` at checkpoint index `checkpoint`.
    pub fn confidence(&self, model: usize, checkpoint: usize, example: usize) -> &[f64] {
        let at = self.offset(model, checkpoint, example);
        &self.confidences[at..at + self.num_classes]
    }

    pub fn losses(&self, model: usize, checkpoint: usize, example: usize) -> &[f64] {
        let at = self.offset(model, checkpoint, example);
        &self.losses[at..at + self.num_classes]
    }

    /// Loss of each calibration example's true label under one model.
    pub fn true_label_losses(&self, model: usize, checkpoint: usize) -> Vec<f64> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, &c)| self.losses(model, checkpoint, i)[c])
            .collect()
    }

    /// Confidence vectors pooled across models with a power mean, `[example][checkpoint]`.
    pub fn pooled_confidences(&self, r: f64) -> Vec<Vec<Vec<f64>>> {
        (0..self.len())
            .map(|i| {
                (0..self.checkpoints.len())
                    .map(|t| {
                        let members: Vec<Vec<f64>> = (0..self.num_models)
                            .map(|k| self.confidence(k, t, i).to_vec())
                            .collect();
                        cm_pool(&members, r)
                    })
                    .collect()
            })
            .collect()
    }

    /// The table restricted to `times`, each of which must be one of its checkpoints.
    pub fn select(&self, times: &[usize]) -> Result<Self> {
        let idx = times
            .iter()
            .map(|time| {
                self.checkpoints.binary_search(time).map_err(|_| {
                    ConformalError::CheckpointMismatch(format!("time {time} is not among {:?}", self.checkpoints))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut confidences = Vec::with_capacity(self.num_models * idx.len() * self.len() * self.num_classes);
        for k in 0..self.num_models {
            for &t in &idx {
                for i in 0..self.len() {
                    confidences.extend_from_slice(self.confidence(k, t, i));
                }
            }
        }
        Self::from_parts(
            times.to_vec(),
            self.num_models,
            self.num_classes,
            self.labels.clone(),
            confidences,
        )
    }
}

/// Classes whose p-variable strictly exceeds `alpha`.
pub fn predictive_set(p: &[f64], alpha: f64) -> Vec<usize> {
    p.iter()
        .enumerate()
        .filter(|(_, &v)| v > alpha)
        .map(|(c, _)| c)
        .collect()
}

/// Index of the first checkpoint whose set size is at most `threshold`,
/// or the last checkpoint when none is.
pub fn stopping_index(set_sizes: &[usize], threshold: usize) -> usize {
    set_sizes
        .iter()
        .position(|&s| s <= threshold)
        .unwrap_or(set_sizes.len().saturating_sub(1))
}

/// Stopping time (a checkpoint) for the given per-checkpoint set sizes.
pub fn stopping_time(set_sizes: &[usize], checkpoints: &[usize], threshold: usize) -> usize {
    checkpoints[stopping_index(set_sizes, threshold)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDiagnostic {
    pub time: usize,
    /// p-variables (SpikeCP) or pooled confidences (DC-SNN), per class.
    pub scores: Vec<f64>,
    pub set_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveDecision {
    pub stop_time: usize,
    /// Index into the checkpoint list of the checkpoint whose scores were used.
    pub stop_index: usize,
    pub set: Vec<usize>,
    /// Point prediction (DC-SNN only).
    pub label: Option<usize>,
    /// One entry per visited checkpoint, up to and including the stop.
    pub diagnostics: Vec<CheckpointDiagnostic>,
}

impl AdaptiveDecision {
    pub fn covers(&self, label: usize) -> bool {
        self.set.contains(&label)
    }
}

#[derive(Debug, Clone)]
enum Calibrated {
    /// Pooled true-label losses per checkpoint.
    Confidence { r: f64, scores: Vec<CalibrationScores> },
    /// `[checkpoint][model]` true-label losses.
    PValue {
        merge: PMerge,
        scores: Vec<Vec<CalibrationScores>>,
    },
}

/// SpikeCP predictor calibrated for one ensemble.
#[derive(Debug, Clone)]
pub struct SpikeCp {
    cfg: SpikeCpConfig,
    num_models: usize,
    num_classes: usize,
    calibrated: Calibrated,
}

impl SpikeCp {
    pub fn new(cal: &CalibrationTable, cfg: &SpikeCpConfig) -> Result<Self> {
        cfg.validate()?;
        if cal.checkpoints() != cfg.checkpoints.as_slice() {
            return Err(ConformalError::CheckpointMismatch(format!(
                "calibration has {:?}, config has {:?}",
                cal.checkpoints(),
                cfg.checkpoints
            )));
        }
        if cfg.set_size_threshold > cal.num_classes() {
            return Err(ConformalError::InvalidConfig(format!(
                "set size threshold {} exceeds the {} classes",
                cfg.set_size_threshold,
                cal.num_classes()
            )));
        }
        let t_len = cfg.checkpoints.len();
        let calibrated = match cfg.merge {
            Merge::Confidence { r } => {
                let scores = (0..t_len)
                    .map(|t| {
                        let losses = (0..cal.len())
                            .map(|i| {
                                let c = cal.labels()[i];
                                if cal.num_models() == 1 {
                                    return cal.losses(0, t, i)[c];
                                }
                                let members: Vec<f64> =
                                    (0..cal.num_models()).map(|k| cal.confidence(k, t, i)[c]).collect();
                                neg_log(power_mean(&members, r))
                            })
                            .collect();
                        CalibrationScores::new(losses)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Calibrated::Confidence { r, scores }
            }
            Merge::PValue(merge) => {
                let scores = (0..t_len)
                    .map(|t| {
                        (0..cal.num_models())
                            .map(|k| CalibrationScores::new(cal.true_label_losses(k, t)))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                Calibrated::PValue { merge, scores }
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            num_models: cal.num_models(),
            num_classes: cal.num_classes(),
            calibrated,
        })
    }

    pub fn config(&self) -> &SpikeCpConfig {
        &self.cfg
    }

    fn check_traces(&self, traces: &[ScoreTrace]) -> Result<()> {
        if traces.len() != self.num_models {
            return Err(ConformalError::ShapeMismatch(format!(
                "{} member traces for an ensemble of {}",
                traces.len(),
                self.num_models
            )));
        }
        for trace in traces {
            if trace.checkpoints != self.cfg.checkpoints {
                return Err(ConformalError::CheckpointMismatch(format!(
                    "trace has {:?}, calibration has {:?}",
                    trace.checkpoints, self.cfg.checkpoints
                )));
            }
            if trace.num_classes() != self.num_classes {
                return Err(ConformalError::ShapeMismatch("class count differs".into()));
            }
        }
        Ok(())
    }

    /// Per-class p-variables at checkpoint index `t`.
    pub fn p_values(&self, traces: &[ScoreTrace], t: usize) -> Result<Vec<f64>> {
        self.check_traces(traces)?;
        self.p_values_unchecked(traces, t)
    }

    fn p_values_unchecked(&self, traces: &[ScoreTrace], t: usize) -> Result<Vec<f64>> {
        match &self.calibrated {
            Calibrated::Confidence { r, scores } => {
                let members: Vec<Vec<f64>> = traces.iter().map(|tr| tr.confidences[t].clone()).collect();
                cm_pool(&members, *r)
                    .into_iter()
                    .map(|f| scores[t].p_value(neg_log(f)))
                    .collect()
            }
            Calibrated::PValue { merge, scores } => (0..self.num_classes)
                .map(|c| {
                    let per_model = traces
                        .iter()
                        .zip(&scores[t])
                        .map(|(tr, s)| s.p_value(tr.losses[t][c]))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(merge.merge(&per_model))
                })
                .collect(),
        }
    }

    /// Walks the checkpoints in order and stops at the first informative set.
    pub fn decide(&self, traces: &[ScoreTrace]) -> Result<AdaptiveDecision> {
        self.check_traces(traces)?;
        let alpha = self.cfg.alpha();
        let mut diagnostics = Vec::new();
        let last = self.cfg.checkpoints.len() - 1;
        for (t, &time) in self.cfg.checkpoints.iter().enumerate() {
            let p = self.p_values_unchecked(traces, t)?;
            let set = predictive_set(&p, alpha);
            diagnostics.push(CheckpointDiagnostic {
                time,
                scores: p,
                set_size: set.len(),
            });
            if set.len() <= self.cfg.set_size_threshold || t == last {
                return Ok(AdaptiveDecision {
                    stop_time: time,
                    stop_index: t,
                    set,
                    label: None,
                    diagnostics,
                });
            }
        }
        unreachable!("the last checkpoint always stops")
    }
}

/// One-shot SpikeCP decision for the traces of one input under `K` models.
pub fn spikecp_decide(traces: &[ScoreTrace], cal: &CalibrationTable, cfg: &SpikeCpConfig) -> Result<AdaptiveDecision> {
    SpikeCp::new(cal, cfg)?.decide(traces)
}
