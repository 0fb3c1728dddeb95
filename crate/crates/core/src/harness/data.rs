use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::par;
use crate::seed::{child_seed, rng_from_seed};
use crate::snn::InputSequence;

/// Synthetic spike-train classification task.
///
/// Channels are split into `num_classes` contiguous groups. An example of
/// class `c` with difficulty `d` fires channels of group `c` at
/// `base_rate + d * (signal_rate - base_rate)` and every other channel at
/// `base_rate`, independently per step. `d = 0` is pure noise; `d` is drawn
/// uniformly from `difficulty` per example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub channels: usize,
    pub steps: usize,
    pub base_rate: f64,
    pub signal_rate: f64,
    pub difficulty: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            channels: 40,
            steps: 80,
            base_rate: 0.1,
            signal_rate: 0.3,
            difficulty: (0.3, 1.0),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::InvalidConfig(msg));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.channels < self.num_classes {
            return bad(format!(
                "{} channels cannot carry {} class groups",
                self.channels, self.num_classes
            ));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        for (name, r) in [("base_rate", self.base_rate), ("signal_rate", self.signal_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} must lie in [0,1], got {r}"));
            }
        }
        let (lo, hi) = self.difficulty;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return bad(format!(
                "difficulty range must satisfy 0 <= lo <= hi <= 1, got ({lo}, {hi})"
            ));
        }
        Ok(())
    }

    /// Class whose signal group contains `channel`.
    pub fn group_of(&self, channel: usize) -> usize {
        channel * self.num_classes / self.channels
    }

    /// Per-channel firing rates for class `label` at difficulty `d`.
    pub fn rates(&self, label: usize, d: f64) -> Vec<f64> {
        let signal = self.base_rate + d * (self.signal_rate - self.base_rate);
        (0..self.channels)
            .map(|j| {
                if self.group_of(j) == label {
                    signal
                } else {
                    self.base_rate
                }
            })
            .collect()
    }

    /// Example `index` of the stream defined by this spec.
    pub fn example(&self, index: usize) -> InputSequence {
        let mut rng = rng_from_seed(child_seed(self.seed, index as u64));
        let label = rng.random_range(0..self.num_classes);
        let (lo, hi) = self.difficulty;
        let d = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        let rates = self.rates(label, d);
        let mut samples = Vec::with_capacity(self.steps * self.channels);
        for _ in 0..self.steps {
            for &p in &rates {
                samples.push(if rng.random::<f64>() < p { 1.0 } else { 0.0 });
            }
        }
        InputSequence::from_flat(self.steps, self.channels, samples, Some(label)).expect("shape follows the spec")
    }
}

/// Examples `0..count` of `spec`.
pub fn generate_dataset(spec: &SyntheticSpec, count: usize) -> Result<Vec<InputSequence>> {
    spec.validate()?;
    if count == 0 {
        return Err(HarnessError::InvalidConfig("dataset size must be at least 1".into()));
    }
    Ok(par::map_indexed(count, |i| spec.example(i)))
}

/// Uniform split of `0..pool_len` into `cal_size` calibration indices and the rest.
pub fn split_indices(pool_len: usize, cal_size: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if cal_size >= pool_len {
        return Err(HarnessError::InvalidConfig(format!(
            "calibration size {cal_size} must be smaller than the pool of {pool_len}"
        )));
    }
    let mut idx: Vec<usize> = (0..pool_len).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let test = idx.split_off(cal_size);
    Ok((idx, test))
}

pub fn split_cal_test<T: Clone>(pool: &[T], cal_size: usize, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let (cal, test) = split_indices(pool.len(), cal_size, seed)?;
    Ok((
        cal.iter().map(|&i| pool[i].clone()).collect(),
        test.iter().map(|&i| pool[i].clone()).collect(),
    ))
}
