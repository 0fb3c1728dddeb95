//! Ensemble-based conformal early stopping for spiking-network classifiers.
//!
//! A set of spiking networks (a deep ensemble, or samples from a variational
//! posterior) reads an input one time step at a time. At each checkpoint the
//! members' rate-decoded confidences are merged, turned into conformal
//! predictive sets, and the input is released as soon as the set is small
//! enough. Sets cover the true label with probability at least `p_targ`
//! regardless of when the decision is taken.
//!
//! - [`snn`]: SRM neuron dynamics, forward simulation, rate decoding.
//! - [`training`]: surrogate-gradient BPTT, deep ensembles, variational inference.
//! - [`conformal`]: p-variables, confidence and p-variable merging, stopping rules,
//!   and the dynamic-confidence baseline.
//! - [`harness`]: synthetic data, experiment runs, sweeps, Monte Carlo checks.
//! - [`formats`]: model, ensemble, dataset and calibration files.

pub mod conformal;
pub mod formats;
pub mod harness;
mod par;
pub mod seed;
pub mod snn;
pub mod training;

pub use conformal::{AdaptiveDecision, CalibrationTable, ConformalError, Merge, PMerge, SpikeCp, SpikeCpConfig};
pub use snn::{Architecture, InputSequence, ModelParams, NeuronParams, ScoreTrace, SnnError};
pub use training::{Ensemble, EnsembleKind, TrainConfig, TrainError, VariationalPosterior};
