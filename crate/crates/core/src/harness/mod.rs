//! Synthetic data, calibration/test resampling, metrics, sweeps and Monte
//! Carlo validity checks.

mod data;
mod experiment;
mod montecarlo;
mod report;

pub use data::{generate_dataset, split_cal_test, split_indices, SyntheticSpec};
pub use experiment::{
    member_traces, run_experiment, sweep, DcBaseline, DecisionRecord, ExperimentConfig, ExperimentReport, MergeKind,
    ModelSource, ResamplePolicy, SweepParam, SweepPoint,
};
pub use montecarlo::{
    merging_monte_carlo, validation_suite, validity_monte_carlo, Check, Exceedance, ValidationSettings,
};
pub use report::{read_records, read_summary, sweep_svg, write_records, write_summary, ReportKey, SummaryRow};

use thiserror::Error;

use crate::conformal::ConformalError;
use crate::formats::FormatError;
use crate::snn::SnnError;
use crate::training::TrainError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Snn(#[from] SnnError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Format(FormatError::Io(e))
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
