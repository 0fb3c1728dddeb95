use super::{ConformalError, Result};

/// Conformal p-variable of `test_loss` against calibration losses:
/// `(1 + #{i : test_loss <= cal[i]}) / (n + 1)`.
pub fn p_value(test_loss: f64, cal_losses: &[f64]) -> Result<f64> {
    let scores = CalibrationScores::new(cal_losses.to_vec())?;
    scores.p_value(test_loss)
}

/// Calibration losses sorted once for repeated p-value queries.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationScores {
    sorted: Vec<f64>,
}

impl CalibrationScores {
    pub fn new(mut losses: Vec<f64>) -> Result<Self> {
        if losses.is_empty() {
            return Err(ConformalError::EmptyCalibration);
        }
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(ConformalError::NonFinite("calibration loss"));
        }
        losses.sort_by(f64::total_cmp);
        Ok(Self { sorted: losses })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn p_value(&self, test_loss: f64) -> Result<f64> {
        if !test_loss.is_finite() {
            return Err(ConformalError::NonFinite("test loss"));
        }
        let n = self.sorted.len();
        let at_least = n - self.sorted.partition_point(|&s| s < test_loss);
        Ok((1 + at_least) as f64 / (n + 1) as f64)
    }
}
