//! Dynamic-confidence baseline: stop once the top pooled confidence reaches
//! a threshold calibrated for accuracy on held-out data.

use super::{AdaptiveDecision, CheckpointDiagnostic};

/// The `top` classes by confidence, ties broken towards the lower index.
pub fn top_classes(f: &[f64], top: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..f.len()).collect();
    order.sort_by(|&a, &b| f[b].total_cmp(&f[a]).then(a.cmp(&b)));
    order.truncate(top);
    order
}

fn argmax(f: &[f64]) -> usize {
    top_classes(f, 1)[0]
}

fn max_of(f: &[f64]) -> f64 {
    f.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Stops at the first checkpoint whose largest pooled confidence is at least
/// `p_th`; otherwise at `horizon`, deciding with the last checkpoint's scores.
/// Returns the argmax label and the top-`top` set.
pub fn dc_snn_decide(
    pooled: &[Vec<f64>],
    checkpoints: &[usize],
    p_th: f64,
    horizon: usize,
    top: usize,
) -> AdaptiveDecision {
    assert_eq!(pooled.len(), checkpoints.len(), "one confidence vector per checkpoint");
    assert!(!pooled.is_empty(), "no checkpoints");
    let mut diagnostics = Vec::new();
    for (t, f) in pooled.iter().enumerate() {
        diagnostics.push(CheckpointDiagnostic {
            time: checkpoints[t],
            scores: f.clone(),
            set_size: top.min(f.len()),
        });
        if max_of(f) >= p_th {
            return AdaptiveDecision {
                stop_time: checkpoints[t],
                stop_index: t,
                set: top_classes(f, top),
                label: Some(argmax(f)),
                diagnostics,
            };
        }
    }
    let last = pooled.len() - 1;
    AdaptiveDecision {
        stop_time: horizon,
        stop_index: last,
        set: top_classes(&pooled[last], top),
        label: Some(argmax(&pooled[last])),
        diagnostics,
    }
}

/// Thresholds `0.00, 0.01, ..., 0.99`.
pub fn dc_grid() -> Vec<f64> {
    (0..100).map(|i| i as f64 / 100.0).collect()
}

/// Per-example summary for threshold scans: the running maximum of the top
/// confidence where it strictly increases, with the checkpoint it occurs at.
struct StopProfile {
    rises: Vec<(f64, usize)>,
    correct: Vec<bool>,
}

impl StopProfile {
    fn new(pooled: &[Vec<f64>], label: usize) -> Self {
        let mut rises: Vec<(f64, usize)> = Vec::new();
        for (t, f) in pooled.iter().enumerate() {
            let m = max_of(f);
            if rises.last().is_none_or(|&(prev, _)| m > prev) {
                rises.push((m, t));
            }
        }
        let correct = pooled.iter().map(|f| argmax(f) == label).collect();
        Self { rises, correct }
    }

    fn correct_at(&self, p_th: f64) -> bool {
        let first = self.rises.partition_point(|&(m, _)| m < p_th);
        let t = self.rises.get(first).map_or(self.correct.len() - 1, |&(_, t)| t);
        self.correct[t]
    }
}

/// Calibration accuracy of the stopped decision for each threshold in `grid`.
/// `pooled[i][t]` is the pooled confidence vector of example `i` at checkpoint `t`.
pub fn dc_calibration_accuracy(pooled: &[Vec<Vec<f64>>], labels: &[usize], grid: &[f64]) -> Vec<f64> {
    assert_eq!(pooled.len(), labels.len());
    assert!(!pooled.is_empty(), "empty calibration set");
    let profiles: Vec<StopProfile> = pooled
        .iter()
        .zip(labels)
        .map(|(p, &c)| StopProfile::new(p, c))
        .collect();
    let n = profiles.len() as f64;
    grid.iter()
        .map(|&p_th| profiles.iter().filter(|pr| pr.correct_at(p_th)).count() as f64 / n)
        .collect()
}

/// Smallest grid value whose accuracy reaches `p_targ`; when none does, the
/// smallest value attaining the maximum accuracy.
pub fn select_threshold(grid: &[f64], accuracies: &[f64], p_targ: f64) -> f64 {
    assert_eq!(grid.len(), accuracies.len());
    assert!(!grid.is_empty(), "empty threshold grid");
    if let Some(i) = accuracies.iter().position(|&a| a >= p_targ) {
        return grid[i];
    }
    let best = accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    grid[accuracies.iter().position(|&a| a == best).expect("non-empty")]
}

/// Threshold selection on calibration data over an ascending grid.
pub fn calibrate_dc_threshold(pooled: &[Vec<Vec<f64>>], labels: &[usize], p_targ: f64, grid: &[f64]) -> f64 {
    assert!(grid.windows(2).all(|w| w[0] <= w[1]), "grid must be ascending");
    let acc = dc_calibration_accuracy(pooled, labels, grid);
    select_threshold(grid, &acc, p_targ)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_examples() {
        let cps = [20, 40, 60];
        let pooled = vec![vec![0.6, 0.4], vec![0.15, 0.85], vec![0.95, 0.05]];
        let d = dc_snn_decide(&pooled, &cps, 0.9, 80, 1);
        assert_eq!((d.stop_time, d.label), (60, Some(0)));
        let d = dc_snn_decide(&pooled, &cps, 0.5, 80, 1);
        assert_eq!(d.stop_time, 20);
        let d = dc_snn_decide(&pooled, &cps, 0.99, 80, 2);
        assert_eq!(d.stop_time, 80);
        assert_eq!(d.set, vec![0, 1]);
        assert_eq!(d.diagnostics.len(), 3);
    }

    #[test]
    fn top_set_ties_prefer_low_index() {
        assert_eq!(top_classes(&[0.2, 0.4, 0.4, 0.0], 2), vec![1, 2]);
        assert_eq!(top_classes(&[0.25; 4], 3), vec![0, 1, 2]);
        assert_eq!(top_classes(&[0.1, 0.9], 5), vec![1, 0]);
    }

    #[test]
    fn selection_examples() {
        let grid = [0.3, 0.6, 0.9];
        assert_eq!(select_threshold(&grid, &[0.7, 0.92, 0.95], 0.9), 0.6);
        assert_eq!(select_threshold(&grid, &[0.80, 0.85, 0.85], 0.9), 0.6);
        assert_eq!(select_threshold(&grid, &[0.95, 0.96, 0.97], 0.9), 0.3);
    }

    #[test]
    fn accuracy_follows_stopping() {
        // Example 0 is wrong early (argmax 1) and right late; example 1 is always right.
        let pooled = vec![
            vec![vec![0.3, 0.7], vec![0.9, 0.1]],
            vec![vec![0.8, 0.2], vec![0.85, 0.15]],
        ];
        let labels = [0, 0];
        let acc = dc_calibration_accuracy(&pooled, &labels, &[0.5, 0.75, 0.95]);
        assert_eq!(acc, vec![0.5, 1.0, 1.0]);
        assert_eq!(calibrate_dc_threshold(&pooled, &labels, 0.9, &[0.5, 0.75, 0.95]), 0.75);
    }
}
