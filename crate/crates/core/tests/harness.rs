use std::sync::OnceLock;

use spikecp::harness::{
    generate_dataset, run_experiment, sweep, ExperimentConfig, ExperimentReport, MergeKind, ModelSource,
    ResamplePolicy, SweepParam, SyntheticSpec,
};
use spikecp::seed::rng_from_seed;
use spikecp::snn::{Architecture, InputSequence, NeuronParams};
use spikecp::training::{train_deep_ensemble, train_vi, TrainConfig};
use spikecp::{Ensemble, VariationalPosterior};

struct Fixture {
    pool: Vec<InputSequence>,
    de: Ensemble,
    vi: VariationalPosterior,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let spec = SyntheticSpec {
            channels: 20,
            steps: 40,
            seed: 31,
            ..SyntheticSpec::default()
        };
        let train = generate_dataset(&spec, 300).unwrap();
        let pool = generate_dataset(&spec.with_seed(32), 300).unwrap();
        let arch = Architecture::new(vec![20, 16, 4], NeuronParams::default()).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            seed: 33,
            ..TrainConfig::default()
        };
        Fixture {
            de: train_deep_ensemble(&train, &arch, &cfg, 6).unwrap(),
            vi: train_vi(&train, &arch, &cfg).unwrap(),
            pool,
        }
    })
}

fn base() -> ExperimentConfig {
    ExperimentConfig {
        checkpoints: vec![10, 20, 30, 40],
        horizon: 40,
        resamples: 10,
        seed: 4,
        ..ExperimentConfig::default()
    }
}

fn de() -> ModelSource {
    ModelSource::Ensemble(fixture().de.clone())
}

fn vi(k: usize) -> ModelSource {
    ModelSource::Posterior {
        posterior: fixture().vi.clone(),
        k,
        policy: ResamplePolicy::PerRealization,
        seed: 8,
    }
}

fn three_sigma(report: &ExperimentReport, p_targ: f64) -> f64 {
    3.0 * (p_targ * (1.0 - p_targ) / report.records.len() as f64).sqrt()
}

#[test]
fn tiny_alpha_yields_full_sets() {
    // alpha = (1 - 0.95) / 4 < 1/51, so every p-value clears it.
    let cfg = ExperimentConfig { p_targ: 0.95, ..base() };
    let report = &run_experiment(&de(), &fixture().pool, &cfg).unwrap()[0];
    assert_eq!(report.coverage(), 1.0);
    assert!(report.records.iter().all(|r| r.set.len() == 4 && r.stop_time == 40));
    assert_eq!(report.latency(), 1.0);
}

#[test]
fn one_record_per_test_input_and_realization() {
    let report = &run_experiment(&de(), &fixture().pool, &base()).unwrap()[0];
    assert_eq!(report.records.len(), 10 * 200);
    for r in 0..10 {
        let mut seen: Vec<usize> = report
            .records
            .iter()
            .filter(|d| d.resample == r)
            .map(|d| d.example)
            .collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 200);
    }
    let allowed = [10, 20, 30, 40];
    assert!(report.records.iter().all(|d| allowed.contains(&d.stop_time)));
}

#[test]
fn runs_are_deterministic() {
    for source in [de(), vi(3)] {
        let a = run_experiment(&source, &fixture().pool, &base()).unwrap();
        let b = run_experiment(&source, &fixture().pool, &base()).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn pool_order_does_not_move_coverage() {
    use rand::seq::SliceRandom;
    let mut shuffled = fixture().pool.clone();
    shuffled.shuffle(&mut rng_from_seed(99));
    let cfg = ExperimentConfig {
        resamples: 20,
        ..base()
    };
    let a = run_experiment(&de(), &fixture().pool, &cfg).unwrap()[0].coverage();
    let b = run_experiment(&de(), &shuffled, &cfg).unwrap()[0].coverage();
    assert!((a - b).abs() < 0.05, "{a} vs {b}");
}

#[test]
fn every_cell_covers_and_cm_latency_shrinks_with_k() {
    let ks = [1.0, 6.0];
    for source in [de(), vi(6)] {
        for (merge, r) in [(MergeKind::Cm, 1.0), (MergeKind::Pm, 45.0)] {
            let cfg = ExperimentConfig { merge, r, ..base() };
            let points = sweep(SweepParam::K, &ks, &source, &fixture().pool, &cfg).unwrap();
            for p in &points {
                let slack = three_sigma(&p.report, 0.9);
                assert!(
                    p.report.coverage() >= 0.9 - slack,
                    "{} K={} coverage {}",
                    p.report.mode,
                    p.report.k,
                    p.report.coverage()
                );
            }
            if merge == MergeKind::Cm {
                let (one, six) = (points[0].report.latency(), points[1].report.latency());
                assert!(six <= one, "{} latency K=1 {one} K=6 {six}", points[0].report.mode);
            }
        }
    }
}

#[test]
fn p_merged_stopping_never_precedes_the_first_member() {
    // The merged p-value dominates member 0's, so its set contains member 0's.
    let cfg = ExperimentConfig {
        merge: MergeKind::Pm,
        r: 45.0,
        ..base()
    };
    let one = &run_experiment(&de().with_k(1).unwrap(), &fixture().pool, &cfg).unwrap()[0];
    let six = &run_experiment(&de(), &fixture().pool, &cfg).unwrap()[0];
    for (a, b) in one.records.iter().zip(&six.records) {
        assert_eq!((a.resample, a.example), (b.resample, b.example));
        assert!(b.stop_time >= a.stop_time);
    }
}
