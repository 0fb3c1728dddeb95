use rand::Rng;
use spikecp::harness::{generate_dataset, SyntheticSpec};
use spikecp::seed::rng_from_seed;
use spikecp::snn::{forward, Architecture, InputSequence, NeuronParams, SpikeFn};
use spikecp::training::{
    loss, loss_and_gradient, sample_ensemble, train_deep_ensemble, train_single, train_vi_logged, TrainConfig,
};

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &x)| if x > best.1 { (i, x) } else { best },
        )
        .0
}

fn accuracy(model: &spikecp::ModelParams, data: &[InputSequence]) -> f64 {
    let horizon = data[0].steps();
    let hits = data
        .iter()
        .filter(|x| {
            let t = forward(x, model, &[horizon]).unwrap();
            Some(argmax(&t.confidences[0])) == x.label()
        })
        .count();
    hits as f64 / data.len() as f64
}

#[test]
fn smooth_relaxation_gradient_matches_finite_differences() {
    let arch = Architecture::new(vec![10, 8, 3], NeuronParams::default()).unwrap();
    let spike = SpikeFn::Sigmoid { slope: 5.0 };
    let h = 1e-4;
    let mut worst = 0.0f64;
    for draw in 0..10u64 {
        let mut rng = rng_from_seed(draw);
        let w: Vec<f64> = (0..arch.num_weights()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rows = (0..5)
            .map(|_| (0..10).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let x = InputSequence::from_rows(rows, None).unwrap();
        let label = (draw % 3) as usize;
        let (_, g) = loss_and_gradient(&arch, &w, &x, label, spike, 5.0).unwrap();
        for i in 0..w.len() {
            let (mut up, mut down) = (w.clone(), w.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (loss(&arch, &up, &x, label, spike).unwrap() - loss(&arch, &down, &x, label, spike).unwrap())
                / (2.0 * h);
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn separable_two_class_pilot_reaches_high_accuracy() {
    let spec = SyntheticSpec {
        num_classes: 2,
        channels: 20,
        steps: 40,
        difficulty: (1.0, 1.0),
        seed: 11,
        ..SyntheticSpec::default()
    };
    let data = generate_dataset(&spec, 200).unwrap();
    let arch = Architecture::new(vec![20, 16, 2], NeuronParams::default()).unwrap();
    let cfg = TrainConfig {
        seed: 5,
        ..TrainConfig::default()
    };
    let model = train_single(&data, &arch, &cfg).unwrap();
    let acc = accuracy(&model, &data);
    assert!(acc >= 0.95, "training accuracy {acc}");
}

fn small_fixture() -> (Vec<InputSequence>, Vec<InputSequence>, Architecture) {
    let spec = SyntheticSpec {
        channels: 20,
        steps: 40,
        seed: 21,
        ..SyntheticSpec::default()
    };
    let train = generate_dataset(&spec, 240).unwrap();
    let test = generate_dataset(&spec.with_seed(22), 200).unwrap();
    let arch = Architecture::new(vec![20, 16, 4], NeuronParams::default()).unwrap();
    (train, test, arch)
}

#[test]
fn single_network_beats_chance() {
    let (train, test, arch) = small_fixture();
    let cfg = TrainConfig {
        epochs: 20,
        seed: 2,
        ..TrainConfig::default()
    };
    let model = train_single(&train, &arch, &cfg).unwrap();
    let acc = accuracy(&model, &test);
    // Chance is 1/4; the binomial sd at chance over 200 examples is about 0.03.
    assert!(acc > 0.25 + 4.0 * 0.031, "held-out accuracy {acc}");
}

#[test]
fn vi_objective_does_not_increase() {
    let (train, _, arch) = small_fixture();
    let runs = 10;
    let mut decreasing = 0;
    for seed in 0..runs {
        let cfg = TrainConfig {
            epochs: 10,
            seed,
            ..TrainConfig::default()
        };
        let log = train_vi_logged(&train, &arch, &cfg).unwrap();
        let (first, last) = (log.epoch_losses[0], *log.epoch_losses.last().unwrap());
        if last <= first {
            decreasing += 1;
        }
    }
    assert!(decreasing * 10 >= runs * 9, "{decreasing} of {runs} runs");
}

#[test]
fn ensemble_members_produce_valid_traces() {
    let (train, test, arch) = small_fixture();
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let de = train_deep_ensemble(&train, &arch, &cfg, 3).unwrap();
    let post = train_vi_logged(&train, &arch, &cfg).unwrap().value;
    let vi = sample_ensemble(&post, 3, 7).unwrap();
    for member in de.members.iter().chain(&vi.members) {
        for x in &test[..20] {
            let t = forward(x, member, &[10, 20, 40]).unwrap();
            assert_eq!(t.checkpoints, vec![10, 20, 40]);
            for (f, c) in t.confidences.iter().zip(&t.counts) {
                assert_eq!(f.len(), 4);
                assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(c.iter().all(|&v| v <= 40));
            }
        }
    }
}
