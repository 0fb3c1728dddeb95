//! Surrogate-gradient training of single networks, deep ensembles and
//! mean-field Gaussian variational posteriors.
//!
//! The loss is the cross-entropy of the softmax of the read-out spike counts
//! at the final time step. Gradients flow through the full recurrence
//! (traces, potentials and the soft reset) by backpropagation through time;
//! the derivative of the hard threshold is replaced by that of
//! `sigmoid(slope * (potential - threshold))`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;
use crate::seed::{child_seed, rng_from_seed};
use crate::snn::{confidence, sigmoid, Architecture, InputSequence, ModelParams, SnnError, SpikeFn};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("example {index} has no label")]
    MissingLabel { index: usize },
    #[error("example {index} has label {label} but the network has {classes} classes")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("class {0} has no training example")]
    MissingClass(usize),
    #[error("non-finite loss in epoch {epoch}, minibatch {minibatch}")]
    NonFiniteLoss { epoch: usize, minibatch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Snn(#[from] SnnError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Slope of the sigmoid surrogate.
    pub surrogate_slope: f64,
    /// Variance of the Gaussian weight initialization; also the prior variance for VI.
    pub init_variance: f64,
    /// Initial per-weight standard deviation of the variational posterior.
    pub posterior_init_std: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            surrogate_slope: 5.0,
            init_variance: 0.03,
            posterior_init_std: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(TrainError::InvalidConfig(format!("{name} must be positive, got {v}")))
            }
        };
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        positive("learning_rate", self.learning_rate)?;
        positive("surrogate_slope", self.surrogate_slope)?;
        positive("init_variance", self.init_variance)?;
        positive("posterior_init_std", self.posterior_init_std)
    }
}

/// Adam with the usual moment constants.
#[derive(Debug, Clone)]
struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Cross-entropy of `softmax(final spike counts)` against `label`, and its
/// gradient with respect to `weights`, by backpropagation through time.
///
/// With `SpikeFn::Sigmoid` the forward pass is smooth and the gradient is
/// exact; with `SpikeFn::Heaviside` it is the surrogate gradient.
pub fn loss_and_gradient(
    arch: &Architecture,
    weights: &[f64],
    x: &InputSequence,
    label: usize,
    spike_fn: SpikeFn,
    surrogate_slope: f64,
) -> Result<(f64, Vec<f64>)> {
    if weights.len() != arch.num_weights() {
        return Err(SnnError::DimensionMismatch {
            what: "weight vector",
            expected: arch.num_weights(),
            got: weights.len(),
        }
        .into());
    }
    if x.channels() != arch.num_inputs() {
        return Err(SnnError::DimensionMismatch {
            what: "input channels",
            expected: arch.num_inputs(),
            got: x.channels(),
        }
        .into());
    }
    let neuron = arch.neuron;
    let shapes: Vec<(usize, usize)> = arch.layer_shapes().collect();
    let offsets = arch.layer_offsets();
    let layers = shapes.len();
    let steps = x.steps();

    // Tape: potentials and output spikes of every layer at every step.
    let mut potentials: Vec<Vec<Vec<f64>>> = shapes.iter().map(|_| Vec::with_capacity(steps)).collect();
    let mut spikes: Vec<Vec<Vec<f64>>> = shapes.iter().map(|_| Vec::with_capacity(steps)).collect();
    let mut traces: Vec<Vec<f64>> = shapes.iter().map(|&(_, o)| vec![0.0; o]).collect();
    let mut pots: Vec<Vec<f64>> = shapes.iter().map(|&(_, o)| vec![0.0; o]).collect();
    let mut prev: Vec<Vec<f64>> = shapes.iter().map(|&(_, o)| vec![0.0; o]).collect();

    for t in 0..steps {
        for l in 0..layers {
            let (fan_in, fan_out) = shapes[l];
            let w = &weights[offsets[l]..offsets[l] + fan_in * fan_out];
            let input: &[f64] = if l == 0 { x.row(t) } else { &spikes[l - 1][t] };
            let tr = &mut traces[l];
            for v in tr.iter_mut() {
                *v *= neuron.beta_syn;
            }
            for (i, &a) in input.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, v) in tr.iter_mut().enumerate() {
                    *v += w[o * fan_in + i] * a;
                }
            }
            let mut s = vec![0.0; fan_out];
            for o in 0..fan_out {
                let u = neuron.beta_mem * pots[l][o] + tr[o] - neuron.threshold * prev[l][o];
                pots[l][o] = u;
                s[o] = spike_fn.apply(u, neuron.threshold);
            }
            prev[l].copy_from_slice(&s);
            potentials[l].push(pots[l].clone());
            spikes[l].push(s);
        }
    }

    let classes = arch.num_classes();
    let mut counts = vec![0.0; classes];
    for s in &spikes[layers - 1] {
        for (c, v) in counts.iter_mut().zip(s) {
            *c += v;
        }
    }
    let probs = confidence(&counts);
    let max = counts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + counts.iter().map(|r| (r - max).exp()).sum::<f64>().ln();
    let loss = lse - counts[label];

    let mut d_counts = probs;
    d_counts[label] -= 1.0;

    let surrogate = |u: f64| {
        let s = sigmoid(surrogate_slope * (u - neuron.threshold));
        surrogate_slope * s * (1.0 - s)
    };

    let mut grad = vec![0.0; weights.len()];
    // Adjoints of potential and trace at step t+1, per layer.
    let mut g_pot_next: Vec<Vec<f64>> = shapes.iter().map(|&(_, o)| vec![0.0; o]).collect();
    let mut g_trace_next: Vec<Vec<f64>> = shapes.iter().map(|&(_, o)| vec![0.0; o]).collect();
    for t in (0..steps).rev() {
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = shapes[l];
            let mut g_spike = if l + 1 == layers {
                d_counts.clone()
            } else {
                let (next_in, next_out) = shapes[l + 1];
                let w_next = &weights[offsets[l + 1]..offsets[l + 1] + next_in * next_out];
                let g_tr = &g_trace_next[l + 1];
                let mut g = vec![0.0; fan_out];
                for o in 0..next_out {
                    let go = g_tr[o];
                    if go == 0.0 {
                        continue;
                    }
                    let row = &w_next[o * next_in..(o + 1) * next_in];
                    for (gj, wj) in g.iter_mut().zip(row) {
                        *gj += wj * go;
                    }
                }
                g
            };
            let g_pot = &mut g_pot_next[l];
            let g_tr = &mut g_trace_next[l];
            let u_t = &potentials[l][t];
            for o in 0..fan_out {
                g_spike[o] -= neuron.threshold * g_pot[o];
                let gu = g_spike[o] * surrogate(u_t[o]) + neuron.beta_mem * g_pot[o];
                g_pot[o] = gu;
                g_tr[o] = gu + neuron.beta_syn * g_tr[o];
            }
            let input: &[f64] = if l == 0 { x.row(t) } else { &spikes[l - 1][t] };
            let gw = &mut grad[offsets[l]..offsets[l] + fan_in * fan_out];
            for (i, &a) in input.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for o in 0..fan_out {
                    gw[o * fan_in + i] += g_tr[o] * a;
                }
            }
        }
    }
    Ok((loss, grad))
}

/// Loss only, for the same objective as [`loss_and_gradient`].
pub fn loss(arch: &Architecture, weights: &[f64], x: &InputSequence, label: usize, spike_fn: SpikeFn) -> Result<f64> {
    Ok(loss_and_gradient(arch, weights, x, label, spike_fn, 1.0)?.0)
}

fn check_data(data: &[InputSequence], arch: &Architecture) -> Result<Vec<usize>> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let classes = arch.num_classes();
    let mut seen = vec![false; classes];
    let mut labels = Vec::with_capacity(data.len());
    for (index, x) in data.iter().enumerate() {
        let label = x.label().ok_or(TrainError::MissingLabel { index })?;
        if label >= classes {
            return Err(TrainError::LabelOutOfRange { index, label, classes });
        }
        if x.channels() != arch.num_inputs() {
            return Err(SnnError::DimensionMismatch {
                what: "input channels",
                expected: arch.num_inputs(),
                got: x.channels(),
            }
            .into());
        }
        seen[label] = true;
        labels.push(label);
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(TrainError::MissingClass(c));
    }
    Ok(labels)
}

/// Mean loss and mean gradient over a minibatch. Per-example work may run in
/// parallel; the reduction is sequential in batch order.
fn batch_gradient(
    arch: &Architecture,
    weights: &[f64],
    data: &[InputSequence],
    labels: &[usize],
    batch: &[usize],
    slope: f64,
) -> Result<(f64, Vec<f64>)> {
    let per_example = par::map_indexed(batch.len(), |j| {
        let i = batch[j];
        loss_and_gradient(arch, weights, &data[i], labels[i], SpikeFn::Heaviside, slope)
    });
    let mut total = 0.0;
    let mut grad = vec![0.0; weights.len()];
    for item in per_example {
        let (l, g) = item?;
        total += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for g in grad.iter_mut() {
        *g *= scale;
    }
    Ok((total * scale, grad))
}

fn gaussian_init(n: usize, variance: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    let normal = Normal::new(0.0, variance.sqrt()).expect("positive variance");
    (0..n).map(|_| normal.sample(&mut rng)).collect()
}

/// Result of a training run together with its per-epoch mean objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained<T> {
    pub value: T,
    pub epoch_losses: Vec<f64>,
}

pub fn train_single(data: &[InputSequence], arch: &Architecture, cfg: &TrainConfig) -> Result<ModelParams> {
    Ok(train_single_logged(data, arch, cfg)?.value)
}

pub fn train_single_logged(
    data: &[InputSequence],
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<Trained<ModelParams>> {
    cfg.validate()?;
    arch.validate()?;
    let labels = check_data(data, arch)?;
    let init_seed = child_seed(cfg.seed, 0);
    let shuffle_seed = child_seed(cfg.seed, 1);
    let mut weights = gaussian_init(arch.num_weights(), cfg.init_variance, init_seed);
    let mut adam = Adam::new(weights.len(), cfg.learning_rate);
    let mut rng = rng_from_seed(shuffle_seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (minibatch, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (l, g) = batch_gradient(arch, &weights, data, &labels, batch, cfg.surrogate_slope)?;
            if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteLoss { epoch, minibatch });
            }
            sum += l * batch.len() as f64;
            adam.step(&mut weights, &g);
        }
        epoch_losses.push(sum / data.len() as f64);
    }
    Ok(Trained {
        value: ModelParams::new(arch.clone(), weights)?,
        epoch_losses,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleKind {
    DeepEnsemble,
    VariationalSamples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub kind: EnsembleKind,
    /// Seed each member was trained or sampled with.
    pub seeds: Vec<u64>,
    pub members: Vec<ModelParams>,
}

impl Ensemble {
    pub fn new(kind: EnsembleKind, seeds: Vec<u64>, members: Vec<ModelParams>) -> Result<Self> {
        if members.is_empty() {
            return Err(TrainError::InvalidConfig(
                "an ensemble needs at least one member".into(),
            ));
        }
        if seeds.len() != members.len() {
            return Err(TrainError::InvalidConfig("one seed per member".into()));
        }
        let arch = &members[0].architecture;
        if members.iter().any(|m| &m.architecture != arch) {
            return Err(TrainError::InvalidConfig(
                "ensemble members must share one architecture".into(),
            ));
        }
        Ok(Self { kind, seeds, members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn architecture(&self) -> &Architecture {
        &self.members[0].architecture
    }

    /// The first `k` members.
    pub fn truncate(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.len() {
            return Err(TrainError::InvalidConfig(format!(
                "cannot take {k} members from an ensemble of {}",
                self.len()
            )));
        }
        Ok(Self {
            kind: self.kind,
            seeds: self.seeds[..k].to_vec(),
            members: self.members[..k].to_vec(),
        })
    }
}

/// Seed used for member `k` of a deep ensemble trained from `cfg.seed`.
pub fn member_seed(master: u64, k: usize) -> u64 {
    child_seed(master, k as u64)
}

/// `k` independently initialized networks trained on the same data.
pub fn train_deep_ensemble(
    data: &[InputSequence],
    arch: &Architecture,
    cfg: &TrainConfig,
    k: usize,
) -> Result<Ensemble> {
    if k == 0 {
        return Err(TrainError::InvalidConfig("ensemble size must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..k).map(|i| member_seed(cfg.seed, i)).collect();
    let members = par::map_indexed(k, |i| train_single(data, arch, &cfg.with_seed(seeds[i])));
    let members = members.into_iter().collect::<Result<Vec<_>>>()?;
    Ensemble::new(EnsembleKind::DeepEnsemble, seeds, members)
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Factorized Gaussian `N(mu, softplus(rho)^2)` over the weight vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalPosterior {
    pub architecture: Architecture,
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
}

impl VariationalPosterior {
    pub fn new(architecture: Architecture, mu: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        architecture.validate()?;
        let n = architecture.num_weights();
        if mu.len() != n || rho.len() != n {
            return Err(SnnError::DimensionMismatch {
                what: "posterior parameters",
                expected: n,
                got: mu.len().min(rho.len()),
            }
            .into());
        }
        if mu.iter().chain(&rho).any(|v| !v.is_finite()) {
            return Err(TrainError::InvalidConfig("posterior parameters must be finite".into()));
        }
        Ok(Self { architecture, mu, rho })
    }

    /// Posterior with every mean at `mean` and every standard deviation at `std`.
    pub fn constant(architecture: Architecture, mean: f64, std: f64) -> Result<Self> {
        let n = architecture.num_weights();
        Self::new(architecture, vec![mean; n], vec![inverse_softplus(std); n])
    }

    /// Per-weight standard deviations.
    pub fn std(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }

    /// `KL(N(mu, std^2) || N(0, prior_variance))`, summed over weights.
    pub fn kl_to_prior(&self, prior_variance: f64) -> f64 {
        self.mu
            .iter()
            .zip(self.std())
            .map(|(&m, s)| gaussian_kl(m, s, prior_variance))
            .sum()
    }
}

/// `KL(N(mean, std^2) || N(0, prior_variance))` for one coordinate.
pub fn gaussian_kl(mean: f64, std: f64, prior_variance: f64) -> f64 {
    let var = std * std;
    0.5 * ((prior_variance / var).ln() + (var + mean * mean) / prior_variance - 1.0)
}

/// Maximizes the evidence lower bound with one reparameterized weight sample
/// per minibatch. The minibatch objective is the mean cross-entropy plus the
/// KL to the prior divided by the dataset size.
pub fn train_vi(data: &[InputSequence], arch: &Architecture, cfg: &TrainConfig) -> Result<VariationalPosterior> {
    Ok(train_vi_logged(data, arch, cfg)?.value)
}

pub fn train_vi_logged(
    data: &[InputSequence],
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<Trained<VariationalPosterior>> {
    cfg.validate()?;
    arch.validate()?;
    let labels = check_data(data, arch)?;
    let n = arch.num_weights();
    let prior = cfg.init_variance;
    let mu = gaussian_init(n, prior, child_seed(cfg.seed, 0));
    let rho = vec![inverse_softplus(cfg.posterior_init_std); n];
    let mut params: Vec<f64> = mu.into_iter().chain(rho).collect();
    let mut adam = Adam::new(2 * n, cfg.learning_rate);
    let mut shuffle_rng = rng_from_seed(child_seed(cfg.seed, 1));
    let mut noise_rng = rng_from_seed(child_seed(cfg.seed, 2));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let kl_weight = 1.0 / data.len() as f64;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = 0.0;
        for (minibatch, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (mu, rho) = params.split_at(n);
            let eps: Vec<f64> = (0..n).map(|_| noise_rng.sample(StandardNormal)).collect();
            let std: Vec<f64> = rho.iter().map(|&r| softplus(r)).collect();
            let theta: Vec<f64> = (0..n).map(|i| mu[i] + std[i] * eps[i]).collect();
            let (data_loss, g_theta) = batch_gradient(arch, &theta, data, &labels, batch, cfg.surrogate_slope)?;
            let kl: f64 = (0..n).map(|i| gaussian_kl(mu[i], std[i], prior)).sum();
            let objective = data_loss + kl_weight * kl;
            if !objective.is_finite() || g_theta.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteLoss { epoch, minibatch });
            }
            let mut grad = vec![0.0; 2 * n];
            for i in 0..n {
                let d_kl_mu = mu[i] / prior;
                let d_kl_std = -1.0 / std[i] + std[i] / prior;
                let d_std_rho = sigmoid(rho[i]);
                grad[i] = g_theta[i] + kl_weight * d_kl_mu;
                grad[n + i] = (g_theta[i] * eps[i] + kl_weight * d_kl_std) * d_std_rho;
            }
            sum += objective * batch.len() as f64;
            adam.step(&mut params, &grad);
        }
        epoch_losses.push(sum / data.len() as f64);
    }
    let rho = params.split_off(n);
    Ok(Trained {
        value: VariationalPosterior::new(arch.clone(), params, rho)?,
        epoch_losses,
    })
}

/// Draws `k` weight vectors `mu + std * eps` from the posterior.
pub fn sample_ensemble(post: &VariationalPosterior, k: usize, seed: u64) -> Result<Ensemble> {
    if k == 0 {
        return Err(TrainError::InvalidConfig("ensemble size must be at least 1".into()));
    }
    let std = post.std();
    let seeds: Vec<u64> = (0..k).map(|i| child_seed(seed, i as u64)).collect();
    let members = seeds
        .iter()
        .map(|&s| {
            let mut rng = rng_from_seed(s);
            let w = post
                .mu
                .iter()
                .zip(&std)
                .map(|(&m, &sd)| {
                    let e: f64 = rng.sample(StandardNormal);
                    m + sd * e
                })
                .collect();
            ModelParams::new(post.architecture.clone(), w).map_err(TrainError::from)
        })
        .collect::<Result<Vec<_>>>()?;
    Ensemble::new(EnsembleKind::VariationalSamples, seeds, members)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snn::NeuronParams;
    use approx::assert_abs_diff_eq;

    fn tiny_arch() -> Architecture {
        Architecture::new(vec![6, 5, 2], NeuronParams::default()).unwrap()
    }

    fn tiny_data(count: usize, seed: u64) -> Vec<InputSequence> {
        let mut rng = rng_from_seed(seed);
        (0..count)
            .map(|i| {
                let label = i % 2;
                let samples = (0..20 * 6)
                    .map(|j| {
                        let ch = j % 6;
                        let hot = (ch < 3) == (label == 0);
                        let rate = if hot { 0.4 } else { 0.05 };
                        f64::from(u8::from(rng.random::<f64>() < rate))
                    })
                    .collect();
                InputSequence::from_flat(20, 6, samples, Some(label)).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = TrainConfig {
            epochs: 0,
            seed: 3,
            ..TrainConfig::default()
        };
        let arch = tiny_arch();
        let model = train_single(&tiny_data(8, 1), &arch, &cfg).unwrap();
        let expected = gaussian_init(arch.num_weights(), cfg.init_variance, child_seed(3, 0));
        assert_eq!(model.weights, expected);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            seed: 11,
            ..TrainConfig::default()
        };
        let data = tiny_data(16, 2);
        let a = train_single(&data, &tiny_arch(), &cfg).unwrap();
        let b = train_single(&data, &tiny_arch(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn data_errors() {
        let arch = tiny_arch();
        let cfg = TrainConfig::default();
        assert_eq!(train_single(&[], &arch, &cfg), Err(TrainError::EmptyDataset));
        let mut data = tiny_data(4, 0);
        data[1] = data[1].clone().with_label(None);
        assert_eq!(
            train_single(&data, &arch, &cfg),
            Err(TrainError::MissingLabel { index: 1 })
        );
        let data: Vec<_> = tiny_data(4, 0).into_iter().map(|x| x.with_label(Some(0))).collect();
        assert_eq!(train_single(&data, &arch, &cfg), Err(TrainError::MissingClass(1)));
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..cfg
        };
        assert!(matches!(
            train_single(&tiny_data(4, 0), &arch, &bad),
            Err(TrainError::InvalidConfig(_))
        ));
    }

    #[test]
    fn exploding_weights_report_minibatch() {
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            learning_rate: f64::MAX,
            ..TrainConfig::default()
        };
        // A huge step makes the second minibatch see non-finite weights.
        let err = train_single(&tiny_data(8, 0), &tiny_arch(), &cfg);
        assert!(
            matches!(err, Err(TrainError::NonFiniteLoss { epoch: 0, minibatch }) if minibatch >= 1),
            "{err:?}"
        );
    }

    #[test]
    fn deep_ensemble_members_differ() {
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        let data = tiny_data(8, 0);
        let arch = tiny_arch();
        let single = train_deep_ensemble(&data, &arch, &cfg, 1).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(
            single.members[0],
            train_single(&data, &arch, &cfg.with_seed(member_seed(5, 0))).unwrap()
        );
        let pair = train_deep_ensemble(&data, &arch, &cfg, 2).unwrap();
        assert_ne!(pair.members[0].weights, pair.members[1].weights);
        assert_eq!(pair.members[0], single.members[0]);
        assert!(train_deep_ensemble(&data, &arch, &cfg, 0).is_err());
    }

    #[test]
    fn kl_closed_form() {
        assert_abs_diff_eq!(gaussian_kl(1.0, 1.0, 1.0), 0.5, epsilon = 1e-15);
        assert!(gaussian_kl(0.0, 0.03f64.sqrt(), 0.03).abs() < 1e-15);
        let post = VariationalPosterior::constant(tiny_arch(), 0.0, 0.03f64.sqrt()).unwrap();
        assert!(post.kl_to_prior(0.03).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_quadrature() {
        // Midpoint-rule integral of q log(q/p) on a wide grid.
        let (m, s, pv) = (0.3, 0.2, 0.03);
        let q = |x: f64| (-(x - m) * (x - m) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
        let p = |x: f64| (-x * x / (2.0 * pv)).exp() / (2.0 * std::f64::consts::PI * pv).sqrt();
        let (lo, hi, n) = (m - 12.0 * s, m + 12.0 * s, 200_000);
        let h = (hi - lo) / n as f64;
        let integral: f64 = (0..n)
            .map(|i| {
                let x = lo + (i as f64 + 0.5) * h;
                q(x) * (q(x) / p(x)).ln() * h
            })
            .sum();
        assert_abs_diff_eq!(gaussian_kl(m, s, pv), integral, epsilon = 1e-8);
    }

    #[test]
    fn degenerate_posterior_samples_mean() {
        let post = VariationalPosterior::constant(tiny_arch(), 0.25, 1e-300).unwrap();
        let ens = sample_ensemble(&post, 4, 9).unwrap();
        for m in &ens.members {
            assert!(m.weights.iter().all(|&w| w == 0.25));
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let post = VariationalPosterior::constant(tiny_arch(), 0.0, 0.1).unwrap();
        assert_eq!(
            sample_ensemble(&post, 6, 1).unwrap(),
            sample_ensemble(&post, 6, 1).unwrap()
        );
        assert_ne!(
            sample_ensemble(&post, 6, 1).unwrap(),
            sample_ensemble(&post, 6, 2).unwrap()
        );
    }

    #[test]
    fn sample_mean_concentrates() {
        // 10^4 draws: the sample mean of one weight lies within 4 standard errors of mu.
        let arch = Architecture::new(vec![1, 1], NeuronParams::default()).unwrap();
        let (mu, std) = (0.7, 0.2);
        let post = VariationalPosterior::constant(arch, mu, std).unwrap();
        let ens = sample_ensemble(&post, 10_000, 21).unwrap();
        let mean = ens.members.iter().map(|m| m.weights[0]).sum::<f64>() / 10_000.0;
        assert!((mean - mu).abs() <= 4.0 * std / 100.0, "mean {mean}");
    }

    #[test]
    fn softplus_round_trip() {
        for y in [1e-6, 0.01, 0.173, 1.0, 5.0, 40.0] {
            assert_abs_diff_eq!(softplus(inverse_softplus(y)), y, epsilon = 1e-12 * y.max(1.0));
        }
    }
}
