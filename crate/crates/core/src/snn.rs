//! Discrete-time spike response model (SRM) network with rate decoding.
//!
//! Each layer keeps two first-order filters per neuron: a synaptic trace fed
//! by the weighted input spikes and a membrane potential fed by the trace.
//! Within one step the update order is
//!
//! ```text
//! trace     <- beta_syn * trace + W * input
//! potential <- beta_mem * potential + trace - threshold * previous_spike
//! spike     <- potential >= threshold
//! ```
//!
//! so a spike subtracts the threshold from the potential on the following
//! step (soft reset). The read-out layer spikes the same way; its spikes are
//! accumulated into per-class counts, turned into confidences with a softmax
//! and into losses with the log-loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower clamp applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SnnError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("invalid input sequence: {0}")]
    InvalidInput(String),
    #[error("invalid checkpoints: {0}")]
    InvalidCheckpoints(String),
    #[error("non-finite weight at index {0}")]
    NonFiniteWeight(usize),
}

pub type Result<T> = std::result::Result<T, SnnError>;

/// One classification example: `steps` time samples of `channels` values each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSequence {
    steps: usize,
    channels: usize,
    samples: Vec<f64>,
    label: Option<usize>,
}

impl InputSequence {
    /// Builds a sequence from time-major rows. Labels are 0-based.
    pub fn from_rows(rows: Vec<Vec<f64>>, label: Option<usize>) -> Result<Self> {
        let steps = rows.len();
        if steps == 0 {
            return Err(SnnError::InvalidInput("sequence has no time steps".into()));
        }
        let channels = rows[0].len();
        if channels == 0 {
            return Err(SnnError::InvalidInput("sequence has no channels".into()));
        }
        let mut samples = Vec::with_capacity(steps * channels);
        for row in rows {
            if row.len() != channels {
                return Err(SnnError::DimensionMismatch {
                    what: "input row",
                    expected: channels,
                    got: row.len(),
                });
            }
            samples.extend(row);
        }
        Self::from_flat(steps, channels, samples, label)
    }

    pub fn from_flat(steps: usize, channels: usize, samples: Vec<f64>, label: Option<usize>) -> Result<Self> {
        if steps == 0 || channels == 0 {
            return Err(SnnError::InvalidInput(format!(
                "need at least one step and one channel, got {steps}x{channels}"
            )));
        }
        if samples.len() != steps * channels {
            return Err(SnnError::DimensionMismatch {
                what: "input samples",
                expected: steps * channels,
                got: samples.len(),
            });
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(SnnError::InvalidInput(format!("non-finite sample at {i}")));
        }
        Ok(Self {
            steps,
            channels,
            samples,
            label,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn with_label(mut self, label: Option<usize>) -> Self {
        self.label = label;
        self
    }

    /// Time sample at 0-based step `t`.
    pub fn row(&self, t: usize) -> &[f64] {
        &self.samples[t * self.channels..(t + 1) * self.channels]
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn is_binary(&self) -> bool {
        self.samples.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// Per-neuron constants shared by every layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronParams {
    pub beta_mem: f64,
    pub beta_syn: f64,
    pub threshold: f64,
}

impl Default for NeuronParams {
    fn default() -> Self {
        Self {
            beta_mem: 0.9,
            beta_syn: 0.9,
            threshold: 1.0,
        }
    }
}

impl NeuronParams {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(self.beta_mem) || !in_unit(self.beta_syn) {
            return Err(SnnError::InvalidArchitecture(format!(
                "decays must lie strictly inside (0,1), got beta_mem={} beta_syn={}",
                self.beta_mem, self.beta_syn
            )));
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(SnnError::InvalidArchitecture(format!(
                "threshold must be positive, got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Fully connected layer sizes `[inputs, hidden..., classes]` plus neuron constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub layer_sizes: Vec<usize>,
    pub neuron: NeuronParams,
}

impl Architecture {
    pub fn new(layer_sizes: Vec<usize>, neuron: NeuronParams) -> Result<Self> {
        let arch = Self { layer_sizes, neuron };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(SnnError::InvalidArchitecture(
                "need at least an input and an output layer".into(),
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(SnnError::InvalidArchitecture("layer sizes must be positive".into()));
        }
        self.neuron.validate()
    }

    pub fn num_inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated architecture")
    }

    /// Number of weight layers (one per connection between consecutive sizes).
    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// `(fan_in, fan_out)` of every weight layer.
    pub fn layer_shapes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layer_sizes.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn num_weights(&self) -> usize {
        self.layer_shapes().map(|(i, o)| i * o).sum()
    }

    /// Start offset of each layer's row-major `fan_out x fan_in` block in θ.
    pub fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.num_layers());
        let mut acc = 0;
        for (i, o) in self.layer_shapes() {
            offsets.push(acc);
            acc += i * o;
        }
        offsets
    }
}

/// Synaptic weights of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub architecture: Architecture,
    pub weights: Vec<f64>,
}

impl ModelParams {
    pub fn new(architecture: Architecture, weights: Vec<f64>) -> Result<Self> {
        architecture.validate()?;
        if weights.len() != architecture.num_weights() {
            return Err(SnnError::DimensionMismatch {
                what: "weight vector",
                expected: architecture.num_weights(),
                got: weights.len(),
            });
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(SnnError::NonFiniteWeight(i));
        }
        Ok(Self { architecture, weights })
    }

    pub fn zeros(architecture: Architecture) -> Result<Self> {
        let n = architecture.num_weights();
        Self::new(architecture, vec![0.0; n])
    }

    /// Row-major `fan_out x fan_in` weight block of layer `l`.
    pub fn layer(&self, l: usize) -> &[f64] {
        let offsets = self.architecture.layer_offsets();
        let (i, o) = self.architecture.layer_shapes().nth(l).expect("layer index");
        &self.weights[offsets[l]..offsets[l] + i * o]
    }
}

/// Spike nonlinearity. The hard threshold is what the network runs with;
/// the sigmoid is its smooth relaxation, used to check gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpikeFn {
    Heaviside,
    Sigmoid { slope: f64 },
}

impl SpikeFn {
    #[inline]
    pub fn apply(self, potential: f64, threshold: f64) -> f64 {
        match self {
            SpikeFn::Heaviside => {
                if potential >= threshold {
                    1.0
                } else {
                    0.0
                }
            }
            SpikeFn::Sigmoid { slope } => sigmoid(slope * (potential - threshold)),
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mutable state of one layer of neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronState {
    pub trace: Vec<f64>,
    pub potential: Vec<f64>,
    pub spikes: Vec<f64>,
}

impl NeuronState {
    pub fn reset(size: usize) -> Self {
        Self {
            trace: vec![0.0; size],
            potential: vec![0.0; size],
            spikes: vec![0.0; size],
        }
    }

    pub fn len(&self) -> usize {
        self.potential.len()
    }

    pub fn is_empty(&self) -> bool {
        self.potential.is_empty()
    }

    /// Advances the layer by one step; `weights` is row-major `len() x input.len()`.
    pub fn step(&mut self, input: &[f64], weights: &[f64], neuron: &NeuronParams, spike_fn: SpikeFn) -> Result<&[f64]> {
        let fan_out = self.len();
        let fan_in = input.len();
        if weights.len() != fan_in * fan_out {
            return Err(SnnError::DimensionMismatch {
                what: "layer fan-in",
                expected: weights.len() / fan_out.max(1),
                got: fan_in,
            });
        }
        for v in self.trace.iter_mut() {
            *v *= neuron.beta_syn;
        }
        for (i, &x) in input.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, tr) in self.trace.iter_mut().enumerate() {
                *tr += weights[o * fan_in + i] * x;
            }
        }
        for o in 0..fan_out {
            let u = neuron.beta_mem * self.potential[o] + self.trace[o] - neuron.threshold * self.spikes[o];
            self.potential[o] = u;
            self.spikes[o] = spike_fn.apply(u, neuron.threshold);
        }
        Ok(&self.spikes)
    }
}

/// One thresholded SRM step of a layer; returns the new state and its output spikes.
pub fn srm_step(
    state: &NeuronState,
    input_spikes: &[f64],
    weights: &[f64],
    neuron: &NeuronParams,
) -> Result<(NeuronState, Vec<f64>)> {
    let mut next = state.clone();
    let spikes = next.step(input_spikes, weights, neuron, SpikeFn::Heaviside)?.to_vec();
    Ok((next, spikes))
}

/// Per-class spike counts of a `steps x classes` binary output matrix.
pub fn spike_count(y: &[Vec<bool>]) -> Vec<u32> {
    let classes = y.first().map_or(0, Vec::len);
    let mut counts = vec![0u32; classes];
    for row in y {
        for (c, &s) in row.iter().enumerate() {
            counts[c] += u32::from(s);
        }
    }
    counts
}

/// Softmax of spike counts, computed with max subtraction.
pub fn confidence(counts: &[f64]) -> Vec<f64> {
    let max = counts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = counts.iter().map(|&r| (r - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-ln p` with `p` clamped to `[PROB_FLOOR, 1]`.
#[inline]
pub fn neg_log(p: f64) -> f64 {
    -p.clamp(PROB_FLOOR, 1.0).ln()
}

/// Log-loss assigned to class `class` by confidence vector `f`.
pub fn log_loss(f: &[f64], class: usize) -> f64 {
    neg_log(f[class])
}

/// Counts, confidences and losses of one model on one input at each checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrace {
    /// 1-based time steps.
    pub checkpoints: Vec<usize>,
    pub counts: Vec<Vec<u32>>,
    pub confidences: Vec<Vec<f64>>,
    pub losses: Vec<Vec<f64>>,
}

impl ScoreTrace {
    pub fn from_confidences(checkpoints: Vec<usize>, counts: Vec<Vec<u32>>, confidences: Vec<Vec<f64>>) -> Self {
        let losses = confidences
            .iter()
            .map(|f| f.iter().map(|&p| neg_log(p)).collect())
            .collect();
        Self {
            checkpoints,
            counts,
            confidences,
            losses,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.confidences.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }

    /// The sub-trace at `times`, each of which must be one of this trace's checkpoints.
    pub fn select(&self, times: &[usize]) -> Result<ScoreTrace> {
        let mut out = ScoreTrace {
            checkpoints: Vec::with_capacity(times.len()),
            counts: Vec::with_capacity(times.len()),
            confidences: Vec::with_capacity(times.len()),
            losses: Vec::with_capacity(times.len()),
        };
        for &time in times {
            let t = self.checkpoints.binary_search(&time).map_err(|_| {
                SnnError::InvalidCheckpoints(format!("time {time} is not among {:?}", self.checkpoints))
            })?;
            out.checkpoints.push(time);
            out.counts.push(self.counts[t].clone());
            out.confidences.push(self.confidences[t].clone());
            out.losses.push(self.losses[t].clone());
        }
        Ok(out)
    }
}

pub fn validate_checkpoints(checkpoints: &[usize], horizon: usize) -> Result<()> {
    if checkpoints.is_empty() {
        return Err(SnnError::InvalidCheckpoints("no checkpoints given".into()));
    }
    if checkpoints[0] == 0 {
        return Err(SnnError::InvalidCheckpoints(
            "checkpoints are 1-based time steps".into(),
        ));
    }
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SnnError::InvalidCheckpoints(format!(
            "checkpoints must be strictly increasing: {checkpoints:?}"
        )));
    }
    let last = *checkpoints.last().unwrap();
    if last > horizon {
        return Err(SnnError::InvalidCheckpoints(format!(
            "checkpoint {last} exceeds sequence length {horizon}"
        )));
    }
    Ok(())
}

/// Runs the network over `x` once, up to the last checkpoint, recording the
/// read-out statistics at every checkpoint (1-based time steps).
pub fn forward(x: &InputSequence, model: &ModelParams, checkpoints: &[usize]) -> Result<ScoreTrace> {
    let arch = &model.architecture;
    validate_checkpoints(checkpoints, x.steps())?;
    if x.channels() != arch.num_inputs() {
        return Err(SnnError::DimensionMismatch {
            what: "input channels",
            expected: arch.num_inputs(),
            got: x.channels(),
        });
    }
    let offsets = arch.layer_offsets();
    let shapes: Vec<(usize, usize)> = arch.layer_shapes().collect();
    let mut states: Vec<NeuronState> = shapes.iter().map(|&(_, o)| NeuronState::reset(o)).collect();
    let classes = arch.num_classes();
    let mut counts = vec![0u32; classes];

    let mut out_counts = Vec::with_capacity(checkpoints.len());
    let mut out_conf = Vec::with_capacity(checkpoints.len());
    let mut next_cp = 0;
    let horizon = *checkpoints.last().unwrap();
    for t in 0..horizon {
        for l in 0..shapes.len() {
            let (fan_in, fan_out) = shapes[l];
            let w = &model.weights[offsets[l]..offsets[l] + fan_in * fan_out];
            let (done, rest) = states.split_at_mut(l);
            let input: &[f64] = if l == 0 { x.row(t) } else { &done[l - 1].spikes };
            rest[0].step(input, w, &arch.neuron, SpikeFn::Heaviside)?;
        }
        for (c, &s) in states.last().unwrap().spikes.iter().enumerate() {
            if s > 0.0 {
                counts[c] += 1;
            }
        }
        if t + 1 == checkpoints[next_cp] {
            let r: Vec<f64> = counts.iter().map(|&n| f64::from(n)).collect();
            out_counts.push(counts.clone());
            out_conf.push(confidence(&r));
            next_cp += 1;
        }
    }
    Ok(ScoreTrace::from_confidences(checkpoints.to_vec(), out_counts, out_conf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn neuron(beta: f64) -> NeuronParams {
        NeuronParams {
            beta_mem: beta,
            beta_syn: beta,
            threshold: 1.0,
        }
    }

    #[test]
    fn zero_weights_never_spike() {
        let n = neuron(0.9);
        let mut state = NeuronState::reset(3);
        let w = vec![0.0; 6];
        for _ in 0..50 {
            let (next, spikes) = srm_step(&state, &[1.0, 1.0], &w, &n).unwrap();
            assert!(spikes.iter().all(|&s| s == 0.0));
            assert!(next.potential.iter().all(|&u| u == 0.0));
            state = next;
        }
    }

    #[test]
    fn strong_input_spikes_then_soft_resets() {
        // Hand trace with beta=0.5, w=2θ, one input spike at t=1:
        //   t=1: trace=2θ, potential=2θ        -> spike
        //   t=2: trace=θ,  potential=θ+θ-θ = θ -> reduced by θ versus the 2θ of a non-resetting unit
        let n = neuron(0.5);
        let w = [2.0 * n.threshold];
        let s0 = NeuronState::reset(1);
        let (s1, y1) = srm_step(&s0, &[1.0], &w, &n).unwrap();
        assert_eq!(y1, vec![1.0]);
        assert_eq!(s1.trace[0], 2.0);
        assert_eq!(s1.potential[0], 2.0);
        let (s2, _) = srm_step(&s1, &[0.0], &w, &n).unwrap();
        assert_eq!(s2.trace[0], 1.0);
        assert_eq!(s2.potential[0], 1.0);
        let unreset = 0.5 * 2.0 + 1.0;
        assert_eq!(unreset - s2.potential[0], n.threshold);
    }

    #[test]
    fn weak_input_stays_subthreshold() {
        // potential_t = 0.5 * t * 0.5^(t-1): 0.5, 0.5, 0.375, ... never reaches 1.
        let n = neuron(0.5);
        let w = [0.5];
        let mut state = NeuronState::reset(1);
        for t in 0..40 {
            let x = if t == 0 { 1.0 } else { 0.0 };
            let (next, y) = srm_step(&state, &[x], &w, &n).unwrap();
            let expected = 0.5 * (t + 1) as f64 * 0.5f64.powi(t);
            assert_abs_diff_eq!(next.potential[0], expected, epsilon = 1e-15);
            assert_eq!(y[0], 0.0);
            state = next;
        }
    }

    #[test]
    fn step_rejects_wrong_fan_in() {
        let n = neuron(0.9);
        let state = NeuronState::reset(2);
        let err = srm_step(&state, &[1.0, 0.0, 1.0], &[0.0; 4], &n).unwrap_err();
        assert!(matches!(err, SnnError::DimensionMismatch { .. }));
    }

    #[test]
    fn spike_count_is_prefix_sum() {
        let y = vec![vec![true, false], vec![false, false], vec![true, true]];
        assert_eq!(spike_count(&y), vec![2, 1]);
        assert_eq!(spike_count(&y[..2]), vec![1, 0]);
        assert_eq!(spike_count(&vec![vec![false; 3]; 4]), vec![0, 0, 0]);
    }

    #[test]
    fn confidence_examples() {
        let f = confidence(&[0.0, 0.0, 0.0]);
        for p in f {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }
        // e^2/(e^2+e) = 1/(1+e^-1)
        let f = confidence(&[2.0, 1.0]);
        let oracle = 1.0 / (1.0 + (-1.0f64).exp());
        assert_abs_diff_eq!(f[0], oracle, epsilon = 1e-15);
        assert_abs_diff_eq!(f[0], 0.7311, epsilon = 1e-4);
        assert_abs_diff_eq!(f[1], 0.2689, epsilon = 1e-4);
        let f = confidence(&[1000.0, 0.0]);
        assert!(f.iter().all(|p| p.is_finite()));
        assert_abs_diff_eq!(f[0], 1.0, epsilon = 1e-15);
        assert!(f[1] < 1e-300);
    }

    #[test]
    fn log_loss_examples() {
        assert_eq!(log_loss(&[1.0, 0.0], 0), 0.0);
        assert_abs_diff_eq!(log_loss(&[0.25, 0.75], 0), 4.0f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(log_loss(&[0.25, 0.75], 0), 1.3863, epsilon = 1e-4);
        let clamped = log_loss(&[0.0, 1.0], 0);
        assert!(clamped.is_finite());
        assert_abs_diff_eq!(clamped, -PROB_FLOOR.ln(), epsilon = 1e-12);
    }

    fn arch() -> Architecture {
        Architecture::new(vec![4, 5, 3], NeuronParams::default()).unwrap()
    }

    #[test]
    fn zero_model_gives_uniform_confidence() {
        let model = ModelParams::zeros(arch()).unwrap();
        let x = InputSequence::from_flat(80, 4, vec![1.0; 320], None).unwrap();
        let trace = forward(&x, &model, &[20, 40, 60, 80]).unwrap();
        assert_eq!(trace.len(), 4);
        for (r, f) in trace.counts.iter().zip(&trace.confidences) {
            assert_eq!(r, &vec![0, 0, 0]);
            for p in f {
                assert_abs_diff_eq!(*p, 1.0 / 3.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn forward_validates_checkpoints() {
        let model = ModelParams::zeros(arch()).unwrap();
        let x = InputSequence::from_flat(10, 4, vec![0.0; 40], None).unwrap();
        assert!(forward(&x, &model, &[]).is_err());
        assert!(forward(&x, &model, &[5, 5]).is_err());
        assert!(forward(&x, &model, &[0, 5]).is_err());
        assert!(forward(&x, &model, &[5, 11]).is_err());
        assert!(forward(&x, &model, &[5, 10]).is_ok());
    }

    #[test]
    fn forward_rejects_channel_mismatch() {
        let model = ModelParams::zeros(arch()).unwrap();
        let x = InputSequence::from_flat(10, 3, vec![0.0; 30], None).unwrap();
        assert!(matches!(
            forward(&x, &model, &[10]),
            Err(SnnError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn architecture_validation() {
        assert!(Architecture::new(vec![3], NeuronParams::default()).is_err());
        assert!(Architecture::new(vec![3, 0, 2], NeuronParams::default()).is_err());
        let bad = NeuronParams {
            beta_mem: 1.0,
            ..NeuronParams::default()
        };
        assert!(Architecture::new(vec![3, 2], bad).is_err());
        let a = Architecture::new(vec![3, 4, 2], NeuronParams::default()).unwrap();
        assert_eq!(a.num_weights(), 12 + 8);
        assert_eq!(a.layer_offsets(), vec![0, 12]);
        assert!(ModelParams::new(a.clone(), vec![0.0; 19]).is_err());
        assert!(ModelParams::new(a, vec![f64::NAN; 20]).is_err());
    }
}
