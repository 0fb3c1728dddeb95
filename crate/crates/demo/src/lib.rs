//! Browser bindings: a single SRM neuron, p-merging curves and an adaptive
//! stopping explorer over a small deep ensemble trained in the page.
//!
//! Every export returns JSON text so the same functions run natively in tests.

use serde::Serialize;
use spikecp::conformal::{calibrate_dc_threshold, cm_pool, dc_grid, dc_snn_decide, pm_pool};
use spikecp::harness::{generate_dataset, SyntheticSpec};
use spikecp::snn::{forward, Architecture, NeuronParams, NeuronState, SpikeFn};
use spikecp::training::{train_deep_ensemble, TrainConfig};
use spikecp::{CalibrationTable, Ensemble, InputSequence, Merge, ScoreTrace, SpikeCp, SpikeCpConfig};
use wasm_bindgen::prelude::*;

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

#[derive(Serialize)]
struct NeuronTrace {
    trace: Vec<f64>,
    potential: Vec<f64>,
    spikes: Vec<u8>,
}

/// Synaptic trace, membrane potential and output of one neuron driven by a
/// single input channel. `input` is a string of `0`/`1`, one per step.
#[wasm_bindgen]
pub fn neuron_trace(weight: f64, beta_mem: f64, beta_syn: f64, threshold: f64, input: &str) -> Result<String, String> {
    let neuron = NeuronParams {
        beta_mem,
        beta_syn,
        threshold,
    };
    neuron.validate().map_err(|e| e.to_string())?;
    let mut state = NeuronState::reset(1);
    let mut out = NeuronTrace {
        trace: Vec::new(),
        potential: Vec::new(),
        spikes: Vec::new(),
    };
    for ch in input.chars().filter(|c| !c.is_whitespace()) {
        let x = match ch {
            '0' => 0.0,
            '1' => 1.0,
            other => return Err(format!("input must be 0/1, found '{other}'")),
        };
        state
            .step(&[x], &[weight], &neuron, SpikeFn::Heaviside)
            .map_err(|e| e.to_string())?;
        out.trace.push(state.trace[0]);
        out.potential.push(state.potential[0]);
        out.spikes.push(state.spikes[0] as u8);
    }
    Ok(json(&out))
}

#[derive(Serialize)]
struct MergeCurve {
    exponents: Vec<f64>,
    merged: Vec<f64>,
    scaled_min: f64,
    max: f64,
}

/// Power p-merge of `p` at each exponent in `exponents`, with the `K*min`
/// and `max` merges for reference.
#[wasm_bindgen]
pub fn merge_curve(p: Vec<f64>, exponents: Vec<f64>) -> Result<String, String> {
    if p.is_empty() || p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err("p-values must be non-empty and lie in [0,1]".into());
    }
    let merged = exponents
        .iter()
        .map(|&r| pm_pool(&p, r).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(json(&MergeCurve {
        scaled_min: pm_pool(&p, f64::NEG_INFINITY).map_err(|e| e.to_string())?,
        max: pm_pool(&p, f64::INFINITY).map_err(|e| e.to_string())?,
        exponents,
        merged,
    }))
}

const CHECKPOINTS: [usize; 4] = [10, 20, 30, 40];

fn spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        channels: 20,
        steps: 40,
        seed,
        ..SyntheticSpec::default()
    }
}

/// A deep ensemble trained on a small synthetic task, with member traces of a
/// held-out calibration set.
#[wasm_bindgen]
pub struct Explorer {
    ensemble: Ensemble,
    /// `[example][member]`.
    cal_traces: Vec<Vec<ScoreTrace>>,
    cal_labels: Vec<usize>,
    seed: u64,
}

#[derive(Serialize)]
struct Step {
    time: usize,
    scores: Vec<f64>,
    set_size: usize,
}

#[derive(Serialize)]
struct Baseline {
    p_th: f64,
    stop_time: usize,
    prediction: usize,
    set: Vec<usize>,
}

#[derive(Serialize)]
struct Decision {
    label: usize,
    difficulty: f64,
    alpha: f64,
    steps: Vec<Step>,
    stop_time: usize,
    set: Vec<usize>,
    covered: bool,
    baseline: Baseline,
}

#[derive(Serialize)]
struct Summary {
    inputs: usize,
    coverage: f64,
    latency: f64,
    set_size: f64,
    baseline_accuracy: f64,
    baseline_latency: f64,
}

struct Method {
    spikecp: SpikeCp,
    k: usize,
    top: usize,
    p_th: f64,
}

#[wasm_bindgen]
impl Explorer {
    /// Trains `members` networks; a few seconds in the browser.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, members: usize) -> Result<Explorer, String> {
        let err = |e: &dyn std::fmt::Display| e.to_string();
        let seed = u64::from(seed);
        let train = generate_dataset(&spec(seed), 240).map_err(|e| err(&e))?;
        let cal = generate_dataset(&spec(seed ^ 0x5eed), 100).map_err(|e| err(&e))?;
        let arch = Architecture::new(vec![20, 16, 4], NeuronParams::default()).map_err(|e| err(&e))?;
        let cfg = TrainConfig {
            epochs: 12,
            seed,
            ..TrainConfig::default()
        };
        let ensemble = train_deep_ensemble(&train, &arch, &cfg, members).map_err(|e| err(&e))?;
        let cal_traces = cal
            .iter()
            .map(|x| ensemble.members.iter().map(|m| forward(x, m, &CHECKPOINTS)).collect())
            .collect::<Result<Vec<Vec<_>>, _>>()
            .map_err(|e| err(&e))?;
        Ok(Explorer {
            cal_labels: cal
                .iter()
                .map(|x| x.label().expect("generated data is labelled"))
                .collect(),
            ensemble,
            cal_traces,
            seed,
        })
    }

    pub fn members(&self) -> usize {
        self.ensemble.len()
    }

    fn method(&self, k: usize, merge: &str, r: f64, p_targ: f64, i_th: usize) -> Result<Method, String> {
        if k == 0 || k > self.ensemble.len() {
            return Err(format!("K must lie in 1..={}", self.ensemble.len()));
        }
        let merge = match merge {
            "cm" => Merge::confidence(r),
            "pm" => Merge::p_value(r),
            other => return Err(format!("merge must be cm or pm, got '{other}'")),
        }
        .map_err(|e| e.to_string())?;
        let cfg = SpikeCpConfig::new(p_targ, CHECKPOINTS.to_vec(), i_th, merge).map_err(|e| e.to_string())?;
        let traces: Vec<Vec<ScoreTrace>> = self.cal_traces.iter().map(|t| t[..k].to_vec()).collect();
        let table = CalibrationTable::from_traces(&traces, &self.cal_labels).map_err(|e| e.to_string())?;
        let spikecp = SpikeCp::new(&table, &cfg).map_err(|e| e.to_string())?;
        let p_th = calibrate_dc_threshold(&table.pooled_confidences(1.0), &self.cal_labels, p_targ, &dc_grid());
        Ok(Method {
            spikecp,
            k,
            top: i_th,
            p_th,
        })
    }

    fn traces(&self, x: &InputSequence, k: usize) -> Vec<ScoreTrace> {
        self.ensemble.members[..k]
            .iter()
            .map(|m| forward(x, m, &CHECKPOINTS).expect("input matches the architecture"))
            .collect()
    }

    fn baseline(m: &Method, traces: &[ScoreTrace]) -> Baseline {
        let pooled: Vec<Vec<f64>> = (0..CHECKPOINTS.len())
            .map(|t| {
                let members: Vec<Vec<f64>> = traces.iter().map(|tr| tr.confidences[t].clone()).collect();
                cm_pool(&members, 1.0)
            })
            .collect();
        let d = dc_snn_decide(&pooled, &CHECKPOINTS, m.p_th, 40, m.top);
        Baseline {
            p_th: m.p_th,
            stop_time: d.stop_time,
            prediction: d.label.expect("the baseline predicts a label"),
            set: d.set,
        }
    }

    /// Decides one fresh input of class `label` at the given difficulty.
    #[allow(clippy::too_many_arguments)]
    pub fn decide(
        &self,
        k: usize,
        merge: &str,
        r: f64,
        p_targ: f64,
        i_th: usize,
        label: usize,
        difficulty: f64,
        example: u32,
    ) -> Result<String, String> {
        if label >= 4 || !(0.0..=1.0).contains(&difficulty) {
            return Err("label must lie in 0..4 and difficulty in [0,1]".into());
        }
        let m = self.method(k, merge, r, p_targ, i_th)?;
        let stream = SyntheticSpec {
            difficulty: (difficulty, difficulty),
            ..spec(self.seed.wrapping_add(1).wrapping_add(u64::from(example) << 8))
        };
        let x = (0..)
            .map(|i| stream.example(i))
            .find(|x| x.label() == Some(label))
            .expect("every class occurs");
        let traces = self.traces(&x, m.k);
        let d = m.spikecp.decide(&traces).map_err(|e| e.to_string())?;
        Ok(json(&Decision {
            label,
            difficulty,
            alpha: m.spikecp.config().alpha(),
            covered: d.covers(label),
            steps: d
                .diagnostics
                .iter()
                .map(|s| Step {
                    time: s.time,
                    scores: s.scores.clone(),
                    set_size: s.set_size,
                })
                .collect(),
            stop_time: d.stop_time,
            set: d.set,
            baseline: Self::baseline(&m, &traces),
        }))
    }

    /// Coverage and latency of SpikeCP and the DC baseline on `inputs` fresh examples.
    pub fn summarize(
        &self,
        k: usize,
        merge: &str,
        r: f64,
        p_targ: f64,
        i_th: usize,
        inputs: usize,
    ) -> Result<String, String> {
        let m = self.method(k, merge, r, p_targ, i_th)?;
        let test = generate_dataset(&spec(self.seed.wrapping_add(2)), inputs).map_err(|e| e.to_string())?;
        let (mut covered, mut stop, mut size, mut dc_hits, mut dc_stop) = (0usize, 0usize, 0usize, 0usize, 0usize);
        for x in &test {
            let label = x.label().expect("generated data is labelled");
            let traces = self.traces(x, m.k);
            let d = m.spikecp.decide(&traces).map_err(|e| e.to_string())?;
            covered += usize::from(d.covers(label));
            stop += d.stop_time;
            size += d.set.len();
            let b = Self::baseline(&m, &traces);
            dc_hits += usize::from(b.prediction == label);
            dc_stop += b.stop_time;
        }
        let n = inputs as f64;
        Ok(json(&Summary {
            inputs,
            coverage: covered as f64 / n,
            latency: stop as f64 / (n * 40.0),
            set_size: size as f64 / n,
            baseline_accuracy: dc_hits as f64 / n,
            baseline_latency: dc_stop as f64 / (n * 40.0),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strong_weight_spikes_on_the_input_step() {
        let out: serde_json::Value = serde_json::from_str(&neuron_trace(2.0, 0.5, 0.5, 1.0, "1 0 0").unwrap()).unwrap();
        // Step 2: trace 1.0, potential 0.5*2 + 1 - 1 = 1.0 reaches the threshold.
        // Step 3: trace 0.5, potential 0.5*1 + 0.5 - 1 = 0.
        assert_eq!(out["spikes"], serde_json::json!([1, 1, 0]));
        assert_eq!(out["potential"], serde_json::json!([2.0, 1.0, 0.0]));
        assert!(neuron_trace(1.0, 0.5, 0.5, 1.0, "102").is_err());
    }

    #[test]
    fn merge_curve_sits_between_max_and_k_min() {
        let out: serde_json::Value =
            serde_json::from_str(&merge_curve(vec![0.02, 0.3, 0.5], vec![1.0, 45.0]).unwrap()).unwrap();
        assert_eq!(out["max"], 0.5);
        assert!((out["scaled_min"].as_f64().unwrap() - 0.06).abs() < 1e-15);
        let merged: Vec<f64> = serde_json::from_value(out["merged"].clone()).unwrap();
        assert!(merged.iter().all(|&v| v >= 0.5));
        assert!(merge_curve(vec![], vec![1.0]).is_err());
        assert!(merge_curve(vec![0.1], vec![-2.0]).is_err());
    }

    #[test]
    fn explorer_decides_and_summarizes() {
        let ex = Explorer::new(3, 2).unwrap();
        assert_eq!(ex.members(), 2);
        let d: serde_json::Value = serde_json::from_str(&ex.decide(2, "pm", 45.0, 0.9, 1, 2, 1.0, 0).unwrap()).unwrap();
        let stop = d["stop_time"].as_u64().unwrap() as usize;
        assert!(CHECKPOINTS.contains(&stop));
        assert_eq!(d["label"], 2);
        let s: serde_json::Value = serde_json::from_str(&ex.summarize(1, "cm", 1.0, 0.9, 1, 100).unwrap()).unwrap();
        assert!(s["coverage"].as_f64().unwrap() > 0.5);
        assert!(ex.decide(3, "pm", 45.0, 0.9, 1, 0, 0.5, 0).is_err());
        assert!(ex.decide(1, "xx", 45.0, 0.9, 1, 0, 0.5, 0).is_err());
    }
}
