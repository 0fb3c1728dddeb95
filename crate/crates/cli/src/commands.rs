use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use spikecp::conformal::{
    calibrate_dc_threshold, cm_pool, dc_grid, dc_snn_decide, AdaptiveDecision, CheckpointDiagnostic, SpikeCp,
};
use spikecp::formats::{
    architecture_hash, ensemble_hash, exponent_serde, read_calibration, read_dataset, read_ensemble, read_posterior,
    write_calibration, write_dataset, write_ensemble, write_posterior, Provenance, FORMAT_VERSION,
};
use spikecp::harness::{
    generate_dataset, member_traces, sweep_svg, validation_suite, write_records, write_summary, ModelSource, SweepParam,
};
use spikecp::snn::InputSequence;
use spikecp::training::{sample_ensemble, train_deep_ensemble, train_vi_logged, Ensemble, VariationalPosterior};
use spikecp::CalibrationTable;

use crate::config::{Mode, RunConfig};

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).with_context(|| format!("opening {}", path.display()))
}

fn load_data(path: &Path) -> Result<Vec<InputSequence>> {
    let (data, _) = read_dataset(open(path)?).with_context(|| format!("reading dataset {}", path.display()))?;
    if data.is_empty() {
        bail!("dataset {} is empty", path.display());
    }
    Ok(data)
}

fn labels_of(data: &[InputSequence], what: &str) -> Result<Vec<usize>> {
    data.iter()
        .enumerate()
        .map(|(i, x)| x.label().with_context(|| format!("{what} example {i} has no label")))
        .collect()
}

enum Loaded {
    Ensemble(Ensemble),
    Posterior(VariationalPosterior),
}

fn load_model(path: &Path) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let format = serde_json::from_str::<serde_json::Value>(&text)
        .with_context(|| format!("{} is not JSON", path.display()))?
        .get("format")
        .and_then(|f| f.as_str().map(str::to_string))
        .unwrap_or_default();
    match format.as_str() {
        "spikecp-ensemble" => Ok(Loaded::Ensemble(read_ensemble(text.as_bytes())?.0)),
        "spikecp-posterior" => Ok(Loaded::Posterior(read_posterior(text.as_bytes())?.0)),
        other => bail!(
            "{} is a '{other}' file, expected an ensemble or a posterior",
            path.display()
        ),
    }
}

/// The `k` members a command works with.
fn members(cfg: &RunConfig, loaded: &Loaded) -> Result<Ensemble> {
    let k = cfg.model.k;
    match loaded {
        Loaded::Ensemble(e) => {
            if k > e.len() {
                bail!("model.k = {k} but the ensemble has only {} members", e.len());
            }
            Ok(e.truncate(k)?)
        }
        Loaded::Posterior(p) => Ok(sample_ensemble(p, k, cfg.sampling_seed())?),
    }
}

fn source(cfg: &RunConfig, loaded: Loaded, keep_all: bool) -> Result<ModelSource> {
    Ok(match loaded {
        Loaded::Ensemble(e) if keep_all => ModelSource::Ensemble(e),
        Loaded::Ensemble(_) => ModelSource::Ensemble(members(cfg, &loaded)?),
        Loaded::Posterior(posterior) => ModelSource::Posterior {
            posterior,
            k: cfg.model.k,
            policy: cfg.model.resample,
            seed: cfg.sampling_seed(),
        },
    })
}

pub fn gen_data(cfg: &RunConfig, out: &Path, split: &str, count: Option<usize>) -> Result<ExitCode> {
    cfg.check()?;
    let (spec, default_count) = match split {
        "train" => (cfg.train_spec(), cfg.data.train_size),
        _ => (cfg.pool_spec(), cfg.data.pool_size),
    };
    let data = generate_dataset(&spec, count.unwrap_or(default_count))?;
    let mut w = create(out)?;
    write_dataset(&data, &cfg.hash(), &mut w)?;
    w.flush()?;
    eprintln!("wrote {} {split} examples to {}", data.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn train_models(cfg: &RunConfig, data: &[InputSequence], k: usize) -> Result<Loaded> {
    let labels = labels_of(data, "training")?;
    let classes = cfg.data.classes;
    if let Some(&c) = labels.iter().find(|&&c| c >= classes) {
        bail!("training label {c} is outside data.classes = {classes}");
    }
    let arch = cfg.architecture(data[0].channels(), classes)?;
    let tc = cfg.train_config();
    Ok(match cfg.model.mode {
        Mode::De => Loaded::Ensemble(train_deep_ensemble(data, &arch, &tc, k)?),
        Mode::Vi => {
            let trained = train_vi_logged(data, &arch, &tc)?;
            if let Some(last) = trained.epoch_losses.last() {
                eprintln!("final objective {last:.6}");
            }
            Loaded::Posterior(trained.value)
        }
    })
}

pub fn train(cfg: &RunConfig, data: Option<&Path>, out: &Path) -> Result<ExitCode> {
    cfg.check()?;
    let data = match data {
        Some(p) => load_data(p)?,
        None => generate_dataset(&cfg.train_spec(), cfg.data.train_size)?,
    };
    let hash = cfg.hash();
    let mut w = create(out)?;
    match train_models(cfg, &data, cfg.model.k)? {
        Loaded::Ensemble(e) => {
            write_ensemble(&e, &hash, &mut w)?;
            eprintln!("wrote a {}-member deep ensemble to {}", e.len(), out.display());
        }
        Loaded::Posterior(p) => {
            write_posterior(&p, &hash, &mut w)?;
            eprintln!("wrote a variational posterior to {}", out.display());
        }
    }
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}

pub enum CheckpointChoice {
    All,
    List(Vec<usize>),
}

pub fn calibrate(
    cfg: &RunConfig,
    model: &Path,
    data: &Path,
    out: &Path,
    checkpoints: CheckpointChoice,
) -> Result<ExitCode> {
    let ensemble = members(cfg, &load_model(model)?)?;
    let data = load_data(data)?;
    let labels = labels_of(&data, "calibration")?;
    let times = match checkpoints {
        CheckpointChoice::All => (1..=data[0].steps()).collect(),
        CheckpointChoice::List(v) => v,
    };
    let inputs: Vec<&InputSequence> = data.iter().collect();
    let traces = member_traces(&ensemble, &inputs, &times)?;
    let table = CalibrationTable::from_traces(&traces, &labels)?;
    let mut w = create(out)?;
    write_calibration(&table, &Provenance::of(&ensemble, &cfg.hash()), &mut w)?;
    w.flush()?;
    eprintln!(
        "wrote calibration scores of {} examples under {} members to {}",
        table.len(),
        ensemble.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct DecisionHeader<'a> {
    format: &'static str,
    version: u32,
    config_hash: &'a str,
    method: &'static str,
    #[serde(with = "exponent_serde")]
    r: f64,
    p_targ: f64,
    set_size_threshold: usize,
    checkpoints: &'a [usize],
    alpha: Option<f64>,
    p_th: Option<f64>,
}

#[derive(Serialize)]
struct DecisionLine<'a> {
    example: usize,
    label: Option<usize>,
    stop_time: usize,
    set: &'a [usize],
    prediction: Option<usize>,
    covered: Option<bool>,
    diagnostics: &'a [CheckpointDiagnostic],
}

pub fn decide(cfg: &RunConfig, model: &Path, calibration: &Path, data: &Path, out: Option<&Path>) -> Result<ExitCode> {
    let ensemble = members(cfg, &load_model(model)?)?;
    let (table, prov) =
        read_calibration(open(calibration)?).with_context(|| format!("reading {}", calibration.display()))?;
    let arch_hash = architecture_hash(ensemble.architecture());
    if prov.architecture_hash != arch_hash {
        bail!(
            "calibration was recorded for architecture {}, but the model has architecture {arch_hash}",
            prov.architecture_hash
        );
    }
    let ens_hash = ensemble_hash(&ensemble);
    if prov.ensemble_hash != ens_hash {
        bail!(
            "calibration was recorded with ensemble {}, but the selected members hash to {ens_hash}",
            prov.ensemble_hash
        );
    }
    let exp = cfg.experiment();
    let data = load_data(data)?;
    let inputs: Vec<&InputSequence> = data.iter().collect();
    let hash = cfg.hash();

    let (header_method, alpha, p_th, times, decisions): (_, _, _, Vec<usize>, Vec<AdaptiveDecision>) = match &exp
        .dc_baseline
    {
        None => {
            let sc = exp.spikecp()?;
            let sub = table
                .select(&sc.checkpoints)
                .context("the calibration file lacks a requested checkpoint")?;
            let predictor = SpikeCp::new(&sub, &sc)?;
            let traces = member_traces(&ensemble, &inputs, &sc.checkpoints)?;
            let decisions = traces
                .iter()
                .map(|t| predictor.decide(t))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            (
                exp.merge.name(),
                Some(sc.alpha()),
                None,
                sc.checkpoints.clone(),
                decisions,
            )
        }
        Some(dc) => {
            let times: Vec<usize> = if dc.every_step {
                (1..=exp.horizon).collect()
            } else {
                exp.checkpoints.clone()
            };
            let sub = table.select(&times).context(
                    "the calibration file lacks a requested checkpoint (record every step with `calibrate --checkpoints all`)",
                )?;
            let p_th = match dc.p_th {
                Some(p) => p,
                None => calibrate_dc_threshold(&sub.pooled_confidences(1.0), sub.labels(), exp.p_targ, &dc_grid()),
            };
            let traces = member_traces(&ensemble, &inputs, &times)?;
            let decisions = traces
                .iter()
                .map(|t| {
                    let pooled: Vec<Vec<f64>> = (0..times.len())
                        .map(|j| {
                            let m: Vec<Vec<f64>> = t.iter().map(|tr| tr.confidences[j].clone()).collect();
                            cm_pool(&m, 1.0)
                        })
                        .collect();
                    dc_snn_decide(&pooled, &times, p_th, exp.horizon, exp.set_size_threshold)
                })
                .collect();
            ("dc", None, Some(p_th), times, decisions)
        }
    };

    let mut w: Box<dyn Write> = match out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    let header = DecisionHeader {
        format: "spikecp-decisions",
        version: FORMAT_VERSION,
        config_hash: &hash,
        method: header_method,
        r: if header_method == "dc" { 1.0 } else { exp.r },
        p_targ: exp.p_targ,
        set_size_threshold: exp.set_size_threshold,
        checkpoints: &times,
        alpha,
        p_th,
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    let (mut covered, mut labelled, mut latency) = (0usize, 0usize, 0.0);
    for (i, (x, d)) in data.iter().zip(&decisions).enumerate() {
        let cov = x.label().map(|c| d.covers(c));
        if let Some(c) = cov {
            labelled += 1;
            covered += usize::from(c);
        }
        latency += d.stop_time as f64 / exp.horizon as f64;
        serde_json::to_writer(
            &mut w,
            &DecisionLine {
                example: i,
                label: x.label(),
                stop_time: d.stop_time,
                set: &d.set,
                prediction: d.label,
                covered: cov,
                diagnostics: &d.diagnostics,
            },
        )?;
        writeln!(w)?;
    }
    w.flush()?;
    eprint!(
        "decided {} inputs: mean normalized latency {:.4}",
        data.len(),
        latency / data.len() as f64
    );
    if labelled > 0 {
        eprint!(", coverage {:.4}", covered as f64 / labelled as f64);
    }
    eprintln!();
    Ok(ExitCode::SUCCESS)
}

pub fn sweep(
    cfg: &RunConfig,
    param: SweepParam,
    values: &[f64],
    model: Option<&Path>,
    data: Option<&Path>,
    out_dir: &Path,
) -> Result<ExitCode> {
    cfg.check()?;
    let pool = match data {
        Some(p) => load_data(p)?,
        None => generate_dataset(&cfg.pool_spec(), cfg.data.pool_size)?,
    };
    let keep_all = param == SweepParam::K;
    let loaded = match model {
        Some(p) => load_model(p)?,
        None => {
            let k = if keep_all {
                values.iter().copied().fold(1.0, f64::max) as usize
            } else {
                cfg.model.k
            };
            let train = generate_dataset(&cfg.train_spec(), cfg.data.train_size)?;
            train_models(cfg, &train, k)?
        }
    };
    let src = source(cfg, loaded, keep_all)?;
    let points = spikecp::harness::sweep(param, values, &src, &pool, &cfg.experiment())?;
    let reports: Vec<_> = points.iter().map(|p| p.report.clone()).collect();
    let hash = cfg.hash();

    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut summary = Vec::new();
    write_summary(&reports, &hash, &mut summary)?;
    std::fs::write(out_dir.join("summary.csv"), &summary)?;
    let mut w = create(&out_dir.join("records.csv"))?;
    write_records(&reports, &hash, &mut w)?;
    w.flush()?;
    let label = match param {
        SweepParam::K => "ensemble size K",
        SweepParam::PTarg => "target accuracy p_targ",
        SweepParam::R => "exponent r",
    };
    let series: Vec<_> = points
        .iter()
        .map(|p| (p.report.mode.clone(), p.value, &p.report))
        .collect();
    let svg = format!("<!-- config_hash={hash} -->\n{}", sweep_svg(label, &series));
    std::fs::write(out_dir.join("sweep.svg"), svg)?;
    std::io::stdout().write_all(&summary)?;
    Ok(ExitCode::SUCCESS)
}

pub fn validate(cfg: &RunConfig, out: Option<&Path>) -> Result<ExitCode> {
    let checks = validation_suite(&cfg.validation())?;
    let mut table = format!(
        "# spikecp-validation version={FORMAT_VERSION} config_hash={}\ncheck,value,limit,status\n",
        cfg.hash()
    );
    for c in &checks {
        table.push_str(&format!(
            "{},{},{},{}\n",
            c.name,
            c.value,
            c.limit,
            if c.pass { "pass" } else { "FAIL" }
        ));
    }
    if let Some(p) = out {
        let mut w = create(p)?;
        w.write_all(table.as_bytes())?;
        w.flush()?;
    }
    print!("{table}");
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("validation failed: {}", failed.join("; "));
        Ok(ExitCode::from(2))
    }
}
