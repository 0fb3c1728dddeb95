//! `spikecp`: train spiking-network ensembles, calibrate them, and make
//! conformal early-stopping decisions from the command line.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 when
//! `validate` finds a tolerance violation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use config::{parse_list, Mode, RunConfig};
use spikecp::formats::parse_exponent;
use spikecp::harness::{DcBaseline, MergeKind, ResamplePolicy, SweepParam};

#[derive(Parser)]
#[command(
    name = "spikecp",
    version,
    about = "Conformal early stopping for spiking-network ensembles"
)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Write a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a deep ensemble or a variational posterior.
    Train(TrainArgs),
    /// Record member scores of a calibration set.
    Calibrate(CalibrateArgs),
    /// Decide test inputs with SpikeCP or the DC baseline.
    Decide(DecideArgs),
    /// Run experiments over a range of one hyperparameter.
    Sweep(SweepArgs),
    /// Monte Carlo checks of p-variable and p-merging validity.
    Validate(ValidateArgs),
}

#[derive(Args, Default)]
struct DataFlags {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    base_rate: Option<f64>,
    #[arg(long)]
    signal_rate: Option<f64>,
    /// Difficulty range as `lo,hi`.
    #[arg(long)]
    difficulty: Option<String>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    pool_size: Option<usize>,
}

#[derive(Args, Default)]
struct ModelFlags {
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Ensemble size.
    #[arg(long)]
    k: Option<usize>,
    /// Hidden layer widths, comma-separated.
    #[arg(long)]
    hidden: Option<String>,
    /// When variational ensembles are redrawn.
    #[arg(long, value_parser = parse_policy)]
    resample: Option<ResamplePolicy>,
}

#[derive(Args, Default)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Prior variance (also the initialization variance).
    #[arg(long)]
    prior_var: Option<f64>,
    #[arg(long)]
    posterior_init_std: Option<f64>,
}

#[derive(Args, Default)]
struct DecisionFlags {
    #[arg(long, value_parser = parse_merge)]
    merge: Option<MergeKind>,
    /// Merging exponent; accepts `inf` and `-inf`.
    #[arg(long, allow_hyphen_values = true, value_parser = parse_exponent)]
    r: Option<f64>,
    #[arg(long)]
    p_targ: Option<f64>,
    /// Set-size threshold for stopping.
    #[arg(long)]
    i_th: Option<usize>,
    /// Checkpoint times, comma-separated.
    #[arg(long)]
    checkpoints: Option<String>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Run the dynamic-confidence baseline (`dc`).
    #[arg(long, value_parser = ["dc"])]
    baseline: Option<String>,
    /// DC threshold: `auto` calibrates on the grid 0.00..0.99.
    #[arg(long)]
    p_th: Option<String>,
    /// Let the DC baseline stop at any step, not just at checkpoints.
    #[arg(long)]
    dc_every_step: bool,
}

#[derive(Args, Default)]
struct ExperimentFlags {
    #[arg(long)]
    cal_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long)]
    resamples: Option<usize>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// Which stream to draw from.
    #[arg(long, value_parser = ["train", "pool"], default_value = "pool")]
    split: String,
    /// Number of examples; defaults to the split's size in the config.
    #[arg(long)]
    count: Option<usize>,
    #[command(flatten)]
    data: DataFlags,
}

#[derive(Args)]
struct TrainArgs {
    /// Training set; generated from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    data_flags: DataFlags,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Ensemble or posterior file.
    #[arg(long)]
    model: PathBuf,
    /// Labelled calibration inputs.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint times, comma-separated, or `all` for every step.
    #[arg(long)]
    checkpoints: Option<String>,
    #[command(flatten)]
    model_flags: ModelFlags,
}

#[derive(Args)]
struct DecideArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calibration: PathBuf,
    /// Test inputs.
    #[arg(long)]
    data: PathBuf,
    /// Decision records (JSON lines); standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model_flags: ModelFlags,
    #[command(flatten)]
    decision: DecisionFlags,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_parser = |s: &str| s.parse::<SweepParam>())]
    param: SweepParam,
    /// Values, comma-separated.
    #[arg(long, allow_hyphen_values = true)]
    values: String,
    /// Trained ensemble or posterior; trained from the config when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Labelled pool; generated from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory for summary.csv, records.csv and sweep.svg.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    data_flags: DataFlags,
    #[command(flatten)]
    model_flags: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    decision: DecisionFlags,
    #[command(flatten)]
    experiment: ExperimentFlags,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    trials: Option<usize>,
    /// Calibration set size.
    #[arg(long)]
    cal: Option<usize>,
    /// Significance levels, comma-separated.
    #[arg(long)]
    alphas: Option<String>,
    #[arg(long)]
    tolerance: Option<f64>,
    /// Check table (CSV); standard output only when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_policy(s: &str) -> Result<ResamplePolicy, String> {
    match s {
        "once" => Ok(ResamplePolicy::Once),
        "per-realization" => Ok(ResamplePolicy::PerRealization),
        "per-input" => Ok(ResamplePolicy::PerInput),
        other => Err(format!("'{other}' is not one of once, per-realization, per-input")),
    }
}

fn parse_merge(s: &str) -> Result<MergeKind, String> {
    match s {
        "cm" => Ok(MergeKind::Cm),
        "pm" => Ok(MergeKind::Pm),
        other => Err(format!("'{other}' is not one of cm, pm")),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl DataFlags {
    fn apply(&self, cfg: &mut RunConfig) -> anyhow::Result<()> {
        let d = &mut cfg.data;
        set(&mut d.classes, self.classes);
        set(&mut d.channels, self.channels);
        set(&mut d.steps, self.steps);
        set(&mut d.base_rate, self.base_rate);
        set(&mut d.signal_rate, self.signal_rate);
        set(&mut d.train_size, self.train_size);
        set(&mut d.pool_size, self.pool_size);
        if let Some(raw) = &self.difficulty {
            let v = parse_list(raw, str::parse::<f64>)?;
            let [lo, hi] = v[..] else {
                anyhow::bail!("--difficulty takes two values, got '{raw}'");
            };
            d.difficulty = [lo, hi];
        }
        Ok(())
    }
}

impl ModelFlags {
    fn apply(&self, cfg: &mut RunConfig) -> anyhow::Result<()> {
        let m = &mut cfg.model;
        set(&mut m.mode, self.mode);
        set(&mut m.k, self.k);
        set(&mut m.resample, self.resample);
        if let Some(raw) = &self.hidden {
            m.hidden = parse_list(raw, str::parse::<usize>)?;
        }
        Ok(())
    }
}

impl TrainFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.learning_rate, self.lr);
        set(&mut t.prior_variance, self.prior_var);
        set(&mut t.posterior_init_std, self.posterior_init_std);
    }
}

impl DecisionFlags {
    fn apply(&self, cfg: &mut RunConfig) -> anyhow::Result<()> {
        let e = &mut cfg.experiment;
        set(&mut e.merge, self.merge);
        set(&mut e.r, self.r);
        set(&mut e.p_targ, self.p_targ);
        set(&mut e.set_size_threshold, self.i_th);
        set(&mut e.horizon, self.horizon);
        if let Some(raw) = &self.checkpoints {
            e.checkpoints = parse_list(raw, str::parse::<usize>)?;
        }
        if self.baseline.is_some() || self.p_th.is_some() || self.dc_every_step {
            let dc = e.dc_baseline.get_or_insert_with(DcBaseline::default);
            dc.every_step |= self.dc_every_step;
            match self.p_th.as_deref() {
                None => {}
                Some("auto") => dc.p_th = None,
                Some(v) => {
                    dc.p_th = Some(
                        v.parse()
                            .map_err(|_| anyhow::anyhow!("--p-th must be 'auto' or a number, got '{v}'"))?,
                    )
                }
            }
        }
        Ok(())
    }
}

impl ExperimentFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let e = &mut cfg.experiment;
        set(&mut e.cal_size, self.cal_size);
        set(&mut e.test_size, self.test_size);
        set(&mut e.resamples, self.resamples);
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    set(&mut cfg.seed, cli.seed);
    match cli.command {
        Command::GenData(a) => {
            a.data.apply(&mut cfg)?;
            commands::gen_data(&cfg, &a.out, &a.split, a.count)
        }
        Command::Train(a) => {
            a.data_flags.apply(&mut cfg)?;
            a.model.apply(&mut cfg)?;
            a.train.apply(&mut cfg);
            commands::train(&cfg, a.data.as_deref(), &a.out)
        }
        Command::Calibrate(a) => {
            a.model_flags.apply(&mut cfg)?;
            let checkpoints = match a.checkpoints.as_deref() {
                Some("all") => commands::CheckpointChoice::All,
                Some(raw) => commands::CheckpointChoice::List(parse_list(raw, str::parse::<usize>)?),
                None => commands::CheckpointChoice::List(cfg.experiment.checkpoints.clone()),
            };
            commands::calibrate(&cfg, &a.model, &a.data, &a.out, checkpoints)
        }
        Command::Decide(a) => {
            a.model_flags.apply(&mut cfg)?;
            a.decision.apply(&mut cfg)?;
            commands::decide(&cfg, &a.model, &a.calibration, &a.data, a.out.as_deref())
        }
        Command::Sweep(a) => {
            a.data_flags.apply(&mut cfg)?;
            a.model_flags.apply(&mut cfg)?;
            a.train.apply(&mut cfg);
            a.decision.apply(&mut cfg)?;
            a.experiment.apply(&mut cfg);
            let values = parse_list(&a.values, parse_exponent)?;
            commands::sweep(
                &cfg,
                a.param,
                &values,
                a.model.as_deref(),
                a.data.as_deref(),
                &a.out_dir,
            )
        }
        Command::Validate(a) => {
            let v = &mut cfg.validate;
            set(&mut v.trials, a.trials);
            set(&mut v.cal, a.cal);
            set(&mut v.tolerance, a.tolerance);
            if let Some(raw) = &a.alphas {
                v.alphas = parse_list(raw, str::parse::<f64>)?;
            }
            commands::validate(&cfg, a.out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
