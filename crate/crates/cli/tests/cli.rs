use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spikecp::conformal::{calibrate_dc_threshold, dc_grid, p_value, predictive_set};
use spikecp::formats::{read_calibration, read_dataset, read_ensemble, read_posterior};
use spikecp::harness::read_summary;
use spikecp::snn::{forward, neg_log};
use spikecp::training::{train_single, TrainConfig};

const SMALL: &str = r#"
seed = 3

[data]
train_size = 120
pool_size = 260

[model]
hidden = [12]
k = 3

[train]
epochs = 2

[experiment]
resamples = 3
test_size = 100
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spikecp"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn spikecp")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "spikecp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    /// Trained ensemble, calibration pool and test inputs under the small config.
    fn pipeline(&self) {
        let cfg = self.p("small.toml");
        ok(&["--config", &cfg, "train", "--out", &self.p("de.json")]);
        ok(&[
            "--config",
            &cfg,
            "gen-data",
            "--out",
            &self.p("cal.json"),
            "--count",
            "60",
        ]);
        ok(&[
            "--config",
            &cfg,
            "--seed",
            "99",
            "gen-data",
            "--out",
            &self.p("test.json"),
            "--count",
            "40",
        ]);
        ok(&[
            "--config",
            &cfg,
            "calibrate",
            "--model",
            &self.p("de.json"),
            "--data",
            &self.p("cal.json"),
            "--out",
            &self.p("cal.csv"),
            "--checkpoints",
            "all",
        ]);
    }
}

fn decisions(text: &[u8]) -> (serde_json::Value, Vec<serde_json::Value>) {
    let mut lines = std::str::from_utf8(text)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap());
    let header = lines.next().unwrap();
    (header, lines.collect())
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn validate_passes_and_reports_each_level() {
    let out = ok(&["validate", "--trials", "10000", "--cal", "50"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for a in ["0.05", "0.1", "0.25", "0.5"] {
        assert!(text.contains(&format!("p-value alpha={a},")), "{text}");
    }
    assert!(!text.contains("FAIL"));
}

#[test]
fn validate_violation_exits_two() {
    let out = run(&["validate", "--trials", "1000", "--tolerance=-0.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("validation failed"));
}

#[test]
fn usage_and_config_errors_exit_one() {
    assert_eq!(run(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&["decide"]).status.code(), Some(1));
    let ws = Workspace::new();
    std::fs::write(ws.path("bad.toml"), "[train]\nlearning_rat = 0.5\n").unwrap();
    let out = run(&["--config", &ws.p("bad.toml"), "validate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
    assert!(run(&["--help"]).status.success());
}

#[test]
fn train_de_writes_k_members_and_respects_precedence() {
    let ws = Workspace::new();
    let cfg = ws.p("small.toml");
    ok(&["--config", &cfg, "train", "--epochs", "0", "--out", &ws.p("a.json")]);
    let (e, _) = read_ensemble(std::fs::File::open(ws.path("a.json")).unwrap()).unwrap();
    assert_eq!(e.len(), 3);
    ok(&[
        "--config",
        &cfg,
        "train",
        "--mode",
        "de",
        "--k",
        "6",
        "--seed",
        "7",
        "--epochs",
        "0",
        "--out",
        &ws.p("b.json"),
    ]);
    let (e, hash) = read_ensemble(std::fs::File::open(ws.path("b.json")).unwrap()).unwrap();
    assert_eq!(e.len(), 6);
    assert_eq!(hash.len(), 16);
}

#[test]
fn zero_epochs_is_the_initialization() {
    let ws = Workspace::new();
    let cfg = ws.p("small.toml");
    ok(&[
        "--config",
        &cfg,
        "gen-data",
        "--split",
        "train",
        "--out",
        &ws.p("train.json"),
    ]);
    ok(&[
        "--config",
        &cfg,
        "train",
        "--epochs",
        "0",
        "--data",
        &ws.p("train.json"),
        "--out",
        &ws.p("m.json"),
    ]);
    let (cli, _) = read_ensemble(std::fs::File::open(ws.path("m.json")).unwrap()).unwrap();
    let (data, _) = read_dataset(std::fs::File::open(ws.path("train.json")).unwrap()).unwrap();
    let init = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    for (member, &seed) in cli.members.iter().zip(&cli.seeds) {
        let fresh = train_single(&data, cli.architecture(), &init.with_seed(seed)).unwrap();
        assert_eq!(&fresh, member);
    }
}

#[test]
fn train_vi_writes_posterior() {
    let ws = Workspace::new();
    ok(&[
        "--config",
        &ws.p("small.toml"),
        "train",
        "--mode",
        "vi",
        "--prior-var",
        "0.03",
        "--out",
        &ws.p("vi.json"),
    ]);
    let (post, _) = read_posterior(std::fs::File::open(ws.path("vi.json")).unwrap()).unwrap();
    assert_eq!(post.architecture.layer_sizes, vec![40, 12, 4]);
}

#[test]
fn decide_cm_r1_matches_model_averaging() {
    let ws = Workspace::new();
    ws.pipeline();
    let cfg = ws.p("small.toml");
    let out = ok(&[
        "--config",
        &cfg,
        "decide",
        "--model",
        &ws.p("de.json"),
        "--calibration",
        &ws.p("cal.csv"),
        "--data",
        &ws.p("test.json"),
        "--merge",
        "cm",
        "--r",
        "1",
        "--p-targ",
        "0.9",
        "--i-th",
        "3",
    ]);
    let (header, lines) = decisions(&out.stdout);
    assert_eq!(header["method"], "cm");

    let (ens, _) = read_ensemble(std::fs::File::open(ws.path("de.json")).unwrap()).unwrap();
    let (table, _) = read_calibration(std::fs::File::open(ws.path("cal.csv")).unwrap()).unwrap();
    let (test, _) = read_dataset(std::fs::File::open(ws.path("test.json")).unwrap()).unwrap();
    let cps = [20usize, 40, 60, 80];
    let alpha = 0.1 / 4.0;
    let averaged = |f: Vec<Vec<f64>>| -> Vec<f64> {
        (0..4)
            .map(|c| f.iter().map(|v| v[c]).sum::<f64>() / f.len() as f64)
            .collect()
    };
    for (x, line) in test.iter().zip(&lines) {
        let traces: Vec<_> = ens.members.iter().map(|m| forward(x, m, &cps).unwrap()).collect();
        let mut expected = None;
        for (j, &t) in cps.iter().enumerate() {
            let ti = table.checkpoints().iter().position(|&c| c == t).unwrap();
            let cal: Vec<f64> = (0..table.len())
                .map(|i| {
                    let f = averaged((0..3).map(|k| table.confidence(k, ti, i).to_vec()).collect());
                    neg_log(f[table.labels()[i]])
                })
                .collect();
            let f = averaged(traces.iter().map(|tr| tr.confidences[j].clone()).collect());
            let p: Vec<f64> = f.iter().map(|&v| p_value(neg_log(v), &cal).unwrap()).collect();
            let set = predictive_set(&p, alpha);
            if set.len() <= 3 || j == 3 {
                expected = Some((t, set));
                break;
            }
        }
        let (t, set) = expected.unwrap();
        assert_eq!(line["stop_time"], t);
        assert_eq!(line["set"], serde_json::json!(set));
    }
}

#[test]
fn decide_dc_auto_matches_library_calibration() {
    let ws = Workspace::new();
    ws.pipeline();
    let cfg = ws.p("small.toml");
    let out = ok(&[
        "--config",
        &cfg,
        "decide",
        "--model",
        &ws.p("de.json"),
        "--calibration",
        &ws.p("cal.csv"),
        "--data",
        &ws.p("test.json"),
        "--baseline",
        "dc",
        "--p-th",
        "auto",
        "--dc-every-step",
    ]);
    let (header, lines) = decisions(&out.stdout);
    let (table, _) = read_calibration(std::fs::File::open(ws.path("cal.csv")).unwrap()).unwrap();
    let expected = calibrate_dc_threshold(&table.pooled_confidences(1.0), table.labels(), 0.9, &dc_grid());
    assert_eq!(header["p_th"].as_f64().unwrap(), expected);
    assert_eq!(lines.len(), 40);
    assert!(lines
        .iter()
        .all(|l| l["set"].as_array().unwrap().len() == 3 && l["prediction"].is_u64()));
}

#[test]
fn decide_refuses_foreign_calibration() {
    let ws = Workspace::new();
    ws.pipeline();
    let cfg = ws.p("small.toml");
    ok(&["--config", &cfg, "--seed", "4", "train", "--out", &ws.p("other.json")]);
    let out = run(&[
        "--config",
        &cfg,
        "decide",
        "--model",
        &ws.p("other.json"),
        "--calibration",
        &ws.p("cal.csv"),
        "--data",
        &ws.p("test.json"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ensemble"));
    ok(&[
        "--config",
        &cfg,
        "--seed",
        "4",
        "train",
        "--hidden",
        "5",
        "--out",
        &ws.p("narrow.json"),
    ]);
    let out = run(&[
        "--config",
        &cfg,
        "decide",
        "--model",
        &ws.p("narrow.json"),
        "--calibration",
        &ws.p("cal.csv"),
        "--data",
        &ws.p("test.json"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("architecture"));
}

#[test]
fn decide_without_all_checkpoints_explains_dc_requirement() {
    let ws = Workspace::new();
    ws.pipeline();
    let cfg = ws.p("small.toml");
    ok(&[
        "--config",
        &cfg,
        "calibrate",
        "--model",
        &ws.p("de.json"),
        "--data",
        &ws.p("cal.json"),
        "--out",
        &ws.p("cal4.csv"),
    ]);
    let out = run(&[
        "--config",
        &cfg,
        "decide",
        "--model",
        &ws.p("de.json"),
        "--calibration",
        &ws.p("cal4.csv"),
        "--data",
        &ws.p("test.json"),
        "--baseline",
        "dc",
        "--dc-every-step",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoints all"));
}

#[test]
fn sweep_k_has_one_row_per_value() {
    let ws = Workspace::new();
    let dir = ws.p("sweep");
    let out = ok(&[
        "--config",
        &ws.p("small.toml"),
        "sweep",
        "--param",
        "k",
        "--values",
        "1,2,4,6",
        "--out-dir",
        &dir,
    ]);
    let (rows, hash) = read_summary(read(&ws.path("sweep/summary.csv")).as_slice()).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![1, 2, 4, 6]);
    assert_eq!(out.stdout, read(&ws.path("sweep/summary.csv")));
    let svg = String::from_utf8(read(&ws.path("sweep/sweep.svg"))).unwrap();
    assert!(svg.contains(&hash) && svg.contains("<svg"));
    let records = String::from_utf8(read(&ws.path("sweep/records.csv"))).unwrap();
    assert_eq!(records.lines().count(), 2 + 4 * 3 * 100);
}

#[test]
fn sweep_p_targ_coverage_tracks_target() {
    let ws = Workspace::new();
    let dir = ws.p("pt");
    ok(&[
        "--config",
        &ws.p("small.toml"),
        "sweep",
        "--param",
        "p-targ",
        "--values",
        "0.7,0.8,0.9",
        "--merge",
        "cm",
        "--r",
        "1",
        "--out-dir",
        &dir,
    ]);
    let (rows, _) = read_summary(read(&ws.path("pt/summary.csv")).as_slice()).unwrap();
    for row in rows {
        // 300 decisions per row; three binomial standard deviations.
        let slack = 3.0 * (row.p_targ * (1.0 - row.p_targ) / 300.0).sqrt();
        assert!(row.coverage >= row.p_targ - slack, "{row:?}");
    }
}

#[test]
fn sweep_with_dc_baseline_and_negative_infinite_r() {
    let ws = Workspace::new();
    ok(&[
        "--config",
        &ws.p("small.toml"),
        "sweep",
        "--param",
        "r",
        "--values",
        "-inf,1,45",
        "--baseline",
        "dc",
        "--out-dir",
        &ws.p("r"),
    ]);
    let (rows, _) = read_summary(read(&ws.path("r/summary.csv")).as_slice()).unwrap();
    let modes: Vec<&str> = rows.iter().map(|r| r.mode.as_str()).collect();
    assert_eq!(modes, ["de-pm", "de-dc", "de-pm", "de-dc", "de-pm", "de-dc"]);
    assert_eq!(rows[0].r, "-inf");
}

#[test]
fn commands_are_byte_deterministic() {
    let ws = Workspace::new();
    let cfg = ws.p("small.toml");
    for name in ["x", "y"] {
        ok(&[
            "--config",
            &cfg,
            "gen-data",
            "--out",
            &ws.p(&format!("{name}.json")),
            "--count",
            "30",
        ]);
        ok(&["--config", &cfg, "train", "--out", &ws.p(&format!("{name}-m.json"))]);
        ok(&[
            "--config",
            &cfg,
            "calibrate",
            "--model",
            &ws.p(&format!("{name}-m.json")),
            "--data",
            &ws.p(&format!("{name}.json")),
            "--out",
            &ws.p(&format!("{name}.csv")),
        ]);
        ok(&["validate", "--trials", "2000", "--out", &ws.p(&format!("{name}-v.csv"))]);
    }
    for (a, b) in [
        ("x.json", "y.json"),
        ("x-m.json", "y-m.json"),
        ("x.csv", "y.csv"),
        ("x-v.csv", "y-v.csv"),
    ] {
        assert_eq!(read(&ws.path(a)), read(&ws.path(b)), "{a} vs {b}");
    }
}
