use std::fs;
use std::path::Path;
use std::process::Command;

use fedloc_bench::checkpoint;
use fedloc_bench::config::{parse_override, ExperimentConfig};
use fedloc_bench::experiment::{self, run_experiment};
use fedloc_bench::surrogate::{write_surrogate, SurrogateConfig};
use tempfile::TempDir;

const REPORTS: [&str; 6] = [
    "history.jsonl",
    "metrics.json",
    "metrics.tsv",
    "partition.tsv",
    "rounds.tsv",
    "heldout.tsv",
];

fn data_dir() -> TempDir {
    let dir = TempDir::new().unwrap();
    write_surrogate(
        dir.path(),
        &SurrogateConfig {
            train_records: 700,
            validation_records: 150,
            seed: 3,
        },
    )
    .unwrap();
    dir
}

fn small_toml(data: &Path, extra: &str) -> String {
    format!(
        r#"
[dataset]
train_path = "{train}"
validation_path = "{val}"

[fl]
clients = 2
batch_size = 32
local_epochs = 1
rounds = 2
initial_rounds = 1
max_similar_clients = 2
pretrain_epochs = 1
strategy = "fedavg"
seed = 4

[output]
dir = "out"
checkpoint_every = 1
{extra}
"#,
        train = data.join("trainingData.csv").display(),
        val = data.join("validationData.csv").display(),
    )
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("exp.toml");
    fs::write(&p, text).unwrap();
    p
}

fn quiet() -> impl FnMut(&str) {
    |_: &str| {}
}

#[test]
fn run_writes_every_report() {
    let data = data_dir();
    let work = TempDir::new().unwrap();
    let cfg = ExperimentConfig::load(&write_config(work.path(), &small_toml(data.path(), "")), &[]).unwrap();
    assert_eq!(cfg.output.dir, work.path().join("out"));
    let run = run_experiment(&cfg, &mut quiet()).unwrap();
    let out = work.path().join("out");
    for f in REPORTS.iter().chain(&["config.toml", "timing.tsv"]) {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let history = fs::read_to_string(out.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);
    for line in history.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["version"], 1);
        assert!(v["mean_accuracy"].is_number());
    }
    for i in 0..2 {
        let p = checkpoint::load(&out.join(format!("checkpoints/client-{i}.flpv"))).unwrap();
        assert_eq!(&p, &run.models[i]);
        assert!(out.join(format!("checkpoints/round-1/client-{i}.flpv")).is_file());
    }
    assert!((0.0..=1.0).contains(&run.test.accuracy));
    assert_eq!(run.validation.as_ref().unwrap().samples, 150);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(json["test"]["config_digest"], cfg.digest());
    assert!(json["test"].get("duration_secs").is_none());
}

#[test]
fn rerun_from_echoed_config_is_byte_identical() {
    let data = data_dir();
    let work = TempDir::new().unwrap();
    let cfg = ExperimentConfig::load(
        &write_config(work.path(), &small_toml(data.path(), "")),
        &[parse_override("strategy=simdeep").unwrap()],
    )
    .unwrap();
    run_experiment(&cfg, &mut quiet()).unwrap();
    let first = work.path().join("out");
    let echoed = ExperimentConfig::load(
        &first.join("config.toml"),
        &[parse_override(&format!("output.dir=\"{}\"", work.path().join("again").display())).unwrap()],
    )
    .unwrap();
    assert_eq!(echoed.digest(), cfg.digest());
    run_experiment(&echoed, &mut quiet()).unwrap();
    let second = work.path().join("again");
    for f in REPORTS {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f} differs");
    }
    for i in 0..2 {
        let p = format!("checkpoints/client-{i}.flpv");
        assert_eq!(fs::read(first.join(&p)).unwrap(), fs::read(second.join(&p)).unwrap());
    }
}

#[test]
fn unknown_keys_are_rejected() {
    let data = data_dir();
    let text = small_toml(data.path(), "");
    let bad = text.replace("[fl]\n", "[fl]\nlocal_epoch = 3\n");
    assert!(ExperimentConfig::from_toml(&bad, &[], Path::new(".")).is_err());
    let err = ExperimentConfig::from_toml(&text, &[parse_override("fl.nope=1").unwrap()], Path::new(".")).unwrap_err();
    assert!(err.to_string().contains("fl.nope"), "{err}");
}

#[test]
fn single_value_sweep_writes_summary() {
    let data = data_dir();
    let work = TempDir::new().unwrap();
    let cfg = ExperimentConfig::load(
        &write_config(work.path(), &small_toml(data.path(), "")),
        &[parse_override("fl.rounds=1").unwrap()],
    )
    .unwrap();
    let rows = experiment::sweep(&cfg, "similarity_threshold", &["0.3".into()], &mut quiet()).unwrap();
    assert_eq!(rows.len(), 1);
    let root = work.path().join("out/sweep-similarity_threshold");
    let summary = fs::read_to_string(root.join("summary.tsv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
    assert!(summary.lines().nth(1).unwrap().starts_with("0.3\t"));
    let echoed = fs::read_to_string(root.join("similarity_threshold=0.3/config.toml")).unwrap();
    assert!(echoed.contains("similarity_threshold = 0.3"));
    assert!(experiment::sweep(&cfg, "nope", &["1".into()], &mut quiet()).is_err());
}

#[test]
fn heldout_phone_without_samples_reports_null() {
    let data = data_dir();
    let work = TempDir::new().unwrap();
    let text = small_toml(data.path(), "\n[eval]\nheldout_phones = [999, 8]\n");
    let cfg = ExperimentConfig::load(&write_config(work.path(), &text), &[parse_override("fl.rounds=1").unwrap()]).unwrap();
    let run = run_experiment(&cfg, &mut quiet()).unwrap();
    let table = fs::read_to_string(work.path().join("out/heldout.tsv")).unwrap();
    assert!(table.lines().any(|l| l == "999\t0\t"), "{table}");
    let phones = &run.heldout.unwrap().phones;
    assert_eq!(phones[0].phone_id, 999);
    assert_eq!(phones[0].accuracy, None);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(work.path().join("out/metrics.json")).unwrap()).unwrap();
    assert!(json["heldout"]["phones"][0]["accuracy"].is_null());
}

#[test]
fn metrics_identities_hold() {
    let data = data_dir();
    let work = TempDir::new().unwrap();
    let cfg = ExperimentConfig::load(
        &write_config(work.path(), &small_toml(data.path(), "")),
        &[parse_override("strategy=simdeep").unwrap(), parse_override("fl.initial_rounds=0").unwrap()],
    )
    .unwrap();
    let run = run_experiment(&cfg, &mut quiet()).unwrap();
    for r in [&run.test, run.validation.as_ref().unwrap()] {
        let total: f64 = r.confusion.iter().flatten().sum();
        let trace: f64 = (0..r.confusion.len()).map(|i| r.confusion[i][i]).sum();
        assert!((total - r.samples as f64).abs() < 1e-9);
        assert!((trace / total - r.accuracy).abs() < 1e-12);
        let recomposed: f64 = r
            .per_class
            .iter()
            .zip(&r.class_counts)
            .filter_map(|(a, &n)| a.map(|a| a * n as f64))
            .sum::<f64>()
            / r.samples as f64;
        assert!((recomposed - r.accuracy).abs() < 1e-12);
        let mean = r.per_model_accuracy.iter().sum::<f64>() / r.per_model_accuracy.len() as f64;
        assert!((mean - r.accuracy).abs() < 1e-12);
    }
}

#[test]
fn cli_runs_and_reports_errors() {
    let exe = env!("CARGO_BIN_EXE_fedloc");
    let work = TempDir::new().unwrap();
    let data = work.path().join("data");
    let ok = Command::new(exe)
        .args(["synth", "--out"])
        .arg(&data)
        .args(["--records", "400", "--validation-records", "50"])
        .output()
        .unwrap();
    assert!(ok.status.success());
    let config = write_config(work.path(), &small_toml(&data, ""));
    let out = Command::new(exe)
        .arg("run")
        .arg(&config)
        .args(["--set", "fl.rounds=1"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("test_accuracy\t"));

    let eval = Command::new(exe)
        .arg("eval")
        .arg(work.path().join("out/checkpoints"))
        .arg(data.join("validationData.csv"))
        .output()
        .unwrap();
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let table = String::from_utf8_lossy(&eval.stdout).to_string();
    assert!(table.lines().nth(1).unwrap().starts_with("checkpoint\t"), "{table}");

    let inspect = Command::new(exe).arg("inspect-partition").arg(&config).output().unwrap();
    assert!(inspect.status.success());
    assert!(String::from_utf8_lossy(&inspect.stdout).contains("label_skew_chi2"));

    let bad = Command::new(exe)
        .arg("run")
        .arg(&config)
        .args(["--set", "fl.bogus=1"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("fl.bogus"));
    let missing = Command::new(exe).args(["run", "/nonexistent.toml"]).output().unwrap();
    assert!(!missing.status.success());
}
