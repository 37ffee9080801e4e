//! End-to-end experiments: ingest, split, partition, train, evaluate and
//! write reports.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fedloc_core::dataset::{load_ujiindoorloc, vectorize_all, DatasetError, Sample};
use fedloc_core::fedcore::{FedError, Federation, RoundRecord, SimConfig};
use fedloc_core::nn::ParamVector;
use fedloc_core::partition::{
    holdout_by_phone, label_skew_chi2, mean_label_divergence, partition_pools, split_labeled_unlabeled,
    train_test_split, PartitionError,
};
use fedloc_core::{ClientDataset, Network, PartitionMode};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::{parse_value, ConfigError, ExperimentConfig};
use crate::metrics::{evaluate, evaluate_heldout_phones, HeldoutReport, MetricsError, MetricsReport};
use crate::report::{self, SweepRow};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("sweep stopped at {axis}={value}: {source}")]
    Sweep {
        axis: String,
        value: String,
        source: Box<ExperimentError>,
    },
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

pub const CONFIG_FILE: &str = "config.toml";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const METRICS_TABLE: &str = "metrics.tsv";
pub const METRICS_JSON: &str = "metrics.json";
pub const PARTITION_TABLE: &str = "partition.tsv";
pub const ROUNDS_TABLE: &str = "rounds.tsv";
pub const HELDOUT_TABLE: &str = "heldout.tsv";
pub const TIMING_FILE: &str = "timing.tsv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Samples after ingest, splitting and partitioning.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub test: Vec<Sample>,
    pub validation: Option<Vec<Sample>>,
    /// Samples of held-out phones removed before training (empty unless
    /// `eval.exclude_heldout_phones`).
    pub heldout: Vec<Sample>,
    pub clients: Vec<ClientDataset>,
}

pub fn load_samples(path: &Path, cfg: &ExperimentConfig) -> Result<Vec<Sample>> {
    let records = load_ujiindoorloc(path)?;
    Ok(vectorize_all(&records, &cfg.transform())?)
}

pub fn prepare_with(samples: Vec<Sample>, validation: Option<Vec<Sample>>, cfg: &ExperimentConfig) -> Result<PreparedData> {
    let (pool, heldout) = if cfg.eval.exclude_heldout_phones && !cfg.eval.heldout_phones.is_empty() {
        holdout_by_phone(&samples, &cfg.eval.heldout_phones)?
    } else {
        (samples, Vec::new())
    };
    let (train, test) = train_test_split(&pool, cfg.dataset.test_fraction, cfg.fl.seed);
    let (labeled, unlabeled) = split_labeled_unlabeled(&train, cfg.partition.labeled_ratio, cfg.fl.seed)?;
    let clients = partition_pools(&labeled, &unlabeled, &cfg.partition_config())?;
    Ok(PreparedData {
        test,
        validation,
        heldout,
        clients,
    })
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let samples = load_samples(&cfg.dataset.train_path, cfg)?;
    let validation = cfg
        .dataset
        .validation_path
        .as_ref()
        .map(|p| load_samples(p, cfg))
        .transpose()?;
    prepare_with(samples, validation, cfg)
}

/// Everything a finished run reports.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub history: Vec<RoundRecord>,
    pub test: MetricsReport,
    pub validation: Option<MetricsReport>,
    pub heldout: Option<HeldoutReport>,
    pub models: Vec<ParamVector>,
    pub duration_secs: f64,
}

fn write_checkpoints(dir: &Path, models: &[&ParamVector]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for (i, m) in models.iter().enumerate() {
        checkpoint::save(&dir.join(format!("client-{i}.flpv")), m)?;
    }
    Ok(())
}

/// Runs one experiment on prepared data and writes every report file.
pub fn run_prepared(cfg: &ExperimentConfig, data: PreparedData, log: &mut dyn FnMut(&str)) -> Result<RunSummary> {
    let start = Instant::now();
    let out = &cfg.output.dir;
    fs::create_dir_all(out).map_err(|source| ExperimentError::Io {
        path: out.clone(),
        source,
    })?;
    write_file(&out.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    write_file(&out.join(PARTITION_TABLE), report::partition_table(&data.clients).as_bytes())?;

    let network = Network::new(cfg.model.clone()).map_err(FedError::from)?;
    let digest = cfg.digest();
    let eval = cfg.eval.every_round.then_some(&data.test[..]);
    log(&format!(
        "{}: {} clients, {} test samples, pretraining",
        cfg.fl.strategy,
        data.clients.len(),
        data.test.len()
    ));
    let mut fed = Federation::new(&network, cfg.fl.clone(), data.clients)?;

    let history_path = out.join(HISTORY_FILE);
    let mut history_file = File::create(&history_path).map_err(|source| ExperimentError::Io {
        path: history_path.clone(),
        source,
    })?;
    let mut history = Vec::with_capacity(cfg.fl.rounds);
    for _ in 0..cfg.fl.rounds {
        let rec = fed.step(eval)?;
        history_file
            .write_all(report::history_line(&rec).as_bytes())
            .map_err(|source| ExperimentError::Io {
                path: history_path.clone(),
                source,
            })?;
        log(&format!(
            "round {:>3}: mean accuracy {}",
            rec.round,
            rec.mean_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
        ));
        if cfg.output.checkpoint_every > 0 && rec.round % cfg.output.checkpoint_every == 0 {
            let models: Vec<&ParamVector> = fed.clients().iter().map(|c| &c.params).collect();
            write_checkpoints(&out.join(CHECKPOINT_DIR).join(format!("round-{}", rec.round)), &models)?;
        }
        history.push(rec);
    }
    drop(history_file);
    let clients = fed.into_clients();
    let models: Vec<&ParamVector> = clients.iter().map(|c| &c.params).collect();
    write_checkpoints(&out.join(CHECKPOINT_DIR), &models)?;

    let strategy = cfg.fl.strategy;
    let mut test = evaluate(&network, &models, &data.test, "test", strategy, &digest)?;
    let mut validation = data
        .validation
        .as_ref()
        .map(|v| evaluate(&network, &models, v, "validation", strategy, &digest))
        .transpose()?;
    let heldout = if cfg.eval.heldout_phones.is_empty() {
        None
    } else {
        let pool = if cfg.eval.exclude_heldout_phones { &data.heldout } else { &data.test };
        Some(evaluate_heldout_phones(&network, &models, pool, &cfg.eval.heldout_phones, strategy, &digest)?)
    };
    let duration_secs = start.elapsed().as_secs_f64();
    test.duration_secs = duration_secs;
    if let Some(v) = validation.as_mut() {
        v.duration_secs = duration_secs;
    }

    let mut reports: Vec<&MetricsReport> = vec![&test];
    reports.extend(validation.as_ref());
    if let Some(p) = heldout.as_ref().and_then(|h| h.pooled.as_ref()) {
        reports.push(p);
    }
    write_file(&out.join(METRICS_TABLE), report::metrics_table(&reports).as_bytes())?;
    let json = serde_json::json!({
        "test": &test,
        "validation": &validation,
        "heldout": &heldout,
    });
    write_file(
        &out.join(METRICS_JSON),
        (serde_json::to_string_pretty(&json).expect("reports serialise") + "\n").as_bytes(),
    )?;
    write_file(&out.join(ROUNDS_TABLE), report::rounds_table(&history).as_bytes())?;
    if let Some(h) = &heldout {
        write_file(&out.join(HELDOUT_TABLE), report::heldout_table(h).as_bytes())?;
    }
    write_file(&out.join(TIMING_FILE), format!("duration_secs\n{duration_secs:.3}\n").as_bytes())?;
    log(&format!(
        "test accuracy {:.4}{}",
        test.accuracy,
        validation
            .as_ref()
            .map_or(String::new(), |v| format!(", validation accuracy {:.4}", v.accuracy))
    ));
    Ok(RunSummary {
        history,
        test,
        validation,
        heldout,
        models: clients.into_iter().map(|c| c.params).collect(),
        duration_secs,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<RunSummary> {
    let data = prepare(cfg)?;
    run_prepared(cfg, data, log)
}

fn sanitize(v: &str) -> String {
    v.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// One run per value with everything else fixed. The summary table is
/// rewritten after every run, so a failing run leaves earlier rows intact.
pub fn sweep(base: &ExperimentConfig, axis: &str, values: &[String], log: &mut dyn FnMut(&str)) -> Result<Vec<SweepRow>> {
    crate::config::resolve_key(axis)?;
    let root = base.output.dir.join(format!("sweep-{}", sanitize(axis)));
    fs::create_dir_all(&root).map_err(|source| ExperimentError::Io {
        path: root.clone(),
        source,
    })?;
    let samples = load_samples(&base.dataset.train_path, base)?;
    let validation = base
        .dataset
        .validation_path
        .as_ref()
        .map(|p| load_samples(p, base))
        .transpose()?;
    let mut rows = Vec::new();
    for value in values {
        let wrap = |e: ExperimentError| ExperimentError::Sweep {
            axis: axis.into(),
            value: value.clone(),
            source: Box::new(e),
        };
        let o = [
            (axis.to_string(), parse_value(value)),
            (
            "output.dir".into(),
            toml::Value::String(root.join(format!("{}={}", sanitize(axis), sanitize(value))).display().to_string()),
            ),
        ];
        let cfg = base.with_overrides(&o).map_err(|e| wrap(e.into()))?;
        log(&format!("sweep {axis}={value}"));
        let data = prepare_with(samples.clone(), validation.clone(), &cfg).map_err(wrap)?;
        let run = run_prepared(&cfg, data, log).map_err(wrap)?;
        rows.push(SweepRow {
            value: value.clone(),
            test_accuracy: run.test.accuracy,
            validation_accuracy: run.validation.as_ref().map(|v| v.accuracy),
            duration_secs: run.duration_secs,
        });
        write_file(&root.join("summary.tsv"), report::sweep_table(axis, &rows).as_bytes())?;
    }
    Ok(rows)
}

/// Partition summary plus skew statistics, compared against an IID
/// partition of the same pools.
#[derive(Debug, Clone)]
pub struct PartitionSummary {
    pub table: String,
    pub chi2: f64,
    pub divergence: f64,
    pub iid_chi2: f64,
    pub iid_divergence: f64,
}

pub fn inspect_partition(cfg: &ExperimentConfig) -> Result<PartitionSummary> {
    let data = prepare(cfg)?;
    let hist: Vec<_> = data.clients.iter().map(ClientDataset::class_histogram).collect();
    let mut iid_cfg = cfg.clone();
    iid_cfg.partition.mode = PartitionMode::Iid;
    let iid = prepare(&iid_cfg)?;
    let iid_hist: Vec<_> = iid.clients.iter().map(ClientDataset::class_histogram).collect();
    Ok(PartitionSummary {
        table: report::partition_table(&data.clients),
        chi2: label_skew_chi2(&hist),
        divergence: mean_label_divergence(&hist),
        iid_chi2: label_skew_chi2(&iid_hist),
        iid_divergence: mean_label_divergence(&iid_hist),
    })
}

/// Evaluates checkpoints (one file, or every `.flpv` in a directory) on a
/// UJIIndoorLoc file.
pub fn eval_checkpoints(checkpoint: &Path, data: &Path, cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let files: Vec<PathBuf> = if checkpoint.is_dir() {
        let mut f: Vec<PathBuf> = fs::read_dir(checkpoint)
            .map_err(|source| ExperimentError::Io {
                path: checkpoint.to_path_buf(),
                source,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "flpv"))
            .collect();
        f.sort();
        f
    } else {
        vec![checkpoint.to_path_buf()]
    };
    let models = files
        .iter()
        .map(|f| checkpoint::load(f))
        .collect::<Result<Vec<_>, _>>()?;
    let first = models.first().ok_or(MetricsError::NoModels)?;
    let arch = fedloc_core::Architecture::from_layout(first.layout()).map_err(FedError::from)?;
    let network = Network::new(arch).map_err(FedError::from)?;
    let samples = load_samples(data, cfg)?;
    let refs: Vec<&ParamVector> = models.iter().collect();
    Ok(evaluate(&network, &refs, &samples, "checkpoint", cfg.fl.strategy, &cfg.digest())?)
}

/// Result of one configuration in [`run_variants`].
#[derive(Debug, Clone)]
pub struct VariantRun {
    pub config: SimConfig,
    pub history: Vec<RoundRecord>,
    pub test: MetricsReport,
}

/// Neighbor caps at or above the client count all admit every client.
fn canonical(cfg: &SimConfig) -> SimConfig {
    SimConfig {
        max_similar_clients: cfg.max_similar_clients.min(cfg.clients),
        ..cfg.clone()
    }
}

/// Runs several federated configurations on the same data. Rounds that are
/// warm-up rounds for every variant are run once and the simulation is forked
/// afterwards, which gives the same results as separate runs. Variants that
/// differ only in a neighbor cap at or above the client count run once.
/// Nothing is written to disk.
pub fn run_variants(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    variants: &[SimConfig],
    log: &mut dyn FnMut(&str),
) -> Result<Vec<VariantRun>> {
    let Some(first) = variants.first() else {
        return Ok(Vec::new());
    };
    let network = Network::new(cfg.model.clone()).map_err(FedError::from)?;
    let digest = cfg.digest();
    let eval = cfg.eval.every_round.then_some(&data.test[..]);
    let shared = variants
        .iter()
        .map(|v| match v.strategy {
            fedloc_core::Strategy::SimDeep => v.initial_rounds.min(v.rounds),
            _ => v.rounds,
        })
        .min()
        .unwrap_or(0);
    let mut warm = Federation::new(&network, first.clone(), data.clients.clone())?;
    let mut prefix = Vec::with_capacity(shared);
    for _ in 0..shared {
        prefix.push(warm.step(eval)?);
    }
    log(&format!("shared warm-up: {shared} rounds"));
    let mut done: Vec<VariantRun> = Vec::with_capacity(variants.len());
    for v in variants {
        if let Some(prev) = done.iter().find(|r| canonical(&r.config) == canonical(v)) {
            let mut copy = prev.clone();
            copy.config = v.clone();
            done.push(copy);
            continue;
        }
        let mut fed = warm.fork(v.clone())?;
        let mut history = prefix.clone();
        for _ in shared..v.rounds {
            history.push(fed.step(eval)?);
        }
        let models: Vec<&ParamVector> = fed.clients().iter().map(|c| &c.params).collect();
        let test = evaluate(&network, &models, &data.test, "test", v.strategy, &digest)?;
        log(&format!(
            "{} m={} S={}: test accuracy {:.4}",
            v.strategy, v.similarity_threshold, v.max_similar_clients, test.accuracy
        ));
        done.push(VariantRun {
            config: v.clone(),
            history,
            test,
        });
    }
    Ok(done)
}
