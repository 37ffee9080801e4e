//! Report files: JSON lines for round history, tab-separated tables for
//! plotting. Floats are printed in shortest round-trip form, so equal inputs
//! give byte-identical files.

use std::fmt::Write as _;

use fedloc_core::dataset::NUM_CLASSES;
use fedloc_core::fedcore::RoundRecord;
use fedloc_core::ClientDataset;
use serde::Serialize;

use crate::metrics::{HeldoutReport, MetricsReport};

pub const HISTORY_VERSION: u32 = 1;

#[derive(Serialize)]
struct HistoryLine<'a> {
    version: u32,
    #[serde(flatten)]
    record: &'a RoundRecord,
}

/// One JSON object per round, newline terminated.
pub fn history_line(record: &RoundRecord) -> String {
    let mut s = serde_json::to_string(&HistoryLine {
        version: HISTORY_VERSION,
        record,
    })
    .expect("round records serialise");
    s.push('\n');
    s
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn mean<I: IntoIterator<Item = f64>>(it: I) -> Option<f64> {
    let (n, s) = it.into_iter().fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    (n > 0).then(|| s / n as f64)
}

/// Per-round trajectory: aggregation kind, mean accuracy and mean losses.
pub fn rounds_table(history: &[RoundRecord]) -> String {
    let mut out = String::from("round\taggregation\tmean_accuracy\tloss_total\tloss_cls\tloss_ae\tpseudo_labels\n");
    for r in history {
        let losses: Vec<_> = r.train.iter().flatten().collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.round,
            match r.aggregation {
                fedloc_core::fedcore::Aggregation::Global => "global",
                fedloc_core::fedcore::Aggregation::Similarity => "similarity",
            },
            opt(r.mean_accuracy),
            opt(mean(losses.iter().map(|l| l.loss_total))),
            opt(mean(losses.iter().map(|l| l.loss_cls))),
            opt(mean(losses.iter().map(|l| l.loss_ae))),
            r.pseudo_counts.iter().sum::<usize>(),
        );
    }
    out
}

/// One row per evaluation target with overall and per-class accuracy.
pub fn metrics_table(reports: &[&MetricsReport]) -> String {
    let mut out = String::from("target\tstrategy\tmodels\tsamples\taccuracy");
    for c in 0..NUM_CLASSES {
        let _ = write!(out, "\tclass_{c}");
    }
    out.push('\n');
    for r in reports {
        let _ = write!(out, "{}\t{}\t{}\t{}\t{}", r.target, r.strategy, r.models, r.samples, r.accuracy);
        for a in &r.per_class {
            let _ = write!(out, "\t{}", opt(*a));
        }
        out.push('\n');
    }
    out
}

/// One row per phone of a held-out evaluation.
pub fn heldout_table(report: &HeldoutReport) -> String {
    let mut out = String::from("phone_id\tsamples\taccuracy\n");
    for p in &report.phones {
        let _ = writeln!(out, "{}\t{}\t{}", p.phone_id, p.samples, opt(p.accuracy));
    }
    if let Some(pooled) = &report.pooled {
        let _ = writeln!(out, "pooled\t{}\t{}", pooled.samples, pooled.accuracy);
    }
    out
}

/// Per-client sample counts and class histogram (labeled plus hidden truth
/// of unlabeled samples).
pub fn partition_table(clients: &[ClientDataset]) -> String {
    let mut out = String::from("client\tlabeled\tunlabeled\ttotal");
    for c in 0..NUM_CLASSES {
        let _ = write!(out, "\tclass_{c}");
    }
    out.push('\n');
    for c in clients {
        let _ = write!(out, "{}\t{}\t{}\t{}", c.client_id, c.labeled.len(), c.unlabeled.len(), c.len());
        for n in c.class_histogram() {
            let _ = write!(out, "\t{n}");
        }
        out.push('\n');
    }
    out
}

/// Sweep summary: one row per axis value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub test_accuracy: f64,
    pub validation_accuracy: Option<f64>,
    pub duration_secs: f64,
}

pub fn sweep_table(axis: &str, rows: &[SweepRow]) -> String {
    let mut out = format!("{axis}\ttest_accuracy\tvalidation_accuracy\tduration_secs\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.3}",
            r.value,
            r.test_accuracy,
            opt(r.validation_accuracy),
            r.duration_secs
        );
    }
    out
}
