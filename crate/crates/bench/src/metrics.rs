//! Accuracy reports for one or several (personalized) models.

use std::collections::BTreeMap;

use fedloc_core::dataset::{Sample, NUM_CLASSES};
use fedloc_core::nn::{NnError, ParamVector};
use fedloc_core::{Network, Strategy};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("evaluation set is empty")]
    Empty,
    #[error("evaluation sample {0} has no label")]
    Unlabeled(usize),
    #[error("no models to evaluate")]
    NoModels,
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhoneAccuracy {
    pub phone_id: u32,
    pub samples: usize,
    /// `None` when the phone has no samples.
    pub accuracy: Option<f64>,
}

/// Evaluation of one model set on one sample set. With several models every
/// figure is the unweighted mean over models, and the confusion matrix is the
/// mean of the per-model count matrices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub target: String,
    pub strategy: Strategy,
    pub samples: usize,
    pub models: usize,
    pub accuracy: f64,
    pub per_model_accuracy: Vec<f64>,
    /// Per class; `None` for classes absent from the samples.
    pub per_class: Vec<Option<f64>>,
    pub class_counts: Vec<usize>,
    pub per_phone: Vec<PhoneAccuracy>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<f64>>,
    pub config_digest: String,
    /// Wall-clock seconds of the whole run; kept out of serialised reports so
    /// they stay reproducible.
    #[serde(skip)]
    pub duration_secs: f64,
}

/// Drops repeated parameter sets; identical models give identical results.
fn distinct<'a>(models: &[&'a ParamVector]) -> Vec<&'a ParamVector> {
    let mut out: Vec<&ParamVector> = Vec::new();
    for &m in models {
        if !out.iter().any(|o| o.values() == m.values()) {
            out.push(m);
        }
    }
    out
}

/// Predictions of every model on `samples`, one row per model. Clients that
/// share parameters share a row, so the mean still weights every client once.
fn predictions(network: &Network, models: &[&ParamVector], samples: &[Sample]) -> Result<Vec<Vec<usize>>, MetricsError> {
    let rows: Vec<&[f64]> = samples.iter().map(|s| &s.features[..]).collect();
    let unique = distinct(models);
    let mut cache = Vec::with_capacity(unique.len());
    for m in &unique {
        cache.push(network.classify(m.values(), &rows)?.into_iter().map(|c| c.index()).collect::<Vec<_>>());
    }
    Ok(models
        .iter()
        .map(|m| {
            let k = unique.iter().position(|u| u.values() == m.values()).expect("listed");
            cache[k].clone()
        })
        .collect())
}

pub fn evaluate(
    network: &Network,
    models: &[&ParamVector],
    samples: &[Sample],
    target: &str,
    strategy: Strategy,
    config_digest: &str,
) -> Result<MetricsReport, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    if models.is_empty() {
        return Err(MetricsError::NoModels);
    }
    let truth: Vec<usize> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| s.label.map(|c| c.index()).ok_or(MetricsError::Unlabeled(i)))
        .collect::<Result<_, _>>()?;
    let preds = predictions(network, models, samples)?;
    let m = models.len() as f64;

    let mut confusion = vec![vec![0.0; NUM_CLASSES]; NUM_CLASSES];
    let mut class_counts = vec![0usize; NUM_CLASSES];
    let mut phone: BTreeMap<u32, (usize, f64)> = BTreeMap::new();
    for &t in &truth {
        class_counts[t] += 1;
    }
    let mut per_model_accuracy = Vec::with_capacity(models.len());
    for pred in &preds {
        let mut counts = vec![vec![0usize; NUM_CLASSES]; NUM_CLASSES];
        let mut right = 0usize;
        for (k, (&t, &p)) in truth.iter().zip(pred).enumerate() {
            counts[t][p] += 1;
            right += usize::from(t == p);
            let e = phone.entry(samples[k].phone_id).or_insert((0, 0.0));
            e.1 += f64::from(u8::from(t == p)) / m;
        }
        per_model_accuracy.push(right as f64 / samples.len() as f64);
        for (row, crow) in confusion.iter_mut().zip(&counts) {
            for (c, &n) in row.iter_mut().zip(crow) {
                *c += n as f64 / m;
            }
        }
    }
    for s in samples {
        phone.entry(s.phone_id).or_insert((0, 0.0)).0 += 1;
    }
    let accuracy = per_model_accuracy.iter().sum::<f64>() / m;
    let per_class = (0..NUM_CLASSES)
        .map(|c| (class_counts[c] > 0).then(|| confusion[c][c] / class_counts[c] as f64))
        .collect();
    let per_phone = phone
        .into_iter()
        .map(|(phone_id, (n, right))| PhoneAccuracy {
            phone_id,
            samples: n,
            accuracy: Some(right / n as f64),
        })
        .collect();
    Ok(MetricsReport {
        target: target.into(),
        strategy,
        samples: samples.len(),
        models: models.len(),
        accuracy,
        per_model_accuracy,
        per_class,
        class_counts,
        per_phone,
        confusion,
        config_digest: config_digest.into(),
        duration_secs: 0.0,
    })
}

/// Per-phone accuracy on the given phones plus the pooled figure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeldoutReport {
    pub phones: Vec<PhoneAccuracy>,
    pub pooled: Option<MetricsReport>,
}

pub fn evaluate_heldout_phones(
    network: &Network,
    models: &[&ParamVector],
    samples: &[Sample],
    phone_ids: &[u32],
    strategy: Strategy,
    config_digest: &str,
) -> Result<HeldoutReport, MetricsError> {
    let chosen: Vec<Sample> = samples.iter().filter(|s| phone_ids.contains(&s.phone_id)).cloned().collect();
    if chosen.is_empty() {
        return Ok(HeldoutReport {
            phones: phone_ids
                .iter()
                .map(|&phone_id| PhoneAccuracy {
                    phone_id,
                    samples: 0,
                    accuracy: None,
                })
                .collect(),
            pooled: None,
        });
    }
    let pooled = evaluate(network, models, &chosen, "heldout_phones", strategy, config_digest)?;
    let phones = phone_ids
        .iter()
        .map(|&phone_id| {
            pooled
                .per_phone
                .iter()
                .find(|p| p.phone_id == phone_id)
                .cloned()
                .unwrap_or(PhoneAccuracy {
                    phone_id,
                    samples: 0,
                    accuracy: None,
                })
        })
        .collect();
    Ok(HeldoutReport {
        phones,
        pooled: Some(pooled),
    })
}
