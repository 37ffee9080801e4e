//! Confidence-thresholded pseudo-labels for unlabeled local samples.

use std::sync::Arc;

use serde::Serialize;

use crate::dataset::{ClassId, Sample};
use crate::models::{argmax_class, Network, TrainExample};
use crate::nn::NnError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PseudoLabel {
    /// Position in the client's unlabeled pool.
    pub index: usize,
    #[serde(skip)]
    pub features: Arc<[f64]>,
    pub label: ClassId,
    pub confidence: f64,
}

impl PseudoLabel {
    pub fn example(&self) -> TrainExample {
        TrainExample {
            features: Arc::clone(&self.features),
            label: self.label,
        }
    }
}

/// Keeps every sample whose top softmax probability is at least `threshold`.
pub fn pseudo_label(network: &Network, params: &[f64], unlabeled: &[Sample], threshold: f64) -> Result<Vec<PseudoLabel>, NnError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(NnError::Invalid(format!("pseudo-label threshold must be in (0, 1], got {threshold}")));
    }
    let rows: Vec<&[f64]> = unlabeled.iter().map(|s| &s.features[..]).collect();
    let probs = network.predict_proba(params, &rows)?;
    let mut pool = Vec::new();
    for (index, p) in probs.rows().into_iter().enumerate() {
        let p = p.as_slice().expect("standard layout");
        let label = argmax_class(p);
        let confidence = p[label.index()];
        if confidence >= threshold {
            pool.push(PseudoLabel {
                index,
                features: Arc::clone(&unlabeled[index].features),
                label,
                confidence,
            });
        }
    }
    Ok(pool)
}

/// Fraction of pseudo-labels that match the hidden ground truth; `None` for
/// an empty pool or when the truth is unknown.
pub fn pseudo_precision(pool: &[PseudoLabel], truth: &[Option<ClassId>]) -> Option<f64> {
    let mut known = 0usize;
    let mut right = 0usize;
    for p in pool {
        if let Some(Some(t)) = truth.get(p.index) {
            known += 1;
            right += usize::from(*t == p.label);
        }
    }
    (known > 0).then(|| right as f64 / known as f64)
}
