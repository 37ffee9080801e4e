//! Differentiable objectives, reverse-mode gradients, the central-difference
//! oracle and the mini-batch training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::param::ParamVector;
use super::NnError;
use crate::rng::StreamRng;

/// Losses of one batch. `loss_total = loss_cls + lambda * loss_ae`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStepReport {
    pub loss_ae: f64,
    pub loss_cls: f64,
    pub loss_total: f64,
    pub batch_size: usize,
}

/// A loss over batches of `Item`s with an exact gradient.
pub trait Objective: Sync {
    type Item: Sync;

    fn num_params(&self) -> usize;

    /// Adds the batch-mean gradient to `grad`. Dropout is active iff
    /// `dropout` is supplied.
    fn forward_backward(
        &self,
        params: &[f64],
        batch: &[&Self::Item],
        dropout: Option<&mut StreamRng>,
        grad: &mut [f64],
    ) -> Result<TrainStepReport, NnError>;

    /// Forward pass only, dropout off.
    fn evaluate(&self, params: &[f64], batch: &[&Self::Item]) -> Result<TrainStepReport, NnError>;
}

/// Exact gradient of the batch-mean loss.
pub fn backprop<O: Objective>(
    objective: &O,
    params: &ParamVector,
    batch: &[&O::Item],
    dropout: Option<&mut StreamRng>,
) -> Result<(ParamVector, TrainStepReport), NnError> {
    if batch.is_empty() {
        return Err(NnError::Invalid("backprop needs a nonempty batch".into()));
    }
    let mut grad = ParamVector::zeros(params.layout().clone());
    let report = objective.forward_backward(params.values(), batch, dropout, grad.values_mut())?;
    Ok((grad, report))
}

/// Central differences `(f(w + h e_k) - f(w - h e_k)) / 2h` for every k.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, w: &[f64], h: f64) -> Result<Vec<f64>, NnError> {
    if !(h > 0.0) {
        return Err(NnError::Invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = w.to_vec();
    let mut out = Vec::with_capacity(w.len());
    for k in 0..w.len() {
        probe[k] = w[k] + h;
        let up = f(&probe);
        probe[k] = w[k] - h;
        let down = f(&probe);
        probe[k] = w[k];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Gradient oracle: central differences of the dropout-free total loss.
pub fn finite_diff_grad<O: Objective>(
    objective: &O,
    params: &ParamVector,
    batch: &[&O::Item],
    h: f64,
) -> Result<ParamVector, NnError> {
    let mut failure = None;
    let g = central_difference(
        |w| match objective.evaluate(w, batch) {
            Ok(r) => r.loss_total,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        params.values(),
        h,
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    ParamVector::from_values(params.layout().clone(), g)
}

/// Per-coordinate relative error `|a - b| / max(|a|, |b|)`; coordinates where
/// both are below `floor` are divided by `floor` instead.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Max relative error between backprop and the step-`h` oracle.
    pub max_rel_error: f64,
    /// Coordinates where the step-`h` and step-`h/4` oracles disagree, i.e.
    /// the loss has a ReLU kink within `h` and central differences are not
    /// a valid reference there.
    pub kinked: usize,
}

/// Runs backprop and the finite-difference oracle (steps `h` and `h/4`) on
/// one batch, dropout off.
pub fn gradient_check<O: Objective>(
    objective: &O,
    params: &ParamVector,
    batch: &[&O::Item],
    h: f64,
) -> Result<GradCheck, NnError> {
    const FLOOR: f64 = 1e-6;
    let (g, _) = backprop(objective, params, batch, None)?;
    let coarse = finite_diff_grad(objective, params, batch, h)?;
    let fine = finite_diff_grad(objective, params, batch, h / 4.0)?;
    let kinked = coarse
        .values()
        .iter()
        .zip(fine.values())
        .filter(|(c, f)| max_relative_error(&[**c], &[**f], FLOOR) > 1e-5)
        .count();
    Ok(GradCheck {
        max_rel_error: max_relative_error(g.values(), coarse.values(), FLOOR),
        kinked,
    })
}

/// FedProx term `(mu / 2) * ||w - anchor||^2`.
#[derive(Debug, Clone, Copy)]
pub struct Proximal<'a> {
    pub mu: f64,
    pub anchor: &'a [f64],
}

impl Proximal<'_> {
    pub fn add_gradient(&self, params: &[f64], grad: &mut [f64]) {
        for ((g, w), a) in grad.iter_mut().zip(params).zip(self.anchor) {
            *g += self.mu * (w - a);
        }
    }

    pub fn penalty(&self, params: &[f64]) -> f64 {
        0.5 * self.mu * params.iter().zip(self.anchor).map(|(w, a)| (w - a) * (w - a)).sum::<f64>()
    }
}

/// Runs `epochs` passes of shuffled mini-batch Adam over `items` and returns
/// the sample-weighted mean report of each epoch.
///
/// The proximal penalty (if any) enters the gradient but not the report.
#[allow(clippy::too_many_arguments)]
pub fn train_epochs<O: Objective>(
    objective: &O,
    params: &mut [f64],
    items: &[O::Item],
    epochs: usize,
    batch_size: usize,
    adam: &mut AdamState,
    proximal: Option<Proximal<'_>>,
    rng: &mut StreamRng,
) -> Result<Vec<TrainStepReport>, NnError> {
    if batch_size == 0 {
        return Err(NnError::Invalid("batch size must be positive".into()));
    }
    if params.len() != objective.num_params() {
        return Err(NnError::Shape {
            context: "train_epochs params".into(),
            expected: objective.num_params(),
            found: params.len(),
        });
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut grad = vec![0.0; params.len()];
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut sums = TrainStepReport::default();
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&O::Item> = chunk.iter().map(|&i| &items[i]).collect();
            grad.iter_mut().for_each(|g| *g = 0.0);
            let r = objective.forward_backward(params, &batch, Some(rng), &mut grad)?;
            if let Some(p) = proximal.as_ref().filter(|p| p.mu != 0.0) {
                p.add_gradient(params, &mut grad);
            }
            adam_step(params, &grad, adam)?;
            let n = batch.len() as f64;
            sums.loss_ae += r.loss_ae * n;
            sums.loss_cls += r.loss_cls * n;
            sums.loss_total += r.loss_total * n;
            sums.batch_size += batch.len();
        }
        if sums.batch_size > 0 {
            let n = sums.batch_size as f64;
            sums.loss_ae /= n;
            sums.loss_cls /= n;
            sums.loss_total /= n;
        }
        history.push(sums);
    }
    Ok(history)
}
