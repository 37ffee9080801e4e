//! Minimal reverse-mode neural network toolkit, 64-bit floats throughout.

mod adam;
pub mod layers;
mod loss;
mod objective;
mod param;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use layers::{dense_apply, dsconv1d_apply, Dense, Dropout, DsConv1d};
pub use loss::{mse, softmax, softmax_cross_entropy};
pub use objective::{
    backprop, central_difference, finite_diff_grad, gradient_check, max_relative_error, train_epochs, GradCheck, Objective, Proximal, TrainStepReport,
};
pub use param::{Layout, ParamVector, Segment};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: String,
        expected: usize,
        found: usize,
    },
    #[error("parameter layouts differ")]
    LayoutMismatch,
    #[error("non-finite value after layer {layer}")]
    NonFinite { layer: String },
    #[error("{0}")]
    Invalid(String),
}
