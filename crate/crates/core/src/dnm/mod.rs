//! Dual Normalization Multitasking model with Combined Dynamic Fusion.
//!
//! Visual and audio encoders produce `v` (`I x T x D`) and `a` (`T x D`); a
//! fusion step turns them into one similarity map `s` over the `I` grid
//! cells; two heads normalize that same map, per cell (sigmoid, then global
//! max as the correspondence score) and globally (softmax attention feeding
//! the classifier).

mod config;
pub mod fusion;
mod model;
mod train;

pub use config::{Fusion, Mode, ModelConfig};
pub use model::{ForwardVars, Model, ModelOutput, CLASSIFIER_PARAMS};
pub use train::{evaluate_model, train, train_model, EpochLog, EvalSummary, TrainConfig, TrainOutcome};

use thiserror::Error;

use crate::metrics::MetricsError;
use crate::scalar::Real;
use crate::tensor::{CheckpointError, Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum DnmError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{what} has shape {got:?}, expected {expected:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("a positive pair needs a class label")]
    MissingClassLabel,
    #[error("need at least two clips to form negative pairs, found {0}")]
    DatasetTooSmall(usize),
    #[error("no positive clips to train on")]
    NoPositives,
}

/// `BCE(z_avc, avc)` plus, for positives, the per-class sigmoid BCE of the
/// logits summed over classes. `mode` drops either term.
pub fn multitask_loss<T: Real>(
    g: &mut Graph<T>,
    z_avc: Var,
    logits: Var,
    avc_label: bool,
    class_label: Option<&[T]>,
    mode: Mode,
) -> Result<Var, DnmError> {
    let mut terms = Vec::new();
    if mode.uses_avc() {
        let y = if avc_label { T::one() } else { T::zero() };
        terms.push(g.bce_loss(z_avc, &[y])?);
    }
    if mode.uses_cls() && avc_label {
        let labels = class_label.ok_or(DnmError::MissingClassLabel)?;
        let p = g.sigmoid(logits)?;
        terms.push(g.bce_loss(p, labels)?);
    }
    match terms.as_slice() {
        [] => Ok(g.constant(Tensor::scalar(T::zero()))),
        [t] => Ok(*t),
        [a, b] => Ok(g.add(*a, *b)?),
        _ => unreachable!(),
    }
}
