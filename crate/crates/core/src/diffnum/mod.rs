//! Minimal reverse-mode differentiable numerics.
//!
//! [`Tensor`] is a dense row-major buffer, [`Tape`] records matrix
//! operations and runs the backward sweep, [`nn`] composes the layers the
//! matching and fusion networks are built from, and [`ParamStore`] holds the
//! learnable tensors with their AdamW state and checkpoint codec.

pub mod gradcheck;
pub mod nn;
mod store;
mod tape;
mod tensor;

use std::collections::BTreeMap;

pub use nn::{Activation, DecoderShape, Graph};
pub use store::{
    Checkpoint, ParamStore, SerializedTensor, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
    CHECKPOINT_FORMAT_VERSION,
};
pub use tape::{Grads, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{softmax_axis, Tensor};

use crate::error::Result;
use crate::scalar::Scalar;

/// Mean softmax cross-entropy of `logits` rows against class indices.
pub fn cross_entropy<S: Scalar>(tape: &mut Tape<S>, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, targets)
}

pub fn adamw_step<S: Scalar>(
    store: &mut ParamStore<S>,
    grads: &BTreeMap<String, Tensor<S>>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    store.adamw_step(grads, lr, weight_decay)
}
