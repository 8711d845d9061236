//! Minimal dense-tensor engine: NCHW primitives, tape-based reverse-mode
//! autodiff, optimizers and the `NAT1` tensor container.

pub mod bundle;
pub mod conv;
pub mod norm;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use bundle::{is_trainable_name, ParameterBundle};
pub use norm::{BnMode, BN_EPS, BN_MOMENTUM};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use tape::{Gradients, ParamId, Tape, Var};
pub use tensor::{argmax, softmax, Tensor};

use crate::error::Result;

/// Runs the backward pass from `loss` and adds every tracked parameter's
/// gradient into `params`. Gradients accumulate until zeroed.
pub fn backward(tape: &Tape, loss: Var, params: &mut ParameterBundle) -> Result<()> {
    let grads = tape.backward(loss)?;
    params.accumulate_grads(tape, &grads)
}
