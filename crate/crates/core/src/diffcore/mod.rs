//! Dense tensors, reverse-mode differentiation, MLPs, optimizers and losses.

pub mod loss;
pub mod mlp;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use loss::{bce_with_logits, cross_entropy, cross_entropy_per_sample, kd_loss, kd_loss_per_sample};
pub use mlp::{Activation, BoundMlp, Dense, Mlp};
pub use optim::{OptimKind, OptimState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{argmax, log_softmax, sigmoid, softmax, softplus, Tensor};

/// Runs one optimizer update from a finished tape.
///
/// `vars` are the tape handles of `params`, in the same order.
pub fn apply_step(
    tape: &Tape,
    loss: Var,
    vars: &[Var],
    params: &mut [&mut Tensor],
    names: &[String],
    opt: &mut OptimState,
) -> crate::Result<f64> {
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    let grads = grads.collect(vars, tape);
    opt.step(params, &grads, names)?;
    Ok(value)
}
