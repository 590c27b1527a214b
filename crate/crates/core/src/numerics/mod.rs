//! Dense `f64` tensors, a reverse-mode tape, and a finite-difference checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckEntry, GradCheckReport, REL_ERR_FLOOR};
pub use tape::{AttentionProbs, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{matmul, Tensor};

use crate::error::{dim_err, Error, Result};

/// `x · w + b` with `w: [din, dout]` and `b: [dout]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Softmax over entries where `mask` is true; the rest are exactly zero.
pub fn masked_softmax(scores: &Tensor, mask: &[bool]) -> Result<Tensor> {
    if mask.len() != scores.len() {
        return Err(dim_err!("mask length {} for {} scores", mask.len(), scores.len()));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptySegment("mask selects no entries".into()));
    }
    let mut tape = Tape::new();
    let s = tape.constant(scores.clone());
    let y = tape.masked_softmax(s, Some(mask.to_vec()))?;
    Ok(tape.value(y).clone())
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    if x.cols() == 0 {
        return Err(dim_err!("layer_norm over an empty dim"));
    }
    let mut tape = Tape::new();
    let (xv, g, b) = (tape.constant(x.clone()), tape.constant(gamma.clone()), tape.constant(beta.clone()));
    let y = tape.layer_norm(xv, g, b)?;
    Ok(tape.value(y).clone())
}

pub fn gelu(x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.gelu(xv);
    tape.value(y).clone()
}

pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone().reshape(&[1, logits.len()])?);
    let y = tape.cross_entropy(l, &[label])?;
    Ok(tape.value(y).data()[0])
}
