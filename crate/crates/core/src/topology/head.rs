//! Task conditioning: one-hot codes and the controller-generated head.

use crate::autograd::{Tape, Var};
use crate::error::{Result, SspError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One-hot task code of length `T`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskCode {
    index: usize,
    len: usize,
}

pub fn one_hot(label: usize, task_count: usize) -> Result<TaskCode> {
    if label >= task_count {
        return Err(SspError::Label { label, task_count });
    }
    Ok(TaskCode { index: label, len: task_count })
}

impl TaskCode {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn to_vec<T: Scalar>(&self) -> Vec<T> {
        (0..self.len).map(|i| if i == self.index { T::one() } else { T::zero() }).collect()
    }
}

/// `[N, T]` batch of codes.
pub fn code_batch<T: Scalar>(codes: &[TaskCode]) -> Result<Tensor<T>> {
    let t = codes.first().map(|c| c.len).ok_or_else(|| SspError::contract("code_batch", "empty batch"))?;
    if codes.iter().any(|c| c.len != t) {
        return Err(SspError::contract("code_batch", "codes of different lengths"));
    }
    Tensor::new(&[codes.len(), t], codes.iter().flat_map(|c| c.to_vec()).collect())
}

/// Rows generated by the controller for a head over `channels` features:
/// `W1 [hidden x C]`, `b1 [hidden]`, `W2 [C x hidden]`, `b2 [C]`.
pub fn controller_outputs(channels: usize, hidden: usize) -> usize {
    2 * hidden * channels + hidden + channels
}

/// Applies the generated two-layer 1x1 head to `x: [N, C, ...]`.
///
/// The controller maps `GAP(context) ++ code` through `w: [P, C_ctx + T]`,
/// `b: [P]` to the head's weights, separately for every sample.
pub fn dynamic_head<T: Scalar>(tape: &mut Tape<T>, x: Var, context: Var, code: Var, w: Var, b: Var, hidden: usize) -> Result<Var> {
    let op = "dynamic_head";
    let c = *tape.shape(x).get(1).ok_or_else(|| SspError::contract(op, "features need a channel axis"))?;
    let pooled = tape.global_avg_pool(context)?;
    let (n, ctx) = (tape.shape(pooled)[0], tape.shape(pooled)[1]);
    let cs = tape.shape(code).to_vec();
    let ws = tape.shape(w).to_vec();
    if cs.len() != 2 || cs[0] != n {
        return Err(SspError::contract(op, format!("task code shape {cs:?}, expected [{n}, T]")));
    }
    if ws.len() != 2 || ws[1] != ctx + cs[1] {
        return Err(SspError::Config(format!(
            "controller expects {} inputs ({} pooled features + T), task code has T={}",
            ws.get(1).copied().unwrap_or(0),
            ctx,
            cs[1]
        )));
    }
    if ws[0] != controller_outputs(c, hidden) {
        return Err(SspError::contract(op, format!("controller emits {} values, head needs {}", ws[0], controller_outputs(c, hidden))));
    }
    let z = tape.concat(&[pooled, code])?;
    let params = tape.linear(z, w, b)?;
    let mut at = 0;
    let mut take = |tape: &mut Tape<T>, len: usize| {
        let v = tape.slice_channels(params, at, len);
        at += len;
        v
    };
    let w1 = take(tape, hidden * c)?;
    let b1 = take(tape, hidden)?;
    let w2 = take(tape, c * hidden)?;
    let b2 = take(tape, c)?;
    let h = tape.pointwise_dynamic(x, w1, b1)?;
    let h = tape.relu(h);
    tape.pointwise_dynamic(h, w2, b2)
}
