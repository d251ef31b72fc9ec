//! Language-head cross-entropy and waypoint L1 losses with their gradients.

use thiserror::Error;
use uavnav_core::geometry::yaw_diff;
use uavnav_core::Scalar;

use crate::model::Waypoints;
use crate::tensor::{log_sum_exp, softmax_in_place};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("supervision mask selects no position")]
    EmptyMask,
    #[error("{rows} logit rows for {targets} targets and {mask} mask entries")]
    Shape { rows: usize, targets: usize, mask: usize },
}

/// Mean cross-entropy over the rows selected by `mask`; row `t` of `logits`
/// is scored against `targets[t]`. Returns the loss and its gradient with
/// respect to `logits`.
pub fn lm_loss<S: Scalar>(logits: &[S], vocab: usize, targets: &[u32], mask: &[bool]) -> Result<(S, Vec<S>), LossError> {
    let rows = logits.len() / vocab.max(1);
    if rows * vocab != logits.len() || rows != targets.len() || rows != mask.len() {
        return Err(LossError::Shape {
            rows,
            targets: targets.len(),
            mask: mask.len(),
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(LossError::EmptyMask);
    }
    let inv = S::one() / S::c(count as f64);
    let mut loss = S::zero();
    let mut grad = vec![S::zero(); logits.len()];
    for t in (0..rows).filter(|&t| mask[t]) {
        let row = &logits[t * vocab..(t + 1) * vocab];
        let y = targets[t] as usize;
        loss += log_sum_exp(row) - row[y];
        let g = &mut grad[t * vocab..(t + 1) * vocab];
        g.copy_from_slice(row);
        softmax_in_place(g);
        g[y] -= S::one();
        g.iter_mut().for_each(|v| *v *= inv);
    }
    Ok((loss * inv, grad))
}

/// Summed L1 distance over the three steps and `(x, y, z, yaw)`, with the yaw
/// term taken on the wrapped difference. Returns the loss and its
/// (sub)gradient with respect to `predicted`.
pub fn wp_loss<S: Scalar>(predicted: &Waypoints<S>, expert: &Waypoints<S>) -> (S, Waypoints<S>) {
    let mut loss = S::zero();
    let mut grad = [[S::zero(); 4]; 3];
    for k in 0..3 {
        for j in 0..4 {
            let d = if j == 3 {
                yaw_diff(predicted[k][j], expert[k][j])
            } else {
                predicted[k][j] - expert[k][j]
            };
            loss += d.abs();
            grad[k][j] = if d > S::zero() {
                S::one()
            } else if d < S::zero() {
                -S::one()
            } else {
                S::zero()
            };
        }
    }
    (loss, grad)
}
