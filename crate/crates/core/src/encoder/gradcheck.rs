//! Finite-difference gradient verification.
//!
//! The oracle perturbs each parameter coordinate and re-evaluates the loss
//! through the forward path only, so it is independent of the hand-written
//! backward pass it checks. Run it on f64 states; ULP noise at f32 swamps
//! the comparison.

use super::{EncoderState, SequenceExample};
use crate::error::Result;
use crate::num::{c, Real};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub worst_index: (usize, usize),
    pub coordinates_checked: usize,
}

/// Relative error with a noise floor: coordinates whose gradients sit below
/// `FLOOR` are compared absolutely against it. The subtraction in a central
/// difference carries ~1e-11 of roundoff at f64 (loss magnitude x machine
/// epsilon / 2e-5), which would dominate a bare quotient on near-zero
/// gradients; real formula errors scale with the gradient and stay far
/// above this floor.
fn rel_error(a: f64, b: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

/// Central finite differences over every parameter coordinate.
pub fn finite_difference_check<F: Real>(
    state: &EncoderState<F>,
    examples: &[SequenceExample],
    epsilon: f64,
) -> Result<GradCheckReport> {
    let (_, analytic, _) = state.compute_loss_and_grads(examples)?;
    let mut probe = state.clone();
    let eps = c::<F>(epsilon);
    let two_eps = 2.0 * epsilon;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        worst_index: (0, 0),
        coordinates_checked: 0,
    };

    let shapes: Vec<(String, (usize, usize))> = state
        .params
        .tensors()
        .into_iter()
        .map(|(name, t)| (name, t.dim()))
        .collect();

    for (tensor_idx, (name, (rows, cols))) in shapes.iter().enumerate() {
        for r in 0..*rows {
            for cidx in 0..*cols {
                let original = {
                    let tensors = probe.params.tensors();
                    tensors[tensor_idx].1[[r, cidx]]
                };
                set(&mut probe, tensor_idx, r, cidx, original + eps);
                let (loss_plus, _) = probe.masked_loss(examples)?;
                set(&mut probe, tensor_idx, r, cidx, original - eps);
                let (loss_minus, _) = probe.masked_loss(examples)?;
                set(&mut probe, tensor_idx, r, cidx, original);

                let fd = (loss_plus - loss_minus) / two_eps;
                let an = {
                    let tensors = analytic.tensors();
                    tensors[tensor_idx].1[[r, cidx]].to_f64().unwrap()
                };
                let err = rel_error(fd, an);
                report.coordinates_checked += 1;
                if err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst_tensor = name.clone();
                    report.worst_index = (r, cidx);
                }
            }
        }
    }
    Ok(report)
}

fn set<F: Real>(state: &mut EncoderState<F>, tensor_idx: usize, r: usize, c_: usize, value: F) {
    let mut tensors = state.params.tensors_mut();
    tensors[tensor_idx].1[[r, c_]] = value;
}
