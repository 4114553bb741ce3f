//! Central finite-difference verification of tape gradients.
//!
//! A program is rebuilt from scratch at displaced parameter values, so the
//! builder must be deterministic: any noise it uses has to be captured
//! outside the closure. Straight-through gates are replayed in surrogate
//! mode (sigmoid plus the hard-minus-relaxed offset recorded at the base
//! point), which is the differentiable function whose exact gradient the
//! straight-through backward rule computes.

use crate::error::Result;
use crate::tape::{NodeId, SteMode, Tape};
use crate::tensor::Tensor;

pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn within(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares analytic gradients of a scalar loss against central finite
/// differences with step `h` for every element of every parameter tensor.
///
/// Relative error uses max(|analytic|, |numeric|) as denominator; elements
/// where both sides are below 1e-6 are compared absolutely at 1e-8.
pub fn check_gradients<F>(
    build: F,
    params: &[Tensor],
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |mode: SteMode, values: &[Tensor]| -> Result<(f64, Vec<Tensor>, Tape)> {
        let mut tape = Tape::with_mode(mode);
        let ids: Vec<NodeId> = values.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        let loss_value = tape.value(loss).item();
        Ok((loss_value, ids.iter().map(|&id| tape.value(id).clone()).collect(), tape))
    };

    // Base pass in hard mode: analytic gradients plus recorded gate offsets.
    let mut base_tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| base_tape.constant(p.clone())).collect();
    let loss = build(&mut base_tape, &ids)?;
    let mut grads = base_tape.backward(loss)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| grads.take(id, p.shape()))
        .collect();
    let offsets = base_tape.ste_offsets().to_vec();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };

    for (pi, param) in params.iter().enumerate() {
        for ei in 0..param.len() {
            let mut displaced = params.to_vec();
            displaced[pi].data_mut()[ei] += h;
            let (up, _, _) = eval(SteMode::Surrogate(offsets.clone()), &displaced)?;
            displaced[pi].data_mut()[ei] -= 2.0 * h;
            let (down, _, _) = eval(SteMode::Surrogate(offsets.clone()), &displaced)?;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi].data()[ei];
            let denom = a.abs().max(numeric.abs());
            let rel = if denom < 1e-6 {
                if (a - numeric).abs() < 1e-8 {
                    0.0
                } else {
                    (a - numeric).abs()
                }
            } else {
                (a - numeric).abs() / denom
            };
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pi, ei, a, numeric));
            }
        }
    }
    Ok(report)
}
