//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward loss, so it stays
//! independent of the tape's reverse sweep.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{Matrix, ParamId, ParamStore, Tape, TensorError, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub param: String,
    pub analytic: Matrix,
    pub numeric: Matrix,
}

impl GradCheck {
    /// ‖a − n‖ / (‖a‖ + ‖n‖), zero when both vanish.
    pub fn relative_error(&self) -> f64 {
        relative_error(&self.analytic, &self.numeric)
    }
}

pub fn relative_error(a: &Matrix, n: &Matrix) -> f64 {
    let diff: f64 = a.data().iter().zip(n.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    let denom = a.frobenius() + n.frobenius();
    if denom < 1e-300 {
        0.0
    } else {
        libm::sqrt(diff) / denom
    }
}

/// Compares tape gradients of `loss_fn` against central differences with
/// step `h`, for every parameter in `store`.
pub fn check<F>(store: &mut ParamStore, h: f64, mut loss_fn: F) -> Result<Vec<GradCheck>, TensorError>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var, TensorError>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = loss_fn(store, &mut tape)?;
    tape.backward(loss, store)?;
    let ids: Vec<ParamId> = store.ids().collect();
    let analytic: Vec<Matrix> = ids.iter().map(|&id| store.grad(id).clone()).collect();
    store.zero_grads();

    let mut eval = |store: &ParamStore| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let loss = loss_fn(store, &mut tape)?;
        Ok(tape.value(loss).get(0, 0))
    };

    let mut out = Vec::with_capacity(ids.len());
    for (id, analytic) in ids.into_iter().zip(analytic) {
        let (rows, cols) = store.value(id).shape();
        let mut numeric = Matrix::zeros(rows, cols);
        for k in 0..rows * cols {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig - h;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig;
            numeric.data_mut()[k] = (plus - minus) / (2.0 * h);
        }
        out.push(GradCheck { param: store.name(id).to_string(), analytic, numeric });
    }
    Ok(out)
}

/// Largest relative error across all checked parameters.
pub fn max_relative_error(checks: &[GradCheck]) -> f64 {
    checks.iter().map(GradCheck::relative_error).fold(0.0, f64::max)
}
