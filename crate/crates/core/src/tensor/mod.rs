//! Dense `f64` matrices, a recorded-tape reverse-mode differentiator, an
//! Adam parameter store and a finite-difference gradient checker.

use alloc::string::String;
use thiserror::Error;

pub mod gradcheck;
mod matrix;
mod params;
mod tape;

pub use matrix::{dot, log_sum_exp, sigmoid, softmax_in_place, Matrix};
pub use params::{AdamConfig, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward called before any forward pass was recorded")]
    EmptyTape,
    #[error("loss must be a 1x1 scalar, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("parameter {0:?} registered twice")]
    DuplicateParam(String),
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check, max_relative_error, relative_error, DEFAULT_STEP};
    use super::*;
    use alloc::vec::Vec;
    use rand::Rng;

    fn rand_matrix<R: Rng>(rng: &mut R, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn backward_before_forward_fails() {
        let mut other = Tape::new();
        let x = other.input(Matrix::zeros(1, 1)).unwrap();
        let mut store = ParamStore::new();
        assert_eq!(Tape::new().backward(x, &mut store).unwrap_err(), TensorError::EmptyTape);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.input(Matrix::from_fn(2, 3, |i, j| (i + j) as f64)).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.gradients(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_input() {
        let xv = Matrix::from_fn(3, 2, |i, j| i as f64 - 0.7 * j as f64);
        let mut tape = Tape::new();
        let x = tape.input(xv.clone()).unwrap();
        let sq = tape.hadamard(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.gradients(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &xv.scale(2.0));
    }

    #[test]
    fn cross_entropy_of_uniform_binary_logits_is_ln2() {
        let mut tape = Tape::new();
        let logits = tape.input(Matrix::zeros(1, 2)).unwrap();
        let loss = tape.cross_entropy(logits, &[Some(0)]).unwrap();
        assert!((tape.value(loss).get(0, 0) - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_ignores_masked_rows() {
        let mut tape = Tape::new();
        let logits = tape.input(Matrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64)).unwrap();
        let loss = tape.cross_entropy(logits, &[None, Some(2)]).unwrap();
        let g = tape.gradients(loss).unwrap();
        assert!(g.get(logits).unwrap().row(0).iter().all(|&v| v == 0.0));
        assert!(tape.value(loss).get(0, 0) >= 0.0);
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Matrix::filled(1, 1, 1e200)).unwrap();
        assert_eq!(tape.hadamard(x, x).unwrap_err(), TensorError::NonFinite { op: "hadamard" });
    }

    /// Every differentiable op on random small shapes, fifty trials each.
    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = crate::rng::stream(11, "gradcheck-ops");
        for trial in 0..50 {
            let n = rng.gen_range(1..4);
            let m = rng.gen_range(2..5);
            let k = rng.gen_range(1..4);
            let mut store = ParamStore::new();
            let a = store.add("a", rand_matrix(&mut rng, n, m)).unwrap();
            let b = store.add("b", rand_matrix(&mut rng, m, k)).unwrap();
            let c = store.add("c", rand_matrix(&mut rng, n, m)).unwrap();
            let bias = store.add("bias", rand_matrix(&mut rng, 1, k)).unwrap();
            let w = rand_matrix(&mut rng, n, k + m);
            let targets: Vec<Option<usize>> = (0..n).map(|i| if i == 1 { None } else { Some(rng.gen_range(0..k + m)) }).collect();
            let checks = check(&mut store, DEFAULT_STEP, |s, t| {
                let a = t.param(s, a)?;
                let b = t.param(s, b)?;
                let c = t.param(s, c)?;
                let bias = t.param(s, bias)?;
                let ab = t.matmul(a, b)?;
                let ab = t.add_row(ab, bias)?;
                let th = t.tanh(ab)?;
                let ac = t.hadamard(a, c)?;
                let sg = t.sigmoid(ac)?;
                let sum = t.add(sg, a)?;
                let ln = t.layer_norm(sum)?;
                let sm = t.row_softmax(ln)?;
                let cat = t.concat_cols(&[th, sm])?;
                let sc = t.layer_scale(cat, 1.7)?;
                let wv = t.input(w.clone())?;
                let mixed = t.hadamard(sc, wv)?;
                let att = t.matmul_t(mixed, cat)?;
                let tr = t.transpose(att)?;
                let re = t.relu(tr)?;
                let sl = t.slice_cols(mixed, 1, k + m - 1)?;
                let g = t.gather_rows(sl, &[0, n - 1, 0])?;
                let stacked = t.concat_rows(&[g, sl])?;
                let ce = t.cross_entropy(mixed, &targets)?;
                let s1 = t.sum(re)?;
                let s2 = t.sum(stacked)?;
                let s12 = t.add(s1, s2)?;
                let sc = t.layer_scale(s12, 0.1)?;
                t.add(sc, ce)
            })
            .unwrap();
            let err = max_relative_error(&checks);
            assert!(err < 1e-4, "trial {trial}: relative error {err}");
        }
    }

    #[test]
    fn three_layer_composition_matches_finite_differences() {
        let mut rng = crate::rng::stream(5, "three-layer");
        let mut store = ParamStore::new();
        let w1 = store.add("w1", rand_matrix(&mut rng, 4, 6)).unwrap();
        let w2 = store.add("w2", rand_matrix(&mut rng, 6, 5)).unwrap();
        let w3 = store.add("w3", rand_matrix(&mut rng, 5, 3)).unwrap();
        let x = rand_matrix(&mut rng, 3, 4);
        let checks = check(&mut store, DEFAULT_STEP, |s, t| {
            let x = t.input(x.clone())?;
            let p1 = t.param(s, w1)?;
            let p2 = t.param(s, w2)?;
            let p3 = t.param(s, w3)?;
            let h = t.matmul(x, p1)?;
            let h = t.tanh(h)?;
            let h = t.matmul(h, p2)?;
            let h = t.sigmoid(h)?;
            let o = t.matmul(h, p3)?;
            t.cross_entropy(o, &[Some(0), Some(2), Some(1)])
        })
        .unwrap();
        for c in &checks {
            assert!(c.relative_error() < 1e-4, "{}: {}", c.param, c.relative_error());
        }
        assert_eq!(relative_error(&Matrix::zeros(1, 1), &Matrix::zeros(1, 1)), 0.0);
    }
}
