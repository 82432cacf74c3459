use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{Matrix, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
struct Slot {
    name: String,
    value: Matrix,
    grad: Matrix,
    m: Matrix,
    v: Matrix,
}

/// Named parameters with gradient accumulators and Adam moments.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    slots: Vec<Slot>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: &str, value: Matrix) -> Result<ParamId, TensorError> {
        if self.id_of(name).is_some() {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        value.ensure_finite("param")?;
        let (r, c) = value.shape();
        self.slots.push(Slot {
            name: name.to_string(),
            value,
            grad: Matrix::zeros(r, c),
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
        });
        Ok(ParamId(self.slots.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.slots[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.slots[id.0].grad
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn parameter_count(&self) -> usize {
        self.slots.iter().map(|s| s.value.data().len()).sum()
    }

    /// Replaces a parameter value, keeping the shape contract.
    pub fn set_value(&mut self, id: ParamId, value: Matrix) -> Result<(), TensorError> {
        let slot = &mut self.slots[id.0];
        if slot.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch { op: "set_value", lhs: slot.value.shape(), rhs: value.shape() });
        }
        value.ensure_finite("set_value")?;
        slot.value = value;
        Ok(())
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Matrix) -> Result<(), TensorError> {
        let slot = &mut self.slots[id.0];
        if slot.grad.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch { op: "accumulate_grad", lhs: slot.grad.shape(), rhs: g.shape() });
        }
        slot.grad.add_assign(g);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for s in &mut self.slots {
            s.grad.fill(0.0);
        }
    }

    /// Multiplies every accumulated gradient by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        for s in &mut self.slots {
            s.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Global L2 norm of the accumulated gradients.
    pub fn grad_norm(&self) -> f64 {
        libm::sqrt(self.slots.iter().flat_map(|s| s.grad.data()).map(|g| g * g).sum())
    }

    /// One bias-corrected Adam update over every parameter, then clears the
    /// gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(cfg.beta1, t);
        let bc2 = 1.0 - libm::pow(cfg.beta2, t);
        for s in &mut self.slots {
            let g = s.grad.data();
            let m = s.m.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            }
            let v = s.v.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            }
            let (m, v) = (s.m.data(), s.v.data());
            for ((w, &mi), &vi) in s.value.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *w -= cfg.lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
            }
            s.grad.fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64]) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Matrix::row_vector(values)).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut s, id) = store_with(&[0.5, -1.0, 2.0]);
        s.adam_step(&AdamConfig::default());
        assert_eq!(s.value(id).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g and v̂ = g² after one step, so |Δw| = lr·|g|/(|g|+eps).
        let (mut s, id) = store_with(&[1.0, 1.0]);
        s.accumulate_grad(id, &Matrix::row_vector(&[3.0, -0.2])).unwrap();
        let cfg = AdamConfig::with_lr(0.01);
        s.adam_step(&cfg);
        let expected = [1.0 - 0.01 * 3.0 / (3.0 + 1e-8), 1.0 + 0.01 * 0.2 / (0.2 + 1e-8)];
        for (w, e) in s.value(id).data().iter().zip(expected) {
            assert!((w - e).abs() < 1e-15);
        }
        assert!(s.grad(id).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn identical_stores_stay_identical() {
        let (mut a, ia) = store_with(&[0.1, 0.2]);
        let (mut b, ib) = store_with(&[0.1, 0.2]);
        for k in 0..5 {
            let g = Matrix::row_vector(&[k as f64 * 0.3 - 0.4, 1.0 / (k + 1) as f64]);
            a.accumulate_grad(ia, &g).unwrap();
            b.accumulate_grad(ib, &g).unwrap();
            a.adam_step(&AdamConfig::default());
            b.adam_step(&AdamConfig::default());
        }
        assert_eq!(a.value(ia), b.value(ib));
    }

    #[test]
    fn duplicate_names_rejected() {
        let (mut s, _) = store_with(&[1.0]);
        assert!(matches!(s.add("w", Matrix::zeros(1, 1)), Err(TensorError::DuplicateParam(_))));
    }
}
