use alloc::string::{String, ToString};
use alloc::vec::Vec;

use thiserror::Error;

use crate::math;
use crate::params::ParamStore;
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("non-finite gradient for parameter `{param}` at step {step}")]
pub struct NonFiniteGradient {
    pub param: String,
    pub step: u64,
}

/// Adam optimizer state with bias correction.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    /// Moments are sized from the store; `beta1 = 0.9`, `beta2 = 0.999`,
    /// `eps = 1e-8`.
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters that received no gradient are updated
    /// as if their gradient were zero, so their moments still decay.
    ///
    /// Nothing is written if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<(), NonFiniteGradient> {
        for id in store.ids() {
            if let Some(g) = grads.param(id) {
                if !g.all_finite() {
                    return Err(NonFiniteGradient {
                        param: store.name(id).to_string(),
                        step: self.step + 1,
                    });
                }
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        for id in (0..store.len()).map(crate::params::ParamId) {
            let g = grads.param(id);
            let m = &mut self.first[id.0];
            let v = &mut self.second[id.0];
            let p = store.get_mut(id);
            for i in 0..p.len() {
                let gi = g.map(|g| g.data()[i]).unwrap_or(0.0);
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                p.data_mut()[i] -= self.lr * m_hat / (math::sqrt(v_hat) + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use alloc::vec;

    fn grads_for(store: &ParamStore, coeff: f64) -> Gradients {
        // loss = coeff * sum(w)
        let mut t = Tape::new();
        let w = t.param(store, crate::params::ParamId(0));
        let s = t.sum(w);
        let l = t.scale(s, coeff);
        t.backward(l).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row(vec![1.0, -2.0]));
        let mut adam = AdamState::new(&store, 0.001);
        { let g = grads_for(&store, 1.0); adam.step(&mut store, &g) }.unwrap();
        let w = store.get(crate::params::ParamId(0));
        assert!((w.data()[0] - (1.0 - 0.001)).abs() < 1e-10);
        assert!((w.data()[1] - (-2.0 - 0.001)).abs() < 1e-10);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row(vec![0.5, 0.25]));
        let before = store.clone();
        let mut adam = AdamState::new(&store, 0.001);
        { let g = grads_for(&store, 0.0); adam.step(&mut store, &g) }.unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row(vec![0.5]));
        let before = store.clone();
        let mut adam = AdamState::new(&store, 0.001);
        let err = { let g = grads_for(&store, f64::NAN); adam.step(&mut store, &g) }.unwrap_err();
        assert_eq!(err.param, "w");
        assert_eq!(store, before);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut store = ParamStore::new();
            store.add("w", Tensor::row(vec![0.3, -0.7, 1.1]));
            let mut adam = AdamState::new(&store, 0.01);
            let mut traj = Vec::new();
            for k in 0..20 {
                let g = grads_for(&store, 1.0 + k as f64 * 0.1);
                adam.step(&mut store, &g).unwrap();
                traj.extend(store.get(crate::params::ParamId(0)).data().iter().map(|x| x.to_bits()));
            }
            traj
        };
        assert_eq!(run(), run());
    }
}
