//! Adam with global-norm gradient clipping.

use alloc::vec::Vec;

use crate::params::{Grads, ParamStore};
use crate::tensor::Tensor;

/// Rescale `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping. A zero or non-finite limit disables clipping.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && max_norm.is_finite() && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(self.beta1, t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, t as f64);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = grads.get(id).data();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= self.lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[3], vec![1.0, 1.0, 1.0]).unwrap());
        let mut grads = Grads::zeros_like(&store);
        grads.tensors[0] = Tensor::new(&[3], vec![2.0, -0.5, 0.0]).unwrap();
        let mut adam = Adam::new(&store, 0.1);
        adam.step(&mut store, &grads);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 1.1).abs() < 1e-6);
        assert_eq!(w[2], 1.0);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[2], vec![3.0, -4.0]).unwrap());
        let mut adam = Adam::new(&store, 0.05);
        for _ in 0..2000 {
            let mut g = Grads::zeros_like(&store);
            g.tensors[0] = Tensor::new(&[2], store.get(id).data().iter().map(|w| 2.0 * w).collect()).unwrap();
            adam.step(&mut store, &g);
        }
        assert!(store.get(id).data().iter().all(|w| w.abs() < 1e-2));
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2]));
        let mut g = Grads::zeros_like(&store);
        g.tensors[0] = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g.tensors[0].data(), &[3.0, 4.0]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
        assert!((g.tensors[0].data()[0] - 0.6).abs() < 1e-12);
    }
}
