//! First-order optimizers over a [`ParamStore`].

use crate::params::{GradBuffer, ParamStore};
use crate::tensor::Tensor;

pub trait Optimizer {
    fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer);
}

/// Plain gradient descent.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer) {
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let g = grads.get(id).data();
            for (p, g) in store.get_mut(id).data_mut().iter_mut().zip(g) {
                *p -= self.lr * g;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer) {
        if self.m.is_empty() {
            self.m = store.iter().map(|(_, _, v)| Tensor::zeros(v.shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id).data();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                p[k] -= self.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::{Binder, Init};

    fn quadratic_grads(store: &ParamStore) -> GradBuffer {
        let tape = Tape::new();
        let b = Binder::trainable(&tape, store);
        let id = store.id("x").unwrap();
        let x = b.param(id).add_scalar(-3.0).unwrap();
        let loss = x.mul(x).unwrap().sum().unwrap();
        let mut g = tape.backward(loss).unwrap();
        b.collect(&mut g)
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new(0);
        let id = store.register("x", &[2], Init::Zeros);
        let mut adam = Adam::new(0.1);
        let g = quadratic_grads(&store);
        adam.step(&mut store, &g);
        for &v in store.get(id).data() {
            assert!((v - 0.1).abs() < 1e-6);
        }
    }

    #[test]
    fn both_optimizers_reach_the_minimum() {
        for adam in [false, true] {
            let mut store = ParamStore::new(0);
            let id = store.register("x", &[3], Init::Zeros);
            let mut opt: Box<dyn Optimizer> = if adam { Box::new(Adam::new(0.1)) } else { Box::new(Sgd { lr: 0.1 }) };
            for _ in 0..500 {
                let g = quadratic_grads(&store);
                opt.step(&mut store, &g);
            }
            assert!(store.get(id).data().iter().all(|v| (v - 3.0).abs() < 1e-3));
        }
    }
}
