//! Adam with decoupled weight decay.

use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments plus a step counter for every parameter of a
/// store. Counters are per parameter so that groups enabled late in training
/// get proper bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub steps: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam { m: zeros.clone(), v: zeros, steps: vec![0; store.len()] }
    }

    /// Updates one parameter in place:
    /// `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
    pub fn update(&mut self, store: &mut ParamStore, id: ParamId, grad: &Tensor, lr: f64, wd: f64) {
        let i = id.index();
        self.steps[i] += 1;
        let t = self.steps[i] as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let decay = 1.0 - lr * wd;
        let p = store.get_mut(id);
        assert_eq!(p.shape(), grad.shape(), "gradient shape for {i}");
        let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
        for (((pj, mj), vj), &g) in p.data_mut().iter_mut().zip(m).zip(v).zip(grad.data()) {
            *mj = BETA1 * *mj + (1.0 - BETA1) * g;
            *vj = BETA2 * *vj + (1.0 - BETA2) * g * g;
            let mhat = *mj / c1;
            let vhat = *vj / c2;
            *pj = *pj * decay - lr * mhat / (vhat.sqrt() + EPSILON);
        }
    }

    /// Applies [`Adam::update`] to every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64, wd: f64) {
        assert_eq!(grads.len(), store.len());
        let ids: Vec<ParamId> = store.ids().collect();
        for (id, g) in ids.into_iter().zip(grads) {
            if let Some(g) = g {
                self.update(store, id, g, lr, wd);
            }
        }
    }
}
