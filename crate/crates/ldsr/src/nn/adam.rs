//! Adam optimizer with optional global-norm gradient clipping. Moment
//! state is kept in f64 regardless of the training element type.

use super::{PId, ParamStore};
use crate::tensor::Elem;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
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

    /// One update over the collected gradients. Parameters without a
    /// gradient this step keep their moments untouched.
    pub fn step<E: Elem>(&mut self, store: &mut ParamStore<E>, grads: &[(PId, Vec<E>)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        if self.m.len() < store.len() {
            self.m.resize(store.len(), Vec::new());
            self.v.resize(store.len(), Vec::new());
        }
        for (pid, grad) in grads {
            let p = store.get_mut(*pid);
            let n = p.data().len();
            debug_assert_eq!(n, grad.len());
            let m = &mut self.m[pid.0];
            let v = &mut self.v[pid.0];
            if m.len() != n {
                m.resize(n, 0.0);
                v.resize(n, 0.0);
            }
            let data = p.data_mut();
            for i in 0..n {
                let gi = grad[i].to_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                let upd = self.lr * mh / (vh.sqrt() + self.eps);
                data[i] = E::from_f64(data[i].to_f64() - upd);
            }
        }
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<E: Elem>(grads: &mut [(PId, Vec<E>)], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for (_, g) in grads.iter() {
        for v in g {
            let x = v.to_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = E::from_f64(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= k;
            }
        }
    }
    norm
}
