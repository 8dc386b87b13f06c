//! Adam with decoupled weight decay, and global-norm gradient clipping.

use crate::nnkit::{Gradients, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; `lrs[i]` is the learning rate of parameter `i`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lrs: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads.iter() {
            let i = id.index();
            let lr = lrs[i];
            let p = params.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= lr * self.weight_decay * p[k];
                p[k] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

pub fn global_norm(grads: &Gradients) -> f64 {
    grads
        .iter()
        .map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::Graph;

    /// Reference update written out for a single scalar.
    fn reference(p0: f64, grads: &[f64], lr: f64, wd: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            p *= 1.0 - lr * wd;
            p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        p
    }

    #[test]
    fn matches_reference_update() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::scalar(0.7));
        let mut opt = AdamW::new(&store, 0.01);
        let seq = [0.3, -1.2, 0.05, 2.0];
        for &gv in &seq {
            let mut g = Graph::new(&store);
            let p = g.param(id);
            let s = g.scale(p, gv);
            let grads = g.backward(s);
            opt.step(&mut store, &grads, &[0.1]);
        }
        let expected = reference(0.7, &seq, 0.1, 0.01);
        assert!((store.get(id).item() - expected).abs() < 1e-15);
        assert_eq!(opt.t, 4);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::row_vector(vec![1.0, -1.0]));
        let mut opt = AdamW::new(&store, 0.0);
        let mut g = Graph::new(&store);
        let p = g.param(id);
        let y = g.mul(p, p);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        opt.step(&mut store, &grads, &[0.01]);
        let after = store.get(id).data();
        assert!((after[0] - 0.99).abs() < 1e-9 && (after[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::row_vector(vec![3.0, 4.0]));
        let mut g = Graph::new(&store);
        let p = g.param(id);
        let y = g.mul(p, p);
        let y = g.scale(y, 0.5);
        let s = g.sum_all(y);
        let mut grads = g.backward(s);
        assert_eq!(clip_global_norm(&mut grads, 1.0), 5.0);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-15);
        assert_eq!(clip_global_norm(&mut grads, 0.0), global_norm(&grads));
    }
}
