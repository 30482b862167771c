use crate::autodiff::Tensor;
use crate::scalar::Real;

use super::{Model, ParamKind};

const EPS: f64 = 1e-8;

/// Adam with decoupled weight decay. Decay applies to weight matrices only,
/// never to rotation angles.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1,
            beta2,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter of `model`; `grads` follow
    /// [`Model::visit_params`] order.
    pub fn step<T: Real>(&mut self, model: &mut Model<T>, grads: &[Tensor<T>]) {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let mut idx = 0;
        model.visit_params_mut(|_, kind, p| {
            let g = &grads[idx];
            if self.m.len() <= idx {
                self.m.push(vec![0.0; p.len()]);
                self.v.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            let decay = if kind == ParamKind::Weight { self.weight_decay } else { 0.0 };
            for (((w, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gr = gr.to_f64();
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gr;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gr * gr;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + EPS) + decay * w.to_f64();
                *w = T::from_f64(w.to_f64() - self.lr * update);
            }
            idx += 1;
        });
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.to_f64() * v.to_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
