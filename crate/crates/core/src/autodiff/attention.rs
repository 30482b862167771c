//! Fused causal multi-head scaled dot-product attention.

use super::{Backward, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Backward rule for [`Graph::causal_attention`]; caches the attention
/// probabilities of the forward pass.
pub struct CausalAttention<T> {
    batch: usize,
    seq: usize,
    heads: usize,
    /// `[batch, heads, seq, seq]`, zero above the diagonal.
    probs: Vec<T>,
}

impl<T: Real> CausalAttention<T> {
    fn prob_index(&self, b: usize, h: usize, t: usize, u: usize) -> usize {
        ((b * self.heads + h) * self.seq + t) * self.seq + u
    }
}

impl<T: Real> Backward<T> for CausalAttention<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let d = q.last_dim();
        let dh = d / self.heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let mut gq = Tensor::zeros(q.shape().to_vec());
        let mut gk = Tensor::zeros(k.shape().to_vec());
        let mut gv = Tensor::zeros(v.shape().to_vec());
        let mut gp = vec![T::zero(); self.seq];
        for b in 0..self.batch {
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                for t in 0..self.seq {
                    let row_t = b * self.seq + t;
                    let go = &g.row(row_t)[cols.clone()];
                    let mut dot = T::zero();
                    for u in 0..=t {
                        let p = self.probs[self.prob_index(b, h, t, u)];
                        let vu = &v.row(b * self.seq + u)[cols.clone()];
                        let gpu: T = go.iter().zip(vu).map(|(&a, &c)| a * c).sum();
                        gp[u] = gpu;
                        dot += p * gpu;
                        for (o, &gov) in gv.row_mut(b * self.seq + u)[cols.clone()].iter_mut().zip(go) {
                            *o += p * gov;
                        }
                    }
                    for u in 0..=t {
                        let p = self.probs[self.prob_index(b, h, t, u)];
                        let gs = p * (gp[u] - dot) * scale;
                        let row_u = b * self.seq + u;
                        let ku = &k.row(row_u)[cols.clone()];
                        for (o, &kv) in gq.row_mut(row_t)[cols.clone()].iter_mut().zip(ku) {
                            *o += gs * kv;
                        }
                        let qt = &q.row(row_t)[cols.clone()];
                        for (o, &qv) in gk.row_mut(row_u)[cols.clone()].iter_mut().zip(qt) {
                            *o += gs * qv;
                        }
                    }
                }
            }
        }
        vec![needs[0].then_some(gq), needs[1].then_some(gk), needs[2].then_some(gv)]
    }
}

impl<T: Real> Graph<T> {
    /// Causal attention over `batch` sequences of length `seq`; `q`, `k` and
    /// `v` are `[batch·seq, d]` with `d` split evenly across `heads`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        if qt.shape() != kt.shape() || qt.shape() != vt.shape() {
            return Err(Error::shape("causal_attention", qt.shape(), kt.shape()));
        }
        let d = qt.last_dim();
        if heads == 0 || d % heads != 0 || qt.rows() != batch * seq {
            return Err(Error::shape("causal_attention", qt.shape(), &[batch, seq, heads]));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let mut op = CausalAttention {
            batch,
            seq,
            heads,
            probs: vec![T::zero(); batch * heads * seq * seq],
        };
        let mut out = Tensor::zeros(qt.shape().to_vec());
        let mut scores = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for t in 0..seq {
                    let qrow = &qt.row(b * seq + t)[cols.clone()];
                    for (u, s) in scores[..=t].iter_mut().enumerate() {
                        let krow = &kt.row(b * seq + u)[cols.clone()];
                        *s = qrow.iter().zip(krow).map(|(&a, &c)| a * c).sum::<T>() * scale;
                    }
                    super::ops::softmax_in_place(&mut scores[..=t]);
                    let orow = &mut out.row_mut(b * seq + t)[cols.clone()];
                    for (u, &p) in scores[..=t].iter().enumerate() {
                        let idx = op.prob_index(b, h, t, u);
                        op.probs[idx] = p;
                        let vrow = &vt.row(b * seq + u)[cols.clone()];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        Ok(self.record(&[q, k, v], out, op))
    }
}
