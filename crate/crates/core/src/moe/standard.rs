//! Baseline mixture with independent full-precision expert matrices.

use crate::autodiff::{Backward, Tensor};
use crate::scalar::{self, Real};

use super::routing::Routing;

struct Block<T> {
    expert: usize,
    tokens: Vec<usize>,
    weights: Vec<T>,
    /// Routed inputs, row-major `[n × d_model]`.
    input: Vec<T>,
    /// Unweighted expert output, row-major `[n × d_ff]`.
    output: Vec<T>,
}

/// `Σ_k w_k · W_{e_k} x` for every token; `experts` is `[N_E·d_ff × d_model]`.
pub(crate) fn forward<T: Real>(
    x: &Tensor<T>,
    routing: &Routing<T>,
    experts: &Tensor<T>,
    d_ff: usize,
) -> (Tensor<T>, StandardExperts<T>) {
    let d_model = x.last_dim();
    let mut y = Tensor::zeros([x.rows(), d_ff]);
    let mut blocks = Vec::new();
    for e in 0..routing.n_experts {
        let assigned = routing.assignments(e);
        if assigned.is_empty() {
            continue;
        }
        let n = assigned.len();
        let tokens: Vec<usize> = assigned.iter().map(|&(t, _)| t).collect();
        let weights: Vec<T> = assigned.iter().map(|&(t, slot)| routing.token_weights(t)[slot]).collect();
        let mut input = Vec::with_capacity(n * d_model);
        for &t in &tokens {
            input.extend_from_slice(x.row(t));
        }
        let w = &experts.data()[e * d_ff * d_model..(e + 1) * d_ff * d_model];
        let mut output = vec![T::zero(); n * d_ff];
        T::gemm(
            n,
            d_model,
            d_ff,
            T::one(),
            &input,
            scalar::row_major(d_model),
            w,
            scalar::transposed(d_model),
            T::zero(),
            &mut output,
            scalar::row_major(d_ff),
        );
        for (t, (&tok, &wt)) in tokens.iter().zip(&weights).enumerate() {
            for (o, &v) in y.row_mut(tok).iter_mut().zip(&output[t * d_ff..(t + 1) * d_ff]) {
                *o += wt * v;
            }
        }
        blocks.push(Block {
            expert: e,
            tokens,
            weights,
            input,
            output,
        });
    }
    (y, StandardExperts { d_ff, blocks })
}

/// Backward rule; inputs are `[x, dense routing weights, expert stack]`.
pub(crate) struct StandardExperts<T> {
    d_ff: usize,
    blocks: Vec<Block<T>>,
}

impl<T: Real> Backward<T> for StandardExperts<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let d_ff = self.d_ff;
        let d_model = inputs[0].last_dim();
        let mut gx = Tensor::zeros(inputs[0].shape().to_vec());
        let mut gw = Tensor::zeros(inputs[1].shape().to_vec());
        let mut gexp = Tensor::zeros(inputs[2].shape().to_vec());
        for b in &self.blocks {
            let n = b.tokens.len();
            let mut gy = Vec::with_capacity(n * d_ff);
            for (t, (&tok, &w)) in b.tokens.iter().zip(&b.weights).enumerate() {
                let g = grad.row(tok);
                gw.row_mut(tok)[b.expert] = g.iter().zip(&b.output[t * d_ff..(t + 1) * d_ff]).map(|(&a, &o)| a * o).sum();
                gy.extend(g.iter().map(|&v| v * w));
            }
            let range = b.expert * d_ff * d_model..(b.expert + 1) * d_ff * d_model;
            T::gemm(
                d_ff,
                n,
                d_model,
                T::one(),
                &gy,
                scalar::transposed(d_ff),
                &b.input,
                scalar::row_major(d_model),
                T::zero(),
                &mut gexp.data_mut()[range.clone()],
                scalar::row_major(d_model),
            );
            let mut gin = vec![T::zero(); n * d_model];
            T::gemm(
                n,
                d_ff,
                d_model,
                T::one(),
                &gy,
                scalar::row_major(d_ff),
                &inputs[2].data()[range],
                scalar::row_major(d_model),
                T::zero(),
                &mut gin,
                scalar::row_major(d_model),
            );
            for (t, &tok) in b.tokens.iter().enumerate() {
                for (g, &v) in gx.row_mut(tok).iter_mut().zip(&gin[t * d_model..(t + 1) * d_model]) {
                    *g += v;
                }
            }
        }
        vec![Some(gx), Some(gw), Some(gexp)]
    }
}
