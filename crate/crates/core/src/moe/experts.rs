//! Expert application kernel: gather, rotate in, ternary multiply, rotate
//! out, scatter. No expert weight matrix is ever formed.

use crate::autodiff::{Backward, Tensor};
use crate::butterfly::Rotations;
use crate::error::Result;
use crate::scalar::{self, Real};
use crate::ternary::TernaryMatrix;

use super::routing::Routing;

/// Angle layout shared by every expert of one layer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub d_model: usize,
    pub d_ff: usize,
    pub layers_in: usize,
    pub layers_out: usize,
}

impl Geometry {
    pub fn in_params(&self) -> usize {
        self.layers_in * self.d_model / 2
    }

    pub fn out_params(&self) -> usize {
        self.layers_out * self.d_ff / 2
    }

    /// Input and output rotations of expert `e` from the stacked angle rows.
    pub fn rotations<T: Real>(&self, theta: &[T], phi: &[T], e: usize) -> Result<(Rotations<T>, Rotations<T>)> {
        let (pi, po) = (self.in_params(), self.out_params());
        Ok((
            Rotations::from_angles(self.d_model, self.layers_in, &theta[e * pi..(e + 1) * pi])?,
            Rotations::from_angles(self.d_ff, self.layers_out, &phi[e * po..(e + 1) * po])?,
        ))
    }
}

/// Per-expert activations kept for the backward pass.
pub(crate) struct Block<T> {
    pub expert: usize,
    pub tokens: Vec<usize>,
    pub weights: Vec<T>,
    /// `B(θ)ᵀ x` for the routed tokens, feature-major `[d_model × n]`.
    pub rotated: Vec<T>,
    /// Unweighted expert output, feature-major `[d_ff × n]`.
    pub output: Vec<T>,
}

/// Copies rows `tokens` of `x` into a feature-major block.
fn gather<T: Real>(x: &Tensor<T>, tokens: &[usize], block: &mut [T]) {
    let n = tokens.len();
    for (t, &tok) in tokens.iter().enumerate() {
        for (f, &v) in x.row(tok).iter().enumerate() {
            block[f * n + t] = v;
        }
    }
}

/// Runs every routed expert on its tokens and returns the weighted sum
/// `[tokens × d_ff]`. With `keep` the per-expert activations are returned for
/// differentiation; otherwise buffers are dropped as soon as each expert is
/// done.
pub(crate) fn forward<T: Real>(
    geo: Geometry,
    x: &Tensor<T>,
    routing: &Routing<T>,
    substrate: &TernaryMatrix,
    theta: &[T],
    phi: &[T],
    keep: bool,
) -> Result<(Tensor<T>, Vec<Block<T>>)> {
    let mut y = Tensor::zeros([x.rows(), geo.d_ff]);
    let mut blocks = Vec::new();
    for e in 0..routing.n_experts {
        let assigned = routing.assignments(e);
        if assigned.is_empty() {
            continue;
        }
        let n = assigned.len();
        let tokens: Vec<usize> = assigned.iter().map(|&(t, _)| t).collect();
        let weights: Vec<T> = assigned.iter().map(|&(t, slot)| routing.token_weights(t)[slot]).collect();
        let (rot_in, rot_out) = geo.rotations(theta, phi, e)?;

        let mut rotated = vec![T::zero(); geo.d_model * n];
        gather(x, &tokens, &mut rotated);
        rot_in.rotate_block(&mut rotated, n, true);
        let mut output = vec![T::zero(); geo.d_ff * n];
        substrate.matmat(&rotated, n, &mut output);
        rot_out.rotate_block(&mut output, n, false);

        for (t, (&tok, &w)) in tokens.iter().zip(&weights).enumerate() {
            let row = y.row_mut(tok);
            for (f, out) in row.iter_mut().enumerate() {
                *out += w * output[f * n + t];
            }
        }
        if keep {
            blocks.push(Block {
                expert: e,
                tokens,
                weights,
                rotated,
                output,
            });
        }
    }
    Ok((y, blocks))
}

/// Output of one expert on every row of `x` (routing bypassed), row-major
/// `[tokens × d_ff]`.
pub(crate) fn single_expert<T: Real>(
    geo: Geometry,
    x: &Tensor<T>,
    substrate: &TernaryMatrix,
    theta: &[T],
    phi: &[T],
    e: usize,
) -> Result<Tensor<T>> {
    let n = x.rows();
    let tokens: Vec<usize> = (0..n).collect();
    let (rot_in, rot_out) = geo.rotations(theta, phi, e)?;
    let mut rotated = vec![T::zero(); geo.d_model * n];
    gather(x, &tokens, &mut rotated);
    rot_in.rotate_block(&mut rotated, n, true);
    let mut output = vec![T::zero(); geo.d_ff * n];
    substrate.matmat(&rotated, n, &mut output);
    rot_out.rotate_block(&mut output, n, false);
    Ok(Tensor::from_fn([n, geo.d_ff], |i| output[(i % geo.d_ff) * n + i / geo.d_ff]))
}

/// Backward rule of the expert mixture. Inputs are
/// `[x, dense routing weights, latent substrate, θ stack, φ stack]`; the
/// latent substrate receives its gradient through the straight-through
/// estimator.
pub(crate) struct ButterflyExperts<T> {
    pub geo: Geometry,
    pub substrate: TernaryMatrix,
    pub blocks: Vec<Block<T>>,
}

impl<T: Real> Backward<T> for ButterflyExperts<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let geo = self.geo;
        let mut gx = Tensor::zeros(inputs[0].shape().to_vec());
        let mut gw = Tensor::zeros(inputs[1].shape().to_vec());
        let mut glatent = Tensor::zeros(inputs[2].shape().to_vec());
        let mut gtheta = Tensor::zeros(inputs[3].shape().to_vec());
        let mut gphi = Tensor::zeros(inputs[4].shape().to_vec());
        let (theta, phi) = (inputs[3].data(), inputs[4].data());
        let (pi, po) = (geo.in_params(), geo.out_params());

        for b in &self.blocks {
            let n = b.tokens.len();
            let (rot_in, rot_out) = geo.rotations(theta, phi, b.expert).expect("angles validated in forward");

            let mut gy = vec![T::zero(); geo.d_ff * n];
            gather(grad, &b.tokens, &mut gy);
            for (t, (&tok, &w)) in b.tokens.iter().zip(&b.weights).enumerate() {
                let mut dot = T::zero();
                for f in 0..geo.d_ff {
                    dot += b.output[f * n + t] * gy[f * n + t];
                    gy[f * n + t] *= w;
                }
                gw.row_mut(tok)[b.expert] = dot;
            }

            let mut values = b.output.clone();
            rot_out.backward_block(&mut values, &mut gy, n, false, &mut gphi.data_mut()[b.expert * po..(b.expert + 1) * po]);

            // STE: d/dW of γ·C·r is taken as gbase · rᵀ
            T::gemm(
                geo.d_ff,
                n,
                geo.d_model,
                T::one(),
                &gy,
                scalar::row_major(n),
                &b.rotated,
                scalar::transposed(n),
                T::one(),
                glatent.data_mut(),
                scalar::row_major(geo.d_model),
            );

            let mut grot = vec![T::zero(); geo.d_model * n];
            self.substrate.matmat_transposed(&gy, n, &mut grot);
            let mut values = b.rotated.clone();
            rot_in.backward_block(&mut values, &mut grot, n, true, &mut gtheta.data_mut()[b.expert * pi..(b.expert + 1) * pi]);

            for (t, &tok) in b.tokens.iter().enumerate() {
                for (f, g) in gx.row_mut(tok).iter_mut().enumerate() {
                    *g += grot[f * n + t];
                }
            }
        }
        vec![Some(gx), Some(gw), Some(glatent), Some(gtheta), Some(gphi)]
    }
}
