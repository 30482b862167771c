//! Butterfly-structured orthogonal transforms.
//!
//! A transform of size `d = 2^m` is a product of `L ≤ m` stages. Stage `ℓ`
//! (zero-based) pairs index `i` with `i + 2^ℓ` for every `i` whose bit `ℓ` is
//! clear, and rotates each pair by its own angle:
//!
//! ```text
//! (u, v) -> (u·cos α − v·sin α,  u·sin α + v·cos α)
//! ```
//!
//! Stride pairing realises the shuffle permutations implicitly, so applying a
//! transform costs exactly `6 · d/2 · L` flops (four multiplies and two
//! additions per pair) and the parameters are `L · d/2` angles stored
//! stage-major, pair-minor.
//!
//! The transpose applies the stages in reverse order with negated angles and
//! is the exact inverse.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::counters::{self, Category};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Standard deviation of freshly initialised angles.
pub const INIT_ANGLE_STD: f64 = 0.01;

/// `log2(dim)` when `dim` is a positive power of two.
pub fn log2_exact(dim: usize) -> Option<usize> {
    (dim > 0 && dim.is_power_of_two()).then(|| dim.trailing_zeros() as usize)
}

/// Angles in one transform: `num_layers · dim/2`.
pub fn param_count(dim: usize, num_layers: usize) -> usize {
    num_layers * (dim / 2)
}

/// Angles per expert: the input transform plus the output transform.
pub fn expert_param_count(d_in: usize, layers_in: usize, d_out: usize, layers_out: usize) -> usize {
    param_count(d_in, layers_in) + param_count(d_out, layers_out)
}

fn validate(dim: usize, num_layers: usize) -> Result<()> {
    let m = log2_exact(dim).ok_or_else(|| Error::config(format!("butterfly dim {dim} is not a power of two")))?;
    if dim < 2 {
        return Err(Error::config("butterfly dim must be at least 2"));
    }
    if num_layers == 0 || num_layers > m {
        return Err(Error::config(format!(
            "butterfly depth {num_layers} out of range 1..={m} for dim {dim}"
        )));
    }
    Ok(())
}

/// Learnable angles of one butterfly transform.
#[derive(Debug, Clone, PartialEq)]
pub struct ButterflyParams<T> {
    dim: usize,
    num_layers: usize,
    angles: Vec<T>,
}

impl<T: Real> ButterflyParams<T> {
    pub fn new(dim: usize, num_layers: usize, angles: Vec<T>) -> Result<Self> {
        validate(dim, num_layers)?;
        if angles.len() != param_count(dim, num_layers) {
            return Err(Error::shape("butterfly", &[num_layers, dim / 2], &[angles.len()]));
        }
        if !angles.iter().all(|a| a.is_finite()) {
            return Err(Error::Numeric("non-finite butterfly angle".into()));
        }
        Ok(ButterflyParams { dim, num_layers, angles })
    }

    /// All-zero angles: the identity transform.
    pub fn identity(dim: usize, num_layers: usize) -> Result<Self> {
        Self::new(dim, num_layers, vec![T::zero(); param_count(dim, num_layers)])
    }

    /// Angles drawn i.i.d. from `N(0, 0.01²)` with a seeded generator.
    pub fn init(dim: usize, num_layers: usize, seed: u64) -> Result<Self> {
        validate(dim, num_layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_ANGLE_STD).expect("valid std");
        let angles = (0..param_count(dim, num_layers))
            .map(|_| T::from_f64(normal.sample(&mut rng)))
            .collect();
        Ok(ButterflyParams { dim, num_layers, angles })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn angles(&self) -> &[T] {
        &self.angles
    }

    pub fn angles_mut(&mut self) -> &mut [T] {
        &mut self.angles
    }

    pub fn param_count(&self) -> usize {
        self.angles.len()
    }

    pub fn rotations(&self) -> Rotations<T> {
        Rotations::new(self)
    }

    /// Applies the transform (or its transpose) to every row of `x[..., d]`.
    pub fn apply(&self, x: &Tensor<T>, transpose: bool) -> Result<Tensor<T>> {
        if x.last_dim() != self.dim {
            return Err(Error::shape("butterfly apply", x.shape(), &[self.dim]));
        }
        let mut out = x.clone();
        let rot = self.rotations();
        for r in 0..out.rows() {
            rot.rotate_block(out.row_mut(r), 1, transpose);
        }
        Ok(out)
    }

    /// Dense `d×d` matrix whose column `j` is the transform of `e_j`.
    pub fn as_dense(&self) -> Tensor<T> {
        let mut m = Tensor::identity(self.dim);
        self.rotations().rotate_block(m.data_mut(), self.dim, false);
        m
    }

    /// Gradients of a loss with respect to the input rows and the angles,
    /// given the upstream gradient of `apply(x, transpose)`.
    pub fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>, transpose: bool) -> Result<(Tensor<T>, Vec<T>)> {
        if x.last_dim() != self.dim || x.shape() != grad_out.shape() {
            return Err(Error::shape("butterfly backward", x.shape(), grad_out.shape()));
        }
        let rot = self.rotations();
        let mut values = self.apply(x, transpose)?;
        let mut grad = grad_out.clone();
        let mut grad_angles = vec![T::zero(); self.angles.len()];
        for r in 0..values.rows() {
            rot.backward_block(values.row_mut(r), grad.row_mut(r), 1, transpose, &mut grad_angles);
        }
        Ok((grad, grad_angles))
    }

    /// `dim`, `num_layers` as little-endian `u32`, then the angles as
    /// little-endian `f32`, stage-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.angles.len());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_layers as u32).to_le_bytes());
        for a in &self.angles {
            out.extend_from_slice(&(a.to_f64() as f32).to_le_bytes());
        }
        out
    }

    /// Parses the layout written by [`to_bytes`](Self::to_bytes); returns the
    /// parameters and the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let word = |at: usize| -> Result<[u8; 4]> {
            bytes
                .get(at..at + 4)
                .map(|b| b.try_into().expect("4 bytes"))
                .ok_or_else(|| Error::Format("truncated butterfly block".into()))
        };
        let dim = u32::from_le_bytes(word(0)?) as usize;
        let num_layers = u32::from_le_bytes(word(4)?) as usize;
        validate(dim, num_layers)?;
        let n = param_count(dim, num_layers);
        let angles = (0..n)
            .map(|i| word(8 + 4 * i).map(|w| T::from_f64(f32::from_le_bytes(w) as f64)))
            .collect::<Result<Vec<T>>>()?;
        Ok((Self::new(dim, num_layers, angles)?, 8 + 4 * n))
    }
}

/// Precomputed cosines and sines of one transform, ready to apply.
#[derive(Debug, Clone)]
pub struct Rotations<T> {
    dim: usize,
    num_layers: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Real> Rotations<T> {
    pub fn new(params: &ButterflyParams<T>) -> Self {
        Rotations {
            dim: params.dim,
            num_layers: params.num_layers,
            cos: params.angles.iter().map(|a| a.cos()).collect(),
            sin: params.angles.iter().map(|a| a.sin()).collect(),
        }
    }

    /// Builds directly from a stage-major angle slice.
    pub fn from_angles(dim: usize, num_layers: usize, angles: &[T]) -> Result<Self> {
        validate(dim, num_layers)?;
        if angles.len() != param_count(dim, num_layers) {
            return Err(Error::shape("butterfly", &[num_layers, dim / 2], &[angles.len()]));
        }
        Ok(Rotations {
            dim,
            num_layers,
            cos: angles.iter().map(|a| a.cos()).collect(),
            sin: angles.iter().map(|a| a.sin()).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn stages(&self, reverse: bool) -> Box<dyn Iterator<Item = usize>> {
        if reverse {
            Box::new((0..self.num_layers).rev())
        } else {
            Box::new(0..self.num_layers)
        }
    }

    /// Rotates a feature-major block `[dim × n]` in place: column `t` is one
    /// vector. With `n == 1` this is a single vector.
    pub fn rotate_block(&self, block: &mut [T], n: usize, transpose: bool) {
        debug_assert_eq!(block.len(), self.dim * n);
        let _scope = counters::scope(Category::Rotation);
        let half = self.dim / 2;
        for stage in self.stages(transpose) {
            let s = 1usize << stage;
            let (cos, sin) = (&self.cos[stage * half..(stage + 1) * half], &self.sin[stage * half..(stage + 1) * half]);
            for base in (0..self.dim).step_by(2 * s) {
                for o in 0..s {
                    let j = base / 2 + o;
                    let (c, sn) = (cos[j], sin[j]);
                    let (lo, hi) = block.split_at_mut((base + o + s) * n);
                    let us = &mut lo[(base + o) * n..(base + o + 1) * n];
                    let vs = &mut hi[..n];
                    if transpose {
                        for (u, v) in us.iter_mut().zip(vs.iter_mut()) {
                            let (a, b) = (*u, *v);
                            *u = a * c + b * sn;
                            *v = b * c - a * sn;
                        }
                    } else {
                        for (u, v) in us.iter_mut().zip(vs.iter_mut()) {
                            let (a, b) = (*u, *v);
                            *u = a * c - b * sn;
                            *v = a * sn + b * c;
                        }
                    }
                }
            }
        }
    }

    /// Reverse sweep through a block previously produced by
    /// [`rotate_block`](Self::rotate_block).
    ///
    /// On entry `values` holds the transform output and `grad` the upstream
    /// gradient; on exit `values` holds the reconstructed input and `grad` the
    /// gradient with respect to it. Angle gradients are accumulated into
    /// `grad_angles`.
    pub fn backward_block(&self, values: &mut [T], grad: &mut [T], n: usize, transpose: bool, grad_angles: &mut [T]) {
        debug_assert_eq!(values.len(), self.dim * n);
        debug_assert_eq!(grad.len(), self.dim * n);
        let half = self.dim / 2;
        for stage in self.stages(!transpose) {
            let s = 1usize << stage;
            for base in (0..self.dim).step_by(2 * s) {
                for o in 0..s {
                    let j = stage * half + base / 2 + o;
                    let (c, sn) = (self.cos[j], self.sin[j]);
                    let split = (base + o + s) * n;
                    let range = (base + o) * n..(base + o + 1) * n;
                    let (vlo, vhi) = values.split_at_mut(split);
                    let (glo, ghi) = grad.split_at_mut(split);
                    let mut acc = T::zero();
                    for (((u, v), gu), gv) in vlo[range.clone()]
                        .iter_mut()
                        .zip(vhi[..n].iter_mut())
                        .zip(glo[range.clone()].iter_mut())
                        .zip(ghi[..n].iter_mut())
                    {
                        let (up, vp, gup, gvp) = (*u, *v, *gu, *gv);
                        if transpose {
                            let (a, b) = (up * c - vp * sn, up * sn + vp * c);
                            acc += gup * (b * c - a * sn) - gvp * (a * c + b * sn);
                            *u = a;
                            *v = b;
                            *gu = gup * c - gvp * sn;
                            *gv = gup * sn + gvp * c;
                        } else {
                            let (a, b) = (up * c + vp * sn, vp * c - up * sn);
                            acc += gup * (-(sn * a) - c * b) + gvp * (c * a - sn * b);
                            *u = a;
                            *v = b;
                            *gu = gup * c + gvp * sn;
                            *gv = gvp * c - gup * sn;
                        }
                    }
                    grad_angles[j] += acc;
                }
            }
        }
    }
}
