//! Built-in differentiable operations.
//!
//! Broadcasting is limited to scalar-with-tensor and a right operand whose
//! shape equals the trailing axes of the left one; anything else is a shape
//! error.

use super::{Backward, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::{row_major, transposed, Real};

#[derive(Debug, Clone, Copy)]
enum Broadcast {
    Same,
    Scalar,
    /// Right operand repeats every `n` elements of the left.
    Trailing(usize),
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    if b.iter().product::<usize>() == 1 {
        return Ok(Broadcast::Scalar);
    }
    if b.len() < a.len() && a.ends_with(b) {
        return Ok(Broadcast::Trailing(b.iter().product()));
    }
    Err(Error::shape(op, a, b))
}

#[inline]
fn bcast_index(kind: Broadcast, i: usize) -> usize {
    match kind {
        Broadcast::Same => i,
        Broadcast::Scalar => 0,
        Broadcast::Trailing(n) => i % n,
    }
}

/// Sums `g` (shaped like the left operand) down to the right operand's shape.
fn reduce_to<T: Real>(kind: Broadcast, g: &[T], shape: &[usize]) -> Tensor<T> {
    let mut out = Tensor::zeros(shape.to_vec());
    let od = out.data_mut();
    for (i, &v) in g.iter().enumerate() {
        od[bcast_index(kind, i)] += v;
    }
    out
}

struct MatMul;

impl<T: Real> Backward<T> for MatMul {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let ga = needs[0].then(|| {
            let mut ga = Tensor::zeros([m, k]);
            T::gemm(m, n, k, T::one(), g.data(), row_major(n), b.data(), transposed(n), T::zero(), ga.data_mut(), row_major(k));
            ga
        });
        let gb = needs[1].then(|| {
            let mut gb = Tensor::zeros([k, n]);
            T::gemm(k, m, n, T::one(), a.data(), transposed(k), g.data(), row_major(n), T::zero(), gb.data_mut(), row_major(n));
            gb
        });
        vec![ga, gb]
    }
}

struct Add(Broadcast);

impl<T: Real> Backward<T> for Add {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let ga = needs[0].then(|| g.clone());
        let gb = needs[1].then(|| match self.0 {
            Broadcast::Same => g.clone(),
            kind => reduce_to(kind, g.data(), inputs[1].shape()),
        });
        vec![ga, gb]
    }
}

struct Mul(Broadcast);

impl<T: Real> Backward<T> for Mul {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let kind = self.0;
        let ga = needs[0].then(|| {
            Tensor::from_fn(a.shape().to_vec(), |i| g.data()[i] * b.data()[bcast_index(kind, i)])
        });
        let gb = needs[1].then(|| {
            let prod: Vec<T> = g.data().iter().zip(a.data()).map(|(&x, &y)| x * y).collect();
            reduce_to(kind, &prod, b.shape())
        });
        vec![ga, gb]
    }
}

struct Scale<T>(T);

impl<T: Real> Backward<T> for Scale<T> {
    fn backward(&self, _inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.map(|v| v * self.0))]
    }
}

struct PassThrough;

impl<T: Real> Backward<T> for PassThrough {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), g.data().to_vec()).expect("same length"))]
    }
}

struct Relu;

impl<T: Real> Backward<T> for Relu {
    fn backward(&self, _inputs: &[&Tensor<T>], out: &Tensor<T>, g: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let zero = T::zero();
        let data = g.data().iter().zip(out.data()).map(|(&gv, &y)| if y > zero { gv } else { zero }).collect();
        vec![Some(Tensor::new(out.shape().to_vec(), data).expect("same shape"))]
    }
}

struct Sum {
    scale: f64,
}

impl<T: Real> Backward<T> for Sum {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let v = g.item() * T::from_f64(self.scale);
        vec![Some(Tensor::filled(inputs[0].shape().to_vec(), v))]
    }
}

struct MeanRows;

impl<T: Real> Backward<T> for MeanRows {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let n = x.last_dim();
        let inv = T::one() / T::from_f64(x.rows() as f64);
        vec![Some(Tensor::from_fn(x.shape().to_vec(), |i| g.data()[i % n] * inv))]
    }
}

/// `(outer, axis_len, inner)` decomposition for reductions along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct Softmax {
    axis: usize,
}

impl<T: Real> Backward<T> for Softmax {
    fn backward(&self, _inputs: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (outer, len, inner) = axis_split(y.shape(), self.axis);
        let mut gx = Tensor::zeros(y.shape().to_vec());
        let (yd, gd) = (y.data(), g.data());
        let out = gx.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let dot: T = (0..len).map(|a| yd[at(a)] * gd[at(a)]).sum();
                for a in 0..len {
                    out[at(a)] = yd[at(a)] * (gd[at(a)] - dot);
                }
            }
        }
        vec![Some(gx)]
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(row[0], T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

struct CrossEntropy {
    targets: Vec<usize>,
}

impl<T: Real> Backward<T> for CrossEntropy {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let logits = inputs[0];
        let batch = logits.rows();
        let scale = g.item() / T::from_f64(batch as f64);
        let mut gx = logits.clone();
        for (r, &t) in self.targets.iter().enumerate() {
            let row = gx.row_mut(r);
            softmax_in_place(row);
            row[t] -= T::one();
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
        vec![Some(gx)]
    }
}

struct LayerNorm<T> {
    inv_std: Vec<T>,
}

impl<T: Real> Backward<T> for LayerNorm<T> {
    fn backward(&self, _inputs: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let d = y.last_dim();
        let inv_d = T::one() / T::from_f64(d as f64);
        let mut gx = Tensor::zeros(y.shape().to_vec());
        for r in 0..y.rows() {
            let (yr, gr) = (y.row(r), g.row(r));
            let mean_g: T = gr.iter().copied().sum::<T>() * inv_d;
            let mean_gy: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
            let s = self.inv_std[r];
            for ((o, &gv), &yv) in gx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                *o = s * (gv - mean_g - yv * mean_gy);
            }
        }
        vec![Some(gx)]
    }
}

/// Scatter-adds rows of the upstream gradient into a table shaped like input 0.
struct ScatterRows {
    ids: Vec<usize>,
}

impl<T: Real> Backward<T> for ScatterRows {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut gt = Tensor::zeros(inputs[0].shape().to_vec());
        for (r, &id) in self.ids.iter().enumerate() {
            for (o, &v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                *o += v;
            }
        }
        vec![Some(gt)]
    }
}

impl<T: Real> Graph<T> {
    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::matmul_plain(self.value(a), self.value(b))?;
        Ok(self.record(&[a, b], out, MatMul))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let kind = broadcast_kind("add", x.shape(), y.shape())?;
        let out = Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] + y.data()[bcast_index(kind, i)]);
        Ok(self.record(&[a, b], out, Add(kind)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let kind = broadcast_kind("mul", x.shape(), y.shape())?;
        let out = Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] * y.data()[bcast_index(kind, i)]);
        Ok(self.record(&[a, b], out, Mul(kind)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.value(a).map(|v| v * c);
        self.record(&[a], out, Scale(c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.value(a).map(|v| v + c);
        self.record(&[a], out, PassThrough)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let zero = T::zero();
        let out = self.value(a).map(|v| if v > zero { v } else { zero });
        self.record(&[a], out, Relu)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.record(&[a], out, PassThrough))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: T = self.value(a).data().iter().copied().sum();
        self.record(&[a], Tensor::scalar(total), Sum { scale: 1.0 })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.len().max(1) as f64;
        let total: T = x.data().iter().copied().sum();
        self.record(&[a], Tensor::scalar(total / T::from_f64(n)), Sum { scale: 1.0 / n })
    }

    /// Mean over all leading axes: `[..., n] -> [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.last_dim();
        let rows = x.rows();
        let mut out = Tensor::zeros([n]);
        for r in 0..rows {
            for (o, &v) in out.data_mut().iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let inv = T::one() / T::from_f64(rows.max(1) as f64);
        let out = out.map(|v| v * inv);
        self.record(&[a], out, MeanRows)
    }

    /// Softmax along `axis`, stabilised by subtracting the maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.shape().len() {
            return Err(Error::Index {
                op: "softmax",
                index: axis,
                size: x.shape().len(),
            });
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut y = x.clone();
        let yd = y.data_mut();
        let mut scratch = vec![T::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                for (a, s) in scratch.iter_mut().enumerate() {
                    *s = yd[at(a)];
                }
                softmax_in_place(&mut scratch);
                for (a, &s) in scratch.iter().enumerate() {
                    yd[at(a)] = s;
                }
            }
        }
        Ok(self.record(&[a], y, Softmax { axis }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[B×V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let v = x.last_dim();
        if x.rows() != targets.len() {
            return Err(Error::shape("cross_entropy", x.shape(), &[targets.len()]));
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: t,
                    size: v,
                });
            }
            let row = x.row(r);
            let max = row.iter().copied().fold(row[0], T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            total += (lse - row[t]).to_f64();
        }
        let loss = T::from_f64(total / targets.len().max(1) as f64);
        Ok(self.record(
            &[logits],
            Tensor::scalar(loss),
            CrossEntropy {
                targets: targets.to_vec(),
            },
        ))
    }

    /// Normalises the last axis to zero mean and unit variance (no affine).
    pub fn layernorm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let d = x.last_dim();
        let inv_d = T::one() / T::from_f64(d as f64);
        let eps = T::from_f64(eps);
        let mut y = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = y.row_mut(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let s = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv_std.push(s);
        }
        self.record(&[a], y, LayerNorm { inv_std })
    }

    /// Rows of `table[V×d]` selected by `ids`.
    pub fn embedding(&mut self, ids: &[usize], table: Var) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = (t.rows(), t.last_dim());
        let mut out = Tensor::zeros([ids.len(), d]);
        for (r, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::Index {
                    op: "embedding",
                    index: id,
                    size: v,
                });
            }
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        Ok(self.record(&[table], out, ScatterRows { ids: ids.to_vec() }))
    }

    /// Rows of `x` in the order given by `rows`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value(x);
            let d = t.last_dim();
            let mut out = Tensor::zeros([rows.len(), d]);
            for (r, &src) in rows.iter().enumerate() {
                if src >= t.rows() {
                    return Err(Error::Index {
                        op: "gather_rows",
                        index: src,
                        size: t.rows(),
                    });
                }
                out.row_mut(r).copy_from_slice(t.row(src));
            }
            out
        };
        Ok(self.record(&[x], out, ScatterRows { ids: rows.to_vec() }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::identity(2));
        let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);

        let a = g.constant(t(&[1, 2], &[1., 2.]));
        let b = g.constant(t(&[2, 1], &[3., 4.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&[4, 4], &mut rng);
        let b = rand_tensor(&[4, 4], &mut rng);
        check(
            &[a, b],
            |g, v| {
                let p = g.matmul(v[0], v[1]).unwrap();
                g.sum(p)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3, 2], &[0., 0., 2., 1., 1000., 0.]));
        let y = g.softmax(x, 1).unwrap();
        let y = g.value(y).data().to_vec();
        assert!((y[0] - 0.5).abs() < 1e-15 && (y[1] - 0.5).abs() < 1e-15);
        assert!((y[2] - 0.7311).abs() < 1e-4 && (y[3] - 0.2689).abs() < 1e-4);
        let e = 1f64.exp();
        assert!((y[2] - e * e / (e * e + e)).abs() < 1e-12);
        assert_eq!(y[4], 1.0);
        assert!(y[5].abs() < 1e-300 && y[5] >= 0.0);
    }

    #[test]
    fn softmax_first_axis_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[3, 4], &mut rng);
        let w = rand_tensor(&[3, 4], &mut rng);
        check(
            &[x, w],
            |g, v| {
                let s = g.softmax(v[0], 0).unwrap();
                let p = g.mul(s, v[1]).unwrap();
                g.sum(p)
            },
            1e-5,
            1e-4,
        );
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 8]));
        let l = g.cross_entropy(x, &[3]).unwrap();
        assert!((g.value(l).item() - 8f64.ln()).abs() < 1e-12);

        let x = g.constant(t(&[1, 3], &[0., 500., 0.]));
        let l = g.cross_entropy(x, &[1]).unwrap();
        assert!(g.value(l).item() < 1e-12);

        let x = g.constant(Tensor::zeros([1, 3]));
        assert!(matches!(g.cross_entropy(x, &[3]), Err(Error::Index { .. })));
    }

    #[test]
    fn cross_entropy_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = rand_tensor(&[3, 5], &mut rng).map(|v| v * 3.0);
        let targets = [4usize, 0, 2];
        let mut g = Graph::<f64>::new();
        let x = g.constant(logits.clone());
        let l = g.cross_entropy(x, &targets).unwrap();
        let mut brute = 0.0;
        for (r, &tgt) in targets.iter().enumerate() {
            let row = logits.row(r);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            brute -= (row[tgt].exp() / z).ln();
        }
        brute /= 3.0;
        assert!((g.value(l).item() - brute).abs() < 1e-10);

        check(&[logits], |g, v| g.cross_entropy(v[0], &targets).unwrap(), 1e-5, 1e-4);
    }

    #[test]
    fn layernorm_of_constant_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::filled([2, 4], 3.5));
        let y = g.layernorm(x, 1e-5);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[-1., 2.]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0., 2.]);
    }

    #[test]
    fn elementwise_ops_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&[3, 4], &mut rng);
        let w = rand_tensor(&[3, 4], &mut rng);
        let bias = rand_tensor(&[4], &mut rng);
        let s = rand_tensor(&[1], &mut rng);
        check(
            &[x.clone(), w.clone(), bias.clone(), s.clone()],
            |g, v| {
                let ln = g.layernorm(v[0], 1e-5);
                let a = g.add(ln, v[2]).unwrap();
                let m = g.mul(a, v[1]).unwrap();
                let m = g.mul(m, v[3]).unwrap();
                let r = g.relu(m);
                let sq = g.mul(r, a).unwrap();
                let rs = g.reshape(sq, [12]).unwrap();
                let sc = g.scale(rs, 0.7);
                let sh = g.add_scalar(sc, 0.3);
                let mr = g.reshape(sh, [3, 4]).unwrap();
                let mr = g.mean_rows(mr);
                let sq2 = g.mul(mr, mr).unwrap();
                g.mean(sq2)
            },
            1e-5,
            1e-4,
        );
    }

    #[test]
    fn embedding_and_gather_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let table = rand_tensor(&[5, 3], &mut rng);
        let w = rand_tensor(&[4, 3], &mut rng);
        check(
            &[table, w],
            |g, v| {
                let e = g.embedding(&[1, 4, 1, 0], v[0]).unwrap();
                let p = g.mul(e, v[1]).unwrap();
                let gth = g.gather_rows(p, &[3, 0, 0]).unwrap();
                let sq = g.mul(gth, gth).unwrap();
                g.sum(sq)
            },
            1e-5,
            1e-4,
        );
    }

    #[test]
    fn broadcasting_rules() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2]));
        assert!(g.add(a, b).is_err());
        let c = g.constant(Tensor::zeros([3]));
        assert!(g.add(a, c).is_ok());
        let s = g.constant(Tensor::scalar(1.0));
        assert!(g.mul(a, s).is_ok());
    }

    #[test]
    fn two_layer_network_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&[5, 4], &mut rng);
        let w1 = rand_tensor(&[4, 6], &mut rng);
        let b1 = rand_tensor(&[6], &mut rng);
        let w2 = rand_tensor(&[6, 3], &mut rng);
        check(
            &[x, w1, b1, w2],
            |g, v| {
                let h = g.matmul(v[0], v[1]).unwrap();
                let h = g.add(h, v[2]).unwrap();
                let h = g.relu(h);
                let o = g.matmul(h, v[3]).unwrap();
                g.cross_entropy(o, &[0, 2, 1, 1, 0]).unwrap()
            },
            1e-5,
            1e-4,
        );
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::zeros([2]));
        assert!(g.backward(a).is_err());
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let mut g = Graph::<f64>::new();
            let x = g.constant(Tensor::new([3, 4], vals).unwrap());
            let y = g.softmax(x, 1).unwrap();
            for r in 0..3 {
                let s: f64 = g.value(y).row(r).iter().sum();
                proptest::prop_assert!((s - 1.0).abs() < 1e-12);
                proptest::prop_assert!(g.value(y).row(r).iter().all(|&p| p >= 0.0));
            }
        }
    }
}
