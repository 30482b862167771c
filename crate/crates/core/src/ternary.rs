//! Ternary substrate: AbsMean quantization, 2-bit packed storage and an
//! addition-only matrix kernel.
//!
//! A weight matrix `W` is mapped to `γ · clip(round(W / γ), −1, 1)` with
//! `γ = mean |W|`. Codes are packed four per byte, row-major, least
//! significant pair first: `00 = 0`, `01 = +1`, `10 = −1` (`11` is invalid).
//!
//! The kernels accumulate `±x_j` for every weight position (zero codes add
//! zero) and multiply by `γ` once per output, so a `rows × cols` product costs
//! `rows · cols` additions and `rows` multiplications per input vector.

use crate::autodiff::Tensor;
use crate::counters::{self, Category};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Lower bound on `γ`; an all-zero matrix quantizes with this scale.
pub const MIN_SCALE: f64 = 1e-8;

/// Information content of one ternary weight, as used in memory reports.
pub const INFO_BITS_PER_WEIGHT: f64 = 1.58;

/// Physical storage per weight.
pub const STORED_BITS_PER_WEIGHT: f64 = 2.0;

const CODE_ZERO: u8 = 0b00;
const CODE_PLUS: u8 = 0b01;
const CODE_MINUS: u8 = 0b10;

#[inline]
fn encode(trit: i8) -> u8 {
    match trit {
        1 => CODE_PLUS,
        -1 => CODE_MINUS,
        _ => CODE_ZERO,
    }
}

#[inline]
fn decode(code: u8) -> i8 {
    match code {
        CODE_PLUS => 1,
        CODE_MINUS => -1,
        _ => 0,
    }
}

/// Quantized substrate: packed ternary codes and one per-matrix scale.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryMatrix {
    rows: usize,
    cols: usize,
    codes: Vec<u8>,
    gamma: f64,
}

/// `γ = mean |W|`, clamped below at [`MIN_SCALE`].
pub fn absmean_scale<T: Real>(w: &Tensor<T>) -> T {
    if w.is_empty() {
        return T::from_f64(MIN_SCALE);
    }
    let total: f64 = w.data().iter().map(|v| v.abs().to_f64()).sum();
    T::from_f64((total / w.len() as f64).max(MIN_SCALE))
}

/// Quantizes a 2-D weight matrix.
pub fn quantize<T: Real>(w: &Tensor<T>) -> Result<TernaryMatrix> {
    let &[rows, cols] = w.shape() else {
        return Err(Error::shape("quantize", w.shape(), &[0, 0]));
    };
    let gamma = absmean_scale(w);
    let one = T::one();
    let trits: Vec<i8> = w
        .data()
        .iter()
        .map(|&v| {
            let r = (v / gamma).round();
            if r >= one {
                1
            } else if r <= -one {
                -1
            } else {
                0
            }
        })
        .collect();
    TernaryMatrix::from_trits(rows, cols, &trits, gamma.to_f64())
}

/// Straight-through estimator: the quantizer's Jacobian is taken to be the
/// identity, so the gradient passes unchanged. `γ` receives none.
pub fn ste_backward<T: Real>(grad_out: &Tensor<T>) -> Tensor<T> {
    grad_out.clone()
}

/// `‖W − Q(W)‖²_F / ‖W‖²_F` as a percentage.
pub fn relative_quant_error<T: Real>(w: &Tensor<T>) -> Result<f64> {
    let q = quantize(w)?.values::<T>();
    let norm: f64 = w.data().iter().map(|v| v.to_f64().powi(2)).sum();
    if norm == 0.0 {
        return Err(Error::config("relative quantization error of a zero matrix is undefined"));
    }
    let err: f64 = w.data().iter().zip(q.data()).map(|(a, b)| (a.to_f64() - b.to_f64()).powi(2)).sum();
    Ok(100.0 * err / norm)
}

impl TernaryMatrix {
    /// Builds from unpacked trits in `{−1, 0, +1}`.
    pub fn from_trits(rows: usize, cols: usize, trits: &[i8], gamma: f64) -> Result<Self> {
        if trits.len() != rows * cols {
            return Err(Error::shape("ternary", &[rows, cols], &[trits.len()]));
        }
        if let Some(bad) = trits.iter().find(|t| !(-1..=1).contains(*t)) {
            return Err(Error::Format(format!("trit {bad} outside {{-1, 0, 1}}")));
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::Numeric(format!("ternary scale must be positive, got {gamma}")));
        }
        let mut codes = vec![0u8; trits.len().div_ceil(4)];
        for (e, &t) in trits.iter().enumerate() {
            codes[e / 4] |= encode(t) << (2 * (e % 4));
        }
        Ok(TernaryMatrix { rows, cols, codes, gamma })
    }

    /// Builds from already packed codes, rejecting the invalid `11` pattern.
    pub fn from_packed(rows: usize, cols: usize, codes: Vec<u8>, gamma: f64) -> Result<Self> {
        let n = rows * cols;
        if codes.len() != n.div_ceil(4) {
            return Err(Error::shape("ternary", &[n.div_ceil(4)], &[codes.len()]));
        }
        for e in 0..n {
            if (codes[e / 4] >> (2 * (e % 4))) & 0b11 == 0b11 {
                return Err(Error::Format(format!("invalid ternary code at element {e}")));
            }
        }
        let trits: Vec<i8> = (0..n).map(|e| decode((codes[e / 4] >> (2 * (e % 4))) & 0b11)).collect();
        Self::from_trits(rows, cols, &trits, gamma)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn packed(&self) -> &[u8] {
        &self.codes
    }

    #[inline]
    pub fn trit(&self, r: usize, c: usize) -> i8 {
        let e = r * self.cols + c;
        decode((self.codes[e / 4] >> (2 * (e % 4))) & 0b11)
    }

    pub fn trits(&self) -> Vec<i8> {
        (0..self.rows * self.cols)
            .map(|e| decode((self.codes[e / 4] >> (2 * (e % 4))) & 0b11))
            .collect()
    }

    /// Dense `γ · code` matrix.
    pub fn values<T: Real>(&self) -> Tensor<T> {
        let g = T::from_f64(self.gamma);
        let trits = self.trits();
        Tensor::from_fn([self.rows, self.cols], |e| match trits[e] {
            1 => g,
            -1 => -g,
            _ => T::zero(),
        })
    }

    /// `y = γ · (Σ_{code=+1} x_j − Σ_{code=−1} x_j)` for one input vector.
    pub fn matvec<T: Real>(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.cols {
            return Err(Error::shape("ternary matvec", &[self.rows, self.cols], &[x.len()]));
        }
        let mut y = vec![T::zero(); self.rows];
        self.matmat(x, 1, &mut y);
        Ok(y)
    }

    /// Feature-major product: `x` is `[cols × n]`, `out` is `[rows × n]` and is
    /// overwritten.
    pub fn matmat<T: Real>(&self, x: &[T], n: usize, out: &mut [T]) {
        debug_assert_eq!(x.len(), self.cols * n);
        debug_assert_eq!(out.len(), self.rows * n);
        let _scope = counters::scope(Category::Ternary);
        let gamma = T::from_f64(self.gamma);
        for r in 0..self.rows {
            let acc = &mut out[r * n..(r + 1) * n];
            acc.fill(T::zero());
            let first = r * self.cols;
            for (c, xs) in x.chunks_exact(n).enumerate() {
                let e = first + c;
                let code = (self.codes[e / 4] >> (2 * (e % 4))) & 0b11;
                T::signed_accumulate(acc, xs, code == CODE_MINUS, code != CODE_ZERO);
            }
            for a in acc.iter_mut() {
                *a *= gamma;
            }
        }
    }

    /// Feature-major transposed product `γ · Cᵀ g`: `g` is `[rows × n]`,
    /// `out` is `[cols × n]` and is overwritten.
    pub fn matmat_transposed<T: Real>(&self, g: &[T], n: usize, out: &mut [T]) {
        debug_assert_eq!(g.len(), self.rows * n);
        debug_assert_eq!(out.len(), self.cols * n);
        out.fill(T::zero());
        let gamma = T::from_f64(self.gamma);
        for r in 0..self.rows {
            let gs = &g[r * n..(r + 1) * n];
            for c in 0..self.cols {
                let e = r * self.cols + c;
                let acc = &mut out[c * n..(c + 1) * n];
                match (self.codes[e / 4] >> (2 * (e % 4))) & 0b11 {
                    CODE_PLUS => acc.iter_mut().zip(gs).for_each(|(a, &v)| *a += v),
                    CODE_MINUS => acc.iter_mut().zip(gs).for_each(|(a, &v)| *a -= v),
                    _ => {}
                }
            }
        }
        for a in out.iter_mut() {
            *a *= gamma;
        }
    }

    /// `rows`, `cols` (u32), `γ` (f32), then the packed codes; little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.codes.len());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.extend_from_slice(&(self.gamma as f32).to_le_bytes());
        out.extend_from_slice(&self.codes);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let word = |at: usize| -> Result<[u8; 4]> {
            bytes
                .get(at..at + 4)
                .map(|b| b.try_into().expect("4 bytes"))
                .ok_or_else(|| Error::Format("truncated ternary block".into()))
        };
        let rows = u32::from_le_bytes(word(0)?) as usize;
        let cols = u32::from_le_bytes(word(4)?) as usize;
        let gamma = f32::from_le_bytes(word(8)?) as f64;
        let n = (rows * cols).div_ceil(4);
        let codes = bytes
            .get(12..12 + n)
            .ok_or_else(|| Error::Format("truncated ternary codes".into()))?
            .to_vec();
        Ok((Self::from_packed(rows, cols, codes, gamma)?, 12 + n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counters::Counted;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hand_matrix() -> Tensor<f64> {
        Tensor::from_f64([2, 2], &[0.6, -0.6, 1.2, -1.2]).unwrap()
    }

    #[test]
    fn absmean_cases() {
        assert!((absmean_scale(&hand_matrix()) - 0.9).abs() < 1e-15);
        assert_eq!(absmean_scale(&Tensor::<f64>::zeros([3, 3])), 1e-8);
        assert_eq!(absmean_scale(&Tensor::<f64>::filled([2, 5], 0.25)), 0.25);
    }

    #[test]
    fn quantize_hand_case() {
        let q = quantize(&hand_matrix()).unwrap();
        assert_eq!(q.trits(), vec![1, -1, 1, -1]);
        let v = q.values::<f64>();
        for (a, b) in v.data().iter().zip([0.9, -0.9, 0.9, -0.9]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((relative_quant_error(&hand_matrix()).unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn quantization_is_idempotent_on_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::<f64>::from_fn([8, 8], |_| rng.random_range(-1.0..1.0));
        let first = quantize(&w).unwrap();
        let second = quantize(&first.values::<f64>()).unwrap();
        // codes are a fixed point; with zero codes present the AbsMean scale
        // shrinks by the nonzero fraction, so values are only fixed without zeros
        assert_eq!(second.trits(), first.trits());

        let signs = Tensor::<f64>::from_fn([8, 8], |_| if rng.random::<bool>() { 0.37 } else { -0.37 });
        let once = quantize(&signs).unwrap().values::<f64>();
        assert_eq!(quantize(&once).unwrap().values::<f64>(), once);
        assert_eq!(relative_quant_error(&once).unwrap(), 0.0);
        assert_eq!(relative_quant_error(&quantize(&hand_matrix()).unwrap().values::<f64>()).unwrap(), 0.0);
    }

    #[test]
    fn quantize_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::<f64>::from_fn([16, 16], |_| rng.random_range(-2.0..2.0));
        let q = quantize(&w).unwrap().values::<f64>();
        let mut total = 0.0;
        for v in w.data() {
            total += v.abs();
        }
        let gamma = total / 256.0;
        for (i, &v) in w.data().iter().enumerate() {
            let r = v / gamma;
            let t = if r >= 0.5 {
                1.0
            } else if r <= -0.5 {
                -1.0
            } else {
                0.0
            };
            assert_eq!(q.data()[i], gamma * t);
        }
    }

    #[test]
    fn odd_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::<f64>::from_fn([6, 6], |_| rng.random_range(-2.0..2.0));
        let neg = w.map(|v| -v);
        assert_eq!(quantize(&neg).unwrap().values::<f64>(), quantize(&w).unwrap().values::<f64>().map(|v| -v));
    }

    #[test]
    fn ste_is_identity() {
        let g = Tensor::<f64>::from_f64([2], &[0.3, -4.0]).unwrap();
        assert_eq!(ste_backward(&g), g);
        assert_eq!(ste_backward(&Tensor::<f64>::zeros([2])), Tensor::zeros([2]));
    }

    #[test]
    fn zero_matrix_error_is_config_error() {
        assert!(matches!(relative_quant_error(&Tensor::<f64>::zeros([2, 2])), Err(Error::Config(_))));
    }

    #[test]
    fn untrained_gaussian_error_is_tens_of_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let w = Tensor::<f64>::from_fn([64, 64], |_| rand_distr::Distribution::sample(&normal, &mut rng));
        let e = relative_quant_error(&w).unwrap();
        assert!((10.0..60.0).contains(&e), "{e}");
    }

    #[test]
    fn matvec_special_cases() {
        let zero = TernaryMatrix::from_trits(3, 4, &[0; 12], 0.7).unwrap();
        assert_eq!(zero.matvec(&[1.0f64, 2.0, 3.0, 4.0]).unwrap(), vec![0.0; 3]);
        let eye: Vec<i8> = (0..16).map(|e| (e / 4 == e % 4) as i8).collect();
        let id = TernaryMatrix::from_trits(4, 4, &eye, 1.0).unwrap();
        assert_eq!(id.matvec(&[1.0f64, -2.0, 3.0, 0.5]).unwrap(), vec![1.0, -2.0, 3.0, 0.5]);
        assert!(id.matvec(&[1.0f64]).is_err());
    }

    #[test]
    fn invalid_code_rejected() {
        assert!(TernaryMatrix::from_packed(1, 4, vec![0b1100_0000], 1.0).is_err());
        assert!(TernaryMatrix::from_packed(1, 4, vec![0b0110_0100], 1.0).is_ok());
        assert!(TernaryMatrix::from_trits(1, 1, &[2], 1.0).is_err());
    }

    #[test]
    fn kernel_is_addition_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let trits: Vec<i8> = (0..6 * 10).map(|_| rng.random_range(-1..=1)).collect();
        let t = TernaryMatrix::from_trits(6, 10, &trits, 0.3).unwrap();
        let x: Vec<Counted> = (0..10).map(|i| Counted(i as f64)).collect();
        counters::reset();
        t.matvec(&x).unwrap();
        let s = counters::snapshot();
        assert_eq!(s.ternary.muls, 6);
        assert_eq!(s.ternary.adds, 60);
        assert_eq!(s.ternary.divs, 0);
    }

    #[test]
    fn transposed_kernel_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trits: Vec<i8> = (0..5 * 7).map(|_| rng.random_range(-1..=1)).collect();
        let t = TernaryMatrix::from_trits(5, 7, &trits, 0.4).unwrap();
        let g: Vec<f64> = (0..5 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut out = vec![0.0; 7 * 3];
        t.matmat_transposed(&g, 3, &mut out);
        let v = t.values::<f64>();
        for c in 0..7 {
            for n in 0..3 {
                let want: f64 = (0..5).map(|r| v.data()[r * 7 + c] * g[r * 3 + n]).sum();
                assert!((out[c * 3 + n] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn byte_round_trip() {
        let q = quantize(&hand_matrix()).unwrap();
        let (back, used) = TernaryMatrix::from_bytes(&q.to_bytes()).unwrap();
        assert_eq!(used, 12 + 1);
        assert_eq!(back.trits(), q.trits());
        assert!((back.gamma() - 0.9).abs() < 1e-7);
    }

    proptest::proptest! {
        #[test]
        fn pack_unpack_round_trip(trits in proptest::collection::vec(-1i8..=1, 1..200)) {
            let n = trits.len();
            let t = TernaryMatrix::from_trits(1, n, &trits, 1.0).unwrap();
            proptest::prop_assert_eq!(t.trits(), trits.clone());
            let again = TernaryMatrix::from_packed(1, n, t.packed().to_vec(), 1.0).unwrap();
            proptest::prop_assert_eq!(again, t);
        }
    }
}
