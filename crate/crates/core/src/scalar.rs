//! Floating-point abstraction shared by every kernel in the crate.
//!
//! Kernels are generic over [`Real`] so the same code path runs in `f64`
//! (gradient checks), `f32` (training runs) and [`Counted`](crate::counters::Counted)
//! (operation counting).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// A real scalar usable by tensors, butterflies and the ternary kernel.
pub trait Real:
    Copy
    + Default
    + PartialOrd
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    /// Storage width in bytes.
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }

    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;

    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    /// Rounds to the nearest integer, ties away from zero.
    fn round(self) -> Self;

    /// `acc[i] += sign · xs[i]` for a ternary sign, as one addition per
    /// element and no multiplication. `negate` and `keep` are the sign bit and
    /// nonzero flag of the code.
    #[inline]
    fn signed_accumulate(acc: &mut [Self], xs: &[Self], negate: bool, keep: bool) {
        let zero = Self::zero();
        for (a, &v) in acc.iter_mut().zip(xs) {
            *a += if !keep {
                zero
            } else if negate {
                -v
            } else {
                v
            };
        }
    }

    /// `c = alpha * a * b + beta * c` for row/column strided matrices
    /// (`a` is `m x k`, `b` is `k x n`, `c` is `m x n`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    ) {
        naive_gemm(m, k, n, alpha, a, a_strides, b, b_strides, beta, c, c_strides)
    }
}

#[allow(clippy::too_many_arguments)]
fn naive_gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    (ars, acs): (isize, isize),
    b: &[T],
    (brs, bcs): (isize, isize),
    beta: T,
    c: &mut [T],
    (crs, ccs): (isize, isize),
) {
    let at = |i: usize, j: usize, rs: isize, cs: isize| (i as isize * rs + j as isize * cs) as usize;
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..k {
                acc += a[at(i, p, ars, acs)] * b[at(p, j, brs, bcs)];
            }
            let idx = at(i, j, crs, ccs);
            c[idx] = if beta == T::zero() {
                alpha * acc
            } else {
                alpha * acc + beta * c[idx]
            };
        }
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize), what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(rs >= 0 && cs >= 0, "gemm: negative strides for {what}");
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < len, "gemm: {what} buffer too small");
}

macro_rules! impl_real_native {
    ($t:ty, $bits:ty, $gemm:path) => {
        impl Real for $t {
            const BYTES: usize = std::mem::size_of::<$t>();

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sin(self) -> Self {
                <$t>::sin(self)
            }
            #[inline]
            fn cos(self) -> Self {
                <$t>::cos(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn round(self) -> Self {
                <$t>::round(self)
            }

            #[inline]
            fn signed_accumulate(acc: &mut [Self], xs: &[Self], negate: bool, keep: bool) {
                // sign flip and zeroing on the bit pattern keep the loop branch-free
                let sign = (negate as $bits) << (<$bits>::BITS - 1);
                let mask = (keep as $bits).wrapping_neg();
                for (a, &v) in acc.iter_mut().zip(xs) {
                    *a += <$t>::from_bits((v.to_bits() ^ sign) & mask);
                }
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_extent(a.len(), m, k, a_strides, "a");
                check_extent(b.len(), k, n, b_strides, "b");
                check_extent(c.len(), m, n, c_strides, "c");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: extents were checked against the slice lengths above and
                // `c` is exclusively borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    )
                }
            }
        }
    };
}

impl_real_native!(f32, u32, matrixmultiply::sgemm);
impl_real_native!(f64, u64, matrixmultiply::dgemm);

/// Row-major `(rows, cols)` strides.
#[inline]
pub(crate) fn row_major(cols: usize) -> (isize, isize) {
    (cols as isize, 1)
}

/// Strides that read a row-major `rows x cols` buffer as its transpose.
#[inline]
pub(crate) fn transposed(cols: usize) -> (isize, isize) {
    (1, cols as isize)
}
