//! Arithmetic operation counters.
//!
//! [`Counted`] is an `f64` wrapper whose additions and multiplications are
//! tallied in thread-local counters. Kernels tag the work they do with a
//! [`Category`] through [`scope`], so running a kernel with `Counted` yields an
//! exact census of rotation FLOPs and ternary additions that can be compared
//! with the analytical formulas.

use std::cell::Cell;
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::scalar::Real;

/// Which kernel an operation is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Rotation,
    Ternary,
    Other,
}

impl Category {
    fn slot(self) -> usize {
        match self {
            Category::Rotation => 0,
            Category::Ternary => 1,
            Category::Other => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    /// Additions and subtractions.
    pub adds: u64,
    pub muls: u64,
    pub divs: u64,
}

impl OpCounts {
    pub fn flops(&self) -> u64 {
        self.adds + self.muls + self.divs
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Snapshot {
    pub rotation: OpCounts,
    pub ternary: OpCounts,
    pub other: OpCounts,
}

thread_local! {
    static CURRENT: Cell<Category> = const { Cell::new(Category::Other) };
    static COUNTS: Cell<[OpCounts; 3]> = const { Cell::new([OpCounts { adds: 0, muls: 0, divs: 0 }; 3]) };
}

/// Restores the previous category when dropped.
pub struct ScopeGuard {
    previous: Category,
}

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        CURRENT.with(|c| c.set(self.previous));
    }
}

/// Attributes subsequent counted operations on this thread to `category`.
pub fn scope(category: Category) -> ScopeGuard {
    let previous = CURRENT.with(|c| c.replace(category));
    ScopeGuard { previous }
}

pub fn reset() {
    COUNTS.with(|c| c.set([OpCounts::default(); 3]));
}

pub fn snapshot() -> Snapshot {
    let [rotation, ternary, other] = COUNTS.with(|c| c.get());
    Snapshot {
        rotation,
        ternary,
        other,
    }
}

#[inline]
fn bump(f: impl FnOnce(&mut OpCounts)) {
    let slot = CURRENT.with(|c| c.get()).slot();
    COUNTS.with(|c| {
        let mut all = c.get();
        f(&mut all[slot]);
        c.set(all);
    });
}

/// `f64` that counts its own arithmetic.
#[derive(Debug, Clone, Copy, Default, PartialEq, PartialOrd)]
pub struct Counted(pub f64);

impl fmt::Display for Counted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

macro_rules! counted_binop {
    ($tr:ident, $method:ident, $atr:ident, $amethod:ident, $op:tt, $field:ident) => {
        impl $tr for Counted {
            type Output = Counted;
            #[inline]
            #[allow(clippy::suspicious_arithmetic_impl)]
            fn $method(self, rhs: Counted) -> Counted {
                bump(|c| c.$field += 1);
                Counted(self.0 $op rhs.0)
            }
        }
        impl $atr for Counted {
            #[inline]
            fn $amethod(&mut self, rhs: Counted) {
                *self = *self $op rhs;
            }
        }
    };
}

counted_binop!(Add, add, AddAssign, add_assign, +, adds);
counted_binop!(Sub, sub, SubAssign, sub_assign, -, adds);
counted_binop!(Mul, mul, MulAssign, mul_assign, *, muls);
counted_binop!(Div, div, DivAssign, div_assign, /, divs);

impl Neg for Counted {
    type Output = Counted;
    #[inline]
    fn neg(self) -> Counted {
        // sign flip, not arithmetic
        Counted(-self.0)
    }
}

impl Sum for Counted {
    fn sum<I: Iterator<Item = Counted>>(iter: I) -> Counted {
        iter.fold(Counted(0.0), |a, b| a + b)
    }
}

impl Real for Counted {
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        Counted(v)
    }
    fn to_f64(self) -> f64 {
        self.0
    }
    fn sqrt(self) -> Self {
        Counted(self.0.sqrt())
    }
    fn exp(self) -> Self {
        Counted(self.0.exp())
    }
    fn ln(self) -> Self {
        Counted(self.0.ln())
    }
    fn sin(self) -> Self {
        Counted(self.0.sin())
    }
    fn cos(self) -> Self {
        Counted(self.0.cos())
    }
    fn abs(self) -> Self {
        Counted(self.0.abs())
    }
    fn is_finite(self) -> bool {
        self.0.is_finite()
    }
    fn round(self) -> Self {
        Counted(self.0.round())
    }
}
