use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of model tensors.
///
/// Training and checkpoints use `f32`; finite-difference gradient checks run
/// the same code in `f64`.
pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn erf(self) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Neumaier-compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Elementwise compensated accumulation of equal-length vectors.
#[derive(Debug, Clone)]
pub(crate) struct CompensatedVec {
    sums: Vec<CompensatedSum>,
}

impl CompensatedVec {
    pub(crate) fn zeros(len: usize) -> Self {
        Self {
            sums: vec![CompensatedSum::default(); len],
        }
    }

    pub(crate) fn add<I: IntoIterator<Item = f64>>(&mut self, values: I) {
        for (acc, v) in self.sums.iter_mut().zip(values) {
            acc.add(v);
        }
    }

    pub(crate) fn merge(&mut self, other: &CompensatedVec) {
        for (acc, o) in self.sums.iter_mut().zip(&other.sums) {
            acc.add(o.sum);
            acc.add(o.carry);
        }
    }

    pub(crate) fn values(&self) -> Vec<f64> {
        self.sums.iter().map(CompensatedSum::value).collect()
    }
}

/// Numerically stable softmax of `logits` in `f64`.
pub(crate) fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// Log-softmax of `logits` in `f64`.
pub(crate) fn log_softmax_f64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&z| z - lse).collect()
}
