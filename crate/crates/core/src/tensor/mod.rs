//! Minimal n-dimensional tensors with tape-based reverse-mode
//! differentiation.
//!
//! Values live in row-major [`Tensor`]s. A [`Tape`] records every operation
//! applied to [`Var`] handles and replays them backwards on
//! [`Tape::backward`]. Trainable weights are kept outside the tape in a
//! [`ParamStore`], which also owns the optimizer moment buffers.

mod kernels;
mod params;
mod tape;

pub use params::{Param, ParamStore};
pub use tape::{Tape, Var, BCE_CLAMP, UNCERTAINTY_CLAMP_HI};

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;

use num_traits::{Float, NumAssign};

use crate::error::{Error, Result};

/// Floating point element type of tensors (`f32` for training, `f64` for
/// gradient oracles).
pub trait Scalar: Float + NumAssign + Default + Debug + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = a·b + beta·c` for an `m×k` by `k×n` product; every operand is
    /// addressed through its own (row, column) strides.
    fn gemm(dims: [usize; 3], a: (&[Self], [usize; 2]), b: (&[Self], [usize; 2]), beta: Self, c: (&mut [Self], [usize; 2]));
}

/// Largest offset touched by an `rows×cols` strided view, plus one.
fn span(rows: usize, cols: usize, [rs, cs]: [usize; 2]) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

fn check_gemm(dims: [usize; 3], a: (usize, [usize; 2]), b: (usize, [usize; 2]), c: (usize, [usize; 2])) {
    let [m, k, n] = dims;
    assert!(span(m, k, a.1) <= a.0, "gemm: lhs view out of bounds");
    assert!(span(k, n, b.1) <= b.0, "gemm: rhs view out of bounds");
    assert!(span(m, n, c.1) <= c.0, "gemm: output view out of bounds");
}

macro_rules! scalar_impl {
    ($t:ty, $gemm:path, $from:expr) => {
        impl Scalar for $t {
            #[inline]
            fn from_f64(x: f64) -> Self {
                $from(x)
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }

            fn gemm(dims: [usize; 3], a: (&[Self], [usize; 2]), b: (&[Self], [usize; 2]), beta: Self, c: (&mut [Self], [usize; 2])) {
                check_gemm(dims, (a.0.len(), a.1), (b.0.len(), b.1), (c.0.len(), c.1));
                let [m, k, n] = dims;
                if m == 0 || n == 0 {
                    return;
                }
                let s = |v: usize| v as isize;
                // SAFETY: check_gemm bounds every strided view by its slice.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.0.as_ptr(),
                        s(a.1[0]),
                        s(a.1[1]),
                        b.0.as_ptr(),
                        s(b.1[0]),
                        s(b.1[1]),
                        beta,
                        c.0.as_mut_ptr(),
                        s(c.1[0]),
                        s(c.1[1]),
                    )
                }
            }
        }
    };
}

scalar_impl!(f32, matrixmultiply::sgemm, |x: f64| x as f32);
scalar_impl!(f64, matrixmultiply::dgemm, |x: f64| x);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(
                "tensor",
                alloc::format!("extents must be positive, got {shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(
                "tensor",
                alloc::format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::from_f64(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }
}
