//! Matrix multiplication with a per-thread compute precision.
//!
//! Tensors always hold `f64`. In [`Precision::Single`] the operands are
//! rounded to `f32` for the product and the result widened back, which is
//! what training uses. Gradient checks run in [`Precision::Double`].

use std::cell::Cell;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

thread_local! {
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::Double) };
}

/// Precision currently used by matmul kernels on this thread.
pub fn precision() -> Precision {
    PRECISION.with(Cell::get)
}

/// Runs `f` with the given matmul precision, restoring the previous one after.
pub fn with_precision<R>(p: Precision, f: impl FnOnce() -> R) -> R {
    struct Restore(Precision);
    impl Drop for Restore {
        fn drop(&mut self) {
            PRECISION.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(PRECISION.with(|c| c.replace(p)));
    f()
}

/// Strided view of a row-major-or-transposed matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> Mat<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Mat {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Mat {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }
}

/// `c[m x n] = a[m x k] * b[k x n] + beta * c`, with `c` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(c.len(), m * n);
    match precision() {
        Precision::Double => unsafe {
            // SAFETY: callers guarantee that every strided index of `a` and
            // `b` for the given dimensions lies inside the borrowed slices,
            // and `c` holds exactly m * n contiguous values.
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                a.row_stride as isize,
                a.col_stride as isize,
                b.data.as_ptr(),
                b.row_stride as isize,
                b.col_stride as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        },
        Precision::Single => {
            let a32: Vec<f32> = a.data.iter().map(|&v| v as f32).collect();
            let b32: Vec<f32> = b.data.iter().map(|&v| v as f32).collect();
            let mut c32 = vec![0f32; m * n];
            unsafe {
                // SAFETY: same layout contract as the double branch, applied
                // to the converted copies.
                matrixmultiply::sgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a32.as_ptr(),
                    a.row_stride as isize,
                    a.col_stride as isize,
                    b32.as_ptr(),
                    b.row_stride as isize,
                    b.col_stride as isize,
                    0.0,
                    c32.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            if beta == 0.0 {
                c.iter_mut().zip(&c32).for_each(|(c, &v)| *c = v as f64);
            } else {
                c.iter_mut().zip(&c32).for_each(|(c, &v)| *c = beta * *c + v as f64);
            }
        }
    }
}
