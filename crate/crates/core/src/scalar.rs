//! Floating-point element types the model can run in.
//!
//! Training and checkpoints use `f32`; `f64` exists so gradients can be
//! checked against finite differences with a tight tolerance.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};

pub trait Scalar:
    num_traits::Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + std::iter::Sum
    + AddAssign
    + SubAssign
    + MulAssign
{
    /// `c = alpha * a @ b + beta * c` on strided row/column layouts.
    ///
    /// # Safety
    /// Every index reachable through the given dims and strides must lie
    /// inside the corresponding buffer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Hyperbolic tangent used by the GELU activation. May trade a few ulps
    /// for speed; its derivative is always taken as `1 - tanh^2` of this value.
    fn act_tanh(self) -> Self {
        self.tanh()
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    #[inline]
    fn from_f64(x: f64) -> f32 {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    /// Rational minimax approximation, branch-free so loops vectorize.
    /// Absolute error stays below 1e-6 over the whole line.
    #[inline(always)]
    fn act_tanh(self) -> f32 {
        const CLAMP: f32 = 7.905_311;
        const A1: f32 = 4.893_524_6e-3;
        const A3: f32 = 6.372_619_3e-4;
        const A5: f32 = 1.485_722_4e-5;
        const A7: f32 = 5.122_297e-8;
        const A9: f32 = -8.604_672e-11;
        const A11: f32 = 2.000_188e-13;
        const A13: f32 = -2.760_768_5e-16;
        const B0: f32 = 4.893_525e-3;
        const B2: f32 = 2.268_434_6e-3;
        const B4: f32 = 1.185_347e-4;
        const B6: f32 = 1.198_258_4e-6;
        let x = self.clamp(-CLAMP, CLAMP);
        let x2 = x * x;
        let p = x2 * A13 + A11;
        let p = x2 * p + A9;
        let p = x2 * p + A7;
        let p = x2 * p + A5;
        let p = x2 * p + A3;
        let p = x2 * p + A1;
        let p = x * p;
        let q = x2 * B6 + B4;
        let q = x2 * q + B2;
        let q = x2 * q + B0;
        p / q
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    #[inline]
    fn from_f64(x: f64) -> f64 {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// A strided view of a matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub struct Strided {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl Strided {
    pub const fn row_major(offset: usize, cols: usize) -> Self {
        Strided {
            offset,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` block starting at `offset`.
    pub const fn transposed(offset: usize, cols: usize) -> Self {
        Strided {
            offset,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// Bounds-checked wrapper over [`Scalar::gemm_raw`]:
/// `c[m x n] = alpha * a[m x k] @ b[k x n] + beta * c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    av: Strided,
    b: &[T],
    bv: Strided,
    beta: T,
    c: &mut [T],
    cv: Strided,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || av.max_index(m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || bv.max_index(k, n) < b.len(), "gemm: rhs out of bounds");
    assert!(cv.max_index(m, n) < c.len(), "gemm: output out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = cv.offset + i * cv.row_stride + j * cv.col_stride;
                c[idx] = if beta == T::zero() { T::zero() } else { beta * c[idx] };
            }
        }
        return;
    }
    // SAFETY: all three extents were checked against their buffers above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr().add(bv.offset),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride as isize,
            cv.col_stride as isize,
        );
    }
}
