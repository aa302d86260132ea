//! Strided matrix product `c = beta*c + a*b` over [`Real`].

use super::Real;

/// Row/column strides of a matrix view into a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides {
    pub row: usize,
    pub col: usize,
}

impl Strides {
    pub const fn row_major(cols: usize) -> Self {
        Strides { row: cols, col: 1 }
    }

    /// Transposed view of a row-major `rows × cols` buffer.
    pub const fn transposed(cols: usize) -> Self {
        Strides { row: 1, col: cols }
    }

    fn max_offset(self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.row + (cols - 1) * self.col
    }
}

/// `c[m×n] = beta * c + a[m×k] * b[k×n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    sa: Strides,
    b: &[Real],
    sb: Strides,
    beta: Real,
    c: &mut [Real],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(sa.max_offset(m, k) < a.len(), "lhs view out of bounds");
    assert!(sb.max_offset(k, n) < b.len(), "rhs view out of bounds");
    assert!(sc.max_offset(m, n) < c.len(), "output view out of bounds");
    // SAFETY: every index touched by the kernel is bounded by the asserted
    // maximum offsets above, and `c` does not alias `a` or `b`.
    unsafe {
        raw_gemm(
            m,
            k,
            n,
            a.as_ptr(),
            sa.row as isize,
            sa.col as isize,
            b.as_ptr(),
            sb.row as isize,
            sb.col as isize,
            beta,
            c.as_mut_ptr(),
            sc.row as isize,
            sc.col as isize,
        );
    }
}

#[cfg(not(feature = "single-precision"))]
use matrixmultiply::dgemm as raw_kernel;
#[cfg(feature = "single-precision")]
use matrixmultiply::sgemm as raw_kernel;

#[allow(clippy::too_many_arguments)]
#[inline]
unsafe fn raw_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: *const Real,
    rsa: isize,
    csa: isize,
    b: *const Real,
    rsb: isize,
    csb: isize,
    beta: Real,
    c: *mut Real,
    rsc: isize,
    csc: isize,
) {
    raw_kernel(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
}
