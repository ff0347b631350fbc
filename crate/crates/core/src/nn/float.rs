use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float as NumFloat, FromPrimitive, ToPrimitive};

/// Scalar type the network can run in. `f32` is the working precision;
/// `f64` exists for tight gradient checks.
pub trait Float:
    NumFloat + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static
{
    /// `c = alpha * a * b + beta * c` for strided matrices.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-aliasing
    /// `m × k`, `k × n` and `m × n` matrices.
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

    #[inline]
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts to every float type")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Float for f32 {
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
}

impl Float for f64 {
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
}

/// Whether a row-major operand is used as stored or transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    N,
    T,
}

/// Dense row-major GEMM: `c[m×n] = alpha * op(a) * op(b) + beta * c`.
///
/// `a` is stored `m×k` (or `k×m` when transposed), `b` is stored `k×n`
/// (or `n×k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Float>(
    op_a: Op,
    op_b: Op,
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    b: &[F],
    beta: F,
    c: &mut [F],
) {
    assert!(a.len() >= m * k, "gemm: a too short");
    assert!(b.len() >= k * n, "gemm: b too short");
    assert!(c.len() >= m * n, "gemm: c too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    // SAFETY: lengths checked above; `c` is a distinct mutable borrow.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major GEMM with explicit leading dimensions for every operand.
///
/// Used when `c` is a column window of a wider matrix, as when a batch chunk
/// of a convolution writes into the full `C × (N·H·W)` output.
#[allow(clippy::too_many_arguments)]
pub fn gemm_ld<F: Float>(
    op_a: Op,
    op_b: Op,
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    lda: usize,
    b: &[F],
    ldb: usize,
    beta: F,
    c: &mut [F],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa, a_need) = match op_a {
        Op::N => (lda as isize, 1, (m - 1) * lda + k),
        Op::T => (1, lda as isize, (k.max(1) - 1) * lda + m),
    };
    let (rsb, csb, b_need) = match op_b {
        Op::N => (ldb as isize, 1, (k.max(1) - 1) * ldb + n),
        Op::T => (1, ldb as isize, (n - 1) * ldb + k),
    };
    assert!(k == 0 || a.len() >= a_need, "gemm_ld: a too short");
    assert!(k == 0 || b.len() >= b_need, "gemm_ld: b too short");
    assert!(c.len() >= (m - 1) * ldc + n, "gemm_ld: c too short");
    // SAFETY: extents checked above; `c` is a distinct mutable borrow.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}
