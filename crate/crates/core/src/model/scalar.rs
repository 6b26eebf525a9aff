// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type of a model: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    /// # Safety
    /// Same contract as `matrixmultiply::sgemm`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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

    fn of(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Scalar for f32 {
    unsafe fn gemm(
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `c (+)= op(a) · op(b)` on row-major buffers.
///
/// `op(a)` is `m × k`: `a` is stored `[m, k]`, or `[k, m]` when `ta`.
/// `op(b)` is `k × n`: `b` is stored `[k, n]`, or `[n, k]` when `tb`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "lhs too short");
    assert!(b.len() >= k * n, "rhs too short");
    assert!(c.len() >= m * n, "output too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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
        )
    }
}
