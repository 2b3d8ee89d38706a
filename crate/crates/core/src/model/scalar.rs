use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type of the compute engine. `f32` is the training
/// precision; `f64` exists for gradient checking.
pub trait Real: Float + Default + Debug + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn from_f32(x: f32) -> Self;
    fn widen(self) -> f64;

    /// `c = alpha * a b + beta * c` with arbitrary strides.
    ///
    /// # Safety
    /// Every addressed element of `a` (m x k), `b` (k x n) and `c` (m x n)
    /// must be in bounds of the backing allocation.
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
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn from_f32(x: f32) -> Self {
        x
    }
    fn widen(self) -> f64 {
        self as f64
    }
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

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    fn widen(self) -> f64 {
        self
    }
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

/// A strided matrix view into a slice: element (i, j) lives at
/// `offset + i * rs + j * cs`.
#[derive(Clone, Copy, Debug)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Mat {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, offset: 0, rs: cols, cs: 1 }
    }

    pub fn at(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    pub fn strided(rows: usize, cols: usize, offset: usize, rs: usize) -> Self {
        Mat { rows, cols, offset, rs, cs: 1 }
    }

    pub fn t(self) -> Self {
        Mat { rows: self.cols, cols: self.rows, offset: self.offset, rs: self.cs, cs: self.rs }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// Bounds-checked `c = a b + beta c` over strided views.
pub fn gemm<T: Real>(a: &[T], am: Mat, b: &[T], bm: Mat, beta: T, c: &mut [T], cm: Mat) {
    assert_eq!(am.cols, bm.rows, "inner dimension");
    assert_eq!(am.rows, cm.rows, "row dimension");
    assert_eq!(bm.cols, cm.cols, "col dimension");
    if cm.rows == 0 || cm.cols == 0 {
        return;
    }
    if am.cols == 0 {
        for i in 0..cm.rows {
            for j in 0..cm.cols {
                let idx = cm.offset + i * cm.rs + j * cm.cs;
                c[idx] = beta * c[idx];
            }
        }
        return;
    }
    assert!(am.max_index() < a.len(), "lhs out of bounds");
    assert!(bm.max_index() < b.len(), "rhs out of bounds");
    assert!(cm.max_index() < c.len(), "output out of bounds");
    // SAFETY: all addressed elements were bounds-checked above.
    unsafe {
        T::gemm_raw(
            am.rows,
            am.cols,
            bm.cols,
            T::one(),
            a.as_ptr().add(am.offset),
            am.rs as isize,
            am.cs as isize,
            b.as_ptr().add(bm.offset),
            bm.rs as isize,
            bm.cs as isize,
            beta,
            c.as_mut_ptr().add(cm.offset),
            cm.rs as isize,
            cm.cs as isize,
        );
    }
}

/// `y (n x out) = x (n x in) . w^T` where `w` is stored `out x in`.
pub fn linear<T: Real>(x: &[T], w: &[T], n: usize, inp: usize, out: usize, y: &mut [T]) {
    gemm(x, Mat::row_major(n, inp), w, Mat::row_major(out, inp).t(), T::zero(), y, Mat::row_major(n, out));
}

/// Backward of [`linear`]: `dx (+)= dy . w`, `dw += dy^T . x`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    dy: &[T],
    x: &[T],
    w: &[T],
    n: usize,
    inp: usize,
    out: usize,
    dx: &mut [T],
    accumulate_dx: bool,
    dw: &mut [T],
) {
    let beta = if accumulate_dx { T::one() } else { T::zero() };
    gemm(dy, Mat::row_major(n, out), w, Mat::row_major(out, inp), beta, dx, Mat::row_major(n, inp));
    gemm(dy, Mat::row_major(n, out).t(), x, Mat::row_major(n, inp), T::one(), dw, Mat::row_major(out, inp));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_matches_naive() {
        let x: Vec<f64> = (0..6).map(|i| i as f64).collect(); // 2x3
        let w: Vec<f64> = (0..12).map(|i| (i as f64) * 0.5 - 2.0).collect(); // 4x3
        let mut y = vec![0.0; 8];
        linear(&x, &w, 2, 3, 4, &mut y);
        for r in 0..2 {
            for o in 0..4 {
                let want: f64 = (0..3).map(|i| x[r * 3 + i] * w[o * 3 + i]).sum();
                assert_eq!(y[r * 4 + o], want);
            }
        }
    }
}
