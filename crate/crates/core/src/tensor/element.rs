use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_like::FloatLike;

/// Scalar type a [`Tensor`](super::Tensor) can hold.
///
/// `f64` is the test mode (gradient checks, oracle comparisons), `f32` the
/// train mode. Matrix products dispatch per type: `f64` uses a plain
/// left-to-right accumulation, `f32` the blocked `matrixmultiply` kernel.
pub trait Element:
    FloatLike + Copy + Default + Debug + Display + PartialOrd + Send + Sync + Sum + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = a · b` with `a` m×k and `b` k×n given by row/column strides; `c`
    /// is dense row-major m×n and is overwritten.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        c: &mut [Self],
    );
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F64 => f.write_str("f64"),
        }
    }
}

fn check_gemm_bounds<T>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    c: &[T],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
        assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    }
    assert!(c.len() >= m * n, "gemm: output too small");
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        (rsa, csa): (usize, usize),
        b: &[f64],
        (rsb, csb): (usize, usize),
        c: &mut [f64],
    ) {
        check_gemm_bounds(m, k, n, a, (rsa, csa), b, (rsb, csb), c);
        // Every c[i][j] accumulates over p in increasing order.
        for i in 0..m {
            let row = &mut c[i * n..(i + 1) * n];
            row.iter_mut().for_each(|v| *v = 0.0);
            for p in 0..k {
                let aip = a[i * rsa + p * csa];
                let boff = p * rsb;
                if csb == 1 {
                    let brow = &b[boff..boff + n];
                    for (cv, bv) in row.iter_mut().zip(brow) {
                        *cv += aip * bv;
                    }
                } else {
                    for (j, cv) in row.iter_mut().enumerate() {
                        *cv += aip * b[boff + j * csb];
                    }
                }
            }
        }
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        (rsa, csa): (usize, usize),
        b: &[f32],
        (rsb, csb): (usize, usize),
        c: &mut [f32],
    ) {
        check_gemm_bounds(m, k, n, a, (rsa, csa), b, (rsb, csb), c);
        if m == 0 || n == 0 {
            return;
        }
        if k == 0 {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        // SAFETY: extents and strides were checked against the slice lengths
        // above; `c` is a distinct mutable borrow of at least m*n elements.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Minimal float surface the engine relies on, kept local so the public
/// bound does not leak a third-party trait.
pub mod num_like {
    use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

    pub trait FloatLike:
        Sized
        + Add<Output = Self>
        + Sub<Output = Self>
        + Mul<Output = Self>
        + Div<Output = Self>
        + Neg<Output = Self>
        + AddAssign
        + SubAssign
        + MulAssign
    {
        fn zero() -> Self;
        fn one() -> Self;
        fn exp(self) -> Self;
        fn ln(self) -> Self;
        fn sqrt(self) -> Self;
        fn abs(self) -> Self;
        fn sin(self) -> Self;
        fn cos(self) -> Self;
        fn max(self, other: Self) -> Self;
        fn is_finite(self) -> bool;
        fn erf(self) -> Self;
    }

    impl FloatLike for f64 {
        fn zero() -> Self {
            0.0
        }
        fn one() -> Self {
            1.0
        }
        fn exp(self) -> Self {
            f64::exp(self)
        }
        fn ln(self) -> Self {
            f64::ln(self)
        }
        fn sqrt(self) -> Self {
            f64::sqrt(self)
        }
        fn abs(self) -> Self {
            f64::abs(self)
        }
        fn sin(self) -> Self {
            f64::sin(self)
        }
        fn cos(self) -> Self {
            f64::cos(self)
        }
        fn max(self, other: Self) -> Self {
            f64::max(self, other)
        }
        fn is_finite(self) -> bool {
            f64::is_finite(self)
        }
        fn erf(self) -> Self {
            libm::erf(self)
        }
    }

    impl FloatLike for f32 {
        fn zero() -> Self {
            0.0
        }
        fn one() -> Self {
            1.0
        }
        fn exp(self) -> Self {
            f32::exp(self)
        }
        fn ln(self) -> Self {
            f32::ln(self)
        }
        fn sqrt(self) -> Self {
            f32::sqrt(self)
        }
        fn abs(self) -> Self {
            f32::abs(self)
        }
        fn sin(self) -> Self {
            f32::sin(self)
        }
        fn cos(self) -> Self {
            f32::cos(self)
        }
        fn max(self, other: Self) -> Self {
            f32::max(self, other)
        }
        fn is_finite(self) -> bool {
            f32::is_finite(self)
        }
        fn erf(self) -> Self {
            libm::erff(self)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_f64_matches_naive_with_transposed_rhs() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        // b stored transposed (n×k row-major)
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c = vec![7.0; m * n];
        f64::gemm(m, k, n, &a, (k, 1), &bt, (1, k), &mut c);
        assert_eq!(c, naive(m, k, n, &a, &b));
    }

    #[test]
    fn gemm_f32_close_to_f64() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).cos()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).sin()).collect();
        let want = naive(m, k, n, &a, &b);
        let af: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        let bf: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        let mut c = vec![0f32; m * n];
        f32::gemm(m, k, n, &af, (k, 1), &bf, (n, 1), &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((*x as f64 - y).abs() < 1e-5);
        }
    }
}
