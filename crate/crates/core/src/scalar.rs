//! Scalar abstraction for the float tensor math.
//!
//! Everything numeric in the float paths (convolutions, batch norm, losses,
//! training) is generic over [`Scalar`], which is `f32` or `f64`. The crate
//! root exports `type Real = f64` and all shipped binaries train in f64; the
//! f32 instantiation exists so the math stays honest about what it needs
//! from the element type.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point element type for tensors.
///
/// The one non-obvious member is `gemm`: dense matrix multiply dispatched to
/// an architecture-tuned kernel. Convolution forward and backward lower onto
/// it, so it is the single place where performance matters.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// `c := alpha * op(a) * op(b) + beta * c` over row-major slices, where
    /// `op` is an optional transpose. `a` is m-by-k after `op`, `b` is
    /// k-by-n after `op`, `c` is m-by-n.
    ///
    /// Panics if any slice is shorter than its shape requires.
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn from_real(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts to any Scalar")
    }

    fn to_real(self) -> f64;
}

/// Row/column strides of a row-major matrix, after an optional transpose.
/// A stored r-by-c matrix read transposed is c-by-r with swapped strides.
fn strides(rows_stored: usize, cols_stored: usize, trans: bool) -> (isize, isize) {
    let _ = rows_stored;
    if trans {
        (1, cols_stored as isize)
    } else {
        (cols_stored as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm: a has {} elements, needs {}", a.len(), m * k);
                assert!(b.len() >= k * n, "gemm: b has {} elements, needs {}", b.len(), k * n);
                assert!(c.len() >= m * n, "gemm: c has {} elements, needs {}", c.len(), m * n);
                // Stored layouts: a is m-by-k (or k-by-m if transposed), b is
                // k-by-n (or n-by-k). Strides describe the logical m-by-k and
                // k-by-n views.
                let (rsa, csa) = strides(m, if a_trans { m } else { k }, a_trans);
                let (rsb, csb) = strides(k, if b_trans { k } else { n }, b_trans);
                unsafe {
                    $gemm(
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

            fn to_real(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    fn gemm_naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.89).cos()).collect();
        let want = gemm_naive(m, k, n, &a, &b);
        let mut c = vec![0.0; m * n];
        f64::gemm(m, k, n, 1.0, &a, false, &b, false, 0.0, &mut c);
        for (got, want) in c.iter().zip(&want) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn gemm_transposed_operands() {
        let (m, k, n) = (4, 6, 5);
        // a stored k-by-m, b stored n-by-k; logical product is still m-by-n.
        let a_t: Vec<f64> = (0..k * m).map(|i| i as f64 * 0.01 - 0.1).collect();
        let b_t: Vec<f64> = (0..n * k).map(|i| i as f64 * 0.02 - 0.3).collect();
        let mut a = vec![0.0; m * k];
        for p in 0..k {
            for i in 0..m {
                a[i * k + p] = a_t[p * m + i];
            }
        }
        let mut b = vec![0.0; k * n];
        for j in 0..n {
            for p in 0..k {
                b[p * n + j] = b_t[j * k + p];
            }
        }
        let want = gemm_naive(m, k, n, &a, &b);
        let mut c = vec![0.0; m * n];
        f64::gemm(m, k, n, 1.0, &a_t, true, &b_t, true, 0.0, &mut c);
        for (got, want) in c.iter().zip(&want) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn gemm_accumulates_with_beta() {
        let (m, k, n) = (2, 3, 2);
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = vec![10.0; m * n];
        f64::gemm(m, k, n, 2.0, &a, false, &b, false, 1.0, &mut c);
        let base = gemm_naive(m, k, n, &a, &b);
        for i in 0..m * n {
            assert!((c[i] - (10.0 + 2.0 * base[i])).abs() < 1e-12);
        }
    }
}
