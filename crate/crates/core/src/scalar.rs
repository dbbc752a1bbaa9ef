//! Floating-point element type for model tensors, plus the dense matrix kernels.
//!
//! Models are generic over `f32` (training and planning) and `f64` (gradient checks).
//! All matrices are row-major.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, NumAssign};

pub trait Scalar:
    Float + FromPrimitive + NumAssign + Default + Debug + Send + Sync + Copy + 'static
{
    const DTYPE: &'static str;

    /// `c = alpha * op(a) * op(b) + beta * c` with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        beta: Self,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn to_le_bytes_vec(values: &[Self], out: &mut Vec<u8>);
    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<f64>;
    fn byte_width() -> usize;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        c: &mut [f32],
        beta: f32,
    ) {
        // SAFETY: callers (the wrappers below) check every slice covers the strided extent.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
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

    fn to_le_bytes_vec(values: &[f32], out: &mut Vec<u8>) {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<f64> {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect()
    }

    fn byte_width() -> usize {
        4
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        c: &mut [f64],
        beta: f64,
    ) {
        // SAFETY: see the f32 impl.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
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

    fn to_le_bytes_vec(values: &[f64], out: &mut Vec<u8>) {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<f64> {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect()
    }

    fn byte_width() -> usize {
        8
    }
}

#[inline]
fn beta_of<T: Scalar>(accumulate: bool) -> T {
    if accumulate {
        T::one()
    } else {
        T::zero()
    }
}

/// `c (m×n) [+]= a (m×k) · b (k×n)`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    T::gemm_raw(m, k, n, a, k as isize, 1, b, n as isize, 1, c, beta_of(accumulate));
}

/// `c (m×n) [+]= aᵀ · b` where `a` is stored k×m and `b` is k×n.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    T::gemm_raw(m, k, n, a, 1, m as isize, b, n as isize, 1, c, beta_of(accumulate));
}

/// `c (m×n) [+]= a · bᵀ` where `a` is m×k and `b` is stored n×k.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    T::gemm_raw(m, k, n, a, k as isize, 1, b, 1, k as isize, c, beta_of(accumulate));
}

pub fn to_scalar_vec<T: Scalar>(values: &[f64]) -> Vec<T> {
    values.iter().map(|&v| T::from_f64_lossy(v)).collect()
}

pub fn to_f64_vec<T: Scalar>(values: &[T]) -> Vec<f64> {
    values.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
}
