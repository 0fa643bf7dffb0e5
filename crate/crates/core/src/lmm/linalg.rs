//! Dense kernels for the small (p ≤ 8) fixed-effects systems.

use super::Scalar;

/// Lower Cholesky factor of a symmetric positive-definite row-major `p×p`
/// matrix, or `None` when a pivot is not positive.
pub(crate) fn cholesky<T: Scalar>(a: &[T], p: usize) -> Option<Vec<T>> {
    let mut l = vec![T::zero(); p * p];
    for i in 0..p {
        for j in 0..=i {
            let mut s = a[i * p + j];
            for k in 0..j {
                s = s - l[i * p + k] * l[j * p + k];
            }
            if i == j {
                if !(s > T::zero()) || !s.is_finite() {
                    return None;
                }
                l[i * p + i] = s.sqrt();
            } else {
                l[i * p + j] = s / l[j * p + j];
            }
        }
    }
    Some(l)
}

/// Solve `L Lᵀ x = b`.
pub(crate) fn chol_solve<T: Scalar>(l: &[T], p: usize, b: &[T]) -> Vec<T> {
    let mut y = b.to_vec();
    for i in 0..p {
        let mut s = y[i];
        for k in 0..i {
            s = s - l[i * p + k] * y[k];
        }
        y[i] = s / l[i * p + i];
    }
    for i in (0..p).rev() {
        let mut s = y[i];
        for k in i + 1..p {
            s = s - l[k * p + i] * y[k];
        }
        y[i] = s / l[i * p + i];
    }
    y
}

pub(crate) fn chol_logdet<T: Scalar>(l: &[T], p: usize) -> T {
    (0..p).map(|i| l[i * p + i].ln()).sum::<T>() * T::lit(2.0)
}

/// Diagonal of `(L Lᵀ)⁻¹`.
pub(crate) fn chol_inverse_diag<T: Scalar>(l: &[T], p: usize) -> Vec<T> {
    (0..p)
        .map(|i| {
            let mut e = vec![T::zero(); p];
            e[i] = T::one();
            chol_solve(l, p, &e)[i]
        })
        .collect()
}

/// `vᵀ (L Lᵀ)⁻¹ v`.
pub(crate) fn chol_quad<T: Scalar>(l: &[T], p: usize, v: &[T]) -> T {
    // forward solve only: ‖L⁻¹ v‖²
    let mut y = v.to_vec();
    for i in 0..p {
        let mut s = y[i];
        for k in 0..i {
            s = s - l[i * p + k] * y[k];
        }
        y[i] = s / l[i * p + i];
    }
    y.iter().map(|&t| t * t).sum()
}
