//! Small dense helpers for `d × d` matrices stored row-major in slices.
//!
//! Anything beyond the diagonal fast paths goes through nalgebra in `f64`.

use nalgebra::DMatrix;

use crate::real::Real;

fn to_dmatrix<T: Real>(a: &[T], d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| a[i * d + j].f64())
}

fn is_diagonal<T: Real>(a: &[T], d: usize) -> bool {
    (0..d).all(|i| (0..d).all(|j| i == j || a[i * d + j] == T::zero()))
}

/// Symmetric positive semidefinite square root; tiny negative eigenvalues are clipped to 0.
pub fn sym_sqrt<T: Real>(a: &[T], d: usize, out: &mut [T]) {
    if is_diagonal(a, d) {
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = if i == j {
                    a[i * d + i].max(T::zero()).sqrt()
                } else {
                    T::zero()
                };
            }
        }
        return;
    }
    let m = to_dmatrix(a, d);
    let sym = (&m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut root = DMatrix::<f64>::zeros(d, d);
    for k in 0..d {
        let lam = eig.eigenvalues[k].max(0.0).sqrt();
        let v = eig.eigenvectors.column(k);
        root += v * v.transpose() * lam;
    }
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = T::lit(root[(i, j)]);
        }
    }
}

/// Inverse of a small matrix. Returns false when it is singular.
pub fn invert<T: Real>(a: &[T], d: usize, out: &mut [T]) -> bool {
    if d == 1 {
        if a[0] == T::zero() || !a[0].is_finite() {
            return false;
        }
        out[0] = T::one() / a[0];
        return true;
    }
    if is_diagonal(a, d) {
        for i in 0..d {
            let v = a[i * d + i];
            if v == T::zero() {
                return false;
            }
            for j in 0..d {
                out[i * d + j] = if i == j { T::one() / v } else { T::zero() };
            }
        }
        return true;
    }
    match to_dmatrix(a, d).try_inverse() {
        Some(inv) => {
            for i in 0..d {
                for j in 0..d {
                    out[i * d + j] = T::lit(inv[(i, j)]);
                }
            }
            true
        }
        None => false,
    }
}

/// Row vector times matrix: `out = v · A` for `v` of length `rows`, `A` of shape `rows × cols`.
#[inline]
pub fn row_times<T: Real>(v: &[T], a: &[T], rows: usize, cols: usize, out: &mut [T]) {
    for j in 0..cols {
        let mut s = T::zero();
        for i in 0..rows {
            s = s + v[i] * a[i * cols + j];
        }
        out[j] = s;
    }
}

/// Matrix times column vector: `out = A · v` for `A` of shape `rows × cols`.
#[inline]
pub fn times_col<T: Real>(a: &[T], v: &[T], rows: usize, cols: usize, out: &mut [T]) {
    for i in 0..rows {
        let mut s = T::zero();
        for j in 0..cols {
            s = s + a[i * cols + j] * v[j];
        }
        out[i] = s;
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

/// Quadratic form `v A v*`.
#[inline]
pub fn quad_form<T: Real>(v: &[T], a: &[T], d: usize) -> T {
    let mut s = T::zero();
    for i in 0..d {
        for j in 0..d {
            s = s + v[i] * a[i * d + j] * v[j];
        }
    }
    s
}
