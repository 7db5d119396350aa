//! Small dense linear algebra: symmetric eigendecomposition, PSD matrix
//! square root, and singular values. Sizes here top out at d=64, so cyclic
//! Jacobi is plenty and keeps everything dependency-free and deterministic.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{mm_nn, Tensor};

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns), eigenvalues descending.
pub fn symmetric_eigen(matrix: &Tensor) -> (Vec<f64>, Tensor) {
    assert_eq!(matrix.shape().len(), 2);
    let n = matrix.shape()[0];
    assert_eq!(matrix.shape()[1], n, "symmetric_eigen needs a square matrix");
    let mut a = matrix.data().to_vec();
    let mut v = Tensor::eye(n).into_data();

    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + libm::sqrt(1.0 + theta * theta))
                } else {
                    -1.0 / (-theta + libm::sqrt(1.0 + theta * theta))
                };
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = t * c;

                for i in 0..n {
                    let aip = a[i * n + p];
                    let aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let apj = a[p * n + j];
                    let aqj = a[q * n + j];
                    a[p * n + j] = c * apj - s * aqj;
                    a[q * n + j] = s * apj + c * aqj;
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap());

    let eigenvalues: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = Tensor::zeros(&[n, n]);
    for (new_col, &old_col) in order.iter().enumerate() {
        for i in 0..n {
            vectors.data_mut()[i * n + new_col] = v[i * n + old_col];
        }
    }
    (eigenvalues, vectors)
}

/// Square root of a symmetric PSD matrix via eigendecomposition, clamping
/// negative eigenvalues (small-sample covariance noise) to zero.
pub fn sqrtm_psd(matrix: &Tensor) -> Tensor {
    let n = matrix.shape()[0];
    let (vals, vecs) = symmetric_eigen(matrix);
    // V * sqrt(diag) * V^T
    let mut scaled = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let root = libm::sqrt(vals[j].max(0.0));
            scaled[i * n + j] = vecs.data()[i * n + j] * root;
        }
    }
    let vt = vecs.transposed();
    let mut out = Tensor::zeros(&[n, n]);
    mm_nn(&scaled, vt.data(), n, n, n, out.data_mut());
    out
}

/// Trace of the principal square root of a symmetric PSD matrix: the sum of
/// the square roots of its (clamped) eigenvalues.
pub fn trace_sqrtm_psd(matrix: &Tensor) -> f64 {
    let (vals, _) = symmetric_eigen(matrix);
    vals.iter().map(|&l| libm::sqrt(l.max(0.0))).sum()
}

/// Singular values of an arbitrary [m, n] matrix, descending. Computed from
/// the eigenvalues of the smaller Gram matrix.
pub fn singular_values(matrix: &Tensor) -> Vec<f64> {
    assert_eq!(matrix.shape().len(), 2);
    let (m, n) = (matrix.shape()[0], matrix.shape()[1]);
    let gram = if m <= n {
        // A A^T is m x m
        matrix.matmul_bt(matrix)
    } else {
        let at = matrix.transposed();
        at.matmul_bt(&at)
    };
    let (vals, _) = symmetric_eigen(&gram);
    vals.iter().map(|&l| libm::sqrt(l.max(0.0))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_psd(n: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let a = Tensor::randn(&mut rng, 1.0, &[n, n]);
        // A A^T is PSD by construction.
        a.matmul_bt(&a)
    }

    #[test]
    fn eigen_reconstructs_matrix() {
        let m = random_psd(8, 42);
        let n = 8;
        let (vals, vecs) = symmetric_eigen(&m);
        // V diag(vals) V^T == M
        let mut vd = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                vd[i * n + j] = vecs.data()[i * n + j] * vals[j];
            }
        }
        let vt = vecs.transposed();
        let mut recon = vec![0.0; n * n];
        mm_nn(&vd, vt.data(), n, n, n, &mut recon);
        for (r, o) in recon.iter().zip(m.data()) {
            assert!((r - o).abs() < 1e-9, "reconstruction off: {r} vs {o}");
        }
    }

    #[test]
    fn eigenvalues_sorted_descending() {
        let m = random_psd(6, 7);
        let (vals, _) = symmetric_eigen(&m);
        for w in vals.windows(2) {
            assert!(w[0] >= w[1] - 1e-12);
        }
    }

    #[test]
    fn sqrtm_squares_back() {
        let m = random_psd(6, 3);
        let s = sqrtm_psd(&m);
        let s2 = s.matmul(&s);
        for (r, o) in s2.data().iter().zip(m.data()) {
            assert!((r - o).abs() < 1e-8, "sqrtm check: {r} vs {o}");
        }
    }

    #[test]
    fn singular_values_of_diagonal() {
        // diag(3, -2) has singular values {3, 2}.
        let m = Tensor::new(vec![3.0, 0.0, 0.0, -2.0], &[2, 2]);
        let sv = singular_values(&m);
        assert!((sv[0] - 3.0).abs() < 1e-10);
        assert!((sv[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn singular_values_match_on_rectangular() {
        let mut rng = Rng::new(5);
        let a = Tensor::randn(&mut rng, 1.0, &[4, 7]);
        let sv_a = singular_values(&a);
        let sv_at = singular_values(&a.transposed());
        for (x, y) in sv_a.iter().zip(&sv_at) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
