//! Flat row-major f64 tensors and the matrix kernels everything runs on.
//!
//! The three matmul kernels are all written in the (i, k, j) broadcast form so
//! the inner loop is an independent elementwise multiply-add over `j` — that
//! form autovectorizes without float reassociation, which keeps results
//! bit-identical across runs and platforms.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    data: Vec<f64>,
    shape: Vec<usize>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length does not match shape {shape:?}"
        );
        Tensor {
            data,
            shape: shape.to_vec(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            data: vec![0.0; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn filled(value: f64, shape: &[usize]) -> Self {
        Tensor {
            data: vec![value; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            data: vec![value],
            shape: vec![1],
        }
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn(rng: &mut Rng, std_dev: f64, shape: &[usize]) -> Self {
        Tensor {
            data: rng.normal_vec(shape.iter().product(), std_dev),
            shape: shape.to_vec(),
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same data, new shape (element count must match).
    pub fn reshaped(&self, shape: &[usize]) -> Tensor {
        assert_eq!(self.numel(), shape.iter().product::<usize>());
        Tensor {
            data: self.data.clone(),
            shape: shape.to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn shape_string(&self) -> String {
        format!("{:?}", self.shape)
    }

    pub fn check_same_shape(&self, other: &Tensor, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context,
                expected: self.shape_string(),
                got: other.shape_string(),
            });
        }
        Ok(())
    }

    /// Matrix transpose of a 2-d tensor.
    pub fn transposed(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2);
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            shape: self.shape.clone(),
        }
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape);
        Tensor {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
            shape: self.shape.clone(),
        }
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape);
        Tensor {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
            shape: self.shape.clone(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        let n = self.numel() as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    }

    /// Frobenius norm.
    pub fn frobenius_norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum::<f64>())
    }

    /// 2-d matrix product, allocating the output.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape.len(), 2);
        assert_eq!(other.shape.len(), 2);
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = Tensor::zeros(&[m, n]);
        mm_nn(&self.data, &other.data, m, k, n, &mut out.data);
        out
    }

    /// `self @ other^T` for 2-d tensors.
    pub fn matmul_bt(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape.len(), 2);
        assert_eq!(other.shape.len(), 2);
        let (m, k) = (self.shape[0], self.shape[1]);
        let (n, k2) = (other.shape[0], other.shape[1]);
        assert_eq!(k, k2, "matmul_bt inner dims {k} vs {k2}");
        let mut out = Tensor::zeros(&[m, n]);
        mm_nt(&self.data, &other.data, m, k, n, &mut out.data);
        out
    }

    /// Matrix-vector product of a [m, n] matrix with an [n] vector.
    pub fn matvec(&self, v: &Tensor) -> Tensor {
        assert_eq!(self.shape.len(), 2);
        let (m, n) = (self.shape[0], self.shape[1]);
        assert_eq!(v.numel(), n);
        let mut out = Tensor::zeros(&[m]);
        mm_nn(&self.data, v.data(), m, n, 1, &mut out.data);
        out
    }
}

// ── Matmul kernels ───────────────────────────────────────────────────

/// out[m,n] += a[m,k] @ b[k,n]
pub fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[k,m]^T @ b[k,n]
pub fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] @ b[n,k]^T
pub fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    // Transpose b once so the inner loop stays in broadcast form.
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for kk in 0..k {
            bt[kk * n + j] = b[j * k + kk];
        }
    }
    mm_nn(a, &bt, m, k, n, out);
}

// ── Convolution support ──────────────────────────────────────────────

/// Output spatial side for a conv with the given geometry.
#[inline]
pub fn conv_out_side(side: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (side + 2 * pad - kernel) / stride + 1
}

/// Unfold x[cin, h, w] into columns [cin*kh*kw, oh*ow] for a kernel of side
/// `kernel`, stride `stride`, zero padding `pad`.
pub fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = conv_out_side(h, kernel, stride, pad);
    let ow = conv_out_side(w, kernel, stride, pad);
    let positions = oh * ow;
    let mut cols = vec![0.0; cin * kernel * kernel * positions];
    for c in 0..cin {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = (c * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = x[src_row + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Fold column gradients back onto the input image (adjoint of `im2col`).
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out: &mut [f64],
) {
    let oh = conv_out_side(h, kernel, stride, pad);
    let ow = conv_out_side(w, kernel, stride, pad);
    let positions = oh * ow;
    debug_assert_eq!(out.len(), cin * h * w);
    for c in 0..cin {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (c * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[dst_row + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_example() {
        // [[1,2],[3,4]] @ [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = Tensor::new(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]);
        assert_eq!(a.matmul(&b).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn kernels_agree_on_random_inputs() {
        let mut rng = Rng::new(11);
        let (m, k, n) = (5, 7, 3);
        let a = Tensor::randn(&mut rng, 1.0, &[m, k]);
        let b = Tensor::randn(&mut rng, 1.0, &[k, n]);
        let reference = a.matmul(&b);

        // mm_tn with a pre-transposed A must match.
        let at = a.transposed();
        let mut out = vec![0.0; m * n];
        mm_tn(at.data(), b.data(), m, k, n, &mut out);
        for (x, y) in out.iter().zip(reference.data()) {
            assert!((x - y).abs() < 1e-12);
        }

        // mm_nt with a pre-transposed B must match.
        let bt = b.transposed();
        let mut out2 = vec![0.0; m * n];
        mm_nt(a.data(), bt.data(), m, k, n, &mut out2);
        for (x, y) in out2.iter().zip(reference.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let mut rng = Rng::new(3);
        let (cin, h, w, cout, kernel, stride, pad) = (2, 5, 5, 3, 3, 2, 1);
        let x = Tensor::randn(&mut rng, 1.0, &[cin, h, w]);
        let wt = Tensor::randn(&mut rng, 1.0, &[cout, cin * kernel * kernel]);
        let oh = conv_out_side(h, kernel, stride, pad);
        let ow = conv_out_side(w, kernel, stride, pad);

        let cols = im2col(x.data(), cin, h, w, kernel, stride, pad);
        let mut fast = vec![0.0; cout * oh * ow];
        mm_nn(wt.data(), &cols, cout, cin * kernel * kernel, oh * ow, &mut fast);

        // Direct nested-loop convolution as the oracle.
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[(ci * h + iy as usize) * w + ix as usize];
                                let wv = wt.data()
                                    [co * cin * kernel * kernel + (ci * kernel + ky) * kernel + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    let got = fast[(co * oh + oy) * ow + ox];
                    assert!((acc - got).abs() < 1e-12, "mismatch at {co},{oy},{ox}");
                }
            }
        }
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(Tensor::zeros(&[2, 2]).frobenius_norm(), 0.0);
        let t = Tensor::new(vec![3.0, 4.0, 0.0, 0.0], &[2, 2]);
        assert!((t.frobenius_norm() - 5.0).abs() < 1e-12);
    }
}
