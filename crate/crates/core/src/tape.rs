//! Reverse-mode autodiff on a recorded operation tape.
//!
//! The forward pass appends ops to a linear tape; `backward` replays it in
//! reverse, accumulating gradients. Buffers are flat f64 tensors; every
//! backward rule is covered by the finite-difference suite in
//! `tests/gradcheck.rs`.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{col2im, conv_out_side, im2col, mm_nn, mm_nt, mm_tn, Tensor};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, k: f64 },
    /// [m, n] plus a broadcast [n] row.
    AddRow { a: Var, row: Var },
    /// [c, s] plus a broadcast [c] column (conv bias, per-channel shifts).
    AddChan { a: Var, chan: Var },
    Matmul { a: Var, b: Var },
    /// a @ b^T
    MatmulNT { a: Var, b: Var },
    Transpose { a: Var },
    /// Select one row of a matrix.
    RowSelect { a: Var, row: usize },
    /// Contiguous row slice of a matrix.
    SliceRows { a: Var, start: usize, len: usize },
    /// Contiguous column slice of a matrix.
    SliceCols { a: Var, start: usize, len: usize },
    /// Same data, different shape.
    Reshape { a: Var },
    /// Stack 1-d or 2-d inputs along rows.
    ConcatRows { parts: Vec<Var> },
    /// Stack 2-d inputs along columns.
    ConcatCols { parts: Vec<Var> },
    Sum { a: Var },
    Mean { a: Var },
    /// Mean over each row of a matrix: [m, n] -> [m].
    RowMeans { a: Var },
    Sqrt { a: Var },
    Exp { a: Var },
    Sigmoid { a: Var },
    Silu { a: Var },
    Gelu { a: Var },
    SoftmaxRows { a: Var },
    L2NormRows { a: Var },
    LayerNorm { a: Var, gamma: Var, beta: Var },
    GroupNorm { a: Var, gamma: Var, beta: Var, groups: usize },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    Upsample2x { a: Var },
    Gather { table: Var, indices: Vec<usize> },
    /// -mean_i log softmax(row_i)[i] over a square logit matrix.
    CeDiag { logits: Var },
    /// -mean_i log softmax(row_i)[target_i].
    CeRows { logits: Var, targets: Vec<usize> },
}

const NORM_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;

/// Recorded computation graph.
pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<Tensor>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    fn push(&mut self, op: Op, val: Tensor) -> Var {
        self.vals.push(val);
        self.ops.push(op);
        Var(self.vals.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let val = self.vals[a.0].add(&self.vals[b.0]);
        self.push(Op::Add { a, b }, val)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let val = self.vals[a.0].sub(&self.vals[b.0]);
        self.push(Op::Sub { a, b }, val)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        assert_eq!(ta.shape(), tb.shape());
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let val = Tensor::new(data, ta.shape());
        self.push(Op::Mul { a, b }, val)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let val = self.vals[a.0].scale(k);
        self.push(Op::Scale { a, k }, val)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (&self.vals[a.0], &self.vals[row.0]);
        let n = *ta.shape().last().unwrap();
        assert_eq!(tr.numel(), n, "add_row width mismatch");
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (d, r) in chunk.iter_mut().zip(tr.data()) {
                *d += r;
            }
        }
        let val = Tensor::new(data, ta.shape());
        self.push(Op::AddRow { a, row }, val)
    }

    pub fn add_chan(&mut self, a: Var, chan: Var) -> Var {
        let (ta, tc) = (&self.vals[a.0], &self.vals[chan.0]);
        let c = ta.shape()[0];
        assert_eq!(tc.numel(), c, "add_chan channel mismatch");
        let s = ta.numel() / c;
        let mut data = ta.data().to_vec();
        for (ch, chunk) in data.chunks_mut(s).enumerate() {
            let shift = tc.data()[ch];
            for d in chunk.iter_mut() {
                *d += shift;
            }
        }
        let val = Tensor::new(data, ta.shape());
        self.push(Op::AddChan { a, chan }, val)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let val = self.vals[a.0].matmul(&self.vals[b.0]);
        self.push(Op::Matmul { a, b }, val)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let val = self.vals[a.0].matmul_bt(&self.vals[b.0]);
        self.push(Op::MatmulNT { a, b }, val)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].transposed();
        self.push(Op::Transpose { a }, val)
    }

    pub fn row_select(&mut self, a: Var, row: usize) -> Var {
        let ta = &self.vals[a.0];
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        assert!(row < m);
        let val = Tensor::new(ta.data()[row * n..(row + 1) * n].to_vec(), &[n]);
        self.push(Op::RowSelect { a, row }, val)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = &self.vals[a.0];
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        assert!(start + len <= m);
        let val = Tensor::new(ta.data()[start * n..(start + len) * n].to_vec(), &[len, n]);
        self.push(Op::SliceRows { a, start, len }, val)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = &self.vals[a.0];
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        assert!(start + len <= n);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&ta.data()[i * n + start..i * n + start + len]);
        }
        let val = Tensor::new(data, &[m, len]);
        self.push(Op::SliceCols { a, start, len }, val)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let val = self.vals[a.0].reshaped(shape);
        self.push(Op::Reshape { a }, val)
    }

    /// Rows of every part stacked in order. 1-d parts count as single rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = *self.vals[parts[0].0].shape().last().unwrap();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = &self.vals[p.0];
            assert_eq!(*t.shape().last().unwrap(), n);
            rows += t.numel() / n;
            data.extend_from_slice(t.data());
        }
        let val = Tensor::new(data, &[rows, n]);
        self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            val,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.vals[parts[0].0].shape()[0];
        let widths: Vec<usize> = parts.iter().map(|p| self.vals[p.0].shape()[1]).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let t = &self.vals[p.0];
            assert_eq!(t.shape()[0], m);
            for i in 0..m {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let val = Tensor::new(data, &[m, total]);
        self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            val,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let val = Tensor::scalar(self.vals[a.0].data().iter().sum());
        self.push(Op::Sum { a }, val)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.vals[a.0];
        let val = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push(Op::Mean { a }, val)
    }

    pub fn row_means(&mut self, a: Var) -> Var {
        let t = &self.vals[a.0];
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let data = (0..m)
            .map(|i| t.data()[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        let val = Tensor::new(data, &[m]);
        self.push(Op::RowMeans { a }, val)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].map(libm::sqrt);
        self.push(Op::Sqrt { a }, val)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].map(libm::exp);
        self.push(Op::Exp { a }, val)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].map(sigmoid);
        self.push(Op::Sigmoid { a }, val)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].map(|x| x * sigmoid(x));
        self.push(Op::Silu { a }, val)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].map(gelu);
        self.push(Op::Gelu { a }, val)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = &self.vals[a.0];
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            softmax_into(&t.data()[i * n..(i + 1) * n], &mut data[i * n..(i + 1) * n]);
        }
        let val = Tensor::new(data, &[m, n]);
        self.push(Op::SoftmaxRows { a }, val)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let t = &self.vals[a.0];
        let n = *t.shape().last().unwrap();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>()).max(L2_EPS);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let val = Tensor::new(data, t.shape());
        self.push(Op::L2NormRows { a }, val)
    }

    /// Row-wise layer norm with per-column affine parameters.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        let (t, g, b) = (&self.vals[a.0], &self.vals[gamma.0], &self.vals[beta.0]);
        let n = *t.shape().last().unwrap();
        assert_eq!(g.numel(), n);
        assert_eq!(b.numel(), n);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let (mean, var) = moments(row);
            let inv = 1.0 / libm::sqrt(var + NORM_EPS);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g.data()[j] + b.data()[j];
            }
        }
        let val = Tensor::new(data, t.shape());
        self.push(Op::LayerNorm { a, gamma, beta }, val)
    }

    /// Group norm over [c, ...spatial] with per-channel affine parameters.
    pub fn group_norm(&mut self, a: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (t, g, b) = (&self.vals[a.0], &self.vals[gamma.0], &self.vals[beta.0]);
        let c = t.shape()[0];
        assert_eq!(c % groups, 0, "channels {c} not divisible by {groups}");
        assert_eq!(g.numel(), c);
        assert_eq!(b.numel(), c);
        let s = t.numel() / c;
        let group_len = (c / groups) * s;
        let mut data = t.data().to_vec();
        for chunk in data.chunks_mut(group_len) {
            let (mean, var) = moments(chunk);
            let inv = 1.0 / libm::sqrt(var + NORM_EPS);
            for v in chunk.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        for (ch, chunk) in data.chunks_mut(s).enumerate() {
            let (gc, bc) = (g.data()[ch], b.data()[ch]);
            for v in chunk.iter_mut() {
                *v = *v * gc + bc;
            }
        }
        let val = Tensor::new(data, t.shape());
        self.push(
            Op::GroupNorm {
                a,
                gamma,
                beta,
                groups,
            },
            val,
        )
    }

    /// 2-d convolution; x is [cin, h, w], w is [cout, cin, k, k].
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (tx, tw) = (&self.vals[x.0], &self.vals[w.0]);
        let (cin, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (cout, cin_w, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        assert_eq!(cin, cin_w, "conv2d channel mismatch");
        assert_eq!(tw.shape()[3], k);
        let oh = conv_out_side(h, k, stride, pad);
        let ow = conv_out_side(wd, k, stride, pad);
        let cols = im2col(tx.data(), cin, h, wd, k, stride, pad);
        let mut out = vec![0.0; cout * oh * ow];
        mm_nn(tw.data(), &cols, cout, cin * k * k, oh * ow, &mut out);
        let val = Tensor::new(out, &[cout, oh, ow]);
        self.push(Op::Conv2d { x, w, stride, pad }, val)
    }

    pub fn upsample2x(&mut self, a: Var) -> Var {
        let t = &self.vals[a.0];
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let mut data = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = t.data()[(ch * h + y) * w + x];
                    let base = ch * 4 * h * w;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            data[base + (2 * y + dy) * 2 * w + 2 * x + dx] = v;
                        }
                    }
                }
            }
        }
        let val = Tensor::new(data, &[c, 2 * h, 2 * w]);
        self.push(Op::Upsample2x { a }, val)
    }

    /// Row lookups into an embedding table.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = &self.vals[table.0];
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &idx in indices {
            assert!(idx < v, "token id {idx} out of range {v}");
            data.extend_from_slice(&t.data()[idx * d..(idx + 1) * d]);
        }
        let val = Tensor::new(data, &[indices.len(), d]);
        self.push(
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            val,
        )
    }

    /// Symmetric-contrastive building block: mean over rows of the negative
    /// log softmax probability on the diagonal.
    pub fn cross_entropy_diag(&mut self, logits: Var) -> Var {
        let t = &self.vals[logits.0];
        let n = t.shape()[0];
        assert_eq!(t.shape()[1], n, "cross_entropy_diag needs square logits");
        let mut loss = 0.0;
        let mut probs = vec![0.0; n];
        for i in 0..n {
            softmax_into(&t.data()[i * n..(i + 1) * n], &mut probs);
            loss -= libm::log(probs[i].max(1e-300));
        }
        let val = Tensor::scalar(loss / n as f64);
        self.push(Op::CeDiag { logits }, val)
    }

    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let t = &self.vals[logits.0];
        let (m, k) = (t.shape()[0], t.shape()[1]);
        assert_eq!(targets.len(), m);
        let mut loss = 0.0;
        let mut probs = vec![0.0; k];
        for (i, &target) in targets.iter().enumerate() {
            assert!(target < k);
            softmax_into(&t.data()[i * k..(i + 1) * k], &mut probs);
            loss -= libm::log(probs[target].max(1e-300));
        }
        let val = Tensor::scalar(loss / m as f64);
        self.push(
            Op::CeRows {
                logits,
                targets: targets.to_vec(),
            },
            val,
        )
    }

    /// Mean squared error between two equal-shaped values, as a composite.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Run reverse-mode accumulation from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.vals[root.0].numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.vals.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop_op(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn accumulate(grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
        match &mut grads[var.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_op(&self, idx: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::Add { a, b } => {
                Self::accumulate(grads, *a, dy.clone());
                Self::accumulate(grads, *b, dy.clone());
            }
            Op::Sub { a, b } => {
                Self::accumulate(grads, *a, dy.clone());
                Self::accumulate(grads, *b, dy.scale(-1.0));
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
                let da = Tensor::new(
                    dy.data().iter().zip(tb.data()).map(|(d, v)| d * v).collect(),
                    ta.shape(),
                );
                let db = Tensor::new(
                    dy.data().iter().zip(ta.data()).map(|(d, v)| d * v).collect(),
                    tb.shape(),
                );
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
            Op::Scale { a, k } => {
                Self::accumulate(grads, *a, dy.scale(*k));
            }
            Op::AddRow { a, row } => {
                Self::accumulate(grads, *a, dy.clone());
                let n = self.vals[row.0].numel();
                let mut dr = vec![0.0; n];
                for chunk in dy.data().chunks(n) {
                    for (d, c) in dr.iter_mut().zip(chunk) {
                        *d += c;
                    }
                }
                Self::accumulate(grads, *row, Tensor::new(dr, self.vals[row.0].shape()));
            }
            Op::AddChan { a, chan } => {
                Self::accumulate(grads, *a, dy.clone());
                let c = self.vals[chan.0].numel();
                let s = dy.numel() / c;
                let mut dc = vec![0.0; c];
                for (ch, chunk) in dy.data().chunks(s).enumerate() {
                    dc[ch] = chunk.iter().sum();
                }
                Self::accumulate(grads, *chan, Tensor::new(dc, self.vals[chan.0].shape()));
            }
            Op::Matmul { a, b } => {
                let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let mut da = vec![0.0; m * k];
                mm_nt(dy.data(), tb.data(), m, n, k, &mut da);
                let mut db = vec![0.0; k * n];
                mm_tn(ta.data(), dy.data(), k, m, n, &mut db);
                Self::accumulate(grads, *a, Tensor::new(da, ta.shape()));
                Self::accumulate(grads, *b, Tensor::new(db, tb.shape()));
            }
            Op::MatmulNT { a, b } => {
                let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[0];
                // dA = dY @ B ; dB = dY^T @ A
                let mut da = vec![0.0; m * k];
                mm_nn(dy.data(), tb.data(), m, n, k, &mut da);
                let mut db = vec![0.0; n * k];
                mm_tn(dy.data(), ta.data(), n, m, k, &mut db);
                Self::accumulate(grads, *a, Tensor::new(da, ta.shape()));
                Self::accumulate(grads, *b, Tensor::new(db, tb.shape()));
            }
            Op::Transpose { a } => {
                Self::accumulate(grads, *a, dy.transposed());
            }
            Op::RowSelect { a, row } => {
                let ta = &self.vals[a.0];
                let (m, n) = (ta.shape()[0], ta.shape()[1]);
                let mut da = vec![0.0; m * n];
                da[row * n..(row + 1) * n].copy_from_slice(dy.data());
                Self::accumulate(grads, *a, Tensor::new(da, ta.shape()));
            }
            Op::SliceRows { a, start, len } => {
                let ta = &self.vals[a.0];
                let (m, n) = (ta.shape()[0], ta.shape()[1]);
                let mut da = vec![0.0; m * n];
                da[start * n..(start + len) * n].copy_from_slice(dy.data());
                Self::accumulate(grads, *a, Tensor::new(da, ta.shape()));
            }
            Op::SliceCols { a, start, len } => {
                let ta = &self.vals[a.0];
                let (m, n) = (ta.shape()[0], ta.shape()[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + start + len]
                        .copy_from_slice(&dy.data()[i * len..(i + 1) * len]);
                }
                Self::accumulate(grads, *a, Tensor::new(da, ta.shape()));
            }
            Op::Reshape { a } => {
                let ta = &self.vals[a.0];
                Self::accumulate(grads, *a, Tensor::new(dy.data().to_vec(), ta.shape()));
            }
            Op::ConcatRows { parts } => {
                let n = dy.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let t = &self.vals[p.0];
                    let rows = t.numel() / n;
                    let dp = Tensor::new(
                        dy.data()[offset * n..(offset + rows) * n].to_vec(),
                        t.shape(),
                    );
                    Self::accumulate(grads, *p, dp);
                    offset += rows;
                }
            }
            Op::ConcatCols { parts } => {
                let m = dy.shape()[0];
                let total = dy.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let t = &self.vals[p.0];
                    let w = t.shape()[1];
                    let mut dp = vec![0.0; m * w];
                    for i in 0..m {
                        dp[i * w..(i + 1) * w].copy_from_slice(
                            &dy.data()[i * total + offset..i * total + offset + w],
                        );
                    }
                    Self::accumulate(grads, *p, Tensor::new(dp, t.shape()));
                    offset += w;
                }
            }
            Op::Sum { a } => {
                let g = dy.item();
                Self::accumulate(grads, *a, Tensor::filled(g, self.vals[a.0].shape()));
            }
            Op::Mean { a } => {
                let g = dy.item() / self.vals[a.0].numel() as f64;
                Self::accumulate(grads, *a, Tensor::filled(g, self.vals[a.0].shape()));
            }
            Op::RowMeans { a } => {
                let ta = &self.vals[a.0];
                let (m, n) = (ta.shape()[0], ta.shape()[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let g = dy.data()[i] / n as f64;
                    for v in da[i * n..(i + 1) * n].iter_mut() {
                        *v = g;
                    }
                }
                Self::accumulate(grads, *a, Tensor::new(da, ta.shape()));
            }
            Op::Sqrt { a } => {
                let y = &self.vals[idx];
                let da = Tensor::new(
                    dy.data()
                        .iter()
                        .zip(y.data())
                        .map(|(d, s)| d * 0.5 / s.max(1e-30))
                        .collect(),
                    self.vals[a.0].shape(),
                );
                Self::accumulate(grads, *a, da);
            }
            Op::Exp { a } => {
                let y = &self.vals[idx];
                let da = Tensor::new(
                    dy.data().iter().zip(y.data()).map(|(d, e)| d * e).collect(),
                    self.vals[a.0].shape(),
                );
                Self::accumulate(grads, *a, da);
            }
            Op::Sigmoid { a } => {
                let y = &self.vals[idx];
                let da = Tensor::new(
                    dy.data()
                        .iter()
                        .zip(y.data())
                        .map(|(d, s)| d * s * (1.0 - s))
                        .collect(),
                    self.vals[a.0].shape(),
                );
                Self::accumulate(grads, *a, da);
            }
            Op::Silu { a } => {
                let ta = &self.vals[a.0];
                let da = Tensor::new(
                    dy.data()
                        .iter()
                        .zip(ta.data())
                        .map(|(d, &x)| {
                            let s = sigmoid(x);
                            d * (s + x * s * (1.0 - s))
                        })
                        .collect(),
                    ta.shape(),
                );
                Self::accumulate(grads, *a, da);
            }
            Op::Gelu { a } => {
                let ta = &self.vals[a.0];
                let da = Tensor::new(
                    dy.data()
                        .iter()
                        .zip(ta.data())
                        .map(|(d, &x)| d * gelu_derivative(x))
                        .collect(),
                    ta.shape(),
                );
                Self::accumulate(grads, *a, da);
            }
            Op::SoftmaxRows { a } => {
                let y = &self.vals[idx];
                let (m, n) = (y.shape()[0], y.shape()[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y.data()[i * n..(i + 1) * n];
                    let dr = &dy.data()[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        da[i * n + j] = yr[j] * (dr[j] - dot);
                    }
                }
                Self::accumulate(grads, *a, Tensor::new(da, y.shape()));
            }
            Op::L2NormRows { a } => {
                let ta = &self.vals[a.0];
                let y = &self.vals[idx];
                let n = *ta.shape().last().unwrap();
                let mut da = vec![0.0; ta.numel()];
                for (chunk, (xr, (yr, dr))) in da.chunks_mut(n).zip(
                    ta.data()
                        .chunks(n)
                        .zip(y.data().chunks(n).zip(dy.data().chunks(n))),
                ) {
                    let norm = libm::sqrt(xr.iter().map(|v| v * v).sum::<f64>()).max(L2_EPS);
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        chunk[j] = (dr[j] - yr[j] * dot) / norm;
                    }
                }
                Self::accumulate(grads, *a, Tensor::new(da, ta.shape()));
            }
            Op::LayerNorm { a, gamma, beta } => {
                let (ta, tg) = (&self.vals[a.0], &self.vals[gamma.0]);
                let n = *ta.shape().last().unwrap();
                let rows = ta.numel() / n;
                let mut da = vec![0.0; ta.numel()];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                for i in 0..rows {
                    let xr = &ta.data()[i * n..(i + 1) * n];
                    let dr = &dy.data()[i * n..(i + 1) * n];
                    let (mean, var) = moments(xr);
                    let inv = 1.0 / libm::sqrt(var + NORM_EPS);
                    // u = dL/dxhat, xhat = (x - mean) * inv
                    let mut mean_u = 0.0;
                    let mut mean_ux = 0.0;
                    for j in 0..n {
                        let xhat = (xr[j] - mean) * inv;
                        let u = dr[j] * tg.data()[j];
                        mean_u += u;
                        mean_ux += u * xhat;
                        dg[j] += dr[j] * xhat;
                        db[j] += dr[j];
                    }
                    mean_u /= n as f64;
                    mean_ux /= n as f64;
                    for j in 0..n {
                        let xhat = (xr[j] - mean) * inv;
                        let u = dr[j] * tg.data()[j];
                        da[i * n + j] = (u - mean_u - xhat * mean_ux) * inv;
                    }
                }
                Self::accumulate(grads, *a, Tensor::new(da, ta.shape()));
                Self::accumulate(grads, *gamma, Tensor::new(dg, tg.shape()));
                Self::accumulate(grads, *beta, Tensor::new(db, self.vals[beta.0].shape()));
            }
            Op::GroupNorm {
                a,
                gamma,
                beta,
                groups,
            } => {
                let (ta, tg) = (&self.vals[a.0], &self.vals[gamma.0]);
                let c = ta.shape()[0];
                let s = ta.numel() / c;
                let per_group = c / groups;
                let group_len = per_group * s;
                let mut da = vec![0.0; ta.numel()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for g in 0..*groups {
                    let base = g * group_len;
                    let x_chunk = &ta.data()[base..base + group_len];
                    let (mean, var) = moments(x_chunk);
                    let inv = 1.0 / libm::sqrt(var + NORM_EPS);
                    let mut mean_u = 0.0;
                    let mut mean_ux = 0.0;
                    for (off, &x) in x_chunk.iter().enumerate() {
                        let ch = (base + off) / s;
                        let xhat = (x - mean) * inv;
                        let u = dy.data()[base + off] * tg.data()[ch];
                        mean_u += u;
                        mean_ux += u * xhat;
                        dg[ch] += dy.data()[base + off] * xhat;
                        db[ch] += dy.data()[base + off];
                    }
                    mean_u /= group_len as f64;
                    mean_ux /= group_len as f64;
                    for (off, &x) in x_chunk.iter().enumerate() {
                        let ch = (base + off) / s;
                        let xhat = (x - mean) * inv;
                        let u = dy.data()[base + off] * tg.data()[ch];
                        da[base + off] = (u - mean_u - xhat * mean_ux) * inv;
                    }
                }
                Self::accumulate(grads, *a, Tensor::new(da, ta.shape()));
                Self::accumulate(grads, *gamma, Tensor::new(dg, tg.shape()));
                Self::accumulate(grads, *beta, Tensor::new(db, self.vals[beta.0].shape()));
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (tx, tw) = (&self.vals[x.0], &self.vals[w.0]);
                let (cin, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (cout, k) = (tw.shape()[0], tw.shape()[2]);
                let oh = conv_out_side(h, k, *stride, *pad);
                let ow = conv_out_side(wd, k, *stride, *pad);
                let f = cin * k * k;
                let positions = oh * ow;
                // Recompute the unfolding rather than caching it on the tape.
                let cols = im2col(tx.data(), cin, h, wd, k, *stride, *pad);
                let mut dw = vec![0.0; cout * f];
                mm_nt(dy.data(), &cols, cout, positions, f, &mut dw);
                let mut dcols = vec![0.0; f * positions];
                mm_tn(tw.data(), dy.data(), f, cout, positions, &mut dcols);
                let mut dx = vec![0.0; tx.numel()];
                col2im(&dcols, cin, h, wd, k, *stride, *pad, &mut dx);
                Self::accumulate(grads, *x, Tensor::new(dx, tx.shape()));
                Self::accumulate(grads, *w, Tensor::new(dw, tw.shape()));
            }
            Op::Upsample2x { a } => {
                let ta = &self.vals[a.0];
                let (c, h, w) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let mut da = vec![0.0; ta.numel()];
                for ch in 0..c {
                    let base = ch * 4 * h * w;
                    for y in 0..h {
                        for x in 0..w {
                            let mut acc = 0.0;
                            for dy_i in 0..2 {
                                for dx_i in 0..2 {
                                    acc += dy.data()[base + (2 * y + dy_i) * 2 * w + 2 * x + dx_i];
                                }
                            }
                            da[(ch * h + y) * w + x] = acc;
                        }
                    }
                }
                Self::accumulate(grads, *a, Tensor::new(da, ta.shape()));
            }
            Op::Gather { table, indices } => {
                let t = &self.vals[table.0];
                let d = t.shape()[1];
                let mut dt = vec![0.0; t.numel()];
                for (row, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[idx * d + j] += dy.data()[row * d + j];
                    }
                }
                Self::accumulate(grads, *table, Tensor::new(dt, t.shape()));
            }
            Op::CeDiag { logits } => {
                let t = &self.vals[logits.0];
                let n = t.shape()[0];
                let g = dy.item() / n as f64;
                let mut dl = vec![0.0; n * n];
                let mut probs = vec![0.0; n];
                for i in 0..n {
                    softmax_into(&t.data()[i * n..(i + 1) * n], &mut probs);
                    for j in 0..n {
                        let indicator = if i == j { 1.0 } else { 0.0 };
                        dl[i * n + j] = g * (probs[j] - indicator);
                    }
                }
                Self::accumulate(grads, *logits, Tensor::new(dl, t.shape()));
            }
            Op::CeRows { logits, targets } => {
                let t = &self.vals[logits.0];
                let (m, k) = (t.shape()[0], t.shape()[1]);
                let g = dy.item() / m as f64;
                let mut dl = vec![0.0; m * k];
                let mut probs = vec![0.0; k];
                for (i, &target) in targets.iter().enumerate() {
                    softmax_into(&t.data()[i * k..(i + 1) * k], &mut probs);
                    for j in 0..k {
                        let indicator = if j == target { 1.0 } else { 0.0 };
                        dl[i * k + j] = g * (probs[j] - indicator);
                    }
                }
                Self::accumulate(grads, *logits, Tensor::new(dl, t.shape()));
            }
        }
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / core::f64::consts::SQRT_2))
}

#[inline]
fn gelu_derivative(x: f64) -> f64 {
    let phi = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    0.5 * (1.0 + libm::erf(x / core::f64::consts::SQRT_2)) + x * phi
}

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = libm::exp(l - max);
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}
