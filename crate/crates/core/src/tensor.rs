//! Dense row-major `f64` arrays and the numeric kernels the graph ops use.
//!
//! Kernels are written so that every output element is produced by one
//! sequential accumulation chain with a fixed association order. That makes
//! results bitwise reproducible for a given build, independent of the rayon
//! thread count (parallelism only ever splits *disjoint* output ranges).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::parallel::for_each_chunk;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![v] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor { shape: vec![rows.len(), cols], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert!(self.data.len() == 1, "item() on non-scalar of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Length of the last axis (columns of a row-major matrix).
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all axes but the last; 1 for scalars.
    pub fn leading(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn require_finite(&self, op: &'static str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(CoreError::NonFinite { op })
        }
    }
}

// ── Scalar building blocks ──────────────────────────────────────────────

/// Dot product with a fixed 8-lane association order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n8 = a.len() - a.len() % 8;
    let mut acc = [0.0f64; 8];
    for (ca, cb) in a[..n8].chunks_exact(8).zip(b[..n8].chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in a[n8..].iter().zip(&b[n8..]) {
        s += x * y;
    }
    s
}

/// `y += a * x`, element-wise.
#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn sq_euclidean(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

// ── Matrix kernels ──────────────────────────────────────────────────────

fn mm_nn_impl<const ACC: bool>(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for_each_chunk(out, n, m * k * n, |i, row| {
        if !ACC {
            row.iter_mut().for_each(|x| *x = 0.0);
        }
        let ai = &a[i * k..(i + 1) * k];
        for (l, &ail) in ai.iter().enumerate() {
            axpy(row, ail, &b[l * n..(l + 1) * n]);
        }
    });
}

fn mm_nt_impl<const ACC: bool>(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for_each_chunk(out, n, m * k * n, |i, row| {
        let ai = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let d = dot(ai, &b[j * k..(j + 1) * k]);
            if ACC {
                *o += d;
            } else {
                *o = d;
            }
        }
    });
}

/// `out(m,n) = a(m,k) · b(k,n)`.
pub fn mm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    mm_nn_impl::<false>(a, b, out, m, k, n);
}

/// `out(m,n) += a(m,k) · b(k,n)`.
pub fn mm_nn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    mm_nn_impl::<true>(a, b, out, m, k, n);
}

/// `out(m,n) = a(m,k) · b(n,k)ᵀ` — both operands traversed along contiguous rows.
pub fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    mm_nt_impl::<false>(a, b, out, m, k, n);
}

/// `out(m,n) += a(m,k) · b(n,k)ᵀ`.
pub fn mm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    mm_nt_impl::<true>(a, b, out, m, k, n);
}

/// `out(k,n) = a(m,k)ᵀ · b(m,n)`, via an explicit transpose of `a`.
pub fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let at = transpose(a, m, k);
    mm_nn(&at, b, out, k, m, n);
}

/// `out(k,n) += a(m,k)ᵀ · b(m,n)`.
pub fn mm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let at = transpose(a, m, k);
    mm_nn_acc(&at, b, out, k, m, n);
}

/// Blocked transpose of a row-major `(rows, cols)` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    const B: usize = 32;
    let mut out = vec![0.0; a.len()];
    let mut i0 = 0;
    while i0 < rows {
        let i1 = (i0 + B).min(rows);
        let mut j0 = 0;
        while j0 < cols {
            let j1 = (j0 + B).min(cols);
            for i in i0..i1 {
                for j in j0..j1 {
                    out[j * rows + i] = a[i * cols + j];
                }
            }
            j0 = j1;
        }
        i0 = i1;
    }
    out
}

/// Batched `out(b,m,n) = a(b,m,k) · rhs`, where `rhs` is `(b,k,n)` or a shared `(k,n)`.
pub fn bmm_nn(a: &[f64], b: &[f64], out: &mut [f64], batch: usize, m: usize, k: usize, n: usize) {
    let shared = b.len() == k * n;
    for_each_chunk(out, m * n, batch * m * k * n, |bi, o| {
        let ab = &a[bi * m * k..(bi + 1) * m * k];
        let bb = if shared { b } else { &b[bi * k * n..(bi + 1) * k * n] };
        for i in 0..m {
            let row = &mut o[i * n..(i + 1) * n];
            row.iter_mut().for_each(|x| *x = 0.0);
            for (l, &ail) in ab[i * k..(i + 1) * k].iter().enumerate() {
                axpy(row, ail, &bb[l * n..(l + 1) * n]);
            }
        }
    });
}

/// Batched `out(b,m,n) = a(b,m,k) · b(b,n,k)ᵀ`.
pub fn bmm_nt(a: &[f64], b: &[f64], out: &mut [f64], batch: usize, m: usize, k: usize, n: usize) {
    let shared = b.len() == n * k;
    for_each_chunk(out, m * n, batch * m * k * n, |bi, o| {
        let ab = &a[bi * m * k..(bi + 1) * m * k];
        let bb = if shared { b } else { &b[bi * n * k..(bi + 1) * n * k] };
        for i in 0..m {
            let ai = &ab[i * k..(i + 1) * k];
            for (j, x) in o[i * n..(i + 1) * n].iter_mut().enumerate() {
                *x = dot(ai, &bb[j * k..(j + 1) * k]);
            }
        }
    });
}

// ── Row-wise kernels ────────────────────────────────────────────────────

/// Numerically shifted softmax along the last axis.
pub fn softmax_rows(x: &[f64], out: &mut [f64], cols: usize) {
    debug_assert_eq!(x.len(), out.len());
    for_each_chunk(out, cols, x.len() * 8, |i, row| {
        let xi = &x[i * cols..(i + 1) * cols];
        let mut m = f64::NEG_INFINITY;
        for &v in xi {
            if v > m {
                m = v;
            }
        }
        let mut s = 0.0;
        for (o, &v) in row.iter_mut().zip(xi) {
            let e = crate::math::exp(v - m);
            *o = e;
            s += e;
        }
        let inv = 1.0 / s;
        row.iter_mut().for_each(|o| *o *= inv);
    });
}

/// Layer normalization along the last axis: `(x − μ)/√(σ² + eps) · gain + bias`.
pub fn layernorm_rows(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64], cols: usize, eps: f64) {
    for_each_chunk(out, cols, x.len() * 8, |i, row| {
        let xi = &x[i * cols..(i + 1) * cols];
        let mean = xi.iter().sum::<f64>() / cols as f64;
        let mut var = 0.0;
        for &v in xi {
            let d = v - mean;
            var += d * d;
        }
        var /= cols as f64;
        let inv_std = 1.0 / crate::math::sqrt(var + eps);
        for (j, o) in row.iter_mut().enumerate() {
            *o = (xi[j] - mean) * inv_std * gain[j] + bias[j];
        }
    });
}

pub const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)

/// Tanh-approximated GELU, the GPT-2 convention.
pub fn gelu(x: &[f64], out: &mut [f64]) {
    const CHUNK: usize = 4096;
    for_each_chunk(out, CHUNK, x.len() * 16, |i, chunk| {
        let base = i * CHUNK;
        for (j, o) in chunk.iter_mut().enumerate() {
            let v = x[base + j];
            let u = GELU_C * (v + 0.044715 * v * v * v);
            *o = 0.5 * v * (1.0 + crate::math::tanh(u));
        }
    });
}

/// d/dx of tanh-approximated GELU.
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = crate::math::tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_against_naive() {
        let (m, k, n) = (7, 5, 9);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut out = vec![0.0; m * n];
        mm_nn(&a, &b, &mut out, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a[i * k + l] * b[l * n + j];
                }
                assert!((out[i * n + j] - s).abs() < 1e-12);
            }
        }

        let bt = transpose(&b, k, n);
        let mut out_nt = vec![0.0; m * n];
        mm_nt(&a, &bt, &mut out_nt, m, k, n);
        for (x, y) in out.iter().zip(&out_nt) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_round_trip() {
        let (r, c) = (37, 53);
        let a: Vec<f64> = (0..r * c).map(|i| i as f64).collect();
        let t = transpose(&a, r, c);
        let tt = transpose(&t, c, r);
        assert_eq!(a, tt);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let x = vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0];
        let mut out = vec![0.0; 6];
        softmax_rows(&x, &mut out, 2);
        for row in out.chunks(2) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!((out[0] - 0.5).abs() < 1e-15 && (out[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dot_matches_naive_order_insensitive() {
        let a: Vec<f64> = (0..103).map(|i| (i as f64).sqrt()).collect();
        let b: Vec<f64> = (0..103).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-9);
    }
}
