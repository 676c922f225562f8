//! Dense kernels used by every layer.
//!
//! Activations are stored as `f32`, but every reduction (dot products,
//! softmax normalizers, layer-norm statistics) is accumulated in `f64` in a
//! fixed index order and rounded once. A row's result therefore depends only
//! on that row's operands, never on how many other rows were processed in the
//! same call. Chunked streaming relies on this to reproduce the full-utterance
//! pass bit for bit.

use rand_xoshiro::rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `f32` matrix. Sequences are stored time-major: one row per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!(
                    "{rows}x{cols} needs {} values, got {}",
                    rows * cols,
                    data.len()
                ),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(cols: usize, rows: &[Vec<f32>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("row {i} has {} values, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact(0) panics, and zero-width matrices still have rows
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows, "row range out of bounds");
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Last `n` rows (all rows if fewer).
    pub fn tail_rows(&self, n: usize) -> Matrix {
        let start = self.rows.saturating_sub(n);
        self.slice_rows(start, self.rows)
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::shape(
                "Matrix::push_row",
                format!("row has {} values, expected {}", row.len(), self.cols),
            ));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Vertical concatenation.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols && self.rows > 0 && other.rows > 0 {
            return Err(Error::shape(
                "Matrix::vstack",
                format!("{} vs {} columns", self.cols, other.cols),
            ));
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols,
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f32;
    fn index(&self, (r, c): (usize, usize)) -> &f32 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f32 {
        &mut self.data[r * self.cols + c]
    }
}

/// Row-major boolean matrix; `true` means "allowed".
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolMatrix {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolMatrix {
    pub fn new(rows: usize, cols: usize, fill: bool) -> Self {
        BoolMatrix {
            rows,
            cols,
            data: vec![fill; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        BoolMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Indices of allowed columns in row `r`, ascending.
    pub fn allowed(&self, r: usize) -> Vec<usize> {
        self.row(r)
            .iter()
            .enumerate()
            .filter_map(|(c, &ok)| ok.then_some(c))
            .collect()
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Sub-matrix of rows `rows` and columns `cols`.
    pub fn submatrix(
        &self,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> BoolMatrix {
        BoolMatrix::from_fn(rows.len(), cols.len(), |r, c| {
            self.get(rows.start + r, cols.start + c)
        })
    }
}

/// Dot product accumulated in `f64`, in index order.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += *x as f64 * *y as f64;
    }
    acc
}

/// Standard matrix product with `f64` accumulation.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let mut acc = vec![0.0f64; b.cols];
    for i in 0..a.rows {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (k, &aik) in a.row(i).iter().enumerate() {
            let aik = aik as f64;
            for (slot, &bkj) in acc.iter_mut().zip(b.row(k)) {
                *slot += aik * bkj as f64;
            }
        }
        for (o, v) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = *v as f32;
        }
    }
    if !out.all_finite() {
        return Err(Error::NonFinite { op: "matmul" });
    }
    Ok(out)
}

/// `x·W + b`, with the bias added to the `f64` accumulator before rounding.
pub fn linear(x: &Matrix, w: &Matrix, b: Option<&[f32]>) -> Result<Matrix> {
    if x.cols != w.rows || b.is_some_and(|b| b.len() != w.cols) {
        return Err(Error::shape(
            "linear",
            format!("input {}x{}, weight {}x{}", x.rows, x.cols, w.rows, w.cols),
        ));
    }
    let mut out = Matrix::zeros(x.rows, w.cols);
    let mut acc = vec![0.0f64; w.cols];
    for i in 0..x.rows {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (k, &xik) in x.row(i).iter().enumerate() {
            let xik = xik as f64;
            for (slot, &wkj) in acc.iter_mut().zip(w.row(k)) {
                *slot += xik * wkj as f64;
            }
        }
        let row = out.row_mut(i);
        match b {
            Some(b) => {
                for ((o, v), bj) in row.iter_mut().zip(&acc).zip(b) {
                    *o = (*v + *bj as f64) as f32;
                }
            }
            None => {
                for (o, v) in row.iter_mut().zip(&acc) {
                    *o = *v as f32;
                }
            }
        }
    }
    if !out.all_finite() {
        return Err(Error::NonFinite { op: "linear" });
    }
    Ok(out)
}

/// Numerically stable `ln Σ exp(x)`; returns `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Log-softmax of one row, computed in `f64`.
pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| x - lse).collect()
}

/// Row-wise softmax over allowed entries; masked entries are exactly zero.
pub fn masked_softmax(scores: &Matrix, mask: &BoolMatrix) -> Result<Matrix> {
    if scores.rows != mask.rows || scores.cols != mask.cols {
        return Err(Error::shape(
            "masked_softmax",
            format!(
                "scores {}x{}, mask {}x{}",
                scores.rows, scores.cols, mask.rows, mask.cols
            ),
        ));
    }
    let mut out = Matrix::zeros(scores.rows, scores.cols);
    let mut weights = Vec::with_capacity(scores.cols);
    for r in 0..scores.rows {
        let allowed = mask.allowed(r);
        if allowed.is_empty() {
            return Err(Error::DegenerateMask { row: r });
        }
        let logits: Vec<f64> = allowed.iter().map(|&c| scores[(r, c)] as f64).collect();
        softmax_into(&logits, &mut weights);
        for (&c, &p) in allowed.iter().zip(&weights) {
            out[(r, c)] = p as f32;
        }
    }
    if !out.all_finite() {
        return Err(Error::NonFinite {
            op: "masked_softmax",
        });
    }
    Ok(out)
}

/// Max-shifted softmax of a dense `f64` slice into `out`.
pub fn softmax_into(logits: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &l in logits {
        let e = (l - max).exp();
        sum += e;
        out.push(e);
    }
    for p in out.iter_mut() {
        *p /= sum;
    }
}

/// Normalizes one step with its own mean and variance, then applies `gamma`/`beta`.
pub fn layer_norm(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32) -> Result<Vec<f32>> {
    let mut out = vec![0.0; x.len()];
    layer_norm_into(x, gamma, beta, eps, &mut out)?;
    Ok(out)
}

fn layer_norm_into(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
    out: &mut [f32],
) -> Result<()> {
    if x.len() != gamma.len() || x.len() != beta.len() || x.is_empty() {
        return Err(Error::shape(
            "layer_norm",
            format!("x {}, gamma {}, beta {}", x.len(), gamma.len(), beta.len()),
        ));
    }
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps as f64).sqrt();
    for (((o, &v), &g), &b) in out.iter_mut().zip(x).zip(gamma).zip(beta) {
        *o = ((v as f64 - mean) * inv * g as f64 + b as f64) as f32;
    }
    Ok(())
}

/// Layer norm applied to each row independently.
pub fn layer_norm_rows(x: &Matrix, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Matrix> {
    let mut out = Matrix::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        layer_norm_into(x.row(i), gamma, beta, eps, out.row_mut(i))?;
    }
    Ok(out)
}

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Causal depthwise 1-D convolution over time.
///
/// `x` is `[T × D]`, `kernels` is `[D × K]` (tap `K−1` multiplies the current
/// step). `history` supplies the `K−1` rows preceding `x`; when absent they are
/// zeros, i.e. the usual left padding of `K−1`. Output row `t` reads only
/// `history ∥ x[..=t]`.
pub fn depthwise_conv1d_causal(
    x: &Matrix,
    kernels: &Matrix,
    history: Option<&Matrix>,
) -> Result<Matrix> {
    let k = kernels.cols;
    if k < 1 {
        return Err(Error::config(
            "conv_kernel",
            "kernel size must be at least 1",
        ));
    }
    if kernels.rows != x.cols {
        return Err(Error::shape(
            "depthwise_conv1d_causal",
            format!("{} channels, {} kernels", x.cols, kernels.rows),
        ));
    }
    let pad = k - 1;
    let zeros;
    let history = match history {
        Some(h) => {
            if h.rows != pad || (pad > 0 && h.cols != x.cols) {
                return Err(Error::shape(
                    "depthwise_conv1d_causal",
                    format!("history has {} rows, expected {pad}", h.rows),
                ));
            }
            h
        }
        None => {
            zeros = Matrix::zeros(pad, x.cols);
            &zeros
        }
    };
    let d = x.cols;
    let mut out = Matrix::zeros(x.rows, d);
    for t in 0..x.rows {
        for c in 0..d {
            let mut acc = 0.0f64;
            for tap in 0..k {
                // padded index t + tap covers history rows then x rows
                let idx = t + tap;
                let v = if idx < pad {
                    history[(idx, c)]
                } else {
                    x[(idx - pad, c)]
                };
                acc += kernels[(c, tap)] as f64 * v as f64;
            }
            out[(t, c)] = acc as f32;
        }
    }
    Ok(out)
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    (1.0 / (1.0 + (-(x as f64)).exp())) as f32
}

/// SiLU / swish: `x·σ(x)`.
#[inline]
pub fn swish(x: f32) -> f32 {
    x * sigmoid(x)
}

/// Deterministic weight generator (xoshiro256++).
#[derive(Clone, Debug)]
pub struct WeightRng(Xoshiro256PlusPlus);

impl WeightRng {
    pub fn new(seed: u64) -> Self {
        WeightRng(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f32 {
        (lo + (hi - lo) * self.next_f64()) as f32
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.0.next_u64() % (hi - lo + 1) as u64) as usize
    }

    /// `[rows × cols]` matrix uniform in `±1/√fan_in`.
    pub fn matrix(&mut self, rows: usize, cols: usize, fan_in: usize) -> Matrix {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| self.uniform(-bound, bound))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn vector(&mut self, len: usize, fan_in: usize) -> Vec<f32> {
        self.matrix(1, len, fan_in).into_vec()
    }
}
