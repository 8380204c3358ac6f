//! Dense f32 kernels for the toy transformer: matmul, row softmax with
//! causal masking, RMS normalization, and rotary position embedding.
//!
//! Everything is row-major and copy-based; zero-copy views live in the
//! map store, not here. Reduction loops accumulate in f64 so results stay
//! close to the scalar oracles used in tests.

use crate::error::{Error, Result};

/// Dense row-major 2-D f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Tensor2D {
        let mut out = Tensor2D::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dense row-major 3-D f32 tensor, used for head-batched Q/K.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3D {
    pub dim0: usize,
    pub dim1: usize,
    pub dim2: usize,
    pub data: Vec<f32>,
}

impl Tensor3D {
    pub fn zeros(dim0: usize, dim1: usize, dim2: usize) -> Self {
        Self { dim0, dim1, dim2, data: vec![0.0; dim0 * dim1 * dim2] }
    }

    /// Slice `[d0][d1][..]`.
    #[inline]
    pub fn lane(&self, d0: usize, d1: usize) -> &[f32] {
        let base = (d0 * self.dim1 + d1) * self.dim2;
        &self.data[base..base + self.dim2]
    }

    #[inline]
    pub fn lane_mut(&mut self, d0: usize, d1: usize) -> &mut [f32] {
        let base = (d0 * self.dim1 + d1) * self.dim2;
        &mut self.data[base..base + self.dim2]
    }
}

/// Standard matrix product with f64 accumulation.
pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} . {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    // Transposing b turns the inner loop into two contiguous scans.
    let bt = b.transpose();
    let mut out = Tensor2D::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let ar = a.row(i);
        let or = out.row_mut(i);
        for (j, o) in or.iter_mut().enumerate() {
            let br = bt.row(j);
            let mut acc = 0.0f64;
            for k in 0..ar.len() {
                acc += ar[k] as f64 * br[k] as f64;
            }
            *o = acc as f32;
        }
    }
    Ok(out)
}

/// Row-wise softmax with max-subtraction. With `causal`, entries at column
/// j > row i are masked to -inf before normalization.
pub fn softmax_rows(scores: &Tensor2D, causal: bool) -> Tensor2D {
    let mut out = Tensor2D::zeros(scores.rows, scores.cols);
    for i in 0..scores.rows {
        let src = scores.row(i);
        let dst = out.row_mut(i);
        let limit = if causal { (i + 1).min(src.len()) } else { src.len() };
        let mut max = f32::NEG_INFINITY;
        for &v in &src[..limit] {
            max = max.max(v);
        }
        let mut sum = 0.0f64;
        for j in 0..limit {
            let e = ((src[j] - max) as f64).exp();
            dst[j] = e as f32;
            sum += e;
        }
        for v in dst[..limit].iter_mut() {
            *v = (*v as f64 / sum) as f32;
        }
        // masked tail stays 0
    }
    out
}

pub const RMS_NORM_EPS: f64 = 1e-6;

/// Per-row RMS normalization scaled by `gain`.
pub fn rms_norm(x: &Tensor2D, gain: &[f32]) -> Result<Tensor2D> {
    if gain.len() != x.cols {
        return Err(Error::Shape(format!(
            "rms_norm gain length {} != cols {}",
            gain.len(),
            x.cols
        )));
    }
    let mut out = Tensor2D::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let src = x.row(i);
        let mut ms = 0.0f64;
        for &v in src {
            ms += v as f64 * v as f64;
        }
        ms /= x.cols as f64;
        let inv = 1.0 / (ms + RMS_NORM_EPS).sqrt();
        let dst = out.row_mut(i);
        for j in 0..x.cols {
            dst[j] = (src[j] as f64 * inv) as f32 * gain[j];
        }
    }
    Ok(out)
}

pub const ROTARY_BASE: f64 = 10000.0;

/// Rotary position embedding applied in place to head-batched `q` and `k`
/// (`[heads][seq][head_dim]`). Channel pair (2i, 2i+1) of the row at
/// position `p` is rotated by `p * base^(-2i/head_dim)`.
pub fn rotary_embed(q: &mut Tensor3D, k: &mut Tensor3D, positions: &[usize]) -> Result<()> {
    let d = q.dim2;
    if d % 2 != 0 {
        return Err(Error::Shape(format!("rotary head dim {} is odd", d)));
    }
    if k.dim2 != d || q.dim1 != positions.len() || k.dim1 != positions.len() {
        return Err(Error::Shape("rotary q/k/position shapes disagree".into()));
    }
    let half = d / 2;
    let mut freqs = vec![0.0f64; half];
    for (i, f) in freqs.iter_mut().enumerate() {
        *f = ROTARY_BASE.powf(-2.0 * i as f64 / d as f64);
    }
    for t in [q, k] {
        for h in 0..t.dim0 {
            for (r, &pos) in positions.iter().enumerate() {
                let lane = t.lane_mut(h, r);
                for i in 0..half {
                    let angle = pos as f64 * freqs[i];
                    let (sin, cos) = angle.sin_cos();
                    let a = lane[2 * i] as f64;
                    let b = lane[2 * i + 1] as f64;
                    lane[2 * i] = (a * cos - b * sin) as f32;
                    lane[2 * i + 1] = (a * sin + b * cos) as f32;
                }
            }
        }
    }
    Ok(())
}
