//! Dense rank-4 tensors in `(batch, height, width, channel)` layout.
//!
//! All feature maps in this crate are `Tensor4`s of 64-bit floats stored
//! row-major in `(n, h, w, c)` order. The layout is part of the public
//! contract: checkpoints, the Python bindings, and the reference oracles all
//! index with the same formula `((n*h + i)*w + j)*c + ch`.

use rand::Rng;

use crate::error::{Error, Result};

/// Spatial axis selector for shifting operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Along image rows (the `h` dimension).
    Vertical,
    /// Along image columns (the `w` dimension).
    Horizontal,
}

/// Dense `(n, h, w, c)` tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    /// Zero-filled tensor. All dimensions must be ≥ 1.
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        assert!(
            n >= 1 && h >= 1 && w >= 1 && c >= 1,
            "tensor dimensions must be >= 1, got ({n},{h},{w},{c})"
        );
        Tensor4 {
            n,
            h,
            w,
            c,
            data: vec![0.0; n * h * w * c],
        }
    }

    /// Build from an existing flat buffer in `(n,h,w,c)` row-major order.
    pub fn from_vec(n: usize, h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if n < 1 || h < 1 || w < 1 || c < 1 {
            return Err(Error::invalid_argument(format!(
                "tensor dimensions must be >= 1, got ({n},{h},{w},{c})"
            )));
        }
        if data.len() != n * h * w * c {
            return Err(Error::invalid_argument(format!(
                "data length {} does not match shape ({n},{h},{w},{c}) = {}",
                data.len(),
                n * h * w * c
            )));
        }
        Ok(Tensor4 { n, h, w, c, data })
    }

    /// Tensor filled with i.i.d. uniform values in `[lo, hi)`.
    pub fn random<R: Rng>(n: usize, h: usize, w: usize, c: usize, lo: f64, hi: f64, rng: &mut R) -> Self {
        let mut t = Tensor4::zeros(n, h, w, c);
        for v in t.data.iter_mut() {
            *v = rng.random_range(lo..hi);
        }
        t
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.h, self.w, self.c)
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn idx(&self, n: usize, i: usize, j: usize, ch: usize) -> usize {
        debug_assert!(n < self.n && i < self.h && j < self.w && ch < self.c);
        ((n * self.h + i) * self.w + j) * self.c + ch
    }

    #[inline]
    pub fn at(&self, n: usize, i: usize, j: usize, ch: usize) -> f64 {
        self.data[self.idx(n, i, j, ch)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, i: usize, j: usize, ch: usize) -> &mut f64 {
        let k = self.idx(n, i, j, ch);
        &mut self.data[k]
    }

    /// Value at a spatial position, with zero for out-of-range `(i, j)`.
    /// Signed indices make padded convolution loops read naturally.
    #[inline]
    pub fn at_or_zero(&self, n: usize, i: i64, j: i64, ch: usize) -> f64 {
        if i < 0 || j < 0 || i >= self.h as i64 || j >= self.w as i64 {
            0.0
        } else {
            self.at(n, i as usize, j as usize, ch)
        }
    }

    /// Interpret a `(n, 1, 1, c)` tensor as an `(n, c)` matrix of rows.
    ///
    /// Pooled features and logits use this view; it panics if the tensor
    /// still has spatial extent.
    pub fn rows(&self) -> Vec<&[f64]> {
        assert!(
            self.h == 1 && self.w == 1,
            "rows() requires spatial extent 1x1, got {}x{}",
            self.h,
            self.w
        );
        self.data.chunks_exact(self.c).collect()
    }

    /// Maximum elementwise absolute difference against another tensor of the
    /// same shape.
    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Elementwise sum with a tensor of the same shape.
    pub fn add(&self, other: &Tensor4) -> Result<Tensor4> {
        if self.shape() != other.shape() {
            return Err(Error::invalid_argument(format!(
                "add: shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = self.clone();
        for (o, b) in out.data.iter_mut().zip(&other.data) {
            *o += *b;
        }
        Ok(out)
    }

    /// Elementwise scaling by a constant.
    pub fn scale(&self, factor: f64) -> Tensor4 {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v *= factor;
        }
        out
    }
}
