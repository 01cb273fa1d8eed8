//! Dense NCHW tensors and the numerical kernels built on them.

mod conv;
mod gemm;
mod io;
mod ops;
mod rng;

pub use conv::{conv2d_backward_input, conv2d_backward_params, conv2d_forward, ConvKernel};
pub use io::{read_tensor, write_tensor};
pub(crate) use ops::mse_grad;
pub use ops::{
    maxpool2x2_backward, maxpool2x2_forward, mse, relu_backward, relu_forward, PoolIndices,
};
pub use rng::{mix_seed, randn, Rng};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a 4-D tensor in (batch, channel, height, width) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in a single batch item.
    pub const fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Row-major NCHW tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Shape {
                op: "Tensor::from_vec",
                expected: format!("{} elements", shape.numel()),
                got: format!("{} elements", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Standard-normal tensor drawn from `rng`.
    pub fn randn(shape: Shape, rng: &mut Rng) -> Self {
        Tensor {
            shape,
            data: randn(rng, shape.numel(), 0.0, 1.0),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, i: usize, j: usize) -> usize {
        let s = self.shape;
        ((b * s.c + c) * s.h + i) * s.w + j
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.offset(b, c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, i: usize, j: usize, v: f64) {
        let o = self.offset(b, c, i, j);
        self.data[o] = v;
    }

    /// Contiguous slice holding batch item `b`.
    pub fn item(&self, b: usize) -> &[f64] {
        let len = self.shape.item_len();
        &self.data[b * len..(b + 1) * len]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [f64] {
        let len = self.shape.item_len();
        &mut self.data[b * len..(b + 1) * len]
    }

    /// Copy of batch item `b` as a tensor with n = 1.
    pub fn batch_item(&self, b: usize) -> Tensor {
        Tensor {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.item(b).to_vec(),
        }
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Config("cannot stack an empty list".into()))?
            .shape;
        let mut data = Vec::with_capacity(items.iter().map(Tensor::len).sum());
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(Error::Shape {
                    op: "Tensor::stack",
                    expected: first.to_string(),
                    got: s.to_string(),
                });
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(n, first.c, first.h, first.w),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        self.map(|x| alpha * x)
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.expect_same_shape("Tensor::add_scaled", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.expect_same_shape("Tensor::sub", other)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Population variance over every element.
    pub fn variance(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let n = self.data.len() as f64;
        let mean = self.sum() / n;
        self.data
            .iter()
            .map(|x| (x - mean) * (x - mean))
            .sum::<f64>()
            / n
    }

    /// Root mean square over every element.
    pub fn rms(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        (self.data.iter().map(|x| x * x).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    /// Mirror along the width axis.
    pub fn flip_horizontal(&self) -> Tensor {
        let s = self.shape;
        let mut out = Tensor::zeros(s);
        for (src, dst) in self.data.chunks(s.w).zip(out.data.chunks_mut(s.w)) {
            for (d, v) in dst.iter_mut().zip(src.iter().rev()) {
                *d = *v;
            }
        }
        out
    }

    /// Zero-pads on the bottom and right up to `(h, w)`.
    pub fn pad_bottom_right(&self, h: usize, w: usize) -> Result<Tensor> {
        let s = self.shape;
        if h < s.h || w < s.w {
            return Err(Error::Config(format!("cannot pad {s} down to {h}x{w}")));
        }
        if (h, w) == (s.h, s.w) {
            return Ok(self.clone());
        }
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
        for b in 0..s.n {
            for c in 0..s.c {
                for i in 0..s.h {
                    let src = self.offset(b, c, i, 0);
                    let dst = out.offset(b, c, i, 0);
                    out.data[dst..dst + s.w].copy_from_slice(&self.data[src..src + s.w]);
                }
            }
        }
        Ok(out)
    }

    /// Keeps the top-left `(h, w)` window.
    pub fn crop_top_left(&self, h: usize, w: usize) -> Result<Tensor> {
        let s = self.shape;
        if h > s.h || w > s.w {
            return Err(Error::Config(format!("cannot crop {s} up to {h}x{w}")));
        }
        if (h, w) == (s.h, s.w) {
            return Ok(self.clone());
        }
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
        for b in 0..s.n {
            for c in 0..s.c {
                for i in 0..h {
                    let src = self.offset(b, c, i, 0);
                    let dst = out.offset(b, c, i, 0);
                    out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
                }
            }
        }
        Ok(out)
    }

    pub(crate) fn expect_same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                expected: self.shape.to_string(),
                got: other.shape.to_string(),
            });
        }
        Ok(())
    }

    pub(crate) fn expect_finite(&self, op: &str) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::Numeric(format!("{op}: non-finite input")));
        }
        Ok(())
    }
}
