//! Dense n-dimensional `f64` tensors and boolean masks.
//!
//! `Tensor` is the universal numeric carrier: images are `C×H×W`, depth maps
//! `1×H×W`, weight matrices 2-d, scalars single-element. Data is row-major
//! (`(c·H + y)·W + x` for image-shaped tensors).

use crate::error::{PanoError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if shape.is_empty() || expected != data.len() {
            return Err(PanoError::ShapeMismatch {
                expected: format!("{shape:?} ({expected} elements)"),
                got: format!("{} elements", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn from_scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Value of a single-element tensor.
    pub fn scalar(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(PanoError::Usage(format!(
                "expected a scalar tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(PanoError::ShapeMismatch {
                expected: format!("{shape:?} ({expected} elements)"),
                got: format!("{} elements", self.data.len()),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Interpret the shape as image-like `C×H×W` (or `H×W` with C = 1).
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [h, w] => Ok((1, *h, *w)),
            [c, h, w] => Ok((*c, *h, *w)),
            other => Err(PanoError::ShapeMismatch {
                expected: "C×H×W or H×W".to_string(),
                got: format!("{other:?}"),
            }),
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        let (_, h, w) = self.chw().expect("image-shaped tensor");
        self.data[(c * h + y) * w + x]
    }

    /// Keep rows `lo..hi` of an image-shaped tensor.
    pub fn crop_rows(&self, lo: usize, hi: usize) -> Result<Tensor> {
        let (c, h, w) = self.chw()?;
        if lo >= hi || hi > h {
            return Err(PanoError::invalid(format!(
                "row range {lo}..{hi} out of bounds for height {h}"
            )));
        }
        let nh = hi - lo;
        let mut data = Vec::with_capacity(c * nh * w);
        for ci in 0..c {
            for y in lo..hi {
                let off = (ci * h + y) * w;
                data.extend_from_slice(&self.data[off..off + w]);
            }
        }
        let shape = if self.shape.len() == 2 {
            vec![nh, w]
        } else {
            vec![c, nh, w]
        };
        Tensor::new(shape, data)
    }

    /// Circularly shift columns (positive = to the right), wrapping in θ.
    pub fn shift_cols(&self, by: usize) -> Result<Tensor> {
        let (c, h, w) = self.chw()?;
        let by = by % w;
        let mut out = self.clone();
        for ci in 0..c {
            for y in 0..h {
                let off = (ci * h + y) * w;
                for x in 0..w {
                    out.data[off + (x + by) % w] = self.data[off + x];
                }
            }
        }
        Ok(out)
    }
}

/// Per-pixel boolean mask over an `H×W` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(PanoError::ShapeMismatch {
                expected: format!("{height}×{width}"),
                got: format!("{} elements", data.len()),
            });
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.height != other.height || self.width != other.width {
            return Err(PanoError::ShapeMismatch {
                expected: format!("{}×{}", self.height, self.width),
                got: format!("{}×{}", other.height, other.width),
            });
        }
        Ok(Mask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }

    /// Mask of weights at or above `threshold`.
    pub fn from_weights(weights: &Tensor, threshold: f64) -> Result<Mask> {
        let (c, h, w) = weights.chw()?;
        if c != 1 {
            return Err(PanoError::invalid("weight map must have one channel"));
        }
        Ok(Mask {
            height: h,
            width: w,
            data: weights.data().iter().map(|&v| v >= threshold).collect(),
        })
    }

    /// 0/1 tensor of shape `1×H×W`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, self.height, self.width],
            self.data
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        )
        .expect("mask dims")
    }

    pub fn crop_rows(&self, lo: usize, hi: usize) -> Result<Mask> {
        if lo >= hi || hi > self.height {
            return Err(PanoError::invalid(format!(
                "row range {lo}..{hi} out of bounds for height {}",
                self.height
            )));
        }
        Ok(Mask {
            height: hi - lo,
            width: self.width,
            data: self.data[lo * self.width..hi * self.width].to_vec(),
        })
    }

    /// 2× downsample where a pooled cell is true iff all four inputs are true.
    pub fn pool2_and(&self) -> Result<Mask> {
        if self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(PanoError::invalid(
                "mask dimensions must be even for 2× pooling",
            ));
        }
        let (nh, nw) = (self.height / 2, self.width / 2);
        let mut data = vec![false; nh * nw];
        for y in 0..nh {
            for x in 0..nw {
                data[y * nw + x] = self.get(2 * y, 2 * x)
                    && self.get(2 * y, 2 * x + 1)
                    && self.get(2 * y + 1, 2 * x)
                    && self.get(2 * y + 1, 2 * x + 1);
            }
        }
        Mask::new(nh, nw, data)
    }
}
