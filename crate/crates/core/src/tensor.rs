//! Dense rank-4 tensors in `(N, C, H, W)` layout and integer label maps.
//!
//! Every numeric value in the crate (images, features, logits, kernels,
//! per-channel vectors) is a [`Tensor`]. Per-channel vectors use shape
//! `[1, C, 1, 1]`, scalars use `[1, 1, 1, 1]` and convolution kernels use
//! `[C_out, C_in, k, k]`.

use crate::error::{shape_err, Error, Result};

pub type Shape = [usize; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor { shape, data: vec![value; shape.iter().product()] }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return shape_err(format!("{} values do not fill shape {:?}", data.len(), shape));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: [1, 1, 1, 1], data: vec![value] }
    }

    /// A per-channel vector laid out as `[1, C, 1, 1]`.
    pub fn channel_vector(values: &[f64]) -> Self {
        Tensor { shape: [1, values.len(), 1, 1], data: values.to_vec() }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.offset(n, c, h, w);
        self.data[i] = value;
    }

    /// The contiguous `H * W` plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let len = self.shape[2] * self.shape[3];
        let start = self.offset(n, c, 0, 0);
        &self.data[start..start + len]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let len = self.shape[2] * self.shape[3];
        let start = self.offset(n, c, 0, 0);
        &mut self.data[start..start + len]
    }

    /// Value of a `[1,1,1,1]` tensor (or the first entry of any tensor).
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite values in {what}")))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return shape_err(format!("elementwise op on {:?} and {:?}", self.shape, other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape, data })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Sample `n` as a batch of one.
    pub fn sample(&self, n: usize) -> Tensor {
        let len = self.shape[1] * self.shape[2] * self.shape[3];
        let start = n * len;
        Tensor {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[start..start + len].to_vec(),
        }
    }

    /// Stack tensors along the batch axis.
    pub fn concat_batch<T: AsRef<Tensor>>(parts: &[T]) -> Result<Tensor> {
        let first = match parts.first() {
            Some(t) => t.as_ref(),
            None => return Err(Error::EmptyBatch),
        };
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for part in parts {
            let t = part.as_ref();
            if t.shape[1..] != [c, h, w] {
                return shape_err(format!("cannot concatenate {:?} with {:?}", first.shape, t.shape));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape: [n, c, h, w], data })
    }

    pub fn flip_horizontal(&self) -> Tensor {
        let mut out = self.clone();
        let w = self.shape[3];
        for row in out.data.chunks_mut(w) {
            row.reverse();
        }
        out
    }

    /// Spatial crop `[top, top + height) x [left, left + width)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.shape;
        if top + height > h || left + width > w {
            return shape_err(format!("crop {height}x{width}@({top},{left}) outside {h}x{w}"));
        }
        let mut data = Vec::with_capacity(n * c * height * width);
        for ni in 0..n {
            for ci in 0..c {
                for y in top..top + height {
                    let start = self.offset(ni, ci, y, left);
                    data.extend_from_slice(&self.data[start..start + width]);
                }
            }
        }
        Ok(Tensor { shape: [n, c, height, width], data })
    }
}

impl AsRef<Tensor> for Tensor {
    fn as_ref(&self) -> &Tensor {
        self
    }
}

/// Per-pixel class labels with shape `(N, H, W)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    shape: [usize; 3],
    data: Vec<u8>,
}

impl LabelMap {
    pub fn from_vec(shape: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return shape_err(format!("{} labels do not fill shape {:?}", data.len(), shape));
        }
        Ok(LabelMap { shape, data })
    }

    pub fn filled(shape: [usize; 3], label: u8) -> Self {
        LabelMap { shape, data: vec![label; shape.iter().product()] }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, n: usize, h: usize, w: usize) -> u8 {
        self.data[(n * self.shape[1] + h) * self.shape[2] + w]
    }

    pub fn sample(&self, n: usize) -> LabelMap {
        let len = self.shape[1] * self.shape[2];
        LabelMap {
            shape: [1, self.shape[1], self.shape[2]],
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    pub fn concat_batch<T: AsRef<LabelMap>>(parts: &[T]) -> Result<LabelMap> {
        let first = match parts.first() {
            Some(t) => t.as_ref(),
            None => return Err(Error::EmptyBatch),
        };
        let mut n = 0;
        let mut data = Vec::new();
        for part in parts {
            let m = part.as_ref();
            if m.shape[1..] != first.shape[1..] {
                return shape_err(format!("cannot concatenate {:?} with {:?}", first.shape, m.shape));
            }
            n += m.shape[0];
            data.extend_from_slice(&m.data);
        }
        Ok(LabelMap { shape: [n, first.shape[1], first.shape[2]], data })
    }

    pub fn flip_horizontal(&self) -> LabelMap {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.shape[2]) {
            row.reverse();
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<LabelMap> {
        let [n, h, w] = self.shape;
        if top + height > h || left + width > w {
            return shape_err(format!("crop {height}x{width}@({top},{left}) outside {h}x{w}"));
        }
        let mut data = Vec::with_capacity(n * height * width);
        for ni in 0..n {
            for y in top..top + height {
                let start = (ni * h + y) * w + left;
                data.extend_from_slice(&self.data[start..start + width]);
            }
        }
        Ok(LabelMap { shape: [n, height, width], data })
    }
}

impl AsRef<LabelMap> for LabelMap {
    fn as_ref(&self) -> &LabelMap {
        self
    }
}
