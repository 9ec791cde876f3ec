//! Dense rank-4 tensors in (batch, channel, height, width) row-major layout.

use serde::{Deserialize, Serialize};

use crate::error::{Axis, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape::new(1, 1, 1, 1);

    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Shape { channels, ..self }
    }

    pub(crate) fn validate(&self, op: &'static str) -> Result<()> {
        if self.as_array().contains(&0) {
            return Err(Error::argument(
                op,
                format!("every shape component must be >= 1, got {self}"),
            ));
        }
        Ok(())
    }

    /// Checks that `other` matches on every axis; reports the first mismatching one.
    pub(crate) fn expect_eq(&self, other: &Shape, op: &'static str) -> Result<()> {
        let axes = [Axis::Batch, Axis::Channel, Axis::Height, Axis::Width];
        for ((axis, e), a) in axes.iter().zip(self.as_array()).zip(other.as_array()) {
            if e != a {
                return Err(Error::Dimension {
                    op,
                    axis: *axis,
                    expected: e,
                    actual: a,
                });
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.batch, self.channels, self.height, self.width
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        shape.validate("tensor")?;
        if data.len() != shape.numel() {
            return Err(Error::argument(
                "tensor",
                format!(
                    "buffer holds {} values but shape {shape} needs {}",
                    data.len(),
                    shape.numel()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Panics on a zero-sized shape; for internal construction with known-good shapes.
    pub fn full(shape: Shape, value: f64) -> Self {
        assert!(shape.numel() > 0, "zero-sized tensor shape {shape}");
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape::SCALAR, value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut out = Self::zeros(shape);
        let mut i = 0;
        for b in 0..shape.batch {
            for c in 0..shape.channels {
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        out.data[i] = f([b, c, y, x]);
                        i += 1;
                    }
                }
            }
        }
        out
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let s = &self.shape;
        ((b * s.channels + c) * s.height + y) * s.width + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, value: f64) {
        let i = self.index(b, c, y, x);
        self.data[i] = value;
    }

    /// The scalar value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a single-element tensor, got shape {}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Compensated (Neumaier) sum of all elements.
    pub fn sum(&self) -> f64 {
        compensated_sum(self.data.iter().copied())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// One batch item as a batch-1 tensor.
    pub fn batch_item(&self, b: usize) -> Tensor {
        let n = self.shape.channels * self.shape.plane();
        Tensor {
            shape: Shape {
                batch: 1,
                ..self.shape
            },
            data: self.data[b * n..(b + 1) * n].to_vec(),
        }
    }

    /// Channels `[start, end)` of every batch item.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor> {
        if start >= end || end > self.shape.channels {
            return Err(Error::argument(
                "slice_channels",
                format!(
                    "range {start}..{end} invalid for {} channels",
                    self.shape.channels
                ),
            ));
        }
        let plane = self.shape.plane();
        let mut data = Vec::with_capacity(self.shape.batch * (end - start) * plane);
        for b in 0..self.shape.batch {
            let base = b * self.shape.channels * plane;
            data.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        Ok(Tensor {
            shape: self.shape.with_channels(end - start),
            data,
        })
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::argument("stack", "no tensors to stack"))?;
        let per = Shape {
            batch: 1,
            ..first.shape
        };
        let mut data = Vec::new();
        let mut batch = 0;
        for t in items {
            per.expect_eq(
                &Shape {
                    batch: 1,
                    ..t.shape
                },
                "stack",
            )?;
            batch += t.shape.batch;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape { batch, ..per },
            data,
        })
    }

    /// Mirrors every plane about its vertical axis.
    pub fn flip_horizontal(&self) -> Tensor {
        let w = self.shape.width;
        let mut out = self.clone();
        for row in out.data.chunks_mut(w) {
            row.reverse();
        }
        out
    }
}

pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sized_shapes_are_rejected() {
        assert!(Tensor::from_vec(Shape::new(1, 0, 2, 2), vec![]).is_err());
        assert!(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn row_major_indexing() {
        let t = Tensor::from_fn(Shape::new(2, 3, 4, 5), |[b, c, y, x]| {
            (b * 1000 + c * 100 + y * 10 + x) as f64
        });
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.data()[t.index(1, 2, 3, 4)], 1234.0);
        assert_eq!(t.data()[1], 1.0);
    }

    #[test]
    fn slice_and_stack() {
        let t = Tensor::from_fn(Shape::new(2, 3, 2, 2), |[b, c, y, x]| {
            (b * 100 + c * 10 + y * 2 + x) as f64
        });
        let s = t.slice_channels(1, 3).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 2, 2, 2));
        assert_eq!(s.at(1, 0, 1, 1), 113.0);
        let stacked = Tensor::stack(&[t.batch_item(0), t.batch_item(1)]).unwrap();
        assert_eq!(stacked, t);
        assert!(Tensor::stack(&[t.batch_item(0), s.batch_item(0)]).is_err());
    }

    #[test]
    fn flip_twice_is_identity() {
        let t = Tensor::from_fn(Shape::new(1, 2, 3, 4), |[_, c, y, x]| {
            (c * 12 + y * 4 + x) as f64
        });
        let f = t.flip_horizontal();
        assert_eq!(f.at(0, 1, 2, 0), t.at(0, 1, 2, 3));
        assert_eq!(f.flip_horizontal(), t);
    }
}
