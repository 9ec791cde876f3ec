use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Axis, Error, Result};
use crate::tensor::{Shape, Tensor};

/// Planar (channel, row, column) image with values on the `[0, 1]` scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FloatImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::argument("image", "every dimension must be >= 1"));
        }
        if data.len() != channels * height * width {
            return Err(Error::argument(
                "image",
                format!(
                    "buffer of {} values for {channels}x{height}x{width}",
                    data.len()
                ),
            ));
        }
        Ok(FloatImage {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self::new(
            channels,
            height,
            width,
            vec![value; channels * height * width],
        )
        .expect("non-empty image")
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data).expect("non-empty image")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FloatImage {
        FloatImage {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Values rounded to the nearest 8-bit level after clipping.
    pub fn quantized(&self) -> FloatImage {
        self.map(|v| f64::from(to_u8(v)) / 255.0)
    }

    pub fn read_rgb(path: &Path) -> Result<Self> {
        let img = open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let (w, h) = (w as usize, h as usize);
        let raw = img.as_raw();
        Ok(Self::from_fn(3, h, w, |c, y, x| {
            f64::from(raw[(y * w + x) * 3 + c]) / 255.0
        }))
    }

    /// Reads a grayscale mask and binarizes it at mid-gray.
    pub fn read_mask(path: &Path) -> Result<Self> {
        let img = open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let (w, h) = (w as usize, h as usize);
        let raw = img.as_raw();
        Ok(Self::from_fn(1, h, w, |_, y, x| {
            if raw[y * w + x] >= 128 {
                1.0
            } else {
                0.0
            }
        }))
    }

    /// Writes an 8-bit PNG: 3 channels as RGB, 1 channel as grayscale.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let n = self.height * self.width;
        let result = match self.channels {
            3 => {
                let mut raw = Vec::with_capacity(3 * n);
                for i in 0..n {
                    for c in 0..3 {
                        raw.push(to_u8(self.data[c * n + i]));
                    }
                }
                RgbImage::from_raw(w, h, raw)
                    .expect("buffer sized from dims")
                    .save_with_format(path, image::ImageFormat::Png)
            }
            1 => GrayImage::from_raw(w, h, self.data.iter().map(|&v| to_u8(v)).collect())
                .expect("buffer sized from dims")
                .save_with_format(path, image::ImageFormat::Png),
            c => {
                return Err(Error::argument(
                    "write_png",
                    format!("cannot write a {c}-channel image"),
                ))
            }
        };
        result.map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// `(1, C, H, W)` tensor holding the same values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            Shape::new(1, self.channels, self.height, self.width),
            self.data.clone(),
        )
        .expect("same element count")
    }

    /// Extracts batch item `b` of a tensor as an image.
    pub fn from_tensor(t: &Tensor, b: usize) -> FloatImage {
        let item = t.batch_item(b);
        let s = item.shape();
        FloatImage::new(s.channels, s.height, s.width, item.into_data()).expect("valid tensor")
    }

    pub fn flip_horizontal(&self) -> FloatImage {
        Self::from_fn(self.channels, self.height, self.width, |c, y, x| {
            self.at(c, y, self.width - 1 - x)
        })
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<FloatImage> {
        for (axis, start, len, limit) in [
            (Axis::Height, top, height, self.height),
            (Axis::Width, left, width, self.width),
        ] {
            if len == 0 || start + len > limit {
                return Err(Error::Dimension {
                    op: "crop",
                    axis,
                    expected: limit,
                    actual: start + len,
                });
            }
        }
        Ok(Self::from_fn(self.channels, height, width, |c, y, x| {
            self.at(c, top + y, left + x)
        }))
    }

    /// Bilinear resampling with pixel-center alignment and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> FloatImage {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let rows: Vec<_> = (0..height).map(|y| taps(y, self.height, height)).collect();
        let cols: Vec<_> = (0..width).map(|x| taps(x, self.width, width)).collect();
        Self::from_fn(self.channels, height, width, |c, y, x| {
            let (y0, y1, fy) = rows[y];
            let (x0, x1, fx) = cols[x];
            let top = self.at(c, y0, x0) * (1.0 - fx) + self.at(c, y0, x1) * fx;
            let bottom = self.at(c, y1, x0) * (1.0 - fx) + self.at(c, y1, x1) * fx;
            top * (1.0 - fy) + bottom * fy
        })
    }

    /// Nearest-neighbour resampling with pixel-center alignment.
    pub fn resize_nearest(&self, height: usize, width: usize) -> FloatImage {
        let pick = |i: usize, src: usize, dst: usize| ((2 * i + 1) * src / (2 * dst)).min(src - 1);
        Self::from_fn(self.channels, height, width, |c, y, x| {
            self.at(c, pick(y, self.height, height), pick(x, self.width, width))
        })
    }

    /// Mask resize: nearest neighbour, then values at or above 0.5 become 1.
    pub fn resize_mask(&self, height: usize, width: usize) -> FloatImage {
        self.resize_nearest(height, width).binarized()
    }

    pub fn binarized(&self) -> FloatImage {
        self.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

fn taps(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src - 1);
    (lo, hi, pos - lo as f64)
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
