//! Composite synthesis, dataset I/O, augmentation and normalization.
//!
//! Datasets use the iHarmony4 directory layout:
//!
//! ```text
//! root/real_images/<real>.png
//! root/masks/<real>_<mask>.png
//! root/composite_images/<real>_<mask>_<variant>.png
//! ```
//!
//! A sample is identified by its composite stem.

mod augment;
mod image;
mod loader;
mod perturb;
mod synth;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use self::image::FloatImage;
pub use augment::{
    augment, augment_tracked, crop_and_resize, hflip, random_resized_crop, resize_sample,
    AugmentationConfig,
};
pub use loader::{load_dataset, Dataset, LoadReport, SampleEntry, SkippedSample};
pub use perturb::{
    synthesize_composite, Perturbation, Synthesis, GAMMA_RANGE, HUE_RANGE_DEGREES, SCALE_RANGE,
    SHIFT_RANGE,
};
pub use synth::{make_desk_dataset, DeskDatasetConfig, Manifest, ManifestEntry, MANIFEST_FILE};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const REAL_DIR: &str = "real_images";
pub const COMPOSITE_DIR: &str = "composite_images";
pub const MASK_DIR: &str = "masks";

/// A (real, composite, mask) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub real: FloatImage,
    pub composite: FloatImage,
    /// Binary, 1 on the foreground.
    pub mask: FloatImage,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        real: FloatImage,
        composite: FloatImage,
        mask: FloatImage,
    ) -> Result<Self> {
        let id = id.into();
        let mut problems = Vec::new();
        if real.channels() != 3 {
            problems.push(format!("real image has {} channels", real.channels()));
        }
        if composite.channels() != 3 {
            problems.push(format!("composite has {} channels", composite.channels()));
        }
        if mask.channels() != 1 {
            problems.push(format!("mask has {} channels", mask.channels()));
        }
        for (what, img) in [("composite", &composite), ("mask", &mask)] {
            if img.dims() != real.dims() {
                problems.push(format!(
                    "{what} is {}x{} but real image is {}x{}",
                    img.height(),
                    img.width(),
                    real.height(),
                    real.width()
                ));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Validation(
                problems
                    .into_iter()
                    .map(|p| format!("sample {id}: {p}"))
                    .collect(),
            ));
        }
        Ok(Sample {
            id,
            real,
            composite,
            mask,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.real.dims()
    }

    /// Foreground area over image area.
    pub fn fg_ratio(&self) -> f64 {
        let (h, w) = self.dims();
        self.mask.data().iter().filter(|&&v| v >= 0.5).count() as f64 / (h * w) as f64
    }
}

/// Per-channel mean/std standardization of `[0, 1]` images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().all(|s| *s > 0.0 && s.is_finite())
            && self.mean.iter().all(|m| m.is_finite())
        {
            Ok(())
        } else {
            Err(Error::Validation(vec![format!(
                "normalization needs finite means and positive stds, got {self:?}"
            )]))
        }
    }

    /// `(x − mean_c) / std_c` on a 3-channel tensor of `[0, 1]` values.
    pub fn normalize(&self, t: &Tensor) -> Tensor {
        self.per_channel(t, |c, v| (v - self.mean[c]) / self.std[c])
    }

    /// Exact inverse of [`Normalization::normalize`]; no clipping.
    pub fn denormalize(&self, t: &Tensor) -> Tensor {
        self.per_channel(t, |c, v| v * self.std[c] + self.mean[c])
    }

    fn per_channel(&self, t: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
        let s = t.shape();
        assert_eq!(s.channels, 3, "normalization expects 3 channels");
        let plane = s.plane();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f((i / plane) % 3, v))
            .collect();
        Tensor::from_vec(s, data).expect("same shape")
    }
}

/// `[0, 1]` values to the clipped 0–255 scale the metrics use. No rounding.
pub fn to_255_clipped(t: &Tensor) -> Tensor {
    t.map(|v| (v * 255.0).clamp(0.0, 255.0))
}

/// Batch of samples as model-ready tensors.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Normalized composites.
    pub input: Tensor,
    /// Normalized real images.
    pub target: Tensor,
    pub mask: Tensor,
}

impl Batch {
    pub fn from_samples(samples: &[Sample], norm: &Normalization) -> Result<Batch> {
        if samples.is_empty() {
            return Err(Error::argument("batch", "no samples"));
        }
        let stack = |f: &dyn Fn(&Sample) -> &FloatImage| {
            Tensor::stack(&samples.iter().map(|s| f(s).to_tensor()).collect::<Vec<_>>())
        };
        Ok(Batch {
            input: norm.normalize(&stack(&|s| &s.composite)?),
            target: norm.normalize(&stack(&|s| &s.real)?),
            mask: stack(&|s| &s.mask)?,
        })
    }

    pub fn shape(&self) -> Shape {
        self.input.shape()
    }
}

/// Independent random stream for item `index` of pass `epoch` under `seed`.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}
