use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Normalization, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Mirror with probability 1/2.
    pub hflip: bool,
    /// Random square crop with side in `[source/2, source]`, resized to `target_size`.
    pub rrc: bool,
    pub target_size: usize,
    pub normalization: Normalization,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            hflip: true,
            rrc: true,
            target_size: 64,
            normalization: Normalization::default(),
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::Validation(vec!["target_size must be >= 1".into()]));
        }
        self.normalization.validate()
    }
}

/// Mirrors all three planes about the vertical axis.
pub fn hflip(sample: &Sample) -> Sample {
    Sample {
        id: sample.id.clone(),
        real: sample.real.flip_horizontal(),
        composite: sample.composite.flip_horizontal(),
        mask: sample.mask.flip_horizontal(),
    }
}

/// Crops the square `side × side` window at `(top, left)` from every plane and
/// resizes it to `size × size` (bilinear for images, nearest + threshold for the mask).
pub fn crop_and_resize(
    sample: &Sample,
    top: usize,
    left: usize,
    side: usize,
    size: usize,
) -> Result<Sample> {
    let crop = |img: &crate::data::FloatImage| img.crop(top, left, side, side);
    Ok(Sample {
        id: sample.id.clone(),
        real: crop(&sample.real)?.resize_bilinear(size, size),
        composite: crop(&sample.composite)?.resize_bilinear(size, size),
        mask: crop(&sample.mask)?.resize_mask(size, size),
    })
}

/// Resizes the whole sample to `size × size`.
pub fn resize_sample(sample: &Sample, size: usize) -> Sample {
    Sample {
        id: sample.id.clone(),
        real: sample.real.resize_bilinear(size, size),
        composite: sample.composite.resize_bilinear(size, size),
        mask: sample.mask.resize_mask(size, size),
    }
}

/// One shared draw of crop side and offset, applied to all three planes.
pub fn random_resized_crop(sample: &Sample, size: usize, rng: &mut impl Rng) -> Result<Sample> {
    let (h, w) = sample.dims();
    let src = h.min(w);
    if src < size {
        return Err(Error::argument(
            "random_resized_crop",
            format!("source side {src} is smaller than target {size}"),
        ));
    }
    let side = rng.gen_range(src.div_ceil(2)..=src);
    let top = rng.gen_range(0..=h - side);
    let left = rng.gen_range(0..=w - side);
    crop_and_resize(sample, top, left, side, size)
}

/// The training-time chain: optional flip, then crop-and-resize or plain resize.
pub fn augment(sample: &Sample, config: &AugmentationConfig, rng: &mut impl Rng) -> Result<Sample> {
    augment_tracked(sample, config, rng).map(|(s, _)| s)
}

/// [`augment`], also reporting whether the sample was mirrored.
pub fn augment_tracked(
    sample: &Sample,
    config: &AugmentationConfig,
    rng: &mut impl Rng,
) -> Result<(Sample, bool)> {
    let flip = config.hflip && rng.gen_bool(0.5);
    let mirrored;
    let s = if flip {
        mirrored = hflip(sample);
        &mirrored
    } else {
        sample
    };
    let out = if config.rrc {
        random_resized_crop(s, config.target_size, rng)?
    } else {
        resize_sample(s, config.target_size)
    };
    Ok((out, flip))
}
