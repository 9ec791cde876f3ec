use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::image::FloatImage;
use crate::data::Sample;
use crate::error::{Error, Result};

/// Sampling ranges for [`Perturbation::random`].
pub const SCALE_RANGE: (f64, f64) = (0.5, 1.5);
pub const SHIFT_RANGE: (f64, f64) = (-0.2, 0.2);
pub const GAMMA_RANGE: (f64, f64) = (0.5, 2.0);
pub const HUE_RANGE_DEGREES: (f64, f64) = (-30.0, 30.0);

/// Foreground color change used to turn a real image into a composite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    /// `v' = scale_c · v + shift_c` per channel.
    ChannelAffine { scale: [f64; 3], shift: [f64; 3] },
    /// `v' = v^gamma` per channel.
    Gamma { gamma: f64 },
    /// Rotation of the color vector about the gray axis.
    HueRotate { degrees: f64 },
}

impl Perturbation {
    pub const IDENTITY: Perturbation = Perturbation::ChannelAffine {
        scale: [1.0; 3],
        shift: [0.0; 3],
    };

    /// Draws a kind uniformly, then its parameters uniformly from the documented ranges.
    pub fn random(rng: &mut impl Rng) -> Perturbation {
        match rng.gen_range(0..3) {
            0 => Perturbation::ChannelAffine {
                scale: [(); 3].map(|_| uniform(rng, SCALE_RANGE)),
                shift: [(); 3].map(|_| uniform(rng, SHIFT_RANGE)),
            },
            1 => {
                // log-uniform, so darkening and brightening are equally likely
                let (lo, hi) = GAMMA_RANGE;
                let gamma = uniform(rng, (lo.ln(), hi.ln())).exp();
                Perturbation::Gamma { gamma }
            }
            _ => Perturbation::HueRotate {
                degrees: uniform(rng, HUE_RANGE_DEGREES),
            },
        }
    }

    pub fn is_identity(&self) -> bool {
        match *self {
            Perturbation::ChannelAffine { scale, shift } => scale == [1.0; 3] && shift == [0.0; 3],
            Perturbation::Gamma { gamma } => gamma == 1.0,
            Perturbation::HueRotate { degrees } => degrees == 0.0,
        }
    }

    /// Rejects non-finite parameters and non-positive gamma. Values outside the
    /// sampling ranges are allowed.
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Perturbation::ChannelAffine { scale, shift } => {
                scale.iter().chain(&shift).all(|v| v.is_finite())
            }
            Perturbation::Gamma { gamma } => gamma.is_finite() && gamma > 0.0,
            Perturbation::HueRotate { degrees } => degrees.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(vec![format!(
                "invalid perturbation {self:?}"
            )]))
        }
    }

    /// Applies the perturbation to one pixel; the result is not clipped.
    pub fn apply(&self, rgb: [f64; 3]) -> [f64; 3] {
        match *self {
            Perturbation::ChannelAffine { scale, shift } => {
                [0, 1, 2].map(|c| scale[c] * rgb[c] + shift[c])
            }
            Perturbation::Gamma { gamma } => rgb.map(|v| v.max(0.0).powf(gamma)),
            Perturbation::HueRotate { degrees } => {
                let m = hue_matrix(degrees);
                [0, 1, 2].map(|r| (0..3).map(|c| m[r][c] * rgb[c]).sum())
            }
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    rng.gen_range(lo..=hi)
}

/// Rodrigues rotation about the unit vector `(1, 1, 1) / √3`.
fn hue_matrix(degrees: f64) -> [[f64; 3]; 3] {
    let (s, c) = degrees.to_radians().sin_cos();
    let a = (1.0 - c) / 3.0;
    let b = s / 3f64.sqrt();
    [
        [c + a, a - b, a + b],
        [a + b, c + a, a - b],
        [a - b, a + b, c + a],
    ]
}

/// A synthesized composite together with a flag for the degenerate empty-mask case.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub sample: Sample,
    /// The mask had no foreground pixels, so the composite equals the real image.
    pub empty_mask: bool,
}

/// Perturbs the foreground of `real` and clips to `[0, 1]`; the background is copied.
pub fn synthesize_composite(
    id: impl Into<String>,
    real: &FloatImage,
    mask: &FloatImage,
    spec: &Perturbation,
) -> Result<Synthesis> {
    spec.validate()?;
    if real.channels() != 3 || mask.channels() != 1 || real.dims() != mask.dims() {
        return Err(Error::Validation(vec![format!(
            "synthesize_composite: expected 3-channel image and 1-channel mask of equal size, got {}x{}x{} and {}x{}x{}",
            real.channels(),
            real.height(),
            real.width(),
            mask.channels(),
            mask.height(),
            mask.width()
        )]));
    }
    if !mask.is_binary() {
        return Err(Error::Validation(vec![
            "synthesize_composite: mask must be binary".to_string(),
        ]));
    }
    let mut composite = real.clone();
    let n = real.height() * real.width();
    let m = mask.data();
    let mut any = false;
    {
        let data = composite.data_mut();
        for i in 0..n {
            if m[i] == 1.0 {
                any = true;
                let out = spec.apply([data[i], data[n + i], data[2 * n + i]]);
                for (c, v) in out.into_iter().enumerate() {
                    data[c * n + i] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(Synthesis {
        sample: Sample::new(id, real.clone(), composite, mask.clone())?,
        empty_mask: !any,
    })
}
