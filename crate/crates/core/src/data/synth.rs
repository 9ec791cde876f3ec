//! Procedural desk-scale dataset.
//!
//! Each real image is a gray albedo field lit by one colored illuminant: a smooth
//! background, a few gray distractor blobs, and one object (ellipse or star-shaped
//! polygon) that becomes the foreground mask. The composite perturbs the object's
//! color, so the illuminant visible in the background tells a model how to undo it.
//!
//! Sample `i` targets foreground-ratio bucket `i mod 3`, so any run of three
//! consecutive samples covers the small, medium and large buckets.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    sample_rng, synthesize_composite, FloatImage, Perturbation, Sample, COMPOSITE_DIR, MASK_DIR,
    REAL_DIR,
};
use crate::error::{Error, Result};
use crate::metrics::{bucketize, FgRatioBucket};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Smallest side for which every bucket can be hit reliably.
const MIN_SIZE: usize = 16;
/// Mean absolute per-channel foreground change a composite must reach.
const MIN_VISIBLE_CHANGE: f64 = 0.03;
const MAX_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub real: String,
    pub composite: String,
    pub mask: String,
    pub fg_ratio: f64,
    pub perturbation: Perturbation,
}

/// Serialized as a plain JSON list of entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Parameters of the generator, recorded for reproducibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeskDatasetConfig {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
}

impl DeskDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n == 0 {
            problems.push("n must be >= 1".to_string());
        }
        if self.size < MIN_SIZE {
            problems.push(format!("size must be >= {MIN_SIZE}, got {}", self.size));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// File stem of the real image of sample `index`.
    pub fn real_stem(index: usize) -> String {
        format!("desk{index:04}")
    }

    /// Builds sample `index` in memory.
    pub fn sample(&self, index: usize) -> Result<(Sample, Perturbation)> {
        self.validate()?;
        let mut rng = sample_rng(self.seed, 0, index as u64);
        let bucket = FgRatioBucket::ALL[index % 3];
        let size = self.size;

        let illuminant = [(); 3].map(|_| 1.0 + rng.gen_range(-0.3..=0.3));
        let mut albedo = background(size, &mut rng);
        for _ in 0..rng.gen_range(1..=3) {
            let blob = random_shape(size, rng.gen_range(0.01..0.06), &mut rng);
            let level = rng.gen_range(0.2..0.8);
            paint(&mut albedo, &blob, |_, _| level);
        }
        let mask = object_mask(size, bucket, &mut rng)?;
        let level = rng.gen_range(0.3..0.8);
        let (gy, gx) = (rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15));
        paint(&mut albedo, &mask, |y, x| {
            level + gy * (y as f64 / size as f64 - 0.5) + gx * (x as f64 / size as f64 - 0.5)
        });
        let real = FloatImage::from_fn(3, size, size, |c, y, x| {
            (illuminant[c] * albedo[y * size + x]).clamp(0.0, 1.0)
        })
        .quantized();

        for _ in 0..MAX_ATTEMPTS {
            let spec = Perturbation::random(&mut rng);
            let synth = synthesize_composite(composite_id(index), &real, &mask, &spec)?;
            let composite = synth.sample.composite.quantized();
            if mean_foreground_change(&real, &composite, &mask) >= MIN_VISIBLE_CHANGE {
                let sample = Sample::new(synth.sample.id, real, composite, mask)?;
                return Ok((sample, spec));
            }
        }
        Err(Error::Contract(format!(
            "sample {index}: no visible perturbation after {MAX_ATTEMPTS} draws"
        )))
    }
}

fn composite_id(index: usize) -> String {
    format!("{}_1_1", DeskDatasetConfig::real_stem(index))
}

fn mean_foreground_change(real: &FloatImage, composite: &FloatImage, mask: &FloatImage) -> f64 {
    let n = mask.data().len();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        if mask.data()[i] == 1.0 {
            for c in 0..3 {
                total += (real.data()[c * n + i] - composite.data()[c * n + i]).abs();
            }
            count += 3;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

fn background(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let base = rng.gen_range(0.35..0.65);
    let (gy, gx) = (rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
    let amp = rng.gen_range(0.03..0.12);
    let (fy, fx) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0));
    let phase = rng.gen_range(0.0..2.0 * PI);
    let s = size as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (v, u) = (y as f64 / s, x as f64 / s);
            let wave = (2.0 * PI * (fy * v + fx * u) + phase).sin();
            out.push(base + gy * (v - 0.5) + gx * (u - 0.5) + amp * wave);
        }
    }
    out
}

fn paint(albedo: &mut [f64], shape: &FloatImage, value: impl Fn(usize, usize) -> f64) {
    let w = shape.width();
    for (i, &m) in shape.data().iter().enumerate() {
        if m == 1.0 {
            albedo[i] = value(i / w, i % w);
        }
    }
}

/// Target ratios are drawn from the interior of each bucket so rasterization error
/// does not push the realized ratio across a boundary.
fn target_range(bucket: FgRatioBucket) -> (f64, f64) {
    match bucket {
        FgRatioBucket::Small => (0.015, 0.04),
        FgRatioBucket::Medium => (0.07, 0.13),
        FgRatioBucket::Large => (0.18, 0.40),
    }
}

fn object_mask(size: usize, bucket: FgRatioBucket, rng: &mut ChaCha8Rng) -> Result<FloatImage> {
    let (lo, hi) = target_range(bucket);
    for _ in 0..MAX_ATTEMPTS {
        let mask = random_shape(size, rng.gen_range(lo..hi), rng);
        let area = mask.data().iter().filter(|&&v| v == 1.0).count();
        let ratio = area as f64 / (size * size) as f64;
        if area > 0 && bucketize(ratio)? == bucket {
            return Ok(mask);
        }
    }
    Err(Error::Contract(format!(
        "could not place a {} object in a {size}x{size} image",
        bucket.label()
    )))
}

/// An ellipse or star-shaped polygon of roughly `ratio · size²` pixels.
fn random_shape(size: usize, ratio: f64, rng: &mut ChaCha8Rng) -> FloatImage {
    let s = size as f64;
    let area = ratio * s * s;
    let polygon = rng.gen_bool(0.5);
    let inside: Box<dyn Fn(f64, f64) -> bool> = if polygon {
        let k = rng.gen_range(5..=9);
        let step = 2.0 * PI / k as f64;
        let start = rng.gen_range(0.0..step);
        let vertices: Vec<(f64, f64)> = (0..k)
            .map(|j| {
                let angle = start + step * j as f64 + rng.gen_range(-0.3..0.3) * step;
                (angle, rng.gen_range(0.7..1.3))
            })
            .collect();
        // area of the unit-radius polygon, to scale it to the target
        let unit: f64 = (0..k)
            .map(|j| {
                let (a0, r0) = vertices[j];
                let (a1, r1) = vertices[(j + 1) % k];
                0.5 * r0 * r1 * (a1 - a0).rem_euclid(2.0 * PI).sin()
            })
            .sum();
        let scale = (area / unit).sqrt();
        let reach = scale * 1.3;
        let (cy, cx) = (center(s, reach, rng), center(s, reach, rng));
        let pts: Vec<(f64, f64)> = vertices
            .iter()
            .map(|&(a, r)| (cy + scale * r * a.sin(), cx + scale * r * a.cos()))
            .collect();
        Box::new(move |y, x| point_in_polygon(&pts, y, x))
    } else {
        let aspect: f64 = rng.gen_range(0.6..1.6);
        let a = (area * aspect / PI).sqrt();
        let b = (area / (PI * aspect)).sqrt();
        let theta = rng.gen_range(0.0..PI);
        let reach = a.max(b);
        let (cy, cx) = (center(s, reach, rng), center(s, reach, rng));
        let (sin, cos) = theta.sin_cos();
        Box::new(move |y, x| {
            let (dy, dx) = (y - cy, x - cx);
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            (u / a).powi(2) + (v / b).powi(2) <= 1.0
        })
    };
    FloatImage::from_fn(1, size, size, |_, y, x| {
        if inside(y as f64 + 0.5, x as f64 + 0.5) {
            1.0
        } else {
            0.0
        }
    })
}

fn center(side: f64, reach: f64, rng: &mut ChaCha8Rng) -> f64 {
    if 2.0 * reach >= side {
        side / 2.0
    } else {
        rng.gen_range(reach..side - reach)
    }
}

fn point_in_polygon(pts: &[(f64, f64)], y: f64, x: f64) -> bool {
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (yi, xi) = pts[i];
        let (yj, xj) = pts[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Writes `n` samples of `size × size` pixels plus `manifest.json` under `out_dir`.
/// The output is a pure function of `(n, size, seed)`.
pub fn make_desk_dataset(n: usize, size: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    let config = DeskDatasetConfig { n, size, seed };
    config.validate()?;
    for dir in [REAL_DIR, COMPOSITE_DIR, MASK_DIR] {
        let path = out_dir.join(dir);
        fs::create_dir_all(&path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    }
    let mut entries = Vec::with_capacity(n);
    for index in 0..n {
        let (sample, spec) = config.sample(index)?;
        let stem = DeskDatasetConfig::real_stem(index);
        let real = format!("{REAL_DIR}/{stem}.png");
        let mask = format!("{MASK_DIR}/{stem}_1.png");
        let composite = format!("{COMPOSITE_DIR}/{}.png", sample.id);
        sample.real.write_png(&out_dir.join(&real))?;
        sample.mask.write_png(&out_dir.join(&mask))?;
        sample.composite.write_png(&out_dir.join(&composite))?;
        entries.push(ManifestEntry {
            id: sample.id.clone(),
            real,
            composite,
            mask,
            fg_ratio: sample.fg_ratio(),
            perturbation: spec,
        });
    }
    let manifest = Manifest { entries };
    let path = out_dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(manifest)
}
