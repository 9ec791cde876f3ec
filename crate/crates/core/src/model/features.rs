//! `.hfeat` files: externally computed backbone feature maps.
//!
//! Layout: magic `HFEAT1`, little-endian `u32` channels, height, width, then
//! `channels · height · width` little-endian `f32` values in row-major order.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const FEATURE_MAGIC: &[u8; 6] = b"HFEAT1";
pub const FEATURE_EXTENSION: &str = "hfeat";

pub fn encode_features(features: &Tensor) -> Result<Vec<u8>> {
    let s = features.shape();
    if s.batch != 1 {
        return Err(Error::argument(
            "encode_features",
            format!("expected a single feature map, got batch {}", s.batch),
        ));
    }
    let mut out = Vec::with_capacity(18 + 4 * features.numel());
    out.extend_from_slice(FEATURE_MAGIC);
    for dim in [s.channels, s.height, s.width] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &v in features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8], what: &str) -> Result<Tensor> {
    let bad = |reason: String| Error::Format {
        what: what.to_string(),
        reason,
    };
    if bytes.len() < 18 || &bytes[..6] != FEATURE_MAGIC {
        return Err(bad("missing HFEAT1 header".into()));
    }
    let dim =
        |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let n = c * h * w;
    if n == 0 {
        return Err(bad(format!("empty feature map {c}x{h}x{w}")));
    }
    let payload = &bytes[18..];
    if payload.len() != 4 * n {
        return Err(bad(format!(
            "header declares {c}x{h}x{w} ({} bytes) but payload has {} bytes",
            4 * n,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Tensor::from_vec(Shape::new(1, c, h, w), data)
}

pub fn feature_path(dir: &Path, sample_id: &str) -> PathBuf {
    dir.join(format!("{sample_id}.{FEATURE_EXTENSION}"))
}

pub fn write_precomputed_features(dir: &Path, sample_id: &str, features: &Tensor) -> Result<()> {
    let path = feature_path(dir, sample_id);
    fs::write(&path, encode_features(features)?)
        .map_err(|e| Error::io(format!("writing features for {sample_id}"), e))
}

/// Reads the feature map stored for `sample_id` under `dir`.
pub fn load_precomputed_features(dir: &Path, sample_id: &str) -> Result<Tensor> {
    let path = feature_path(dir, sample_id);
    let bytes = fs::read(&path).map_err(|e| {
        Error::io(
            format!("features for sample {sample_id} ({})", path.display()),
            e,
        )
    })?;
    decode_features(&bytes, &format!("features for sample {sample_id}"))
}

/// A feature directory paired with the channel count the model expects.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    pub dir: PathBuf,
    pub channels: usize,
}

impl FeatureStore {
    pub fn load(&self, sample_id: &str) -> Result<Tensor> {
        let t = load_precomputed_features(&self.dir, sample_id)?;
        let c = t.shape().channels;
        if c != self.channels {
            return Err(Error::Validation(vec![format!(
                "features for sample {sample_id}: expected {} channels, file declares {c}",
                self.channels
            )]));
        }
        Ok(t)
    }
}
