//! Binary checkpoint format.
//!
//! ```text
//! "IHCKPT1" | version: u32 LE | header_len: u32 LE | header (JSON) | payload | crc32: u32 LE
//! ```
//!
//! The payload holds every tensor as little-endian f64 values; the header lists
//! each tensor's name, role, shape and byte offset. The CRC covers all preceding bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};
use crate::train::adam::AdamState;
use crate::train::{EpochRecord, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"IHCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_EXTENSION: &str = "ihckpt";

/// Everything needed to continue a run bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Epochs completed; training resumes at this epoch.
    pub epoch: usize,
    pub params: Vec<(String, Tensor)>,
    pub adam: AdamState,
    pub shuffle_rng: ChaCha8Rng,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: Role,
    shape: [usize; 4],
    dtype: String,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    adam_t: u64,
    shuffle_rng: ChaCha8Rng,
    history: Vec<EpochRecord>,
    tensors: Vec<TensorEntry>,
    payload_bytes: usize,
}

fn format_error(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint".into(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.adam.m.len() != self.params.len() || self.adam.v.len() != self.params.len() {
            return Err(Error::Contract(
                "optimizer state does not match parameter list".into(),
            ));
        }
        let mut tensors = Vec::with_capacity(3 * self.params.len());
        let mut payload = Vec::new();
        let groups: [(Role, Vec<&Tensor>); 3] = [
            (Role::Param, self.params.iter().map(|(_, t)| t).collect()),
            (Role::AdamM, self.adam.m.iter().collect()),
            (Role::AdamV, self.adam.v.iter().collect()),
        ];
        for (role, list) in &groups {
            for ((name, _), t) in self.params.iter().zip(list) {
                tensors.push(TensorEntry {
                    name: name.clone(),
                    role: *role,
                    shape: t.shape().as_array(),
                    dtype: "f64".into(),
                    offset: payload.len(),
                });
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            adam_t: self.adam.t,
            shuffle_rng: self.shuffle_rng.clone(),
            history: self.history.clone(),
            tensors,
            payload_bytes: payload.len(),
        };
        let header = serde_json::to_vec(&header)?;
        let header_len =
            u32::try_from(header.len()).map_err(|_| format_error("header larger than 4 GiB"))?;

        let mut out = Vec::with_capacity(7 + 8 + header.len() + payload.len() + 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Checksum {
                stored: 0,
                computed: crc32fast::hash(bytes),
            });
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        if body.len() < 15 || &body[..7] != CHECKPOINT_MAGIC {
            return Err(format_error("missing IHCKPT1 magic"));
        }
        let version = u32::from_le_bytes(body[7..11].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let header_len = u32::from_le_bytes(body[11..15].try_into().expect("4 bytes")) as usize;
        let rest = &body[15..];
        if rest.len() < header_len {
            return Err(format_error("header extends past end of file"));
        }
        let (header, payload) = rest.split_at(header_len);
        let header: Header = serde_json::from_slice(header)?;
        if payload.len() != header.payload_bytes {
            return Err(format_error(format!(
                "payload is {} bytes, header declares {}",
                payload.len(),
                header.payload_bytes
            )));
        }

        let n = header.tensors.len() / 3;
        if header.tensors.len() != 3 * n {
            return Err(format_error("tensor table is not params + two moments"));
        }
        let mut params = Vec::with_capacity(n);
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for (i, entry) in header.tensors.iter().enumerate() {
            let expected = [Role::Param, Role::AdamM, Role::AdamV][i / n.max(1)];
            if entry.role != expected || entry.name != header.tensors[i % n.max(1)].name {
                return Err(format_error(format!(
                    "unexpected tensor entry {}",
                    entry.name
                )));
            }
            if entry.dtype != "f64" {
                return Err(format_error(format!(
                    "tensor {} has unsupported dtype {}",
                    entry.name, entry.dtype
                )));
            }
            let [b, c, h, w] = entry.shape;
            let shape = Shape::new(b, c, h, w);
            let len = shape.numel() * 8;
            let chunk = entry
                .offset
                .checked_add(len)
                .and_then(|end| payload.get(entry.offset..end))
                .ok_or_else(|| format_error(format!("tensor {} out of bounds", entry.name)))?;
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::from_vec(shape, data)?;
            match entry.role {
                Role::Param => params.push((entry.name.clone(), t)),
                Role::AdamM => m.push(t),
                Role::AdamV => v.push(t),
            }
        }
        Ok(Checkpoint {
            adam: AdamState {
                config: header.config.adam,
                m,
                v,
                t: header.adam_t,
            },
            config: header.config,
            epoch: header.epoch,
            params,
            shuffle_rng: header.shuffle_rng,
            history: header.history,
        })
    }

    /// Writes through a temporary sibling file and renames, so a crash never leaves
    /// a half-written checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}
