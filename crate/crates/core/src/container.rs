//! Binary tensor container used for both checkpoints and clip files.
//!
//! Layout, all integers little-endian:
//!   magic "KASF" | format version u32 | tensor count u32
//!   per tensor: name length u32 | UTF-8 name | rank u32 | dims u32 each |
//!               values as 32-bit floats, row-major
//!
//! Values are truncated to 32 bits on save, so save -> load -> save is
//! byte-identical.

use std::path::Path;

use ndarray::Array3;

use crate::error::{KasError, Result};
use crate::pose::{Pose2DClip, Pose3DClip};

pub const MAGIC: [u8; 4] = *b"KASF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    entries: Vec<TensorEntry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, dims: Vec<usize>, values: Vec<f32>) -> Result<()> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(KasError::Checkpoint(format!(
                "duplicate tensor name {name:?}"
            )));
        }
        let expected: usize = dims.iter().product();
        if expected != values.len() {
            return Err(KasError::Checkpoint(format!(
                "tensor {name:?}: dims {dims:?} imply {expected} values, got {}",
                values.len()
            )));
        }
        self.entries.push(TensorEntry {
            name: name.to_string(),
            dims,
            values,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, at: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(KasError::Checkpoint(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(KasError::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let count = cur.u32()? as usize;
        let mut container = Self::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| KasError::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = cur.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cur.u32()? as usize);
            }
            let n: usize = dims.iter().product();
            let raw = cur.take(n * 4)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            container.push(&name, dims, values)?;
        }
        Ok(container)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(KasError::Checkpoint(format!(
                "truncated file: needed {n} bytes at offset {}, have {}",
                self.at,
                self.bytes.len() - self.at
            )));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn clip_tensor(dims: &[usize], values: &[f32]) -> Result<Array3<f64>> {
    if dims.len() != 3 {
        return Err(KasError::Checkpoint(format!(
            "clip tensor must be rank 3, got rank {}",
            dims.len()
        )));
    }
    let data: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    Array3::from_shape_vec((dims[0], dims[1], dims[2]), data)
        .map_err(|e| KasError::Checkpoint(format!("clip tensor shape: {e}")))
}

/// One sample: paired 2D observations and 3D ground truth with an action
/// label.
#[derive(Debug, Clone)]
pub struct ClipPair {
    pub pose2d: Pose2DClip,
    pub pose3d: Pose3DClip,
    pub action: String,
}

/// Writes a clip pair as a container with entries "pose2d", "pose3d" and
/// "action" (label bytes stored one per value).
pub fn save_clip(pair: &ClipPair, path: &Path) -> Result<()> {
    let mut container = Container::new();
    let d2 = pair.pose2d.data();
    let (t, j, _) = d2.dim();
    container.push(
        "pose2d",
        vec![t, j, 3],
        d2.iter().map(|&v| v as f32).collect(),
    )?;
    let d3 = pair.pose3d.data();
    container.push(
        "pose3d",
        vec![t, j, 3],
        d3.iter().map(|&v| v as f32).collect(),
    )?;
    container.push(
        "action",
        vec![pair.action.len()],
        pair.action.bytes().map(|b| b as f32).collect(),
    )?;
    container.save(path)
}

pub fn load_clip(path: &Path) -> Result<ClipPair> {
    let container = Container::load(path)?;
    let need = |name: &str| {
        container
            .get(name)
            .ok_or_else(|| KasError::Checkpoint(format!("clip file missing {name:?}")))
    };
    let p2 = need("pose2d")?;
    let p3 = need("pose3d")?;
    let action_entry = need("action")?;
    let pose2d = Pose2DClip::new(clip_tensor(&p2.dims, &p2.values)?)?;
    let pose3d = Pose3DClip::new(clip_tensor(&p3.dims, &p3.values)?)?;
    let bytes: Vec<u8> = action_entry.values.iter().map(|&v| v as u8).collect();
    let action = String::from_utf8(bytes)
        .map_err(|_| KasError::Checkpoint("action label is not UTF-8".into()))?;
    Ok(ClipPair {
        pose2d,
        pose3d,
        action,
    })
}
