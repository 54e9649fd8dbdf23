//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!   magic "DASH" | version u32 | meta_len u32 | meta JSON (UTF-8)
//!   | array_count u32 | per array: name_len u32, name, ndim u32,
//!     dims u32 x ndim, payload f32 LE (product of dims)
//!
//! The container stores f32 arrays, so save/load of a `Checkpoint` is always
//! bit-identical. Live f64 model state is rounded once when packed.

use crate::error::{Error, Result};
use crate::hashgrid::HashGridConfig;
use crate::math::Vec3;
use crate::scene::{Aabb, Label, UnitNormalizer};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DASH";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<u32>,
    #[serde(skip)]
    pub data: Vec<f32>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<u32>, data: Vec<f32>) -> NamedArray {
        let n: usize = shape.iter().map(|&d| d as usize).product();
        assert_eq!(n, data.len(), "shape/payload disagreement");
        NamedArray { name: name.into(), shape, data }
    }

    pub fn from_f64(name: impl Into<String>, shape: Vec<u32>, data: impl Iterator<Item = f64>) -> NamedArray {
        NamedArray::new(name, shape.clone(), data.map(|v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Architecture/config block needed to rebuild models from raw arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub labels: Vec<Label>,
    pub bbox: Aabb,
    pub background: Vec3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid3d: Option<HashGridConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid4d: Option<HashGridConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage1_widths: Option<MlpWidths>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2_widths: Option<Stage2Widths>,
    /// Training iterations already applied (stage1, stage2).
    pub iterations: (u64, u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpWidths {
    pub feature: Vec<usize>,
    pub head: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Widths {
    pub feature: Vec<usize>,
    pub position_head: Vec<usize>,
    pub rotation_head: Vec<usize>,
    pub scale_head: Vec<usize>,
}

impl CheckpointMeta {
    pub fn normalizer(&self) -> UnitNormalizer {
        UnitNormalizer::from_bbox(&self.bbox)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub meta: CheckpointMeta,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::ShapeMismatch(format!("checkpoint is missing array {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::UnexpectedEof);
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let magic = take(&mut pos, 4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::NotACheckpoint);
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        let meta_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let meta: CheckpointMeta = serde_json::from_slice(take(&mut pos, meta_len)?)?;
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::MalformedHeader("array name is not UTF-8".into()))?;
            let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()));
            }
            let n: usize = shape.iter().map(|&d| d as usize).product();
            let raw = take(&mut pos, n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push(NamedArray { name, shape, data });
        }
        Ok(Checkpoint { version, meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}
