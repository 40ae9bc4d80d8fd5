//! Binary checkpoint container.
//!
//! ```text
//! "CLDP" | version: u32 LE | header_len: u64 LE | header (JSON)
//!        | parameter values: f32 LE × layout length
//!        | extra arrays: f32 LE, in header order
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::spec::{Layout, ModelSpec, ParamVector};
use super::NnError;

pub const MAGIC: &[u8; 4] = b"CLDP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    layout: Layout,
    arrays: Vec<ArrayEntry>,
    meta: BTreeMap<String, serde_json::Value>,
}

/// Model parameters plus named auxiliary arrays (Fisher diagonals,
/// prototypes, ...) and JSON metadata (e.g. exemplar source keys).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParamVector,
    pub arrays: Vec<(String, Vec<f32>)>,
    pub meta: BTreeMap<String, serde_json::Value>,
}

fn corrupt(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(spec: ModelSpec, params: ParamVector) -> Self {
        Checkpoint {
            spec,
            params,
            arrays: Vec::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn array(&self, name: &str) -> Option<&[f32]> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, NnError> {
        if self.params.layout != self.spec.layout() {
            return Err(corrupt("parameter layout does not match the model spec"));
        }
        let header = Header {
            spec: self.spec.clone(),
            layout: self.params.layout.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, v)| ArrayEntry {
                    name: name.clone(),
                    len: v.len(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
        let n_floats = self.params.len() + self.arrays.iter().map(|(_, v)| v.len()).sum::<usize>();
        let mut out = Vec::with_capacity(16 + json.len() + 4 * n_floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.params.values.iter().chain(self.arrays.iter().flat_map(|(_, a)| a)) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing CLDP magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(header_len))
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| corrupt(e.to_string()))?;
        header.spec.validate()?;
        if header.layout != header.spec.layout() {
            return Err(corrupt("layout table does not match the model spec"));
        }
        let mut floats = bytes[16 + header_len..].chunks_exact(4);
        if !floats.remainder().is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        let mut take = |n: usize| -> Result<Vec<f32>, NnError> {
            let v: Vec<f32> = floats
                .by_ref()
                .take(n)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if v.len() == n {
                Ok(v)
            } else {
                Err(corrupt("truncated value section"))
            }
        };
        let values = take(header.layout.total_len())?;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for entry in &header.arrays {
            arrays.push((entry.name.clone(), take(entry.len)?));
        }
        if floats.next().is_some() {
            return Err(corrupt("unexpected data after the last array"));
        }
        Ok(Checkpoint {
            spec: header.spec,
            params: ParamVector {
                values,
                layout: header.layout,
            },
            arrays,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        std::fs::write(path, self.to_bytes()?)
            .map_err(|e| corrupt(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let bytes = std::fs::read(path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
        Checkpoint::from_bytes(&bytes)
    }
}
