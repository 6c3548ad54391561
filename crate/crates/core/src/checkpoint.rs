//! Binary model container.
//!
//! Layout: magic `ARCM`, one version byte, a little-endian `u32` byte length,
//! that many bytes of JSON metadata, then the weight payload as little-endian
//! `f32` values in the order the metadata lists its tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ARCM";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerMeta {
    /// `"pca"`, `"ae"` or `"vae"`.
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub training: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: ContainerMeta,
    pub payload: Vec<f32>,
}

impl Container {
    /// Build from named f64 tensors; values are narrowed to f32.
    pub fn from_tensors(
        kind: &str,
        config: serde_json::Value,
        training: serde_json::Value,
        tensors: &[(TensorEntry, &[f64])],
    ) -> Result<Self> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(tensors.len());
        for (entry, data) in tensors {
            if entry.numel() != data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} declares {} values, has {}",
                    entry.name,
                    entry.numel(),
                    data.len()
                )));
            }
            payload.extend(data.iter().map(|&v| v as f32));
            entries.push(entry.clone());
        }
        Ok(Self {
            meta: ContainerMeta {
                kind: kind.to_string(),
                config,
                tensors: entries,
                training,
            },
            payload,
        })
    }

    /// Split the payload back into f64 tensors in declared order.
    pub fn tensors(&self) -> Vec<(&TensorEntry, Vec<f64>)> {
        let mut offset = 0;
        self.meta
            .tensors
            .iter()
            .map(|t| {
                let n = t.numel();
                let v = self.payload[offset..offset + n].iter().map(|&x| f64::from(x)).collect();
                offset += n;
                (t, v)
            })
            .collect()
    }

    pub fn tensor(&self, name: &str) -> Result<Vec<f64>> {
        self.tensors()
            .into_iter()
            .find(|(t, _)| t.name == name)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.meta)?;
        let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("metadata too large".into()))?;
        let mut out = Vec::with_capacity(9 + json.len() + 4 * self.payload.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("missing ARCM magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", bytes[4])));
        }
        let len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let json_end = 9 + len;
        if bytes.len() < json_end {
            return Err(Error::Checkpoint("truncated metadata".into()));
        }
        let meta: ContainerMeta = serde_json::from_slice(&bytes[9..json_end])?;
        let rest = &bytes[json_end..];
        let expected: usize = meta.tensors.iter().map(TensorEntry::numel).sum();
        if rest.len() != 4 * expected {
            return Err(Error::Checkpoint(format!(
                "payload has {} bytes, metadata declares {} values",
                rest.len(),
                expected
            )));
        }
        let payload = rest
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { meta, payload })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_corruption() {
        let a = [1.0, -2.5, 3.25];
        let b = [0.5; 4];
        let c = Container::from_tensors(
            "pca",
            serde_json::json!({"d": 3}),
            serde_json::Value::Null,
            &[(TensorEntry::new("a", &[3]), &a), (TensorEntry::new("b", &[2, 2]), &b)],
        )
        .unwrap();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"ARCM");
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.tensor("a").unwrap(), a.to_vec());

        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err());
        assert!(Container::from_tensors("pca", serde_json::Value::Null, serde_json::Value::Null, &[(TensorEntry::new("a", &[2]), &a)]).is_err());
    }
}
