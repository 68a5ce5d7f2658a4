//! Two-file checkpoint container: `manifest.json` plus a little-endian `f32`
//! payload in `weights.bin`.
//!
//! Tensors are widened to `f64` on load and narrowed on save, so a
//! load/save cycle reproduces the payload bytes exactly.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "weights.bin";
pub const DTYPE_F32: &str = "f32";

/// Role tags used across the toolkit.
pub mod roles {
    pub const QUERY: &str = "query";
    pub const KEY: &str = "key";
    pub const VALUE: &str = "value";
    pub const OUTPUT: &str = "output";
    pub const MLP_IN: &str = "mlp_in";
    pub const MLP_OUT: &str = "mlp_out";
    pub const NORM: &str = "norm";
    pub const CLASSIFIER: &str = "classifier";
    pub const EMBED: &str = "embed";
    pub const LORA_A: &str = "lora_a";
    pub const LORA_B: &str = "lora_b";
    pub const INPUT: &str = "input";
    pub const LABEL: &str = "label";

    pub fn is_adapter(role: &str) -> bool {
        role == LORA_A || role == LORA_B
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub layer: Option<usize>,
    pub role: String,
    /// Adapted role for `lora_a`/`lora_b` tensors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: u64,
    /// Byte length in the payload.
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub backbone_total: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    pub tensors: Vec<TensorMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub layer: Option<usize>,
    pub role: String,
    pub target: Option<String>,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(
        name: impl Into<String>,
        layer: Option<usize>,
        role: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            layer,
            role: role.into(),
            target: None,
            shape,
            data,
        }
    }

    pub fn from_matrix(name: impl Into<String>, layer: Option<usize>, role: impl Into<String>, m: &Matrix) -> Self {
        Self::new(name, layer, role, vec![m.rows(), m.cols()], m.as_slice().to_vec())
    }

    pub fn with_target(mut self, target: impl Into<String>) -> Self {
        self.target = Some(target.into());
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Views a 2-D tensor as a matrix.
    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.shape.as_slice() {
            &[r, c] => Matrix::new(r, c, self.data.clone()),
            other => Err(Error::ShapeMismatch(format!(
                "tensor '{}' has shape {other:?}, expected 2-D",
                self.name
            ))),
        }
    }

    fn key(&self) -> (Option<usize>, String, Option<String>) {
        (self.layer, self.role.clone(), self.target.clone())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightBundle {
    pub config: Option<serde_json::Value>,
    tensors: Vec<Tensor>,
}

impl WeightBundle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor; `(layer, role, target)` must be unique.
    pub fn push(&mut self, tensor: Tensor) -> Result<()> {
        if self.tensors.iter().any(|t| t.key() == tensor.key()) {
            return Err(Error::DuplicateKey(tensor.name));
        }
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, layer: Option<usize>, role: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.layer == layer && t.role == role && t.target.is_none())
    }

    pub fn get_adapter(&self, layer: usize, role: &str, target: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.layer == Some(layer) && t.role == role && t.target.as_deref() == Some(target))
    }

    pub fn matrix(&self, layer: Option<usize>, role: &str) -> Result<Matrix> {
        self.get(layer, role)
            .ok_or_else(|| match layer {
                Some(l) => Error::MissingWeight(format!("layer {l} {role}")),
                None => Error::MissingWeight(role.to_string()),
            })?
            .to_matrix()
    }

    /// Element count of every non-adapter tensor.
    pub fn backbone_total(&self) -> u64 {
        self.tensors
            .iter()
            .filter(|t| !roles::is_adapter(&t.role))
            .map(|t| t.numel() as u64)
            .sum()
    }

    /// Manifest with contiguous offsets in tensor order.
    pub fn manifest(&self) -> Manifest {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let length = 4 * t.numel() as u64;
                let meta = TensorMeta {
                    name: t.name.clone(),
                    layer: t.layer,
                    role: t.role.clone(),
                    target: t.target.clone(),
                    shape: t.shape.clone(),
                    dtype: DTYPE_F32.to_string(),
                    offset,
                    length,
                };
                offset += length;
                meta
            })
            .collect();
        Manifest {
            backbone_total: self.backbone_total(),
            config: self.config.clone(),
            tensors,
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        let total: usize = self.tensors.iter().map(|t| 4 * t.numel()).sum();
        let mut out = Vec::with_capacity(total);
        for t in &self.tensors {
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Writes `manifest.json` and `weights.bin` into `dir`, creating it if needed.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest =
            serde_json::to_string_pretty(&self.manifest()).map_err(|e| Error::ManifestParse(e.to_string()))?;
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, manifest + "\n").map_err(|e| Error::io(&mpath, e))?;
        let ppath = dir.join(PAYLOAD_FILE);
        fs::write(&ppath, self.payload()).map_err(|e| Error::io(&ppath, e))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::ManifestParse(format!("{}: {e}", mpath.display())))?;
        let ppath = dir.join(PAYLOAD_FILE);
        let payload = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
        Self::from_parts(manifest, &payload)
    }

    /// Validates a manifest against its payload and decodes every tensor.
    pub fn from_parts(manifest: Manifest, payload: &[u8]) -> Result<Self> {
        let payload_len = payload.len() as u64;
        let mut prev_end = 0u64;
        let mut keys = BTreeSet::new();
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for meta in manifest.tensors {
            if meta.dtype != DTYPE_F32 {
                return Err(Error::UnknownDtype {
                    tensor: meta.name,
                    dtype: meta.dtype,
                });
            }
            let numel: u64 = meta.shape.iter().map(|&d| d as u64).product();
            if meta.shape.is_empty() || numel == 0 || meta.length != 4 * numel {
                return Err(Error::ManifestParse(format!(
                    "tensor '{}': shape {:?} does not match byte length {}",
                    meta.name, meta.shape, meta.length
                )));
            }
            if meta.offset < prev_end {
                return Err(Error::OffsetOverlap {
                    tensor: meta.name,
                    offset: meta.offset,
                });
            }
            let end = meta.offset + meta.length;
            if end > payload_len {
                return Err(Error::TruncatedPayload {
                    tensor: meta.name,
                    end,
                    payload_len,
                });
            }
            if !keys.insert((meta.layer, meta.role.clone(), meta.target.clone())) {
                return Err(Error::DuplicateKey(meta.name));
            }
            prev_end = end;
            let bytes = &payload[meta.offset as usize..end as usize];
            let data: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::ManifestParse(format!(
                    "tensor '{}' holds a non-finite value at element {pos}",
                    meta.name
                )));
            }
            tensors.push(Tensor {
                name: meta.name,
                layer: meta.layer,
                role: meta.role,
                target: meta.target,
                shape: meta.shape,
                data,
            });
        }
        let bundle = WeightBundle {
            config: manifest.config,
            tensors,
        };
        if bundle.backbone_total() != manifest.backbone_total {
            return Err(Error::ManifestParse(format!(
                "declared backbone_total {} but tensors hold {}",
                manifest.backbone_total,
                bundle.backbone_total()
            )));
        }
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WeightBundle {
        let mut b = WeightBundle::new();
        b.push(Tensor::new(
            "a",
            Some(1),
            roles::QUERY,
            vec![2, 2],
            vec![1.0, 2.0, 3.0, 4.0],
        ))
        .unwrap();
        b.push(Tensor::new("b", None, roles::NORM, vec![3], vec![0.5, -0.25, 8.0]))
            .unwrap();
        b.push(Tensor::new("c", Some(1), roles::LORA_A, vec![1, 2], vec![0.1, 0.2]).with_target(roles::QUERY))
            .unwrap();
        b
    }

    #[test]
    fn manifest_layout_and_totals() {
        let m = sample().manifest();
        assert_eq!(m.backbone_total, 7);
        assert_eq!(m.tensors[1].offset, 16);
        assert_eq!(m.tensors[2].offset, 28);
        assert_eq!(m.tensors[2].length, 8);
    }

    #[test]
    fn duplicate_keys_rejected() {
        let mut b = sample();
        let err = b.push(Tensor::new("dup", Some(1), roles::QUERY, vec![1], vec![0.0]));
        assert!(matches!(err, Err(Error::DuplicateKey(n)) if n == "dup"));
    }

    #[test]
    fn validation_errors_name_the_tensor() {
        let b = sample();
        let payload = b.payload();

        let mut m = b.manifest();
        m.tensors[2].offset = 24;
        assert!(
            matches!(WeightBundle::from_parts(m, &payload), Err(Error::OffsetOverlap { tensor, .. }) if tensor == "c")
        );

        let mut m = b.manifest();
        m.tensors[2].offset = 32;
        assert!(
            matches!(WeightBundle::from_parts(m, &payload), Err(Error::TruncatedPayload { tensor, .. }) if tensor == "c")
        );

        let mut m = b.manifest();
        m.tensors[0].dtype = "bf16".into();
        assert!(
            matches!(WeightBundle::from_parts(m, &payload), Err(Error::UnknownDtype { tensor, .. }) if tensor == "a")
        );

        let mut m = b.manifest();
        m.backbone_total = 8;
        assert!(matches!(
            WeightBundle::from_parts(m, &payload),
            Err(Error::ManifestParse(_))
        ));
    }

    #[test]
    fn missing_weight_message() {
        let err = sample().matrix(Some(2), roles::VALUE).unwrap_err();
        assert_eq!(err.to_string(), "missing weight for layer 2 value");
    }
}
