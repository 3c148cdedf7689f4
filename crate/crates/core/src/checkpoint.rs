//! The `FIDS` checkpoint container.
//!
//! Layout: magic `FIDS`, format version (u32 LE), header length (u64 LE), a
//! JSON header, then the tensor payloads back to back in little-endian order.
//! The header carries the model config, the ordered tensor directory, class
//! names, the tokenizer and free-form run metadata. An i8 tensor `W` is
//! always followed in the directory by its f32 companion `W.scales`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::quant::{dequantize, QuantizedTensor};
use crate::tensor::Tensor;
use crate::tokenizer::TokenizerModel;

pub const MAGIC: [u8; 4] = *b"FIDS";
pub const FORMAT_VERSION: u32 = 1;
pub const SCALES_SUFFIX: &str = ".scales";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::I8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Byte offset from the start of the payload section.
    pub offset: u64,
    /// Channel axis of an i8 tensor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<usize>,
}

impl TensorEntry {
    pub fn byte_len(&self) -> usize {
        self.shape.iter().product::<usize>() * self.dtype.size()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub class_names: Vec<String>,
    /// Tokenizer in its text serialization.
    #[serde(default)]
    pub tokenizer: Option<String>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    I8(QuantizedTensor),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::I8(q) => &q.shape,
        }
    }

    /// Payload bytes, counting scales for i8 tensors.
    pub fn byte_size(&self) -> usize {
        match self {
            StoredTensor::F32(t) => 4 * t.len(),
            StoredTensor::I8(q) => q.byte_size(),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        match self {
            StoredTensor::F32(t) => t.clone(),
            StoredTensor::I8(q) => dequantize(q),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub class_names: Vec<String>,
    pub tokenizer: Option<TokenizerModel>,
    pub metadata: serde_json::Value,
    /// In `ModelConfig::param_shapes` order.
    pub tensors: Vec<(String, StoredTensor)>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    pub fn from_weights(
        weights: &ModelWeights<f32>,
        class_names: &[String],
        tokenizer: Option<TokenizerModel>,
    ) -> Self {
        Self {
            config: weights.config.clone(),
            class_names: class_names.to_vec(),
            tokenizer,
            metadata: serde_json::Value::Null,
            tensors: weights
                .names()
                .into_iter()
                .zip(&weights.tensors)
                .map(|(n, t)| (n, StoredTensor::F32(t.clone())))
                .collect(),
        }
    }

    /// Full-precision weights; quantized tensors are dequantized.
    pub fn to_weights(&self) -> Result<ModelWeights<f32>> {
        let named = self
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.to_f32()))
            .collect();
        ModelWeights::from_named(&self.config, named)
    }

    pub fn payload_bytes(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.byte_size()).sum()
    }

    pub fn header(&self) -> Header {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut push = |name: String, shape: Vec<usize>, dtype, axis| {
            let e = TensorEntry {
                name,
                shape,
                dtype,
                offset,
                axis,
            };
            offset += e.byte_len() as u64;
            entries.push(e);
        };
        for (name, t) in &self.tensors {
            match t {
                StoredTensor::F32(t) => push(name.clone(), t.shape().to_vec(), DType::F32, None),
                StoredTensor::I8(q) => {
                    push(name.clone(), q.shape.clone(), DType::I8, Some(q.axis));
                    push(
                        format!("{name}{SCALES_SUFFIX}"),
                        vec![q.scales.len()],
                        DType::F32,
                        None,
                    );
                }
            }
        }
        Header {
            config: self.config.clone(),
            tensors: entries,
            class_names: self.class_names.clone(),
            tokenizer: self.tokenizer.as_ref().map(TokenizerModel::to_text),
            metadata: self.metadata.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header())?;
        let mut out = Vec::with_capacity(16 + header.len() + self.payload_bytes());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            match t {
                StoredTensor::F32(t) => t
                    .data()
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                StoredTensor::I8(q) => {
                    out.extend(q.values.iter().map(|&v| v as u8));
                    q.scales
                        .iter()
                        .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || bytes[..4] != MAGIC {
            return Err(format_err("missing FIDS magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let payload_start = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(16))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| format_err("header length exceeds file size"))?;
        let header: Header = serde_json::from_slice(&bytes[16..payload_start])?;
        let payload = &bytes[payload_start..];

        let mut expected_offset = 0u64;
        let mut slice_of = |e: &TensorEntry| -> Result<&[u8]> {
            if e.offset != expected_offset {
                return Err(format_err(format!(
                    "tensor {} at offset {} breaks the packed layout",
                    e.name, e.offset
                )));
            }
            let start = e.offset as usize;
            let end = start + e.byte_len();
            expected_offset = end as u64;
            payload.get(start..end).ok_or_else(|| {
                format_err(format!("tensor {} runs past the end of the file", e.name))
            })
        };
        let mut tensors = Vec::new();
        let mut entries = header.tensors.iter();
        while let Some(e) = entries.next() {
            let raw = slice_of(e)?;
            let stored = match e.dtype {
                DType::F32 => StoredTensor::F32(Tensor::new(e.shape.clone(), read_f32(raw))?),
                DType::I8 => {
                    let s = entries
                        .next()
                        .filter(|s| {
                            s.name == format!("{}{SCALES_SUFFIX}", e.name) && s.dtype == DType::F32
                        })
                        .ok_or_else(|| {
                            format_err(format!("i8 tensor {} lacks its scales companion", e.name))
                        })?;
                    let q = QuantizedTensor {
                        shape: e.shape.clone(),
                        axis: e.axis.ok_or_else(|| {
                            format_err(format!("i8 tensor {} has no axis", e.name))
                        })?,
                        values: raw.iter().map(|&b| b as i8).collect(),
                        scales: read_f32(slice_of(s)?),
                    };
                    q.validate()?;
                    StoredTensor::I8(q)
                }
            };
            tensors.push((e.name.clone(), stored));
        }
        if expected_offset as usize != payload.len() {
            return Err(format_err(format!(
                "{} trailing payload bytes",
                payload.len() - expected_offset as usize
            )));
        }
        let ckpt = Self {
            config: header.config,
            class_names: header.class_names,
            tokenizer: header
                .tokenizer
                .as_deref()
                .map(TokenizerModel::from_text)
                .transpose()?,
            metadata: header.metadata,
            tensors,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Names and shapes agree with the config; class names match the head.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let want = self.config.param_shapes();
        if want.len() != self.tensors.len()
            || want
                .iter()
                .zip(&self.tensors)
                .any(|((wn, ws), (n, t))| wn != n || ws.as_slice() != t.shape())
        {
            return Err(format_err(
                "tensor directory does not match the model config",
            ));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.config.num_classes {
            return Err(format_err(format!(
                "{} class names for a {}-way classifier",
                self.class_names.len(),
                self.config.num_classes
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_f32(raw: &[u8]) -> Vec<f32> {
    raw.chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}
