//! `SWIT1` weight container.
//!
//! Layout: the five magic bytes `SWIT1`, a little-endian `u32` header length,
//! a UTF-8 JSON header, then one blob of little-endian `f32`. The header
//! carries the model dims, the u8→real preprocessing constants and, for each
//! tensor in canonical order, its name, shape and byte offset into the blob.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tensor::Matrix;

pub const WEIGHT_MAGIC: &[u8; 5] = b"SWIT1";

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("i/o error reading weights: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes, expected SWIT1")]
    BadMagic,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("invalid dims: {0}")]
    InvalidDims(String),
    #[error("tensor `{0}` missing from header")]
    MissingTensor(String),
    #[error("unexpected tensor `{0}` in header")]
    UnexpectedTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("tensor `{name}` extends past the end of the blob")]
    OutOfBounds { name: String },
    #[error("tensor `{name}` has a non-finite value at element {index}")]
    NonFinite { name: String, index: usize },
}

/// Model hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub embed_dim: usize,
    pub head_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub classes: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// Largest patch count the position table covers.
    pub max_patches: usize,
    pub mlp_hidden: usize,
    pub ln_eps: f64,
}

impl Dims {
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    fn validate(&self) -> Result<(), LoadError> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("head_dim", self.head_dim),
            ("heads", self.heads),
            ("layers", self.layers),
            ("classes", self.classes),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("max_patches", self.max_patches),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(LoadError::InvalidDims(format!("{name} must be positive")));
        }
        if self.embed_dim != self.heads * self.head_dim {
            return Err(LoadError::InvalidDims(format!(
                "embed_dim {} != heads {} * head_dim {}",
                self.embed_dim, self.heads, self.head_dim
            )));
        }
        if !(self.ln_eps.is_finite() && self.ln_eps > 0.0) {
            return Err(LoadError::InvalidDims("ln_eps must be positive".into()));
        }
        Ok(())
    }

    /// Canonical tensor list: `(name, shape)` in file order.
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let inner = self.heads * self.head_dim;
        let mut specs = vec![
            ("patch_embed.weight".to_string(), vec![self.patch_len(), d]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("cls_token".to_string(), vec![1, d]),
            ("pos_embed".to_string(), vec![self.max_patches + 1, d]),
        ];
        for l in 0..self.layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            specs.extend([
                (p("ln1.gamma"), vec![d]),
                (p("ln1.beta"), vec![d]),
                (p("qkv.weight"), vec![d, 3 * inner]),
                (p("qkv.bias"), vec![3 * inner]),
                (p("proj.weight"), vec![inner, d]),
                (p("proj.bias"), vec![d]),
                (p("ln2.gamma"), vec![d]),
                (p("ln2.beta"), vec![d]),
                (p("mlp.fc1.weight"), vec![d, self.mlp_hidden]),
                (p("mlp.fc1.bias"), vec![self.mlp_hidden]),
                (p("mlp.fc2.weight"), vec![self.mlp_hidden, d]),
                (p("mlp.fc2.bias"), vec![d]),
            ]);
        }
        specs.extend([
            ("norm.gamma".to_string(), vec![d]),
            ("norm.beta".to_string(), vec![d]),
            ("head.weight".to_string(), vec![d, self.classes]),
            ("head.bias".to_string(), vec![self.classes]),
        ]);
        specs
    }
}

/// Per-channel normalisation applied after scaling u8 values to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Preprocess {
    #[inline]
    pub fn normalize(&self, value: u8, channel: usize) -> f64 {
        (f64::from(value) / 255.0 - self.mean[channel]) / self.scale[channel]
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dims: Dims,
    preprocess: Preprocess,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    /// Columns: all-head queries, then keys, then values; head `h` owns
    /// columns `h*head_dim..(h+1)*head_dim` within each block.
    pub qkv: Matrix,
    pub qkv_bias: Vec<f64>,
    pub proj: Matrix,
    pub proj_bias: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub fc1: Matrix,
    pub fc1_bias: Vec<f64>,
    pub fc2: Matrix,
    pub fc2_bias: Vec<f64>,
}

/// All learned tensors of one ViT. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub dims: Dims,
    pub preprocess: Preprocess,
    pub patch_embed: Matrix,
    pub patch_embed_bias: Vec<f64>,
    pub cls_token: Vec<f64>,
    pub pos_embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub norm_gamma: Vec<f64>,
    pub norm_beta: Vec<f64>,
    pub head: Matrix,
    pub head_bias: Vec<f64>,
}

/// Writes a raw container. No validation beyond what is needed to lay the
/// bytes out, so tests can produce deliberately broken files.
pub fn write_container<W: Write>(
    out: &mut W,
    dims: &Dims,
    preprocess: &Preprocess,
    tensors: &[(String, Vec<usize>, Vec<f32>)],
) -> std::io::Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, shape, data) in tensors {
        entries.push(TensorEntry { name: name.clone(), shape: shape.clone(), offset });
        offset += data.len() * 4;
    }
    let header = Header { dims: *dims, preprocess: preprocess.clone(), tensors: entries };
    let header = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
    out.write_all(WEIGHT_MAGIC)?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    for (_, _, data) in tensors {
        for v in data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

impl ModelWeights {
    /// Reads and validates a `SWIT1` file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, LoadError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LoadError> {
        if bytes.len() < 9 || &bytes[..5] != WEIGHT_MAGIC {
            return Err(LoadError::BadMagic);
        }
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let header_bytes =
            bytes.get(9..9 + hlen).ok_or_else(|| LoadError::MalformedHeader("header length exceeds file".into()))?;
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| LoadError::MalformedHeader(e.to_string()))?;
        let blob = &bytes[9 + hlen..];
        let dims = header.dims;
        dims.validate()?;
        let pre = header.preprocess;
        if pre.mean.len() != dims.channels || pre.scale.len() != dims.channels {
            return Err(LoadError::InvalidDims("preprocess constants do not match channels".into()));
        }
        if pre.mean.iter().chain(&pre.scale).any(|v| !v.is_finite()) || pre.scale.contains(&0.0) {
            return Err(LoadError::InvalidDims("preprocess constants must be finite, scale nonzero".into()));
        }

        let mut by_name: HashMap<&str, &TensorEntry> = HashMap::new();
        for e in &header.tensors {
            if by_name.insert(e.name.as_str(), e).is_some() {
                return Err(LoadError::MalformedHeader(format!("duplicate tensor `{}`", e.name)));
            }
        }
        let specs = dims.tensor_specs();
        if let Some(extra) = header.tensors.iter().find(|e| !specs.iter().any(|(n, _)| *n == e.name)) {
            return Err(LoadError::UnexpectedTensor(extra.name.clone()));
        }

        let mut tensors: HashMap<String, Vec<f64>> = HashMap::new();
        for (name, shape) in &specs {
            let entry = by_name.get(name.as_str()).ok_or_else(|| LoadError::MissingTensor(name.clone()))?;
            if &entry.shape != shape {
                return Err(LoadError::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: entry.shape.clone(),
                });
            }
            let count: usize = shape.iter().product();
            let raw = entry
                .offset
                .checked_add(count * 4)
                .and_then(|end| blob.get(entry.offset..end))
                .ok_or_else(|| LoadError::OutOfBounds { name: name.clone() })?;
            let mut values = Vec::with_capacity(count);
            for (index, chunk) in raw.chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes(chunk.try_into().unwrap());
                if !v.is_finite() {
                    return Err(LoadError::NonFinite { name: name.clone(), index });
                }
                values.push(f64::from(v));
            }
            tensors.insert(name.clone(), values);
        }

        let mut take = |name: &str| tensors.remove(name).expect("validated above");
        let d = dims.embed_dim;
        let inner = dims.heads * dims.head_dim;
        let mut layers = Vec::with_capacity(dims.layers);
        for l in 0..dims.layers {
            let mut t = |s: &str| take(&format!("layers.{l}.{s}"));
            layers.push(LayerWeights {
                ln1_gamma: t("ln1.gamma"),
                ln1_beta: t("ln1.beta"),
                qkv: Matrix::from_vec(d, 3 * inner, t("qkv.weight")),
                qkv_bias: t("qkv.bias"),
                proj: Matrix::from_vec(inner, d, t("proj.weight")),
                proj_bias: t("proj.bias"),
                ln2_gamma: t("ln2.gamma"),
                ln2_beta: t("ln2.beta"),
                fc1: Matrix::from_vec(d, dims.mlp_hidden, t("mlp.fc1.weight")),
                fc1_bias: t("mlp.fc1.bias"),
                fc2: Matrix::from_vec(dims.mlp_hidden, d, t("mlp.fc2.weight")),
                fc2_bias: t("mlp.fc2.bias"),
            });
        }
        Ok(ModelWeights {
            patch_embed: Matrix::from_vec(dims.patch_len(), d, take("patch_embed.weight")),
            patch_embed_bias: take("patch_embed.bias"),
            cls_token: take("cls_token"),
            pos_embed: Matrix::from_vec(dims.max_patches + 1, d, take("pos_embed")),
            layers,
            norm_gamma: take("norm.gamma"),
            norm_beta: take("norm.beta"),
            head: Matrix::from_vec(d, dims.classes, take("head.weight")),
            head_bias: take("head.bias"),
            dims,
            preprocess: pre,
        })
    }

    /// Serialises in canonical order. Values are narrowed to `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_container(&mut out, &self.dims, &self.preprocess, &self.named_tensors())
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        fs::write(path, self.to_bytes())
    }

    /// Every tensor as `(name, shape, f32 data)`, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let mut values: Vec<Vec<f32>> = vec![
            f(self.patch_embed.as_slice()),
            f(&self.patch_embed_bias),
            f(&self.cls_token),
            f(self.pos_embed.as_slice()),
        ];
        for l in &self.layers {
            values.extend([
                f(&l.ln1_gamma),
                f(&l.ln1_beta),
                f(l.qkv.as_slice()),
                f(&l.qkv_bias),
                f(l.proj.as_slice()),
                f(&l.proj_bias),
                f(&l.ln2_gamma),
                f(&l.ln2_beta),
                f(l.fc1.as_slice()),
                f(&l.fc1_bias),
                f(l.fc2.as_slice()),
                f(&l.fc2_bias),
            ]);
        }
        values.extend([f(&self.norm_gamma), f(&self.norm_beta), f(self.head.as_slice()), f(&self.head_bias)]);
        self.dims.tensor_specs().into_iter().zip(values).map(|((name, shape), data)| (name, shape, data)).collect()
    }

    /// A model whose every tensor is zero (LN gains included).
    pub fn zeros(dims: Dims) -> Self {
        Self::from_fn(dims, |_, _| 0.0)
    }

    /// Builds weights by calling `init(tensor_name, element_index)` for every
    /// element of every tensor. Preprocessing defaults to mean 0.5, scale 0.25.
    pub fn from_fn(dims: Dims, mut init: impl FnMut(&str, usize) -> f64) -> Self {
        let mut tensors = Vec::new();
        for (name, shape) in dims.tensor_specs() {
            let count: usize = shape.iter().product();
            let data: Vec<f32> = (0..count).map(|i| init(&name, i) as f32).collect();
            tensors.push((name, shape, data));
        }
        let preprocess = Preprocess { mean: vec![0.5; dims.channels], scale: vec![0.25; dims.channels] };
        let mut bytes = Vec::new();
        write_container(&mut bytes, &dims, &preprocess, &tensors).expect("vec write");
        Self::from_bytes(&bytes).expect("from_fn produced finite, well-shaped tensors")
    }
}
