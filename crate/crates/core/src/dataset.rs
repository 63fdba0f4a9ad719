//! On-disk image set: a directory holding `manifest.txt` (one image file
//! name per line, in evaluation order) and one `.pcim` file per image.
//!
//! `.pcim` layout: magic `PCIM1`, `u16` height, `u16` width, `u8` channels,
//! `u8` has-label flag, `u32` label, then `H·W·C` raw bytes. Integers are
//! little-endian.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::vit::ImageTensor;

pub const IMAGE_MAGIC: &[u8; 5] = b"PCIM1";
pub const MANIFEST: &str = "manifest.txt";
const IMAGE_HEADER_LEN: usize = 15;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {reason}")]
    Malformed { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImage {
    pub name: String,
    pub image: ImageTensor,
    pub label: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST);
        let manifest = fs::read_to_string(&manifest_path)
            .map_err(|source| DatasetError::Io { path: manifest_path.display().to_string(), source })?;
        let mut images = Vec::new();
        for name in manifest.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let path = dir.join(name);
            let bytes =
                fs::read(&path).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
            let (image, label) = decode_image(&bytes)
                .map_err(|reason| DatasetError::Malformed { path: path.display().to_string(), reason })?;
            images.push(LabeledImage { name: name.to_string(), image, label });
        }
        Ok(Self { images })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), DatasetError> {
        let dir = dir.as_ref();
        let io_err = |path: &Path| {
            let path = path.display().to_string();
            move |source| DatasetError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut manifest = String::new();
        for img in &self.images {
            let path = dir.join(&img.name);
            fs::write(&path, encode_image(&img.image, img.label)).map_err(io_err(&path))?;
            manifest.push_str(&img.name);
            manifest.push('\n');
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, manifest).map_err(io_err(&path))
    }
}

pub fn encode_image(img: &ImageTensor, label: Option<u32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(IMAGE_HEADER_LEN + img.pixels().len());
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&(img.height() as u16).to_le_bytes());
    out.extend_from_slice(&(img.width() as u16).to_le_bytes());
    out.push(img.channels() as u8);
    out.push(u8::from(label.is_some()));
    out.extend_from_slice(&label.unwrap_or(0).to_le_bytes());
    out.extend_from_slice(img.pixels());
    out
}

pub fn decode_image(bytes: &[u8]) -> Result<(ImageTensor, Option<u32>), String> {
    if bytes.len() < IMAGE_HEADER_LEN || &bytes[..5] != IMAGE_MAGIC {
        return Err("missing PCIM1 header".into());
    }
    let h = u16::from_le_bytes([bytes[5], bytes[6]]) as usize;
    let w = u16::from_le_bytes([bytes[7], bytes[8]]) as usize;
    let c = bytes[9] as usize;
    let label = match bytes[10] {
        0 => None,
        1 => Some(u32::from_le_bytes(bytes[11..15].try_into().unwrap())),
        other => return Err(format!("bad label flag {other}")),
    };
    let image = ImageTensor::new(h, w, c, bytes[IMAGE_HEADER_LEN..].to_vec()).map_err(|e| e.to_string())?;
    Ok((image, label))
}
