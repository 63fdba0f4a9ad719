//! From-scratch ViT forward pass over full or partial patch grids.

mod image;
mod model;
pub mod tensor;
pub mod weights;

use thiserror::Error;

pub use image::{patchify, ImageTensor, PatchGrid};
pub use model::{
    class_representation, classify, classify_grid, embed, forward, ForwardTrace, LayerAttention, TokenSequence,
};
pub use tensor::Matrix;
pub use weights::{Dims, LoadError, ModelWeights, Preprocess};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VitError {
    #[error("image {height}x{width} is not divisible by patch size {patch_size}")]
    Indivisible { height: usize, width: usize, patch_size: usize },
    #[error("expected {expected} pixel bytes, found {found}")]
    PixelCount { expected: usize, found: usize },
    #[error("patch index {index} out of range (limit {limit})")]
    PatchIndex { index: usize, limit: usize },
    #[error("patch indices must be strictly increasing and distinct")]
    UnsortedIndices,
    #[error("{what}: expected {expected}, found {found}")]
    Dimension { what: &'static str, expected: usize, found: usize },
}
