//! Collaborative edge/server inference for vision transformers.
//!
//! An edge client runs a small ViT, measures the entropy of its own
//! prediction and, when it is uncertain, ships only the image patches its
//! last-layer class-token attention marks as important to a server running a
//! larger ViT. The crate is organised bottom-up:
//!
//! - [`vit`]: image/patch types, the weight file format and the forward pass.
//! - [`attention`]: per-patch importance from a [`vit::ForwardTrace`].
//! - [`selection`]: turning importance scores into a [`selection::SelectionMask`].
//! - [`gate`]: Shannon / min-entropy offload decisions.
//! - [`protocol`]: bit-exact frames, transports and cost accounting.
//! - [`pipeline`]: the end-to-end loop, threshold sweeps and FLOPs accounting.
//! - [`dataset`] and [`fixture`]: the on-disk image set and the toy generator.

pub mod attention;
pub mod dataset;
pub mod fixture;
pub mod gate;
pub mod pipeline;
pub mod protocol;
pub mod selection;
pub mod vit;

pub use attention::{attention_rollout, mean_attention, AttentionMethod, AttentionProfile};
pub use gate::{gate, min_entropy, shannon_entropy, EntropyMeasure, GateDecision};
pub use selection::{SelectionMask, SelectionRule};
pub use vit::{ForwardTrace, ImageTensor, ModelWeights, PatchGrid, TokenSequence};
