//! Per-patch importance from the class token's attention.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::vit::tensor::softmax;
use crate::vit::{ForwardTrace, Matrix};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AttentionError {
    #[error("trace has no encoder layers")]
    NoLayers,
    #[error("trace has no patch tokens")]
    NoPatches,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionMethod {
    /// Last-layer class-query softmax over patch keys, averaged over heads.
    #[default]
    MeanLastLayer,
    /// Residual-mixed, head-averaged attention multiplied across layers.
    Rollout,
}

impl fmt::Display for AttentionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MeanLastLayer => "mean",
            Self::Rollout => "rollout",
        })
    }
}

impl FromStr for AttentionMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Self::MeanLastLayer),
            "rollout" => Ok(Self::Rollout),
            other => Err(format!("unknown attention method `{other}` (expected mean|rollout)")),
        }
    }
}

/// Importance score per present patch, aligned with `source_indices`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProfile {
    pub scores: Vec<f64>,
    pub method: AttentionMethod,
    pub source_indices: Vec<usize>,
}

impl AttentionProfile {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

fn check(trace: &ForwardTrace) -> Result<(), AttentionError> {
    let last = trace.layers.last().ok_or(AttentionError::NoLayers)?;
    if last.tokens() < 2 {
        return Err(AttentionError::NoPatches);
    }
    Ok(())
}

/// Mean attention score of every patch.
///
/// The class key is excluded from the softmax denominator: each head's
/// class-query logits over patch keys only are renormalised, then heads are
/// averaged. The result sums to one.
pub fn mean_attention(trace: &ForwardTrace) -> Result<AttentionProfile, AttentionError> {
    check(trace)?;
    let last = trace.layers.last().expect("checked");
    let n = last.tokens() - 1;
    let mut scores = vec![0.0; n];
    for h in 0..last.heads() {
        let a = softmax(&last.class_logits(h)[1..]);
        for (s, v) in scores.iter_mut().zip(a) {
            *s += v;
        }
    }
    let heads = last.heads() as f64;
    scores.iter_mut().for_each(|s| *s /= heads);
    Ok(AttentionProfile {
        scores,
        method: AttentionMethod::MeanLastLayer,
        source_indices: trace.source_indices.clone(),
    })
}

/// Attention rollout with `½A + ½I` residual mixing.
pub fn attention_rollout(trace: &ForwardTrace) -> Result<AttentionProfile, AttentionError> {
    check(trace)?;
    let t = trace.layers[0].tokens();
    let mut rollout = Matrix::identity(t);
    for layer in &trace.layers {
        let heads = layer.heads() as f64;
        let mut mixed = Matrix::zeros(t, t);
        for h in 0..layer.heads() {
            for q in 0..t {
                for (m, &a) in mixed.row_mut(q).iter_mut().zip(layer.row(h, q)) {
                    *m += a / heads;
                }
            }
        }
        for q in 0..t {
            let row = mixed.row_mut(q);
            for (k, v) in row.iter_mut().enumerate() {
                *v = 0.5 * *v + if k == q { 0.5 } else { 0.0 };
            }
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= sum);
        }
        rollout = mixed.matmul(&rollout);
    }
    let class_row = &rollout.row(0)[1..];
    let total: f64 = class_row.iter().sum();
    Ok(AttentionProfile {
        scores: class_row.iter().map(|v| v / total).collect(),
        method: AttentionMethod::Rollout,
        source_indices: trace.source_indices.clone(),
    })
}

pub fn profile(trace: &ForwardTrace, method: AttentionMethod) -> Result<AttentionProfile, AttentionError> {
    match method {
        AttentionMethod::MeanLastLayer => mean_attention(trace),
        AttentionMethod::Rollout => attention_rollout(trace),
    }
}

/// Binary PGM (`P5`) where each patch block is filled with its score scaled
/// so the best patch is white. Absent patches are black.
pub fn profile_to_pgm(p: &AttentionProfile, grid_h: usize, grid_w: usize, patch_size: usize) -> Vec<u8> {
    let (h, w) = (grid_h * patch_size, grid_w * patch_size);
    let max = p.scores.iter().copied().fold(0.0, f64::max);
    let mut block = vec![0u8; grid_h * grid_w];
    for (&idx, &s) in p.source_indices.iter().zip(&p.scores) {
        if idx < block.len() && max > 0.0 {
            block[idx] = (s / max * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            out.push(block[(y / patch_size) * grid_w + x / patch_size]);
        }
    }
    out
}
