//! Patch and result frames. All multi-byte integers are little-endian.
//!
//! Patch frame:
//!
//! | offset | size        | field                     |
//! |--------|-------------|---------------------------|
//! | 0      | 8           | image id (`u64`)          |
//! | 8      | 2           | total patches `N` (`u16`) |
//! | 10     | 1           | grid rows `H/P`           |
//! | 11     | 1           | grid cols `W/P`           |
//! | 12     | 1           | patch size `P`            |
//! | 13     | 1           | channels `C`              |
//! | 14     | ⌈N/8⌉       | selection bitmap          |
//! | ..     | k·P²·C      | selected patches, raw u8  |
//!
//! Bit `i` of the bitmap (LSB-first within each byte) marks patch `i`.
//! Bits at positions `>= N` must be zero. Result frame: image id (`u64`),
//! label (`u32`), confidence (`f32`), 16 bytes total.

use thiserror::Error;

use crate::selection::SelectionMask;
use crate::vit::PatchGrid;

pub const PATCH_HEADER_LEN: usize = 14;
pub const RESULT_FRAME_LEN: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("mask covers {mask} patches but grid has {grid}")]
    MaskGridMismatch { mask: usize, grid: usize },
    #[error("selected patch {0} is not present in the grid")]
    MissingPatch(usize),
    #[error("selection is empty")]
    EmptySelection,
    #[error("{field} = {value} does not fit the frame field")]
    FieldOverflow { field: &'static str, value: usize },
    #[error("frame truncated: need {needed} bytes, have {found}")]
    Truncated { needed: usize, found: usize },
    #[error("header dimension `{0}` is zero")]
    ZeroDimension(&'static str),
    #[error("N = {n_total} but grid is {grid_h}x{grid_w}")]
    GridMismatch { n_total: usize, grid_h: usize, grid_w: usize },
    #[error("bitmap has a set bit at index {0} >= N")]
    PaddingBits(usize),
    #[error("payload is {found} bytes, {expected} expected from the bitmap")]
    PayloadMismatch { expected: usize, found: usize },
    #[error("result frame must be {RESULT_FRAME_LEN} bytes, got {0}")]
    ResultLength(usize),
}

/// Bitmap size in bytes for `n` patches.
pub fn bitmap_len(n: usize) -> usize {
    n.div_ceil(8)
}

fn narrow_u8(field: &'static str, value: usize) -> Result<u8, FrameError> {
    u8::try_from(value).map_err(|_| FrameError::FieldOverflow { field, value })
}

/// Serialises the selected patches of `grid` (which may itself be a subset,
/// as long as it holds every selected patch).
pub fn encode_patch_message(grid: &PatchGrid, mask: &SelectionMask, image_id: u64) -> Result<Vec<u8>, FrameError> {
    let n = grid.n_patches();
    if mask.n_total != n {
        return Err(FrameError::MaskGridMismatch { mask: mask.n_total, grid: n });
    }
    if mask.selected.is_empty() {
        return Err(FrameError::EmptySelection);
    }
    let n16 = u16::try_from(n).map_err(|_| FrameError::FieldOverflow { field: "n_total", value: n })?;
    let (gh, gw) = grid.grid_dims();
    let plen = grid.patch_len();
    let mut out = Vec::with_capacity(PATCH_HEADER_LEN + bitmap_len(n) + mask.len() * plen);
    out.extend_from_slice(&image_id.to_le_bytes());
    out.extend_from_slice(&n16.to_le_bytes());
    out.push(narrow_u8("grid_h", gh)?);
    out.push(narrow_u8("grid_w", gw)?);
    out.push(narrow_u8("patch_size", grid.patch_size())?);
    out.push(narrow_u8("channels", grid.channels())?);

    let mut bitmap = vec![0u8; bitmap_len(n)];
    for &i in &mask.selected {
        if i >= n {
            return Err(FrameError::PaddingBits(i));
        }
        bitmap[i / 8] |= 1 << (i % 8);
    }
    out.extend_from_slice(&bitmap);

    let present = grid.patch_indices();
    let mut prev = None;
    for &i in &mask.selected {
        if prev.is_some_and(|p| p >= i) {
            return Err(FrameError::MissingPatch(i));
        }
        prev = Some(i);
        let j = present.binary_search(&i).map_err(|_| FrameError::MissingPatch(i))?;
        out.extend_from_slice(grid.patch(j));
    }
    Ok(out)
}

/// Inverse of [`encode_patch_message`]: the image id and the subset grid
/// whose patch indices are exactly the set bits.
pub fn decode_patch_message(bytes: &[u8]) -> Result<(u64, PatchGrid), FrameError> {
    if bytes.len() < PATCH_HEADER_LEN {
        return Err(FrameError::Truncated { needed: PATCH_HEADER_LEN, found: bytes.len() });
    }
    let image_id = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
    let n = u16::from_le_bytes(bytes[8..10].try_into().unwrap()) as usize;
    let (gh, gw, p, c) = (bytes[10] as usize, bytes[11] as usize, bytes[12] as usize, bytes[13] as usize);
    for (name, v) in [("n_total", n), ("grid_h", gh), ("grid_w", gw), ("patch_size", p), ("channels", c)] {
        if v == 0 {
            return Err(FrameError::ZeroDimension(name));
        }
    }
    if gh * gw != n {
        return Err(FrameError::GridMismatch { n_total: n, grid_h: gh, grid_w: gw });
    }
    let bm_end = PATCH_HEADER_LEN + bitmap_len(n);
    if bytes.len() < bm_end {
        return Err(FrameError::Truncated { needed: bm_end, found: bytes.len() });
    }
    let bitmap = &bytes[PATCH_HEADER_LEN..bm_end];
    let mut indices = Vec::new();
    for (byte_idx, &b) in bitmap.iter().enumerate() {
        for bit in 0..8 {
            if b & (1 << bit) != 0 {
                let i = byte_idx * 8 + bit;
                if i >= n {
                    return Err(FrameError::PaddingBits(i));
                }
                indices.push(i);
            }
        }
    }
    if indices.is_empty() {
        return Err(FrameError::EmptySelection);
    }
    let payload = &bytes[bm_end..];
    let expected = indices.len() * p * p * c;
    if payload.len() != expected {
        return Err(FrameError::PayloadMismatch { expected, found: payload.len() });
    }
    let grid = PatchGrid::from_parts(p, c, gh, gw, indices, payload.to_vec())
        .expect("indices are increasing, in range, and payload length matches");
    Ok((image_id, grid))
}

/// Server reply for one offloaded image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResultMessage {
    pub image_id: u64,
    pub label: u32,
    /// Server softmax maximum. Informational only.
    pub confidence: f32,
}

impl ResultMessage {
    pub fn encode(&self) -> [u8; RESULT_FRAME_LEN] {
        let mut out = [0u8; RESULT_FRAME_LEN];
        out[0..8].copy_from_slice(&self.image_id.to_le_bytes());
        out[8..12].copy_from_slice(&self.label.to_le_bytes());
        out[12..16].copy_from_slice(&self.confidence.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        if bytes.len() != RESULT_FRAME_LEN {
            return Err(FrameError::ResultLength(bytes.len()));
        }
        Ok(Self {
            image_id: u64::from_le_bytes(bytes[0..8].try_into().unwrap()),
            label: u32::from_le_bytes(bytes[8..12].try_into().unwrap()),
            confidence: f32::from_le_bytes(bytes[12..16].try_into().unwrap()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::SelectionRule;
    use crate::vit::{patchify, ImageTensor};
    use proptest::prelude::*;

    fn grid(h: usize, w: usize, c: usize, p: usize) -> PatchGrid {
        let img = ImageTensor::new(h, w, c, (0..h * w * c).map(|i| (i % 251) as u8).collect()).unwrap();
        patchify(&img, p).unwrap()
    }

    fn mask(n: usize, selected: Vec<usize>) -> SelectionMask {
        SelectionMask { n_total: n, selected, rule: SelectionRule::TopK(1) }
    }

    #[test]
    fn single_patch_imagenet_frame() {
        let g = grid(224, 224, 3, 16);
        let frame = encode_patch_message(&g, &mask(196, vec![100]), 42).unwrap();
        let bitmap = bitmap_len(196);
        assert_eq!(bitmap, 25);
        let payload = frame.len() - PATCH_HEADER_LEN - bitmap;
        assert_eq!(payload, 768);
        assert_eq!(payload * 8, 6144);
        assert_eq!(frame[PATCH_HEADER_LEN + 12], 1 << 4);
        let (id, sub) = decode_patch_message(&frame).unwrap();
        assert_eq!(id, 42);
        assert_eq!(sub.patch_indices(), &[100]);
        assert_eq!(sub.patch(0), g.patch(100));
    }

    #[test]
    fn full_mask_frame() {
        let g = grid(32, 32, 3, 8);
        let frame = encode_patch_message(&g, &mask(16, (0..16).collect()), 1).unwrap();
        assert_eq!(&frame[PATCH_HEADER_LEN..PATCH_HEADER_LEN + 2], &[0xff, 0xff]);
        assert_eq!(frame.len(), PATCH_HEADER_LEN + 2 + 16 * 192);
        let (_, back) = decode_patch_message(&frame).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn header_layout() {
        let g = grid(8, 12, 1, 4);
        let frame = encode_patch_message(&g, &mask(6, vec![0, 5]), 0x0102_0304_0506_0708).unwrap();
        assert_eq!(&frame[..14], &[8, 7, 6, 5, 4, 3, 2, 1, 6, 0, 2, 3, 4, 1]);
        assert_eq!(frame[14], 0b0010_0001);
    }

    #[test]
    fn encode_errors() {
        let g = grid(8, 8, 3, 4);
        assert_eq!(
            encode_patch_message(&g, &mask(5, vec![0]), 0),
            Err(FrameError::MaskGridMismatch { mask: 5, grid: 4 })
        );
        assert_eq!(encode_patch_message(&g, &mask(4, vec![]), 0), Err(FrameError::EmptySelection));
        let sub = g.subset(&[1]).unwrap();
        assert_eq!(encode_patch_message(&sub, &mask(4, vec![2]), 0), Err(FrameError::MissingPatch(2)));
    }

    #[test]
    fn decode_errors() {
        let g = grid(8, 8, 3, 4);
        let frame = encode_patch_message(&g, &mask(4, vec![1, 2]), 9).unwrap();

        assert!(matches!(decode_patch_message(&frame[..10]), Err(FrameError::Truncated { .. })));
        assert_eq!(
            decode_patch_message(&frame[..frame.len() - 1]),
            Err(FrameError::PayloadMismatch { expected: 96, found: 95 })
        );
        let mut long = frame.clone();
        long.push(0);
        assert!(matches!(decode_patch_message(&long), Err(FrameError::PayloadMismatch { .. })));

        let mut pad = frame.clone();
        pad[14] |= 1 << 6;
        assert_eq!(decode_patch_message(&pad), Err(FrameError::PaddingBits(6)));

        let mut empty = frame[..15].to_vec();
        empty[14] = 0;
        assert_eq!(decode_patch_message(&empty), Err(FrameError::EmptySelection));

        let mut grid_bad = frame.clone();
        grid_bad[10] = 3;
        assert!(matches!(decode_patch_message(&grid_bad), Err(FrameError::GridMismatch { .. })));

        let mut zero = frame;
        zero[12] = 0;
        assert_eq!(decode_patch_message(&zero), Err(FrameError::ZeroDimension("patch_size")));
    }

    #[test]
    fn result_roundtrip() {
        let r = ResultMessage { image_id: 7, label: 3, confidence: 0.625 };
        let bytes = r.encode();
        assert_eq!(ResultMessage::decode(&bytes).unwrap(), r);
        assert_eq!(ResultMessage::decode(&bytes[..15]), Err(FrameError::ResultLength(15)));
    }

    proptest! {
        #[test]
        fn roundtrip(gh in 1usize..6, gw in 1usize..6, p in 1usize..5, c in 1usize..4,
                     bits in any::<u64>(), id in any::<u64>(), fill in any::<u8>()) {
            let n = gh * gw;
            let pixels: Vec<u8> = (0..n * p * p * c).map(|i| (i as u8).wrapping_mul(fill | 1)).collect();
            let img = ImageTensor::new(gh * p, gw * p, c, pixels).unwrap();
            let g = patchify(&img, p).unwrap();
            let mut selected: Vec<usize> = (0..n).filter(|i| bits >> i & 1 == 1).collect();
            if selected.is_empty() {
                selected.push((bits % n as u64) as usize);
            }
            let m = mask(n, selected.clone());
            let frame = encode_patch_message(&g, &m, id).unwrap();
            let (back_id, sub) = decode_patch_message(&frame).unwrap();
            prop_assert_eq!(back_id, id);
            prop_assert_eq!(sub.patch_indices(), &selected[..]);
            prop_assert_eq!(&sub, &g.subset(&selected).unwrap());
            prop_assert_eq!(encode_patch_message(&sub, &m, id).unwrap(), frame);
        }
    }
}
