//! Communication-cost accounting.
//!
//! The headline metric is the patch ratio: transmitted patches over all
//! patches of all evaluated images. Bitmap (position) bits and result bits
//! are tracked separately and never enter that ratio.

use std::collections::HashSet;

use thiserror::Error;

use super::frame::{bitmap_len, RESULT_FRAME_LEN};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error("image {0} already recorded")]
    Duplicate(u64),
    #[error("image {image_id}: {sent} patches sent out of {total}")]
    TooManyPatches { image_id: u64, sent: usize, total: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostRecord {
    pub image_id: u64,
    pub offloaded: bool,
    pub n_total: usize,
    pub patches_sent: usize,
    pub patch_payload_bits: u64,
    pub position_bits: u64,
    pub result_bits: u64,
}

impl CostRecord {
    /// An image the client settled on its own.
    pub fn local(image_id: u64, n_total: usize) -> Self {
        Self {
            image_id,
            offloaded: false,
            n_total,
            patches_sent: 0,
            patch_payload_bits: 0,
            position_bits: 0,
            result_bits: 0,
        }
    }

    /// An offloaded image; `patch_bytes` is `P²·C`.
    pub fn offloaded(image_id: u64, n_total: usize, patches_sent: usize, patch_bytes: usize) -> Self {
        Self {
            image_id,
            offloaded: true,
            n_total,
            patches_sent,
            patch_payload_bits: (patches_sent * patch_bytes * 8) as u64,
            position_bits: (bitmap_len(n_total) * 8) as u64,
            result_bits: (RESULT_FRAME_LEN * 8) as u64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostSummary {
    pub images: usize,
    pub offloaded: usize,
    pub offload_rate: f64,
    pub patches_sent: usize,
    pub patches_total: usize,
    pub cost_ratio: f64,
    pub patch_payload_bits: u64,
    pub position_bits: u64,
    pub result_bits: u64,
}

#[derive(Debug, Clone, Default)]
pub struct CostLedger {
    records: Vec<CostRecord>,
    seen: HashSet<u64>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, rec: CostRecord) -> Result<(), LedgerError> {
        if rec.patches_sent > rec.n_total {
            return Err(LedgerError::TooManyPatches {
                image_id: rec.image_id,
                sent: rec.patches_sent,
                total: rec.n_total,
            });
        }
        if !self.seen.insert(rec.image_id) {
            return Err(LedgerError::Duplicate(rec.image_id));
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn records(&self) -> &[CostRecord] {
        &self.records
    }

    pub fn summary(&self) -> CostSummary {
        let images = self.records.len();
        let offloaded = self.records.iter().filter(|r| r.offloaded).count();
        let patches_sent: usize = self.records.iter().map(|r| r.patches_sent).sum();
        let patches_total: usize = self.records.iter().map(|r| r.n_total).sum();
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        CostSummary {
            images,
            offloaded,
            offload_rate: ratio(offloaded, images),
            patches_sent,
            patches_total,
            cost_ratio: ratio(patches_sent, patches_total),
            patch_payload_bits: self.records.iter().map(|r| r.patch_payload_bits).sum(),
            position_bits: self.records.iter().map(|r| r.position_bits).sum(),
            result_bits: self.records.iter().map(|r| r.result_bits).sum(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_local_only() {
        assert_eq!(CostLedger::new().summary().cost_ratio, 0.0);
        let mut l = CostLedger::new();
        for i in 0..5 {
            l.record(CostRecord::local(i, 196)).unwrap();
        }
        let s = l.summary();
        assert_eq!((s.cost_ratio, s.offload_rate, s.position_bits), (0.0, 0.0, 0));
    }

    #[test]
    fn full_offload_is_one() {
        let mut l = CostLedger::new();
        for i in 0..3 {
            l.record(CostRecord::offloaded(i, 196, 196, 768)).unwrap();
        }
        assert_eq!(l.summary().cost_ratio, 1.0);
        assert_eq!(l.summary().offload_rate, 1.0);
    }

    #[test]
    fn quarter_of_one_image() {
        let mut l = CostLedger::new();
        l.record(CostRecord::local(0, 196)).unwrap();
        l.record(CostRecord::offloaded(1, 196, 49, 768)).unwrap();
        let s = l.summary();
        assert_eq!(s.cost_ratio, 0.125);
        assert_eq!(s.offload_rate, 0.5);
        assert_eq!(s.patch_payload_bits, 49 * 6144);
        assert_eq!(s.position_bits, 200);
        assert_eq!(s.result_bits, 128);
    }

    #[test]
    fn duplicates_rejected() {
        let mut l = CostLedger::new();
        l.record(CostRecord::local(3, 16)).unwrap();
        assert_eq!(l.record(CostRecord::offloaded(3, 16, 1, 192)), Err(LedgerError::Duplicate(3)));
        assert!(matches!(l.record(CostRecord::offloaded(4, 16, 17, 192)), Err(LedgerError::TooManyPatches { .. })));
    }
}
