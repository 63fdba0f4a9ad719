//! Choosing which patches to transmit.
//!
//! All rules break score ties toward the smaller patch index and always
//! return at least one patch.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use thiserror::Error;

use crate::attention::AttentionProfile;

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("k = {k} outside 1..={n}")]
    CountOutOfRange { k: usize, n: usize },
    #[error("threshold must be nonnegative and finite, got {0}")]
    BadThreshold(f64),
    #[error("cumulative threshold must be positive, got {0}")]
    BadSumThreshold(f64),
    #[error("profile is empty")]
    EmptyProfile,
    #[error("invalid rule `{0}`")]
    Parse(String),
}

/// A selection rule together with its parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionRule {
    TopK(usize),
    Threshold(f64),
    SumThreshold(f64),
    Random { count: usize, seed: u64 },
}

impl fmt::Display for SelectionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::TopK(k) => write!(f, "topk:{k}"),
            Self::Threshold(d) => write!(f, "threshold:{d}"),
            Self::SumThreshold(d) => write!(f, "sum:{d}"),
            Self::Random { count, seed } => write!(f, "random:{count}:{seed}"),
        }
    }
}

impl FromStr for SelectionRule {
    type Err = SelectionError;

    /// `topk:K`, `threshold:D`, `sum:D` or `random:M[:SEED]`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SelectionError::Parse(s.to_string());
        let mut parts = s.split(':');
        let kind = parts.next().ok_or_else(bad)?;
        let arg = parts.next().ok_or_else(bad)?;
        let extra = parts.next();
        if parts.next().is_some() {
            return Err(bad());
        }
        let rule = match (kind, extra) {
            ("topk", None) => Self::TopK(arg.parse().map_err(|_| bad())?),
            ("threshold", None) => Self::Threshold(arg.parse().map_err(|_| bad())?),
            ("sum", None) => Self::SumThreshold(arg.parse().map_err(|_| bad())?),
            ("random", seed) => Self::Random {
                count: arg.parse().map_err(|_| bad())?,
                seed: seed.map(str::parse).transpose().map_err(|_| bad())?.unwrap_or(0),
            },
            _ => return Err(bad()),
        };
        Ok(rule)
    }
}

/// Selected patch ids (strictly increasing) over an `n_total`-patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMask {
    pub n_total: usize,
    pub selected: Vec<usize>,
    pub rule: SelectionRule,
}

impl SelectionMask {
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.selected.binary_search(&index).is_ok()
    }

    pub fn is_subset_of(&self, other: &SelectionMask) -> bool {
        self.selected.iter().all(|&i| other.contains(i))
    }
}

/// Positions into the profile, best score first, ties by smaller patch id.
fn ranked(profile: &AttentionProfile) -> Vec<usize> {
    let mut order: Vec<usize> = (0..profile.len()).collect();
    order.sort_by(|&a, &b| {
        profile.scores[b]
            .partial_cmp(&profile.scores[a])
            .unwrap_or(Ordering::Equal)
            .then(profile.source_indices[a].cmp(&profile.source_indices[b]))
    });
    order
}

fn mask(profile: &AttentionProfile, positions: impl IntoIterator<Item = usize>, rule: SelectionRule) -> SelectionMask {
    let mut selected: Vec<usize> = positions.into_iter().map(|p| profile.source_indices[p]).collect();
    selected.sort_unstable();
    // Profiles normally cover the full grid, so this is N.
    let n_total = profile.source_indices.iter().max().map_or(0, |m| m + 1).max(profile.len());
    SelectionMask { n_total, selected, rule }
}

/// The `k` highest-scoring patches.
pub fn select_topk(profile: &AttentionProfile, k: usize) -> Result<SelectionMask, SelectionError> {
    let n = profile.len();
    if k == 0 || k > n {
        return Err(SelectionError::CountOutOfRange { k, n });
    }
    Ok(mask(profile, ranked(profile).into_iter().take(k), SelectionRule::TopK(k)))
}

/// Patches scoring strictly above `delta`; falls back to the single best
/// patch when none qualify.
pub fn select_threshold(profile: &AttentionProfile, delta: f64) -> Result<SelectionMask, SelectionError> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(SelectionError::BadThreshold(delta));
    }
    if profile.is_empty() {
        return Err(SelectionError::EmptyProfile);
    }
    let rule = SelectionRule::Threshold(delta);
    let above: Vec<usize> = (0..profile.len()).filter(|&i| profile.scores[i] > delta).collect();
    if above.is_empty() {
        return Ok(mask(profile, ranked(profile).into_iter().take(1), rule));
    }
    Ok(mask(profile, above, rule))
}

/// Shortest best-first prefix whose score sum reaches `delta_sum`.
/// `delta_sum >= 1` selects everything.
pub fn select_sum_threshold(profile: &AttentionProfile, delta_sum: f64) -> Result<SelectionMask, SelectionError> {
    if delta_sum.is_nan() || delta_sum <= 0.0 {
        return Err(SelectionError::BadSumThreshold(delta_sum));
    }
    if profile.is_empty() {
        return Err(SelectionError::EmptyProfile);
    }
    let rule = SelectionRule::SumThreshold(delta_sum);
    let order = ranked(profile);
    if delta_sum >= 1.0 {
        return Ok(mask(profile, order, rule));
    }
    let mut acc = 0.0;
    let mut take = order.len();
    for (i, &p) in order.iter().enumerate() {
        acc += profile.scores[p];
        if acc >= delta_sum {
            take = i + 1;
            break;
        }
    }
    Ok(mask(profile, order.into_iter().take(take), rule))
}

/// `count` distinct patch ids drawn uniformly with xoshiro256++ seeded from
/// `seed` (via `seed_from_u64`).
pub fn select_random(n_total: usize, count: usize, seed: u64) -> Result<SelectionMask, SelectionError> {
    if count == 0 || count > n_total {
        return Err(SelectionError::CountOutOfRange { k: count, n: n_total });
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut selected = rand::seq::index::sample(&mut rng, n_total, count).into_vec();
    selected.sort_unstable();
    Ok(SelectionMask { n_total, selected, rule: SelectionRule::Random { count, seed } })
}

/// Applies `rule` to a profile. Random draws ignore the scores.
pub fn apply(rule: SelectionRule, profile: &AttentionProfile) -> Result<SelectionMask, SelectionError> {
    match rule {
        SelectionRule::TopK(k) => select_topk(profile, k),
        SelectionRule::Threshold(d) => select_threshold(profile, d),
        SelectionRule::SumThreshold(d) => select_sum_threshold(profile, d),
        SelectionRule::Random { count, seed } => {
            let drawn = select_random(profile.len(), count, seed)?;
            Ok(mask(profile, drawn.selected, rule))
        }
    }
}
