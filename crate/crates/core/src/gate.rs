//! Entropy-based offload gate. All entropies are in bits.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Allowed deviation of a probability vector's sum from one.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum GateError {
    #[error("empty probability vector")]
    Empty,
    #[error("entry {index} is {value}, not a probability")]
    BadEntry { index: usize, value: f64 },
    #[error("probabilities sum to {0}, not 1")]
    BadSum(f64),
    #[error("threshold must be nonnegative, got {0}")]
    BadThreshold(f64),
    #[error("invalid entropy spec `{0}` (expected min:ETA or shannon:ETA)")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EntropyMeasure {
    Shannon,
    #[default]
    Min,
}

impl fmt::Display for EntropyMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Shannon => "shannon",
            Self::Min => "min",
        })
    }
}

impl FromStr for EntropyMeasure {
    type Err = GateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shannon" => Ok(Self::Shannon),
            "min" => Ok(Self::Min),
            _ => Err(GateError::Parse(s.to_string())),
        }
    }
}

/// A measure and its threshold, parsed from `min:0.8` / `shannon:1.2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateSpec {
    pub measure: EntropyMeasure,
    pub eta: f64,
}

impl FromStr for GateSpec {
    type Err = GateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (m, eta) = s.split_once(':').ok_or_else(|| GateError::Parse(s.to_string()))?;
        let eta: f64 = eta.parse().map_err(|_| GateError::Parse(s.to_string()))?;
        if eta.is_nan() || eta < 0.0 {
            return Err(GateError::BadThreshold(eta));
        }
        Ok(Self { measure: m.parse()?, eta })
    }
}

impl fmt::Display for GateSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.measure, self.eta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateDecision {
    pub entropy_bits: f64,
    pub measure: EntropyMeasure,
    pub eta: f64,
    pub offload: bool,
}

fn validate(p: &[f64]) -> Result<(), GateError> {
    if p.is_empty() {
        return Err(GateError::Empty);
    }
    if let Some((index, &value)) =
        p.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && **v <= 1.0 + DISTRIBUTION_TOLERANCE))
    {
        return Err(GateError::BadEntry { index, value });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(GateError::BadSum(sum));
    }
    Ok(())
}

/// `-Σ p log₂ p`, with `0·log 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> Result<f64, GateError> {
    validate(p)?;
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.log2()).sum();
    // Rounding can leave a one-hot vector at -0.0 or a hair below zero.
    Ok(h.max(0.0))
}

/// `-log₂ max p`.
pub fn min_entropy(p: &[f64]) -> Result<f64, GateError> {
    validate(p)?;
    let max = p.iter().copied().fold(0.0, f64::max);
    Ok((-max.log2()).max(0.0))
}

pub fn entropy(p: &[f64], measure: EntropyMeasure) -> Result<f64, GateError> {
    match measure {
        EntropyMeasure::Shannon => shannon_entropy(p),
        EntropyMeasure::Min => min_entropy(p),
    }
}

/// Offload iff the entropy is at least `eta`.
pub fn gate(p: &[f64], measure: EntropyMeasure, eta: f64) -> Result<GateDecision, GateError> {
    if eta.is_nan() || eta < 0.0 {
        return Err(GateError::BadThreshold(eta));
    }
    let entropy_bits = entropy(p, measure)?;
    Ok(GateDecision { entropy_bits, measure, eta, offload: entropy_bits >= eta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn closed_forms() {
        let one_hot = [0.0, 1.0, 0.0];
        assert_eq!(shannon_entropy(&one_hot).unwrap(), 0.0);
        assert_eq!(min_entropy(&one_hot).unwrap(), 0.0);
        let uniform = vec![1.0 / 1000.0; 1000];
        assert!((shannon_entropy(&uniform).unwrap() - 9.9658).abs() < 1e-3);
        assert!((shannon_entropy(&[0.5, 0.25, 0.25]).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(min_entropy(&[0.5, 0.3, 0.2]).unwrap(), 1.0);
    }

    #[test]
    fn rejects_non_distributions() {
        assert_eq!(shannon_entropy(&[]), Err(GateError::Empty));
        assert!(matches!(shannon_entropy(&[0.5, 0.6]), Err(GateError::BadSum(_))));
        assert!(matches!(min_entropy(&[1.2, -0.2]), Err(GateError::BadEntry { index: 0, .. })));
        assert!(matches!(min_entropy(&[f64::NAN, 1.0]), Err(GateError::BadEntry { index: 0, .. })));
    }

    #[test]
    fn gate_boundaries() {
        let p = [0.9, 0.05, 0.05];
        assert!(gate(&p, EntropyMeasure::Shannon, 0.0).unwrap().offload);
        assert!(gate(&[1.0, 0.0], EntropyMeasure::Min, 0.0).unwrap().offload);
        assert!(!gate(&p, EntropyMeasure::Shannon, 3f64.log2() + 1e-9).unwrap().offload);
        assert!(!gate(&[1.0 / 3.0; 3], EntropyMeasure::Min, 3f64.log2() + 1e-9).unwrap().offload);
        assert!(gate(&p, EntropyMeasure::Min, -1.0).is_err());
    }

    #[test]
    fn spec_parsing() {
        let g: GateSpec = "min:0.8".parse().unwrap();
        assert_eq!(g, GateSpec { measure: EntropyMeasure::Min, eta: 0.8 });
        assert_eq!("shannon:1.5".parse::<GateSpec>().unwrap().measure, EntropyMeasure::Shannon);
        assert!("max:1".parse::<GateSpec>().is_err());
        assert!("min:-1".parse::<GateSpec>().is_err());
        assert!("min".parse::<GateSpec>().is_err());
    }

    proptest! {
        #[test]
        fn min_eta_inverts_to_max_probability(raw in prop::collection::vec(0.001f64..1.0, 2..12)) {
            let sum: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let max = p.iter().copied().fold(0.0, f64::max);
            let fires = gate(&p, EntropyMeasure::Min, 0.8).unwrap().offload;
            // Offload iff max p <= 2^-0.8; skip the measure-zero boundary band.
            let bound = 2f64.powf(-0.8);
            if (max - bound).abs() > 1e-12 {
                prop_assert_eq!(fires, max < bound);
            }
        }

        #[test]
        fn entropies_are_permutation_invariant(raw in prop::collection::vec(0.0f64..1.0, 2..10), rot in 0usize..10) {
            let sum: f64 = raw.iter().sum::<f64>() + 1e-9;
            let p: Vec<f64> = raw.iter().map(|v| (v + 1e-9 / raw.len() as f64) / sum).collect();
            let mut q = p.clone();
            q.rotate_left(rot % p.len());
            q.reverse();
            prop_assert!((shannon_entropy(&p).unwrap() - shannon_entropy(&q).unwrap()).abs() < 1e-12);
            prop_assert_eq!(min_entropy(&p).unwrap(), min_entropy(&q).unwrap());
        }
    }
}
