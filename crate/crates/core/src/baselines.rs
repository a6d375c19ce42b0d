//! Allocation policies: the salience policy and the baselines it is compared
//! against.
//!
//! Budgeted (top-k) variants hand out exactly `full` full-precision slots and
//! `mid` 4-bit slots to the highest-ranked channels, which gives two policies
//! the same effective bit width by construction. Ties rank the lower channel
//! index first.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::BitWidth;
use crate::salience::{assign_with, ChannelSalience, PrecisionAssignment, PrecisionTier, Thresholds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    /// Rank channels by `A_d = I_d * S_d`.
    Salience,
    /// Rank channels by `S_d` alone.
    ErrorOnly,
    /// Every channel at one bit width (KIVI-style KV2 / KV4).
    FixedUniform(BitWidth),
    /// No quantization of keys or values.
    FullPrecision,
}

/// Number of channels given full precision and 4 bits per block; the rest
/// get 2 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TierBudget {
    pub full: usize,
    pub mid: usize,
}

impl TierBudget {
    pub fn new(full: usize, mid: usize) -> Self {
        Self { full, mid }
    }

    /// Mean bits per channel this budget implies over `dim` channels.
    pub fn mean_bits(&self, dim: usize) -> f64 {
        let low = dim.saturating_sub(self.full + self.mid);
        (16 * self.full + 4 * self.mid + 2 * low) as f64 / dim as f64
    }
}

impl FromStr for TierBudget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s.split_once(',').ok_or_else(|| Error::invalid(format!("tier budget `{s}` is not FULL,MID")))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| Error::invalid(format!("tier budget `{s}`: {e}")));
        Ok(Self::new(parse(a)?, parse(b)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AllocationPolicy {
    pub kind: PolicyKind,
    /// Top-k tier counts. Without a budget, threshold-based kinds use the
    /// cache's thresholds.
    pub budget: Option<TierBudget>,
}

impl AllocationPolicy {
    pub const fn salience() -> Self {
        Self { kind: PolicyKind::Salience, budget: None }
    }

    pub const fn error_only() -> Self {
        Self { kind: PolicyKind::ErrorOnly, budget: None }
    }

    pub const fn full_precision() -> Self {
        Self { kind: PolicyKind::FullPrecision, budget: None }
    }

    pub fn fixed_uniform(bits: BitWidth) -> Result<Self> {
        if !bits.is_quantized() {
            return Err(Error::invalid("fixed uniform policy takes 2 or 4 bits"));
        }
        Ok(Self { kind: PolicyKind::FixedUniform(bits), budget: None })
    }

    pub const fn with_budget(mut self, budget: TierBudget) -> Self {
        self.budget = Some(budget);
        self
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if let PolicyKind::FixedUniform(bits) = self.kind {
            if !bits.is_quantized() {
                return Err(Error::invalid("fixed uniform policy takes 2 or 4 bits"));
            }
        }
        if let Some(b) = self.budget {
            if b.full + b.mid > dim {
                return Err(Error::invalid(format!("tier budget {}+{} exceeds {dim} channels", b.full, b.mid)));
            }
        }
        Ok(())
    }

    /// Assigns tiers for one block from its channel scores.
    pub fn assign(&self, scores: &ChannelSalience, thresholds: Thresholds) -> Result<PrecisionAssignment> {
        let dim = scores.dim();
        match (self.kind, self.budget) {
            (PolicyKind::Salience, Some(b)) => salience_topk_assignment(&scores.salience, b),
            (PolicyKind::Salience, None) => Ok(assign_with(&scores.salience, thresholds)),
            (PolicyKind::ErrorOnly, Some(b)) => error_only_assignment(&scores.sensitivity, b),
            (PolicyKind::ErrorOnly, None) => Ok(assign_with(&scores.sensitivity, thresholds)),
            (PolicyKind::FixedUniform(bits), _) => Ok(fixed_uniform_assignment(dim, bits)),
            (PolicyKind::FullPrecision, _) => Ok(PrecisionAssignment::uniform(dim, PrecisionTier::FullPrecision)),
        }
    }

    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for AllocationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PolicyKind::Salience => f.write_str("salience"),
            PolicyKind::ErrorOnly => f.write_str("error-only"),
            PolicyKind::FixedUniform(bits) => write!(f, "fixed-{bits}"),
            PolicyKind::FullPrecision => f.write_str("full-precision"),
        }
    }
}

impl FromStr for AllocationPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "salience" | "mixkvq" => Ok(Self::salience()),
            "error-only" => Ok(Self::error_only()),
            "full-precision" | "bf16" => Ok(Self::full_precision()),
            "fixed-2" | "kivi-2" | "kv2" => Self::fixed_uniform(BitWidth::Two),
            "fixed-4" | "kivi-4" | "kv4" => Self::fixed_uniform(BitWidth::Four),
            other => Err(Error::invalid(format!(
                "unknown policy `{other}` (expected salience, error-only, full-precision, fixed-2, fixed-4)"
            ))),
        }
    }
}

/// Every channel gets the tier matching `bits`; 16 bits means full precision.
pub fn fixed_uniform_assignment(dim: usize, bits: BitWidth) -> PrecisionAssignment {
    let tier = match bits {
        BitWidth::Two => PrecisionTier::Low2Bit,
        BitWidth::Four => PrecisionTier::Mid4Bit,
        BitWidth::Sixteen => PrecisionTier::FullPrecision,
    };
    PrecisionAssignment::uniform(dim, tier)
}

/// Top-k by sensitivity alone.
pub fn error_only_assignment(sensitivity: &[f64], budget: TierBudget) -> Result<PrecisionAssignment> {
    topk_assignment(sensitivity, budget)
}

/// Top-k by salience.
pub fn salience_topk_assignment(salience: &[f64], budget: TierBudget) -> Result<PrecisionAssignment> {
    topk_assignment(salience, budget)
}

fn topk_assignment(scores: &[f64], budget: TierBudget) -> Result<PrecisionAssignment> {
    if budget.full + budget.mid > scores.len() {
        return Err(Error::invalid(format!(
            "tier budget {}+{} exceeds {} channels",
            budget.full,
            budget.mid,
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN channel score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps lower indices first among equal scores.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut tiers = vec![PrecisionTier::Low2Bit; scores.len()];
    for (rank, &d) in order.iter().enumerate() {
        if rank < budget.full {
            tiers[d] = PrecisionTier::FullPrecision;
        } else if rank < budget.full + budget.mid {
            tiers[d] = PrecisionTier::Mid4Bit;
        } else {
            break;
        }
    }
    Ok(PrecisionAssignment { tiers, thresholds: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use PrecisionTier::*;

    #[test]
    fn fixed_uniform() {
        assert_eq!(fixed_uniform_assignment(4, BitWidth::Two).tiers, vec![Low2Bit; 4]);
        assert_eq!(fixed_uniform_assignment(4, BitWidth::Four).tiers, vec![Mid4Bit; 4]);
        assert_eq!(fixed_uniform_assignment(4, BitWidth::Two).mean_bits(), 2.0);
        assert_eq!(fixed_uniform_assignment(4, BitWidth::Four).mean_bits(), 4.0);
        assert_eq!(fixed_uniform_assignment(3, BitWidth::Sixteen).tiers, vec![FullPrecision; 3]);
    }

    #[test]
    fn error_only_ranks_by_sensitivity() {
        let p = error_only_assignment(&[3.0, 1.0, 2.0], TierBudget::new(1, 1)).unwrap();
        assert_eq!(p.tiers, vec![FullPrecision, Low2Bit, Mid4Bit]);
        let p = error_only_assignment(&[3.0, 1.0, 2.0], TierBudget::new(0, 0)).unwrap();
        assert_eq!(p.tiers, vec![Low2Bit; 3]);
        let p = error_only_assignment(&[1.0; 4], TierBudget::new(1, 2)).unwrap();
        assert_eq!(p.tiers, vec![FullPrecision, Mid4Bit, Mid4Bit, Low2Bit]);
        assert!(error_only_assignment(&[1.0, 2.0], TierBudget::new(2, 1)).is_err());
    }

    #[test]
    fn salience_topk_ranks_by_salience() {
        let p = salience_topk_assignment(&[0.0, 5.0, 1.0], TierBudget::new(1, 1)).unwrap();
        assert_eq!(p.tiers, vec![Low2Bit, FullPrecision, Mid4Bit]);
        let p = salience_topk_assignment(&[0.0, 5.0, 1.0], TierBudget::new(3, 0)).unwrap();
        assert_eq!(p.tiers, vec![FullPrecision; 3]);
    }

    #[test]
    fn policy_parse_and_label() {
        for s in ["salience", "error-only", "full-precision", "fixed-2", "fixed-4"] {
            assert_eq!(s.parse::<AllocationPolicy>().unwrap().label(), s);
        }
        assert!("nope".parse::<AllocationPolicy>().is_err());
        assert_eq!("2,6".parse::<TierBudget>().unwrap(), TierBudget::new(2, 6));
        assert!("2".parse::<TierBudget>().is_err());
        assert!(AllocationPolicy::fixed_uniform(BitWidth::Sixteen).is_err());
    }

    #[test]
    fn policy_dispatch() {
        let scores = ChannelSalience::new(vec![0.0, 1.0, 1.0], vec![9.0, 2.0, 1.0]).unwrap();
        let th = Thresholds::new(1.5, 0.5).unwrap();
        assert_eq!(AllocationPolicy::salience().assign(&scores, th).unwrap().tiers, vec![Low2Bit, FullPrecision, Mid4Bit]);
        assert_eq!(AllocationPolicy::error_only().assign(&scores, th).unwrap().tiers, vec![FullPrecision; 2].into_iter().chain([Mid4Bit]).collect::<Vec<_>>());
        let b = TierBudget::new(1, 0);
        assert_eq!(AllocationPolicy::salience().with_budget(b).assign(&scores, th).unwrap().counts(), (1, 0, 2));
        assert_eq!(AllocationPolicy::full_precision().assign(&scores, th).unwrap().counts(), (3, 0, 0));
    }

    #[test]
    fn budget_mean_bits() {
        assert_eq!(TierBudget::new(5, 15).mean_bits(100), 3.0);
        assert_eq!(TierBudget::new(0, 0).mean_bits(7), 2.0);
    }

    proptest! {
        #[test]
        fn budgets_are_exact(s in prop::collection::vec(0f64..10.0, 1..40), f in 0usize..40, m in 0usize..40) {
            let d = s.len();
            let f = f % (d + 1);
            let m = m % (d - f + 1);
            let p = salience_topk_assignment(&s, TierBudget::new(f, m)).unwrap();
            prop_assert_eq!(p.counts(), (f, m, d - f - m));
        }

        #[test]
        fn constant_importance_matches_error_only(
            s in prop::collection::vec(0f64..10.0, 1..40),
            c in 0.1f64..10.0,
            f in 0usize..40,
            m in 0usize..40,
        ) {
            let d = s.len();
            let f = f % (d + 1);
            let m = m % (d - f + 1);
            let a: Vec<f64> = s.iter().map(|x| c * x).collect();
            let b = TierBudget::new(f, m);
            prop_assert_eq!(salience_topk_assignment(&a, b).unwrap(), error_only_assignment(&s, b).unwrap());
        }
    }
}
