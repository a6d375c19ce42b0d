//! Channel salience scoring and three-tier precision assignment.
//!
//! For each key channel `d`:
//!
//! - importance `I_d` is the mean absolute query activation in that channel,
//! - sensitivity `S_d` is the channel's quantization scale at a reference
//!   bit width, `(max k_d - min k_d) / (2^B - 1)`,
//! - salience `A_d = I_d * S_d` estimates the expected magnitude of the
//!   channel's contribution to the pre-softmax logit error.
//!
//! Channels above `tau_bf16` stay at full precision, channels in
//! `(tau_uint4, tau_bf16]` get 4 bits, everything else gets 2 bits.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::BitWidth;

/// Reference bit width for sensitivity: the lowest tier.
pub const SENSITIVITY_BITS: BitWidth = BitWidth::Two;

/// Default RoPE base frequency.
pub const DEFAULT_ROPE_THETA: f64 = 10_000.0;

/// Running per-channel sum of `|Q|` and the number of rows accumulated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAccumulator {
    abs_sum: Vec<f64>,
    count: usize,
}

impl QueryAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { abs_sum: vec![0.0; dim], count: 0 }
    }

    pub fn dim(&self) -> usize {
        self.abs_sum.len()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn abs_sum(&self) -> &[f64] {
        &self.abs_sum
    }

    pub fn accumulate_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim() {
            return Err(Error::invalid(format!("query row has {} channels, accumulator has {}", row.len(), self.dim())));
        }
        for (s, q) in self.abs_sum.iter_mut().zip(row) {
            *s += q.abs();
        }
        self.count += 1;
        Ok(())
    }

    /// Adds a block of query rows. Rows are folded in order, so splitting
    /// the same rows into blocks differently gives a bit-identical result.
    pub fn accumulate(&mut self, block: ArrayView2<'_, f64>) -> Result<()> {
        if block.ncols() != self.dim() {
            return Err(Error::invalid(format!(
                "query block has {} columns, accumulator has {}",
                block.ncols(),
                self.dim()
            )));
        }
        for row in block.rows() {
            for (s, q) in self.abs_sum.iter_mut().zip(row) {
                *s += q.abs();
            }
        }
        self.count += block.nrows();
        Ok(())
    }

    pub fn importance(&self) -> Result<Vec<f64>> {
        importance_score(self)
    }

    pub fn reset(&mut self) {
        self.abs_sum.iter_mut().for_each(|s| *s = 0.0);
        self.count = 0;
    }
}

/// `I_d = abs_sum[d] / count`.
pub fn importance_score(acc: &QueryAccumulator) -> Result<Vec<f64>> {
    if acc.count == 0 {
        return Err(Error::EmptyWindow);
    }
    let n = acc.count as f64;
    Ok(acc.abs_sum.iter().map(|s| s / n).collect())
}

/// Per-channel quantization scale of a `T x D` key block at `bits`.
pub fn sensitivity_score(keys: ArrayView2<'_, f64>, bits: BitWidth) -> Result<Vec<f64>> {
    if keys.nrows() == 0 {
        return Err(Error::invalid("sensitivity needs at least one token"));
    }
    if !bits.is_quantized() {
        return Err(Error::invalid("sensitivity is defined for 2 or 4 bits"));
    }
    let levels = bits.max_code() as f64;
    Ok(keys
        .columns()
        .into_iter()
        .map(|col| {
            let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            (hi - lo) / levels
        })
        .collect())
}

/// `A_d = I_d * S_d`.
pub fn salience_score(importance: &[f64], sensitivity: &[f64]) -> Result<Vec<f64>> {
    if importance.len() != sensitivity.len() {
        return Err(Error::invalid(format!(
            "importance has {} channels, sensitivity has {}",
            importance.len(),
            sensitivity.len()
        )));
    }
    Ok(importance.iter().zip(sensitivity).map(|(i, s)| i * s).collect())
}

/// The three scores for every channel of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSalience {
    pub importance: Vec<f64>,
    pub sensitivity: Vec<f64>,
    pub salience: Vec<f64>,
}

impl ChannelSalience {
    pub fn new(importance: Vec<f64>, sensitivity: Vec<f64>) -> Result<Self> {
        let salience = salience_score(&importance, &sensitivity)?;
        Ok(Self { importance, sensitivity, salience })
    }

    /// Scores a key block against accumulated queries, using
    /// [`SENSITIVITY_BITS`] for the scale.
    pub fn compute(acc: &QueryAccumulator, keys: ArrayView2<'_, f64>) -> Result<Self> {
        if keys.ncols() != acc.dim() {
            return Err(Error::invalid("key block and query accumulator differ in channel count"));
        }
        Self::new(importance_score(acc)?, sensitivity_score(keys, SENSITIVITY_BITS)?)
    }

    pub fn dim(&self) -> usize {
        self.salience.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PrecisionTier {
    FullPrecision,
    Mid4Bit,
    Low2Bit,
}

impl PrecisionTier {
    pub const fn bit_width(self) -> BitWidth {
        match self {
            PrecisionTier::FullPrecision => BitWidth::Sixteen,
            PrecisionTier::Mid4Bit => BitWidth::Four,
            PrecisionTier::Low2Bit => BitWidth::Two,
        }
    }

    pub const fn bits(self) -> u32 {
        self.bit_width().bits()
    }

    pub const fn label(self) -> &'static str {
        match self {
            PrecisionTier::FullPrecision => "bf16",
            PrecisionTier::Mid4Bit => "uint4",
            PrecisionTier::Low2Bit => "uint2",
        }
    }
}

/// The salience thresholds `(tau_bf16, tau_uint4)`, with `tau_uint4 <= tau_bf16`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub bf16: f64,
    pub uint4: f64,
}

impl Thresholds {
    pub fn new(bf16: f64, uint4: f64) -> Result<Self> {
        if bf16.is_nan() || uint4.is_nan() || uint4 > bf16 {
            return Err(Error::InvalidThresholds { bf16, uint4 });
        }
        Ok(Self { bf16, uint4 })
    }

    /// Every nonnegative score lands in full precision.
    pub const fn all_full_precision() -> Self {
        Self { bf16: f64::NEG_INFINITY, uint4: f64::NEG_INFINITY }
    }

    /// Every score lands in the 2-bit tier.
    pub const fn all_low() -> Self {
        Self { bf16: f64::INFINITY, uint4: f64::INFINITY }
    }

    pub fn tier(&self, score: f64) -> PrecisionTier {
        if score > self.bf16 {
            PrecisionTier::FullPrecision
        } else if score > self.uint4 {
            PrecisionTier::Mid4Bit
        } else {
            PrecisionTier::Low2Bit
        }
    }
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { bf16: 1.44, uint4: 0.79 }
    }
}

/// Per-channel tiers for one flushed block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionAssignment {
    pub tiers: Vec<PrecisionTier>,
    /// The thresholds that produced the tiers, when threshold-based.
    pub thresholds: Option<Thresholds>,
}

impl PrecisionAssignment {
    pub fn uniform(dim: usize, tier: PrecisionTier) -> Self {
        Self { tiers: vec![tier; dim], thresholds: None }
    }

    pub fn dim(&self) -> usize {
        self.tiers.len()
    }

    /// `(full precision, 4-bit, 2-bit)` channel counts.
    pub fn counts(&self) -> (usize, usize, usize) {
        self.tiers.iter().fold((0, 0, 0), |(f, m, l), t| match t {
            PrecisionTier::FullPrecision => (f + 1, m, l),
            PrecisionTier::Mid4Bit => (f, m + 1, l),
            PrecisionTier::Low2Bit => (f, m, l + 1),
        })
    }

    pub fn channels_in(&self, tier: PrecisionTier) -> impl Iterator<Item = usize> + '_ {
        self.tiers.iter().enumerate().filter(move |(_, t)| **t == tier).map(|(d, _)| d)
    }

    /// Mean bits per channel under this assignment.
    pub fn mean_bits(&self) -> f64 {
        if self.tiers.is_empty() {
            return f64::NAN;
        }
        self.tiers.iter().map(|t| t.bits() as f64).sum::<f64>() / self.tiers.len() as f64
    }
}

/// Maps salience scores to tiers: `> tau_bf16` full precision,
/// `(tau_uint4, tau_bf16]` 4-bit, `<= tau_uint4` 2-bit.
pub fn assign_precision(salience: &[f64], tau_bf16: f64, tau_uint4: f64) -> Result<PrecisionAssignment> {
    let thresholds = Thresholds::new(tau_bf16, tau_uint4)?;
    Ok(assign_with(salience, thresholds))
}

pub(crate) fn assign_with(salience: &[f64], thresholds: Thresholds) -> PrecisionAssignment {
    PrecisionAssignment { tiers: salience.iter().map(|&a| thresholds.tier(a)).collect(), thresholds: Some(thresholds) }
}

/// Combines the accumulators of every query head that shares one KV head.
/// The result's importance is the mean `|Q|` over all rows of all heads.
pub fn aggregate_gqa_importance(per_head: &[QueryAccumulator], heads_per_kv_group: usize) -> Result<QueryAccumulator> {
    let first = per_head.first().ok_or_else(|| Error::invalid("GQA group has no query heads"))?;
    if per_head.len() != heads_per_kv_group {
        return Err(Error::invalid(format!(
            "expected {heads_per_kv_group} query heads per KV group, got {}",
            per_head.len()
        )));
    }
    let mut out = QueryAccumulator::new(first.dim());
    for acc in per_head {
        if acc.dim() != first.dim() || acc.count != first.count {
            return Err(Error::invalid("GQA accumulators differ in dimension or row count"));
        }
        for (o, s) in out.abs_sum.iter_mut().zip(&acc.abs_sum) {
            *o += s;
        }
        out.count += acc.count;
    }
    Ok(out)
}

/// Rotates channel pairs `(2j, 2j+1)` of one row by `position * theta^(-2j/D)`.
pub(crate) fn rope_row(row: &mut [f64], position: usize, theta_base: f64) {
    let dim = row.len();
    for j in 0..dim / 2 {
        let freq = theta_base.powf(-(2.0 * j as f64) / dim as f64);
        let (sin, cos) = (position as f64 * freq).sin_cos();
        let (a, b) = (row[2 * j], row[2 * j + 1]);
        row[2 * j] = a * cos - b * sin;
        row[2 * j + 1] = a * sin + b * cos;
    }
}

/// Applies interleaved-pair rotary position embedding to each row of `x`.
pub fn apply_rope(x: ArrayView2<'_, f64>, positions: &[usize], theta_base: f64) -> Result<Array2<f64>> {
    if !x.ncols().is_multiple_of(2) {
        return Err(Error::invalid(format!("RoPE needs an even channel count, got {}", x.ncols())));
    }
    if positions.len() != x.nrows() {
        return Err(Error::invalid(format!("{} positions for {} rows", positions.len(), x.nrows())));
    }
    let mut out = x.to_owned();
    for (mut row, &pos) in out.rows_mut().into_iter().zip(positions) {
        rope_row(row.as_slice_mut().expect("owned rows are contiguous"), pos, theta_base);
    }
    Ok(out)
}
