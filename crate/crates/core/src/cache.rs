//! Streaming mixed-precision KV cache.
//!
//! New tokens land in a full-precision residual buffer. When the buffer holds
//! `residual_len` tokens it is flushed as one block:
//!
//! 1. sensitivity is computed per key channel over the block's non-sink rows,
//!    importance comes from the query accumulator, and the allocation policy
//!    turns the scores into per-channel tiers;
//! 2. full-precision channels move to sparse outlier columns, the rest are
//!    quantized per channel in token groups of `group_size` and bit-packed;
//! 3. value rows are quantized per token in hidden-dim groups of `group_size`.
//!
//! The first `sink_len` tokens of the sequence are never quantized. A partial
//! block left at the end of a sequence stays in the residual buffer.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::baselines::{AllocationPolicy, PolicyKind};
use crate::error::{Error, Result};
use crate::io::TensorDump;
use crate::quant::{dequantize_group, quantize_group, BitWidth, QuantizedGroup};
use crate::salience::{
    aggregate_gqa_importance, rope_row, sensitivity_score, ChannelSalience, PrecisionAssignment, PrecisionTier,
    QueryAccumulator, Thresholds, SENSITIVITY_BITS,
};

/// Which queries feed importance at flush time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImportanceWindow {
    /// Every query seen so far in the sequence.
    #[default]
    Running,
    /// Only the queries that arrived since the previous flush.
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CacheConfig {
    pub group_size: usize,
    pub residual_len: usize,
    pub thresholds: Thresholds,
    pub sink_len: usize,
    pub heads_per_kv_group: usize,
    pub value_bits: BitWidth,
    pub importance_window: ImportanceWindow,
    /// When set, keys and queries are rotated at their position before
    /// scoring and storage. Leave unset if the inputs are already rotated.
    pub rope_theta: Option<f64>,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            group_size: 32,
            residual_len: 128,
            thresholds: Thresholds::default(),
            sink_len: 32,
            heads_per_kv_group: 1,
            value_bits: BitWidth::Two,
            importance_window: ImportanceWindow::Running,
            rope_theta: None,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(Error::InvalidConfig("group_size must be at least 1".into()));
        }
        if self.residual_len == 0 {
            return Err(Error::InvalidConfig("residual_len must be at least 1".into()));
        }
        if !self.residual_len.is_multiple_of(self.group_size) {
            return Err(Error::InvalidConfig(format!(
                "residual_len {} is not a multiple of group_size {}",
                self.residual_len, self.group_size
            )));
        }
        if self.heads_per_kv_group == 0 {
            return Err(Error::InvalidConfig("heads_per_kv_group must be at least 1".into()));
        }
        Thresholds::new(self.thresholds.bf16, self.thresholds.uint4)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if let Some(theta) = self.rope_theta {
            if !theta.is_finite() || theta <= 0.0 {
                return Err(Error::InvalidConfig(format!("rope_theta must be positive, got {theta}")));
            }
        }
        Ok(())
    }
}

/// One quantized key channel of a block: `ceil(rows / G)` token groups.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedChannel {
    pub channel: usize,
    pub groups: Vec<QuantizedGroup>,
}

/// Full-precision key channels of a block, sorted by channel index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OutlierColumns {
    pub channels: Vec<usize>,
    pub columns: Vec<Vec<f64>>,
}

impl OutlierColumns {
    pub fn column(&self, channel: usize) -> Option<&[f64]> {
        self.channels.binary_search(&channel).ok().map(|i| self.columns[i].as_slice())
    }
}

/// A flushed block of keys.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyBlock {
    pub first_token: usize,
    pub len: usize,
    /// Leading rows of the block that fall in the attention sink.
    pub sink_rows: usize,
    sink: Vec<f64>,
    /// `None` when the whole block is sink.
    pub scores: Option<ChannelSalience>,
    pub assignment: Option<PrecisionAssignment>,
    pub packed: Vec<PackedChannel>,
    pub outliers: OutlierColumns,
}

impl KeyBlock {
    pub fn quantized_rows(&self) -> usize {
        self.len - self.sink_rows
    }

    fn reconstruct_into(&self, dim: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.len * dim);
        out[..self.sink.len()].copy_from_slice(&self.sink);
        let base = self.sink_rows;
        for pc in &self.packed {
            let mut t = base;
            for g in &pc.groups {
                for v in dequantize_group(g) {
                    out[t * dim + pc.channel] = v;
                    t += 1;
                }
            }
        }
        for (&d, col) in self.outliers.channels.iter().zip(&self.outliers.columns) {
            for (i, &v) in col.iter().enumerate() {
                out[(base + i) * dim + d] = v;
            }
        }
    }
}

/// Per-channel mixed-precision key store: flushed blocks plus a
/// full-precision residual buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedKeyCache {
    dim: usize,
    blocks: Vec<KeyBlock>,
    residual: Vec<f64>,
}

impl MixedKeyCache {
    pub fn blocks(&self) -> &[KeyBlock] {
        &self.blocks
    }

    pub fn residual_rows(&self) -> usize {
        self.residual.len() / self.dim.max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValueRow {
    Full(Vec<f64>),
    /// Hidden-dim groups of `group_size` elements, each with its own `(z, s)`.
    Quantized(Vec<QuantizedGroup>),
}

impl ValueRow {
    fn reconstruct_into(&self, out: &mut [f64]) {
        match self {
            ValueRow::Full(v) => out.copy_from_slice(v),
            ValueRow::Quantized(groups) => {
                let mut i = 0;
                for g in groups {
                    for v in dequantize_group(g) {
                        out[i] = v;
                        i += 1;
                    }
                }
            }
        }
    }
}

/// Per-token value store. A quantization group never spans two tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenValueCache {
    dim: usize,
    rows: Vec<ValueRow>,
    residual: Vec<f64>,
}

impl TokenValueCache {
    pub fn rows(&self) -> &[ValueRow] {
        &self.rows
    }
}

/// Element counts of the key store by storage width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct KeyStorageStats {
    /// Stored at 16 bits: outlier channels, sink rows, and residual rows.
    pub full_precision: usize,
    pub mid: usize,
    pub low: usize,
    /// Number of `(z, s)` pairs across all packed key groups.
    pub groups: usize,
}

impl KeyStorageStats {
    pub fn elements(&self) -> usize {
        self.full_precision + self.mid + self.low
    }

    pub fn effective_bits(&self) -> f64 {
        (16 * self.full_precision + 4 * self.mid + 2 * self.low) as f64 / self.elements() as f64
    }

    /// Extra bits per element if each group's zero-point and scale were
    /// stored as two 16-bit values.
    pub fn metadata_bits(&self) -> f64 {
        (self.groups * 32) as f64 / self.elements() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedKvCache {
    config: CacheConfig,
    policy: AllocationPolicy,
    keys: MixedKeyCache,
    values: TokenValueCache,
    running: Vec<QueryAccumulator>,
    window: Vec<QueryAccumulator>,
    flushed_tokens: usize,
}

impl MixedKvCache {
    pub fn new(config: CacheConfig, key_dim: usize, value_dim: usize, policy: AllocationPolicy) -> Result<Self> {
        config.validate()?;
        if key_dim == 0 || value_dim == 0 {
            return Err(Error::InvalidConfig("key and value dims must be nonzero".into()));
        }
        if config.rope_theta.is_some() && !key_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig("RoPE requires an even key dim".into()));
        }
        policy.validate(key_dim).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let heads = config.heads_per_kv_group;
        Ok(Self {
            config,
            policy,
            keys: MixedKeyCache { dim: key_dim, blocks: Vec::new(), residual: Vec::new() },
            values: TokenValueCache { dim: value_dim, rows: Vec::new(), residual: Vec::new() },
            running: vec![QueryAccumulator::new(key_dim); heads],
            window: vec![QueryAccumulator::new(key_dim); heads],
            flushed_tokens: 0,
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn policy(&self) -> AllocationPolicy {
        self.policy
    }

    pub fn key_dim(&self) -> usize {
        self.keys.dim
    }

    pub fn value_dim(&self) -> usize {
        self.values.dim
    }

    pub fn keys(&self) -> &MixedKeyCache {
        &self.keys
    }

    pub fn values(&self) -> &TokenValueCache {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.flushed_tokens + self.residual_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flushed_tokens(&self) -> usize {
        self.flushed_tokens
    }

    pub fn residual_len(&self) -> usize {
        self.keys.residual_rows()
    }

    /// Per-block tier history, skipping blocks that were entirely sink.
    pub fn assignments(&self) -> impl Iterator<Item = &PrecisionAssignment> {
        self.keys.blocks.iter().filter_map(|b| b.assignment.as_ref())
    }

    /// The accumulator importance is read from at the next flush, with
    /// query heads of the KV group folded together.
    pub fn query_accumulator(&self) -> Result<QueryAccumulator> {
        let source = match self.config.importance_window {
            ImportanceWindow::Running => &self.running,
            ImportanceWindow::Block => &self.window,
        };
        aggregate_gqa_importance(source, self.config.heads_per_kv_group)
    }

    fn check_row_dims(&self, k: usize, v: usize, q: usize) -> Result<()> {
        let qd = self.keys.dim * self.config.heads_per_kv_group;
        if k != self.keys.dim || v != self.values.dim || q != qd {
            return Err(Error::invalid(format!(
                "row dims (k={k}, v={v}, q={q}) do not match cache (k={}, v={}, q={qd})",
                self.keys.dim, self.values.dim
            )));
        }
        Ok(())
    }

    /// Appends one token. `q_row` holds the `heads_per_kv_group` query heads
    /// that share this KV head, concatenated. Flushes when the residual
    /// buffer reaches `residual_len`.
    pub fn append_kv(&mut self, k_row: &[f64], v_row: &[f64], q_row: &[f64], position: usize) -> Result<()> {
        self.check_row_dims(k_row.len(), v_row.len(), q_row.len())?;
        check_finite(k_row.iter().chain(v_row).chain(q_row))?;
        let dim = self.keys.dim;
        let start = self.keys.residual.len();
        self.keys.residual.extend_from_slice(k_row);
        self.values.residual.extend_from_slice(v_row);
        let mut q = q_row.to_vec();
        if let Some(theta) = self.config.rope_theta {
            rope_row(&mut self.keys.residual[start..], position, theta);
            for head in q.chunks_mut(dim) {
                rope_row(head, position, theta);
            }
        }
        for (h, head) in q.chunks(dim).enumerate() {
            self.running[h].accumulate_row(head)?;
            self.window[h].accumulate_row(head)?;
        }
        if self.residual_len() == self.config.residual_len {
            self.flush_block()?;
        }
        Ok(())
    }

    /// Appends many tokens at once, flushing at every `residual_len`
    /// boundary. Produces exactly the state that token-by-token
    /// [`append_kv`](Self::append_kv) calls would.
    pub fn append_block(
        &mut self,
        keys: ArrayView2<'_, f64>,
        values: ArrayView2<'_, f64>,
        queries: ArrayView2<'_, f64>,
        positions: &[usize],
    ) -> Result<()> {
        let n = keys.nrows();
        if values.nrows() != n || queries.nrows() != n || positions.len() != n {
            return Err(Error::invalid("key, value, query and position counts differ"));
        }
        self.check_row_dims(keys.ncols(), values.ncols(), queries.ncols())?;
        check_finite(keys.iter().chain(values.iter()).chain(queries.iter()))?;
        let dim = self.keys.dim;
        let mut start = 0;
        while start < n {
            let take = (self.config.residual_len - self.residual_len()).min(n - start);
            let rows = start..start + take;
            let mut k = keys.slice(s![rows.clone(), ..]).to_owned();
            let mut q = queries.slice(s![rows.clone(), ..]).to_owned();
            if let Some(theta) = self.config.rope_theta {
                for ((mut kr, mut qr), &pos) in k.rows_mut().into_iter().zip(q.rows_mut()).zip(&positions[rows.clone()]) {
                    rope_row(kr.as_slice_mut().expect("contiguous"), pos, theta);
                    for head in qr.as_slice_mut().expect("contiguous").chunks_mut(dim) {
                        rope_row(head, pos, theta);
                    }
                }
            }
            self.keys.residual.extend(k.iter());
            self.values.residual.extend(values.slice(s![rows, ..]).iter());
            for h in 0..self.config.heads_per_kv_group {
                let head = q.slice(s![.., h * dim..(h + 1) * dim]);
                self.running[h].accumulate(head)?;
                self.window[h].accumulate(head)?;
            }
            if self.residual_len() == self.config.residual_len {
                self.flush_block()?;
            }
            start += take;
        }
        Ok(())
    }

    /// Quantizes the residual buffer as one block and clears it. Called
    /// automatically when the buffer is full; calling it on a partial buffer
    /// forces an early (shorter) block.
    pub fn flush_block(&mut self) -> Result<()> {
        let dim = self.keys.dim;
        let rows = self.residual_len();
        if rows == 0 {
            return Err(Error::NothingToFlush);
        }
        let first_token = self.flushed_tokens;
        let sink_rows = self.config.sink_len.saturating_sub(first_token).min(rows);
        let block = Array2::from_shape_vec((rows, dim), std::mem::take(&mut self.keys.residual))
            .expect("residual holds whole rows");
        let quant = block.slice(s![sink_rows.., ..]);

        let mut key_block = KeyBlock {
            first_token,
            len: rows,
            sink_rows,
            sink: block.slice(s![..sink_rows, ..]).iter().copied().collect(),
            scores: None,
            assignment: None,
            packed: Vec::new(),
            outliers: OutlierColumns::default(),
        };

        if quant.nrows() > 0 {
            let importance = self.query_accumulator()?.importance()?;
            let scores = ChannelSalience::new(importance, sensitivity_score(quant, SENSITIVITY_BITS)?)?;
            let assignment = self.policy.assign(&scores, self.config.thresholds)?;
            for (d, (tier, column)) in assignment.tiers.iter().zip(quant.columns()).enumerate() {
                let column: Vec<f64> = column.iter().copied().collect();
                match tier {
                    PrecisionTier::FullPrecision => {
                        key_block.outliers.channels.push(d);
                        key_block.outliers.columns.push(column);
                    }
                    tier => {
                        let groups = column
                            .chunks(self.config.group_size)
                            .map(|g| quantize_group(g, tier.bit_width()))
                            .collect::<Result<Vec<_>>>()?;
                        key_block.packed.push(PackedChannel { channel: d, groups });
                    }
                }
            }
            key_block.scores = Some(scores);
            key_block.assignment = Some(assignment);
        }

        let vdim = self.values.dim;
        let value_bits = match self.policy.kind {
            PolicyKind::FullPrecision => BitWidth::Sixteen,
            _ => self.config.value_bits,
        };
        let values = std::mem::take(&mut self.values.residual);
        for (t, row) in values.chunks(vdim).enumerate() {
            let stored = if t < sink_rows || !value_bits.is_quantized() {
                ValueRow::Full(row.to_vec())
            } else {
                ValueRow::Quantized(
                    row.chunks(self.config.group_size)
                        .map(|g| quantize_group(g, value_bits))
                        .collect::<Result<Vec<_>>>()?,
                )
            };
            self.values.rows.push(stored);
        }

        self.keys.blocks.push(key_block);
        self.flushed_tokens += rows;
        self.window.iter_mut().for_each(QueryAccumulator::reset);
        Ok(())
    }

    /// Dequantized keys, one row per appended token in append order.
    pub fn reconstruct_keys(&self) -> Array2<f64> {
        let dim = self.keys.dim;
        let mut out = vec![0.0; self.len() * dim];
        let mut offset = 0;
        for b in &self.keys.blocks {
            let n = b.len * dim;
            b.reconstruct_into(dim, &mut out[offset..offset + n]);
            offset += n;
        }
        out[offset..].copy_from_slice(&self.keys.residual);
        Array2::from_shape_vec((self.len(), dim), out).expect("shape matches")
    }

    /// Dequantized keys of one flushed block.
    pub fn reconstruct_block_keys(&self, block: usize) -> Option<Array2<f64>> {
        let dim = self.keys.dim;
        let b = self.keys.blocks.get(block)?;
        let mut out = vec![0.0; b.len * dim];
        b.reconstruct_into(dim, &mut out);
        Some(Array2::from_shape_vec((b.len, dim), out).expect("shape matches"))
    }

    /// Dequantized values, one row per appended token in append order.
    pub fn reconstruct_values(&self) -> Array2<f64> {
        let dim = self.values.dim;
        let mut out = vec![0.0; self.len() * dim];
        for (row, dst) in self.values.rows.iter().zip(out.chunks_mut(dim)) {
            row.reconstruct_into(dst);
        }
        let offset = self.values.rows.len() * dim;
        out[offset..].copy_from_slice(&self.values.residual);
        Array2::from_shape_vec((self.len(), dim), out).expect("shape matches")
    }

    /// Dequantized values of the tokens in one flushed block.
    pub fn reconstruct_block_values(&self, block: usize) -> Option<Array2<f64>> {
        let dim = self.values.dim;
        let b = self.keys.blocks.get(block)?;
        let mut out = vec![0.0; b.len * dim];
        for (row, dst) in self.values.rows[b.first_token..b.first_token + b.len].iter().zip(out.chunks_mut(dim)) {
            row.reconstruct_into(dst);
        }
        Some(Array2::from_shape_vec((b.len, dim), out).expect("shape matches"))
    }

    pub fn key_storage_stats(&self) -> KeyStorageStats {
        let dim = self.keys.dim;
        let mut stats = KeyStorageStats { full_precision: self.keys.residual.len(), ..Default::default() };
        for b in &self.keys.blocks {
            stats.full_precision += b.sink_rows * dim;
            let q = b.quantized_rows();
            if let Some(a) = &b.assignment {
                let (f, m, l) = a.counts();
                stats.full_precision += f * q;
                stats.mid += m * q;
                stats.low += l * q;
            }
            stats.groups += b.packed.iter().map(|p| p.groups.len()).sum::<usize>();
        }
        stats
    }

    /// Mean stored bits per key element: 16 for outlier channels, sink and
    /// residual rows, 4 or 2 for quantized channels. Group metadata is
    /// excluded (see [`KeyStorageStats::metadata_bits`]).
    pub fn effective_bitwidth(&self) -> Result<f64> {
        if self.flushed_tokens == 0 {
            return Err(Error::Undefined("effective bit width needs at least one flushed token".into()));
        }
        Ok(self.key_storage_stats().effective_bits())
    }

    /// Snapshot as a tensor container: reconstructed `keys` and `values`,
    /// plus `tiers` (bits per channel for each flushed block; 16 for
    /// all-sink blocks).
    pub fn snapshot(&self) -> TensorDump {
        let dim = self.keys.dim;
        let tiers: Vec<f32> = self
            .keys
            .blocks
            .iter()
            .flat_map(|b| match &b.assignment {
                Some(a) => a.tiers.iter().map(|t| t.bits() as f32).collect::<Vec<_>>(),
                None => vec![16.0; dim],
            })
            .collect();
        let mut dump = TensorDump::new();
        dump.insert_array("keys", &self.reconstruct_keys());
        dump.insert_array("values", &self.reconstruct_values());
        dump.insert("tiers", vec![self.keys.blocks.len(), dim], tiers).expect("tier shape matches");
        dump
    }
}

fn check_finite<'a>(mut values: impl Iterator<Item = &'a f64>) -> Result<()> {
    if values.any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite element in appended row"));
    }
    Ok(())
}
