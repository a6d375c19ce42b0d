//! Attention reference, pre-softmax key error, and the decode simulator.
//!
//! The simulator replays a token stream through a [`MixedKvCache`] and, at
//! every step, attends the new query against both the exact keys/values and
//! the cache's dequantized view. The pre-softmax error
//! `E = Q (K - K~)^T` is accumulated over all visible (query, key) pairs.
//! Its Frobenius norm is used as a desk-scale fidelity proxy; it is not a
//! downstream accuracy metric.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baselines::AllocationPolicy;
use crate::cache::{CacheConfig, MixedKvCache};
use crate::error::{Error, Result};
use crate::salience::apply_rope;

/// Queries `L_q x D`, keys `L_k x D`, values `L_k x D_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInstance {
    pub queries: Array2<f64>,
    pub keys: Array2<f64>,
    pub values: Array2<f64>,
}

impl AttentionInstance {
    pub fn new(queries: Array2<f64>, keys: Array2<f64>, values: Array2<f64>) -> Result<Self> {
        let inst = Self { queries, keys, values };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        if self.keys.ncols() == 0 {
            return Err(Error::invalid("head dim must be at least 1"));
        }
        if self.queries.ncols() != self.keys.ncols() {
            return Err(Error::invalid(format!(
                "query dim {} != key dim {}",
                self.queries.ncols(),
                self.keys.ncols()
            )));
        }
        if self.values.nrows() != self.keys.nrows() {
            return Err(Error::invalid(format!(
                "{} value rows for {} keys",
                self.values.nrows(),
                self.keys.nrows()
            )));
        }
        if self.queries.iter().chain(self.keys.iter()).chain(self.values.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite entry in attention instance"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.keys.ncols()
    }

    /// `1 / sqrt(D)`.
    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = if *l == f64::NEG_INFINITY { 0.0 } else { (*l - max).exp() };
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
}

/// `a = softmax(Q K^T / sqrt(D))`, `o = a V`. With `causal`, query `i` sees
/// keys `j <= i + (L_k - L_q)`; queries are the last `L_q` positions.
pub fn attention_exact(inst: &AttentionInstance, causal: bool) -> Result<(Array2<f64>, Array2<f64>)> {
    inst.validate()?;
    let (lq, lk) = (inst.queries.nrows(), inst.keys.nrows());
    if lk == 0 && lq > 0 {
        return Err(Error::invalid("no keys to attend to"));
    }
    if causal && lq > lk {
        return Err(Error::invalid("causal attention needs at least as many keys as queries"));
    }
    let offset = lk - lq.min(lk);
    let mut weights = (inst.queries.dot(&inst.keys.t()) * inst.scale()).as_standard_layout().into_owned();
    for (i, mut row) in weights.axis_iter_mut(Axis(0)).enumerate() {
        if causal {
            row.iter_mut().skip(i + offset + 1).for_each(|l| *l = f64::NEG_INFINITY);
        }
        softmax_in_place(row.as_slice_mut().expect("standard layout rows are contiguous"));
    }
    let outputs = weights.dot(&inst.values);
    Ok((weights, outputs))
}

/// Pre-softmax logit error `Q (K - K~)^T` (no `1/sqrt(D)` factor).
pub fn attention_error(inst: &AttentionInstance, k_tilde: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if k_tilde.dim() != inst.keys.dim() {
        return Err(Error::invalid(format!("k_tilde shape {:?} != keys shape {:?}", k_tilde.dim(), inst.keys.dim())));
    }
    Ok(inst.queries.dot(&(&inst.keys - &k_tilde).t()))
}

/// Parameters of the planted-outlier generator.
///
/// Keys and queries are zero-mean Gaussians with a per-channel spread drawn
/// from `[0.5, 1.5)`. `n_outlier_scale` key channels get their spread
/// multiplied by a factor in `[8, 12)`, and `n_outlier_query` query channels
/// likewise. Exactly `overlap` channels are in both sets. Scale-outlier
/// channels outside the overlap carry small queries (spread times 0.1), so
/// large key range and large query activity are decorrelated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedSpec {
    pub dim: usize,
    pub tokens: usize,
    pub n_outlier_scale: usize,
    pub n_outlier_query: usize,
    pub overlap: usize,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self { dim: 64, tokens: 512, n_outlier_scale: 4, n_outlier_query: 4, overlap: 0 }
    }
}

impl std::str::FromStr for PlantedSpec {
    type Err = Error;

    /// Parses `D,L,ns,nq,ov`.
    fn from_str(s: &str) -> Result<Self> {
        let parts = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::invalid(format!("planted spec `{s}`: {e}")))?;
        let [dim, tokens, n_outlier_scale, n_outlier_query, overlap] = parts[..] else {
            return Err(Error::invalid(format!("planted spec `{s}` is not D,L,ns,nq,ov")));
        };
        let spec = Self { dim, tokens, n_outlier_scale, n_outlier_query, overlap };
        spec.validate()?;
        Ok(spec)
    }
}

const OUTLIER_GAIN: (f64, f64) = (8.0, 12.0);
const BASE_SPREAD: (f64, f64) = (0.5, 1.5);
const SCALE_OUTLIER_QUERY_DAMPING: f64 = 0.1;

impl PlantedSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("planted dim must be at least 1"));
        }
        if self.n_outlier_scale > self.dim || self.n_outlier_query > self.dim {
            return Err(Error::invalid("outlier counts exceed channel count"));
        }
        if self.overlap > self.n_outlier_scale.min(self.n_outlier_query) {
            return Err(Error::invalid("overlap exceeds an outlier count"));
        }
        if self.n_outlier_scale + self.n_outlier_query - self.overlap > self.dim {
            return Err(Error::invalid("outlier sets do not fit in the channel count"));
        }
        Ok(())
    }

    pub fn generate(&self, seed: u64) -> Result<PlantedInstance> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut channels: Vec<usize> = (0..self.dim).collect();
        channels.shuffle(&mut rng);
        let overlap = &channels[..self.overlap];
        let scale_only = &channels[self.overlap..self.n_outlier_scale];
        let query_only = &channels[self.n_outlier_scale..self.n_outlier_scale + self.n_outlier_query - self.overlap];

        let mut key_spread: Vec<f64> = (0..self.dim).map(|_| rng.random_range(BASE_SPREAD.0..BASE_SPREAD.1)).collect();
        let mut query_spread: Vec<f64> = (0..self.dim).map(|_| rng.random_range(BASE_SPREAD.0..BASE_SPREAD.1)).collect();
        for &d in overlap.iter().chain(scale_only) {
            key_spread[d] *= rng.random_range(OUTLIER_GAIN.0..OUTLIER_GAIN.1);
        }
        for &d in overlap.iter().chain(query_only) {
            query_spread[d] *= rng.random_range(OUTLIER_GAIN.0..OUTLIER_GAIN.1);
        }
        for &d in scale_only {
            query_spread[d] *= SCALE_OUTLIER_QUERY_DAMPING;
        }

        let mut gaussian = |spread: &[f64]| {
            Array2::from_shape_fn((self.tokens, self.dim), |(_, d)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * spread[d]
            })
        };
        let keys = gaussian(&key_spread);
        let queries = gaussian(&query_spread);
        let values = gaussian(&vec![1.0; self.dim]);

        let mut scale_channels: Vec<usize> = overlap.iter().chain(scale_only).copied().collect();
        let mut query_channels: Vec<usize> = overlap.iter().chain(query_only).copied().collect();
        scale_channels.sort_unstable();
        query_channels.sort_unstable();
        Ok(PlantedInstance { instance: AttentionInstance { queries, keys, values }, scale_channels, query_channels })
    }
}

/// A generated instance plus the channels that were planted.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedInstance {
    pub instance: AttentionInstance,
    pub scale_channels: Vec<usize>,
    pub query_channels: Vec<usize>,
}

pub fn generate_planted_instance(spec: &PlantedSpec, seed: u64) -> Result<AttentionInstance> {
    Ok(spec.generate(seed)?.instance)
}

/// Token stream driving a decode simulation.
#[derive(Debug, Clone, PartialEq)]
pub enum DecodeSource {
    /// A fresh planted instance per seed.
    Planted(PlantedSpec),
    /// Rows replayed from a dump; the seed is ignored.
    Trace(AttentionInstance),
}

impl DecodeSource {
    pub fn instance(&self, seed: u64) -> Result<AttentionInstance> {
        match self {
            DecodeSource::Planted(spec) => generate_planted_instance(spec, seed),
            DecodeSource::Trace(inst) => Ok(inst.clone()),
        }
    }

    pub fn tokens(&self) -> usize {
        match self {
            DecodeSource::Planted(spec) => spec.tokens,
            DecodeSource::Trace(inst) => inst.keys.nrows().min(inst.queries.nrows()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub policy_label: String,
    pub seed: u64,
    pub steps: usize,
    /// Mean stored bits per key element at the end of the run.
    pub effective_bits: f64,
    pub e_attn_frobenius: f64,
    pub e_attn_max: f64,
    pub output_error_frobenius: f64,
}

/// Runs `steps` autoregressive decode steps under `policy`.
pub fn decode_simulation(
    source: &DecodeSource,
    config: &CacheConfig,
    policy: AllocationPolicy,
    steps: usize,
    seed: u64,
) -> Result<FidelityReport> {
    if steps == 0 {
        return Err(Error::invalid("decode simulation needs at least one step"));
    }
    if config.heads_per_kv_group != 1 {
        return Err(Error::invalid("decode simulation drives a single query head per KV head"));
    }
    let mut inst = source.instance(seed)?;
    inst.validate()?;
    if inst.keys.nrows() < steps || inst.queries.nrows() < steps {
        return Err(Error::invalid(format!(
            "source has {} tokens, {steps} steps requested",
            inst.keys.nrows().min(inst.queries.nrows())
        )));
    }
    let mut config = *config;
    if let Some(theta) = config.rope_theta.take() {
        let positions: Vec<usize> = (0..inst.keys.nrows()).collect();
        inst.keys = apply_rope(inst.keys.view(), &positions, theta)?;
        let qpos: Vec<usize> = (0..inst.queries.nrows()).collect();
        inst.queries = apply_rope(inst.queries.view(), &qpos, theta)?;
    }

    let (dim, vdim) = (inst.head_dim(), inst.values.ncols());
    let scale = inst.scale();
    let mut cache = MixedKvCache::new(config, dim, vdim, policy)?;
    let mut k_tilde: Vec<f64> = Vec::with_capacity(steps * dim);
    let mut v_tilde: Vec<f64> = Vec::with_capacity(steps * vdim);
    let mut synced_blocks = 0;

    let mut e_sq = 0.0;
    let mut e_max: f64 = 0.0;
    let mut out_sq = 0.0;
    let mut exact_logits = Vec::with_capacity(steps);
    let mut approx_logits = Vec::with_capacity(steps);
    let mut o_exact = vec![0.0; vdim];
    let mut o_approx = vec![0.0; vdim];

    for t in 0..steps {
        let q = inst.queries.row(t);
        let q = q.as_slice().expect("standard layout");
        let k = inst.keys.row(t);
        let v = inst.values.row(t);
        cache.append_kv(k.as_slice().expect("standard layout"), v.as_slice().expect("standard layout"), q, t)?;
        k_tilde.extend(k.iter());
        v_tilde.extend(v.iter());
        while synced_blocks < cache.keys().blocks().len() {
            let block = &cache.keys().blocks()[synced_blocks];
            let (start, len) = (block.first_token, block.len);
            let kb = cache.reconstruct_block_keys(synced_blocks).expect("block exists");
            let vb = cache.reconstruct_block_values(synced_blocks).expect("block exists");
            k_tilde[start * dim..(start + len) * dim].copy_from_slice(kb.as_slice().expect("standard layout"));
            v_tilde[start * vdim..(start + len) * vdim].copy_from_slice(vb.as_slice().expect("standard layout"));
            synced_blocks += 1;
        }

        exact_logits.clear();
        approx_logits.clear();
        for j in 0..=t {
            let kj = inst.keys.row(j);
            let kt = &k_tilde[j * dim..(j + 1) * dim];
            let (mut exact, mut err) = (0.0, 0.0);
            for ((qd, kd), ktd) in q.iter().zip(kj.iter()).zip(kt) {
                exact += qd * kd;
                err += qd * (kd - ktd);
            }
            e_sq += err * err;
            e_max = e_max.max(err.abs());
            exact_logits.push(exact * scale);
            approx_logits.push((exact - err) * scale);
        }
        softmax_in_place(&mut exact_logits);
        softmax_in_place(&mut approx_logits);
        o_exact.iter_mut().for_each(|o| *o = 0.0);
        o_approx.iter_mut().for_each(|o| *o = 0.0);
        for j in 0..=t {
            let vj = inst.values.row(j);
            let vt = &v_tilde[j * vdim..(j + 1) * vdim];
            for c in 0..vdim {
                o_exact[c] += exact_logits[j] * vj[c];
                o_approx[c] += approx_logits[j] * vt[c];
            }
        }
        out_sq += o_exact.iter().zip(&o_approx).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }

    Ok(FidelityReport {
        policy_label: policy.label(),
        seed,
        steps,
        effective_bits: cache.key_storage_stats().effective_bits(),
        e_attn_frobenius: e_sq.sqrt(),
        e_attn_max: e_max,
        output_error_frobenius: out_sq.sqrt(),
    })
}
