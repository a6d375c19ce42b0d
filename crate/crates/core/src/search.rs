//! Grid search over `(tau_bf16, tau_uint4)` with a two-objective Pareto
//! frontier: effective bit width (lower is better) against mean
//! `||E_attn||_F` over a seeded instance set (lower is better).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{decode_simulation, DecodeSource};
use crate::baselines::AllocationPolicy;
use crate::cache::CacheConfig;
use crate::error::{Error, Result};
use crate::salience::Thresholds;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub tau_bf16: f64,
    pub tau_uint4: f64,
    pub b_eff: f64,
    /// Mean `||E_attn||_F`; a proxy, lower is better.
    pub fidelity: f64,
}

impl ParetoPoint {
    /// `other` is no worse on both objectives and strictly better on one.
    pub fn is_dominated_by(&self, other: &ParetoPoint) -> bool {
        other.fidelity <= self.fidelity
            && other.b_eff <= self.b_eff
            && (other.fidelity < self.fidelity || other.b_eff < self.b_eff)
    }

    fn sort_key(a: &Self, b: &Self) -> std::cmp::Ordering {
        a.b_eff
            .total_cmp(&b.b_eff)
            .then(a.fidelity.total_cmp(&b.fidelity))
            .then(a.tau_bf16.total_cmp(&b.tau_bf16))
            .then(a.tau_uint4.total_cmp(&b.tau_uint4))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpec {
    /// Closed interval searched for both thresholds.
    pub range: (f64, f64),
    pub grid_points: usize,
    pub seeds: Vec<u64>,
    pub source: DecodeSource,
    pub cache: CacheConfig,
    pub steps: usize,
    pub max_b_eff: Option<f64>,
    /// Also evaluate the all-full-precision and all-2-bit corners.
    pub include_endpoints: bool,
}

impl SearchSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.range;
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::invalid(format!("search range [{lo}, {hi}] is empty or non-finite")));
        }
        if self.grid_points == 0 {
            return Err(Error::invalid("search grid is empty"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("search needs at least one seed"));
        }
        Ok(())
    }

    /// Grid pairs with `tau_uint4 <= tau_bf16`, plus the corners if requested.
    pub fn candidates(&self) -> Vec<Thresholds> {
        let (lo, hi) = self.range;
        let n = self.grid_points;
        let axis: Vec<f64> = (0..n)
            .map(|i| match i {
                0 => lo,
                i if i == n - 1 => hi,
                i => lo + (hi - lo) * i as f64 / (n - 1) as f64,
            })
            .collect();
        let mut out = Vec::new();
        if self.include_endpoints {
            out.push(Thresholds::all_full_precision());
            out.push(Thresholds::all_low());
        }
        for &bf16 in &axis {
            for &uint4 in axis.iter().filter(|&&u| u <= bf16) {
                out.push(Thresholds { bf16, uint4 });
            }
        }
        out
    }
}

/// Mean effective bit width and mean `||E_attn||_F` of the salience policy
/// at these thresholds, over every seed.
pub fn evaluate_candidate(
    tau_bf16: f64,
    tau_uint4: f64,
    source: &DecodeSource,
    seeds: &[u64],
    config: &CacheConfig,
    steps: usize,
) -> Result<ParetoPoint> {
    let thresholds = Thresholds::new(tau_bf16, tau_uint4)?;
    if seeds.is_empty() {
        return Err(Error::invalid("candidate evaluation needs at least one seed"));
    }
    let config = CacheConfig { thresholds, ..*config };
    let (mut bits, mut fid) = (0.0, 0.0);
    for &seed in seeds {
        let r = decode_simulation(source, &config, AllocationPolicy::salience(), steps, seed)?;
        bits += r.effective_bits;
        fid += r.e_attn_frobenius;
    }
    let n = seeds.len() as f64;
    Ok(ParetoPoint { tau_bf16, tau_uint4, b_eff: bits / n, fidelity: fid / n })
}

/// Nondominated subset, sorted by ascending `b_eff`. Exact duplicates
/// collapse to one entry, so the result does not depend on evaluation order
/// or repeated grid points.
pub fn pareto_frontier(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut sorted = points.to_vec();
    sorted.sort_by(ParetoPoint::sort_key);
    sorted.dedup();
    // After sorting by (b_eff, fidelity), a point is dominated iff some
    // earlier point has strictly lower fidelity, or equal fidelity at a
    // strictly lower b_eff.
    let mut frontier: Vec<ParetoPoint> = Vec::new();
    let mut best: Option<ParetoPoint> = None;
    for p in sorted {
        let keep = match best {
            None => true,
            Some(b) => !p.is_dominated_by(&b),
        };
        if keep {
            if best.is_none_or(|b| p.fidelity < b.fidelity) {
                best = Some(p);
            }
            frontier.push(p);
        }
    }
    frontier
}

/// Lowest-fidelity-error point with `b_eff <= max_b_eff`.
pub fn select_under_budget(frontier: &[ParetoPoint], max_b_eff: f64) -> Result<ParetoPoint> {
    if frontier.is_empty() {
        return Err(Error::invalid("frontier is empty"));
    }
    frontier
        .iter()
        .filter(|p| p.b_eff <= max_b_eff)
        .min_by(|a, b| a.fidelity.total_cmp(&b.fidelity).then(a.b_eff.total_cmp(&b.b_eff)))
        .copied()
        .ok_or(Error::BudgetInfeasible { max_b_eff })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub evaluations: Vec<ParetoPoint>,
    pub frontier: Vec<ParetoPoint>,
}

/// Evaluates every candidate (in parallel) and extracts the frontier.
pub fn pareto_search(spec: &SearchSpec) -> Result<SearchOutcome> {
    spec.validate()?;
    let evaluations = spec
        .candidates()
        .par_iter()
        .map(|t| evaluate_candidate(t.bf16, t.uint4, &spec.source, &spec.seeds, &spec.cache, spec.steps))
        .collect::<Result<Vec<_>>>()?;
    let frontier = pareto_frontier(&evaluations);
    Ok(SearchOutcome { evaluations, frontier })
}
