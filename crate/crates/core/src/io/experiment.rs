//! Experiment runner and report files.
//!
//! `run` writes `report.csv` and `report.json` (one record per policy and
//! seed) plus `timing.csv`. `search` writes `evaluations.csv`,
//! `frontier.csv` and `search.json`. `stats` writes `channel_stats.csv` and
//! `stats_summary.json`. Everything except `timing.csv` is a deterministic
//! function of the config.
//!
//! The fidelity columns measure the pre-softmax key error `||E_attn||_F`
//! on synthetic or dumped tensors. They are a proxy and say nothing direct
//! about downstream task accuracy.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{decode_simulation, AttentionInstance, FidelityReport};
use crate::error::{Error, Result};
use crate::io::config::{ExperimentConfig, Task};
use crate::salience::{ChannelSalience, PrecisionTier, QueryAccumulator, Thresholds};
use crate::search::{pareto_search, select_under_budget, ParetoPoint, SearchSpec};
use crate::stats::pearson;

pub const PROXY_NOTE: &str =
    "fidelity = ||Q (K - K~)^T||_F on synthetic or dumped tensors; a proxy, not a task-accuracy measurement";

pub const REPORT_HEADER: [&str; 7] =
    ["policy_label", "seed", "b_eff", "e_attn_frobenius", "e_attn_max", "output_error", "steps"];
pub const TIMING_HEADER: [&str; 3] = ["policy_label", "seed", "wall_time_s"];
pub const POINT_HEADER: [&str; 4] = ["x_b_eff", "y_fidelity", "tau_bf16", "tau_uint4"];
pub const CHANNEL_STATS_HEADER: [&str; 5] = ["channel", "importance", "sensitivity", "salience", "tier"];

/// Paired outcome of two policies over the same seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub candidate: String,
    pub baseline: String,
    pub pairs: usize,
    /// Seeds where the candidate's `||E_attn||_F` is strictly lower.
    pub wins: usize,
    pub win_fraction: f64,
    pub candidate_median: f64,
    pub baseline_median: f64,
    pub median_ratio: f64,
    /// Largest per-seed `|b_eff(candidate) - b_eff(baseline)|`.
    pub max_b_eff_gap: f64,
}

impl Comparison {
    pub fn from_reports(candidate: &[FidelityReport], baseline: &[FidelityReport]) -> Result<Self> {
        if candidate.is_empty() || candidate.len() != baseline.len() {
            return Err(Error::invalid("comparison needs two equal-length, nonempty report sets"));
        }
        if candidate.iter().zip(baseline).any(|(a, b)| a.seed != b.seed) {
            return Err(Error::invalid("comparison reports are not paired by seed"));
        }
        let wins = candidate.iter().zip(baseline).filter(|(a, b)| a.e_attn_frobenius < b.e_attn_frobenius).count();
        let max_b_eff_gap = candidate
            .iter()
            .zip(baseline)
            .map(|(a, b)| (a.effective_bits - b.effective_bits).abs())
            .fold(0.0, f64::max);
        let med = |r: &[FidelityReport]| median(r.iter().map(|x| x.e_attn_frobenius).collect());
        let (cm, bm) = (med(candidate), med(baseline));
        Ok(Self {
            candidate: candidate[0].policy_label.clone(),
            baseline: baseline[0].policy_label.clone(),
            pairs: candidate.len(),
            wins,
            win_fraction: wins as f64 / candidate.len() as f64,
            candidate_median: cm,
            baseline_median: bm,
            median_ratio: cm / bm,
            max_b_eff_gap,
        })
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub note: String,
    pub records: Vec<FidelityReport>,
    pub comparison: Option<Comparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub note: String,
    pub evaluations: Vec<ParetoPoint>,
    pub frontier: Vec<ParetoPoint>,
    pub budget: Option<f64>,
    pub selected: Option<ParetoPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ExperimentOutcome {
    Run(RunReport),
    Search(SearchReport),
}

/// Runs the configured task and writes its report files under `config.out`.
///
/// A search whose budget no frontier point meets still writes its files,
/// then returns [`Error::BudgetInfeasible`].
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let source = config.source.load()?;
    let tokens = source.tokens();
    let steps = config.steps.unwrap_or(tokens);
    if steps == 0 || steps > tokens {
        return Err(Error::InvalidConfig(format!("{steps} steps requested from {tokens} tokens")));
    }
    let seeds = config.seed_list();
    fs::create_dir_all(&config.out)?;

    match &config.task {
        Task::Run(run) => {
            let dim = source.instance(seeds[0])?.head_dim();
            let policies = config.policies_for(run, Some(dim))?;
            let mut records = Vec::new();
            let mut timings = Vec::new();
            for policy in &policies {
                let results = seeds
                    .par_iter()
                    .map(|&seed| {
                        let start = Instant::now();
                        let r = decode_simulation(&source, &config.cache, *policy, steps, seed)?;
                        Ok((r, start.elapsed().as_secs_f64()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                for (r, t) in results {
                    timings.push((r.policy_label.clone(), r.seed, t));
                    records.push(r);
                }
            }
            let comparison = match policies.len() {
                2 => {
                    let (a, b) = records.split_at(seeds.len());
                    Some(Comparison::from_reports(a, b)?)
                }
                _ => None,
            };
            let report = RunReport { note: PROXY_NOTE.into(), records, comparison };
            write_run_report(&config.out, &report)?;
            write_timing(&config.out, &timings)?;
            Ok(ExperimentOutcome::Run(report))
        }
        Task::Search(search) => {
            let spec = SearchSpec {
                range: search.range,
                grid_points: search.grid,
                seeds,
                source,
                cache: config.cache,
                steps,
                max_b_eff: search.budget,
                include_endpoints: true,
            };
            let outcome = pareto_search(&spec)?;
            let selected = match search.budget {
                Some(b) => select_under_budget(&outcome.frontier, b).ok(),
                None => None,
            };
            let report = SearchReport {
                note: PROXY_NOTE.into(),
                evaluations: outcome.evaluations,
                frontier: outcome.frontier,
                budget: search.budget,
                selected,
            };
            write_search_report(&config.out, &report)?;
            match (search.budget, selected) {
                (Some(max_b_eff), None) => Err(Error::BudgetInfeasible { max_b_eff }),
                _ => Ok(ExperimentOutcome::Search(report)),
            }
        }
    }
}

pub fn write_run_report(dir: &Path, report: &RunReport) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("report.csv"))?;
    w.write_record(REPORT_HEADER)?;
    for r in &report.records {
        w.write_record([
            r.policy_label.clone(),
            r.seed.to_string(),
            r.effective_bits.to_string(),
            r.e_attn_frobenius.to_string(),
            r.e_attn_max.to_string(),
            r.output_error_frobenius.to_string(),
            r.steps.to_string(),
        ])?;
    }
    w.flush()?;
    write_json(&dir.join("report.json"), report)
}

fn write_timing(dir: &Path, rows: &[(String, u64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("timing.csv"))?;
    w.write_record(TIMING_HEADER)?;
    for (label, seed, t) in rows {
        w.write_record([label.clone(), seed.to_string(), format!("{t:.6}")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_search_report(dir: &Path, report: &SearchReport) -> Result<()> {
    write_points(&dir.join("evaluations.csv"), &report.evaluations)?;
    write_points(&dir.join("frontier.csv"), &report.frontier)?;
    write_json(&dir.join("search.json"), report)
}

fn write_points(path: &Path, points: &[ParetoPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(POINT_HEADER)?;
    for p in points {
        w.write_record([p.b_eff.to_string(), p.fidelity.to_string(), p.tau_bf16.to_string(), p.tau_uint4.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStatsRow {
    pub channel: usize,
    pub importance: f64,
    pub sensitivity: f64,
    pub salience: f64,
    pub tier: PrecisionTier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStatsSummary {
    pub channels: usize,
    pub tokens: usize,
    /// NaN (serialized as null) when either score is constant.
    pub pearson_importance_sensitivity: f64,
    pub pearson_salience_sensitivity: f64,
    pub tier_counts: [usize; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub rows: Vec<ChannelStatsRow>,
    pub summary: ChannelStatsSummary,
}

/// Scores every key channel over the whole instance: importance from all
/// queries, sensitivity from all keys at 2 bits.
pub fn emit_channel_stats(inst: &AttentionInstance, thresholds: Thresholds) -> Result<ChannelStats> {
    inst.validate()?;
    let mut acc = QueryAccumulator::new(inst.head_dim());
    acc.accumulate(inst.queries.view())?;
    let scores = ChannelSalience::compute(&acc, inst.keys.view())?;
    let rows: Vec<ChannelStatsRow> = (0..scores.dim())
        .map(|d| ChannelStatsRow {
            channel: d,
            importance: scores.importance[d],
            sensitivity: scores.sensitivity[d],
            salience: scores.salience[d],
            tier: thresholds.tier(scores.salience[d]),
        })
        .collect();
    let mut tier_counts = [0; 3];
    for r in &rows {
        tier_counts[match r.tier {
            PrecisionTier::FullPrecision => 0,
            PrecisionTier::Mid4Bit => 1,
            PrecisionTier::Low2Bit => 2,
        }] += 1;
    }
    let summary = ChannelStatsSummary {
        channels: rows.len(),
        tokens: inst.keys.nrows(),
        pearson_importance_sensitivity: pearson(&scores.importance, &scores.sensitivity),
        pearson_salience_sensitivity: pearson(&scores.salience, &scores.sensitivity),
        tier_counts,
    };
    Ok(ChannelStats { rows, summary })
}

/// Writes `channel_stats.csv` and `stats_summary.json` under `dir`.
pub fn write_channel_stats(dir: &Path, stats: &ChannelStats) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("channel_stats.csv"))?;
    w.write_record(CHANNEL_STATS_HEADER)?;
    for r in &stats.rows {
        w.write_record([
            r.channel.to_string(),
            r.importance.to_string(),
            r.sensitivity.to_string(),
            r.salience.to_string(),
            r.tier.label().to_string(),
        ])?;
    }
    w.flush()?;
    write_json(&dir.join("stats_summary.json"), &stats.summary)
}
