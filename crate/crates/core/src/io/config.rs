//! Experiment configuration, loadable from TOML.
//!
//! ```toml
//! seeds = 200
//! seed_base = 0
//! out = "out/run"
//!
//! [cache]
//! group_size = 32
//! residual_len = 128
//! sink_len = 32
//! thresholds = { bf16 = 1.44, uint4 = 0.79 }
//!
//! [source.planted]
//! dim = 64
//! tokens = 512
//!
//! [task.run]
//! policy = "salience"
//! compare = "error-only"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{DecodeSource, PlantedSpec};
use crate::baselines::{AllocationPolicy, TierBudget};
use crate::cache::CacheConfig;
use crate::error::{Error, Result};
use crate::io::dump::read_dump;

pub const DEFAULT_SEARCH_RANGE: (f64, f64) = (0.1, 2.0);
pub const DEFAULT_SEARCH_GRID: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    Planted(PlantedSpec),
    /// A `MKVQ` file; `section` picks a `{prefix}.q/.k/.v` triple.
    Dump { path: PathBuf, section: Option<String> },
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig::Planted(PlantedSpec::default())
    }
}

impl SourceConfig {
    pub fn load(&self) -> Result<DecodeSource> {
        match self {
            SourceConfig::Planted(spec) => {
                spec.validate().map_err(|e| Error::InvalidConfig(e.to_string()))?;
                Ok(DecodeSource::Planted(*spec))
            }
            SourceConfig::Dump { path, section } => {
                Ok(DecodeSource::Trace(read_dump(path)?.attention_instance(section.as_deref())?))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunTask {
    pub policy: String,
    /// A second policy evaluated on the same seeds.
    pub compare: Option<String>,
    /// Shared top-k budget for threshold-based policies.
    pub tier_budget: Option<TierBudget>,
}

impl Default for RunTask {
    fn default() -> Self {
        Self { policy: "salience".into(), compare: None, tier_budget: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchTask {
    pub grid: usize,
    pub range: (f64, f64),
    /// Maximum effective bit width for the selected point.
    pub budget: Option<f64>,
}

impl Default for SearchTask {
    fn default() -> Self {
        Self { grid: DEFAULT_SEARCH_GRID, range: DEFAULT_SEARCH_RANGE, budget: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Task {
    Run(RunTask),
    Search(SearchTask),
}

impl Default for Task {
    fn default() -> Self {
        Task::Run(RunTask::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub cache: CacheConfig,
    pub source: SourceConfig,
    /// Number of seeds, `seed_base..seed_base + seeds`.
    pub seeds: usize,
    pub seed_base: u64,
    /// Decode steps per seed; defaults to every token of the source.
    pub steps: Option<usize>,
    pub out: PathBuf,
    pub task: Task,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            cache: CacheConfig::default(),
            source: SourceConfig::default(),
            seeds: 1,
            seed_base: 0,
            steps: None,
            out: PathBuf::from("mixkvq-out"),
            task: Task::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::InvalidConfig(e.message().to_owned()))
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed_base + i).collect()
    }

    /// Checks everything that does not need the dump file itself.
    pub fn validate(&self) -> Result<()> {
        self.cache.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.seeds == 0 {
            return bad("seeds must be at least 1".into());
        }
        if self.cache.heads_per_kv_group != 1 {
            return bad("experiments simulate one query head per KV head".into());
        }
        if let SourceConfig::Planted(spec) = &self.source {
            spec.validate().map_err(|e| Error::InvalidConfig(e.to_string()))?;
            if let Some(steps) = self.steps {
                if steps > spec.tokens {
                    return bad(format!("{steps} steps requested from {} tokens", spec.tokens));
                }
            }
        }
        if self.steps == Some(0) {
            return bad("steps must be at least 1".into());
        }
        match &self.task {
            Task::Run(run) => {
                self.policies_for(run, None)?;
            }
            Task::Search(search) => {
                let (lo, hi) = search.range;
                if !lo.is_finite() || !hi.is_finite() || lo > hi {
                    return bad(format!("search range [{lo}, {hi}] is empty or non-finite"));
                }
                if search.grid == 0 {
                    return bad("search grid must be at least 1".into());
                }
                if search.budget.is_some_and(|b| b.is_nan()) {
                    return bad("search budget is NaN".into());
                }
            }
        }
        Ok(())
    }

    /// Parsed policies for a run task. With `dim` known, budgets are
    /// checked against it and a comparison without an explicit budget gets
    /// [`default_compare_budget`].
    pub fn policies_for(&self, run: &RunTask, dim: Option<usize>) -> Result<Vec<AllocationPolicy>> {
        let parse = |s: &str| s.parse::<AllocationPolicy>().map_err(|e| Error::InvalidConfig(e.to_string()));
        let mut policies = vec![parse(&run.policy)?];
        if let Some(c) = &run.compare {
            policies.push(parse(c)?);
        }
        let budget = match (run.tier_budget, &run.compare, dim) {
            (Some(b), _, _) => Some(b),
            (None, Some(_), Some(d)) => Some(default_compare_budget(d)),
            _ => None,
        };
        if let Some(b) = budget {
            for p in &mut policies {
                p.budget = Some(b);
            }
        }
        if let Some(d) = dim {
            for p in &policies {
                p.validate(d).map_err(|e| Error::InvalidConfig(e.to_string()))?;
            }
        }
        Ok(policies)
    }
}

/// Matched budget used when comparing policies: 5% of channels at full
/// precision and 15% at 4 bits, at least one each.
pub fn default_compare_budget(dim: usize) -> TierBudget {
    let pick = |frac: f64| ((dim as f64 * frac).round() as usize).max(1);
    let full = pick(0.05).min(dim);
    let mid = pick(0.15).min(dim - full);
    TierBudget::new(full, mid)
}
