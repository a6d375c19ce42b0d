//! `mixkvq run | search | stats`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid arguments or config,
//! 3 missing dump file, 4 search budget not attainable. Failures print one
//! line to stderr: `error: <kind>: <message>`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mixkvq::io::{
    emit_channel_stats, read_dump, run_experiment, write_channel_stats, ExperimentConfig, ExperimentOutcome,
    RunTask, SearchTask, SourceConfig, Task,
};
use mixkvq::{BitWidth, Error, PlantedSpec, Result, TierBudget};

#[derive(Parser)]
#[command(name = "mixkvq", version, about = "Query-aware mixed-precision KV-cache quantization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode simulation for one policy, optionally paired with a second.
    Run(RunArgs),
    /// Grid search over the two salience thresholds.
    Search(SearchArgs),
    /// Per-channel importance / sensitivity / salience report.
    Stats(StatsArgs),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Salience thresholds as TAU_BF16,TAU_UINT4.
    #[arg(long, value_parser = parse_pair)]
    thresholds: Option<(f64, f64)>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    residual_len: Option<usize>,
    #[arg(long)]
    sink_len: Option<usize>,
    /// 2, 4 or 16.
    #[arg(long)]
    value_bits: Option<u8>,
    /// Number of seeds.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    seed_base: Option<u64>,
    /// Decode steps per seed (default: all tokens).
    #[arg(long)]
    steps: Option<usize>,
    /// Tensor dump to replay instead of a planted instance.
    #[arg(long, conflicts_with = "planted")]
    dump: Option<PathBuf>,
    /// Section prefix inside the dump, e.g. layer0.head0.
    #[arg(long, requires = "dump")]
    section: Option<String>,
    /// Planted instance as D,L,ns,nq,ov.
    #[arg(long)]
    planted: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// salience, error-only, full-precision, fixed-2 or fixed-4.
    #[arg(long)]
    policy: Option<String>,
    /// Second policy run on the same seeds.
    #[arg(long)]
    compare: Option<String>,
    /// Top-k budget FULL,MID shared by threshold-based policies.
    #[arg(long)]
    tier_budget: Option<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SearchArgs {
    /// Grid points per threshold axis.
    #[arg(long)]
    grid: Option<usize>,
    /// Threshold range LO,HI.
    #[arg(long, value_parser = parse_pair)]
    range: Option<(f64, f64)>,
    /// Maximum effective bit width for the selected point.
    #[arg(long)]
    budget: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long, conflicts_with = "planted")]
    dump: Option<PathBuf>,
    #[arg(long, requires = "dump")]
    section: Option<String>,
    /// Planted instance as D,L,ns,nq,ov.
    #[arg(long)]
    planted: Option<String>,
    /// Seed for the planted instance.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_pair)]
    thresholds: Option<(f64, f64)>,
    #[arg(long, default_value = "mixkvq-out")]
    out: PathBuf,
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("`{s}` is not A,B"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(a)?, p(b)?))
}

fn cfg_err(e: Error) -> Error {
    match e {
        Error::InvalidInput(m) => Error::InvalidConfig(m),
        other => other,
    }
}

impl Common {
    fn build(&self, task: Task) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_toml_file(path)?,
            None => ExperimentConfig::default(),
        };
        let file_task = std::mem::replace(&mut cfg.task, task);
        // Keep task settings from the file when the subcommand matches.
        match (&mut cfg.task, file_task) {
            (Task::Run(t), Task::Run(f)) if self.config.is_some() => *t = f,
            (Task::Search(t), Task::Search(f)) if self.config.is_some() => *t = f,
            _ => {}
        }
        if let Some((bf16, uint4)) = self.thresholds {
            cfg.cache.thresholds = mixkvq::Thresholds::new(bf16, uint4).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        }
        if let Some(v) = self.group_size {
            cfg.cache.group_size = v;
        }
        if let Some(v) = self.residual_len {
            cfg.cache.residual_len = v;
        }
        if let Some(v) = self.sink_len {
            cfg.cache.sink_len = v;
        }
        if let Some(v) = self.value_bits {
            cfg.cache.value_bits = BitWidth::try_from(v).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        }
        if let Some(v) = self.seeds {
            cfg.seeds = v;
        }
        if let Some(v) = self.seed_base {
            cfg.seed_base = v;
        }
        if self.steps.is_some() {
            cfg.steps = self.steps;
        }
        if let Some(path) = &self.dump {
            cfg.source = SourceConfig::Dump { path: path.clone(), section: self.section.clone() };
        }
        if let Some(p) = &self.planted {
            cfg.source = SourceConfig::Planted(p.parse::<PlantedSpec>().map_err(cfg_err)?);
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let mut cfg = args.common.build(Task::Run(RunTask::default()))?;
            if let Task::Run(t) = &mut cfg.task {
                if let Some(p) = args.policy {
                    t.policy = p;
                }
                if args.compare.is_some() {
                    t.compare = args.compare;
                }
                if let Some(b) = args.tier_budget {
                    t.tier_budget = Some(b.parse::<TierBudget>().map_err(cfg_err)?);
                }
            }
            report(run_experiment(&cfg)?, &cfg);
        }
        Command::Search(args) => {
            let mut cfg = args.common.build(Task::Search(SearchTask::default()))?;
            if let Task::Search(t) = &mut cfg.task {
                if let Some(g) = args.grid {
                    t.grid = g;
                }
                if let Some(r) = args.range {
                    t.range = r;
                }
                if args.budget.is_some() {
                    t.budget = args.budget;
                }
            }
            report(run_experiment(&cfg)?, &cfg);
        }
        Command::Stats(args) => {
            let inst = match (&args.dump, &args.planted) {
                (Some(path), _) => read_dump(path)?.attention_instance(args.section.as_deref())?,
                (None, planted) => {
                    let spec = match planted {
                        Some(p) => p.parse::<PlantedSpec>().map_err(cfg_err)?,
                        None => PlantedSpec::default(),
                    };
                    spec.generate(args.seed)?.instance
                }
            };
            let thresholds = match args.thresholds {
                Some((a, b)) => mixkvq::Thresholds::new(a, b).map_err(|e| Error::InvalidConfig(e.to_string()))?,
                None => mixkvq::Thresholds::default(),
            };
            let stats = emit_channel_stats(&inst, thresholds)?;
            write_channel_stats(&args.out, &stats)?;
            let s = &stats.summary;
            println!(
                "channels={} tokens={} pearson(I,S)={:.4} pearson(A,S)={:.4} tiers(bf16/uint4/uint2)={}/{}/{}",
                s.channels,
                s.tokens,
                s.pearson_importance_sensitivity,
                s.pearson_salience_sensitivity,
                s.tier_counts[0],
                s.tier_counts[1],
                s.tier_counts[2]
            );
        }
    }
    Ok(())
}

fn report(outcome: ExperimentOutcome, cfg: &ExperimentConfig) {
    match outcome {
        ExperimentOutcome::Run(r) => {
            let mut labels: Vec<&str> = r.records.iter().map(|x| x.policy_label.as_str()).collect();
            labels.dedup();
            for label in labels {
                let rows: Vec<_> = r.records.iter().filter(|x| x.policy_label == label).collect();
                let n = rows.len() as f64;
                let mean = |f: fn(&mixkvq::FidelityReport) -> f64| rows.iter().map(|x| f(x)).sum::<f64>() / n;
                println!(
                    "{label}: seeds={} b_eff={:.4} e_attn_fro={:.6} output_err={:.6e}",
                    rows.len(),
                    mean(|x| x.effective_bits),
                    mean(|x| x.e_attn_frobenius),
                    mean(|x| x.output_error_frobenius)
                );
            }
            if let Some(c) = r.comparison {
                println!(
                    "{} beats {} on {}/{} seeds; median ratio {:.4}; max b_eff gap {:.4}",
                    c.candidate, c.baseline, c.wins, c.pairs, c.median_ratio, c.max_b_eff_gap
                );
            }
        }
        ExperimentOutcome::Search(s) => {
            println!("evaluated {} candidates, {} on the frontier", s.evaluations.len(), s.frontier.len());
            if let Some(p) = s.selected {
                println!(
                    "selected tau_bf16={} tau_uint4={} b_eff={:.4} fidelity={:.6}",
                    p.tau_bf16, p.tau_uint4, p.b_eff, p.fidelity
                );
            }
        }
    }
    println!("reports written to {}", cfg.out.display());
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) | Error::InvalidThresholds { .. } => 2,
        Error::MissingDump(_) => 3,
        Error::BudgetInfeasible { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: invalid-args: {line}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}
