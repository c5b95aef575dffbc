//! Operator entry point: run scenarios, parameter sweeps, and property
//! check suites from TOML configs.
//!
//! Exit codes: 0 on success, 1 when a property or oracle check fails,
//! 2 on usage or configuration errors. Every flag can also be supplied via
//! an `ORTHRUS_`-prefixed environment variable.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use orthrus::execution::OrderingMode;
use orthrus::sim::config::ScenarioConfig;
use orthrus::sim::workload::{self, Workload};
use orthrus::sim::{presets, run_scenario, run_with_workload, RunResult, SimError};

#[derive(Parser)]
#[command(name = "orthrus", version, about = "Hybrid-ordering Multi-BFT simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute one scenario and write metrics and oracle verdicts.
    Run(RunArgs),
    /// Run a cross-product of scenario variations and aggregate results.
    Sweep(SweepArgs),
    /// Run the seeded property-check suites.
    Check(CheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Orthrus,
    GlobalAll,
}

impl From<ModeArg> for OrderingMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Orthrus => OrderingMode::Orthrus,
            ModeArg::GlobalAll => OrderingMode::GlobalAll,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Scenario configuration file.
    #[arg(long, env = "ORTHRUS_CONFIG")]
    config: PathBuf,
    #[arg(long, default_value_t = 0, env = "ORTHRUS_SEED")]
    seed: u64,
    /// Output directory for metrics, verdicts, and the resolved config.
    #[arg(long, env = "ORTHRUS_OUT")]
    out: Option<PathBuf>,
    /// Override the ordering mode from the config.
    #[arg(long, value_enum, env = "ORTHRUS_MODE")]
    mode: Option<ModeArg>,
    /// Write the generated workload as a trace file.
    #[arg(long, env = "ORTHRUS_TRACE_OUT")]
    trace_out: Option<PathBuf>,
    /// Replay transactions from a trace file instead of generating them.
    #[arg(long, env = "ORTHRUS_REPLAY")]
    replay: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, env = "ORTHRUS_CONFIG")]
    config: PathBuf,
    /// Parameter to vary: KEY=V1,V2,... (dotted config path or bare key).
    #[arg(long, env = "ORTHRUS_VARY")]
    vary: String,
    /// Seeds per variation; run seeds are seed+index.
    #[arg(long, default_value_t = 1, env = "ORTHRUS_SEEDS")]
    seeds: u64,
    #[arg(long, default_value_t = 0, env = "ORTHRUS_SEED")]
    seed: u64,
    #[arg(long, env = "ORTHRUS_OUT")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Suite {
    Safety,
    Liveness,
    Atomicity,
    Ordering,
    All,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, value_enum, default_value_t = Suite::All, env = "ORTHRUS_SUITE")]
    suite: Suite,
    /// Scenario count per suite.
    #[arg(long, default_value_t = 10, env = "ORTHRUS_SEEDS")]
    seeds: usize,
    /// Optional directory for per-scenario verdict files.
    #[arg(long, env = "ORTHRUS_OUT")]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::Check(args) => cmd_check(args),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn execute(cfg: &ScenarioConfig, seed: u64, replay: Option<&Path>) -> Result<RunResult, SimError> {
    match replay {
        Some(path) => {
            let genesis = workload::genesis_store(&cfg.workload, seed);
            let txs = workload::read_trace(path, &genesis)
                .map_err(|e| SimError::Io(std::io::Error::other(e.to_string())))?;
            run_with_workload(cfg, seed, Workload { genesis, txs })
        }
        None => run_scenario(cfg, seed),
    }
}

/// Assertion failures inside a run are property violations (exit 1), not
/// usage errors.
fn violation_or_usage(err: SimError) -> anyhow::Result<bool> {
    match err {
        SimError::Replica { .. } | SimError::Agreement { .. } => {
            eprintln!("property violation: {err}");
            Ok(false)
        }
        other => Err(other.into()),
    }
}

fn cmd_run(args: RunArgs) -> anyhow::Result<bool> {
    let mut cfg = ScenarioConfig::from_file(&args.config)?;
    if let Some(mode) = args.mode {
        cfg.scenario.mode = mode.into();
    }
    cfg.validate()?;
    if let Some(trace_out) = &args.trace_out {
        let generated = workload::generate(&cfg.workload, args.seed);
        workload::write_trace(trace_out, &generated.txs, &generated.genesis)
            .map_err(|e| anyhow::anyhow!("writing trace: {e}"))?;
    }
    let result = match execute(&cfg, args.seed, args.replay.as_deref()) {
        Ok(result) => result,
        Err(err) => return violation_or_usage(err),
    };
    if let Some(out) = &args.out {
        result.write_outputs(out)?;
    }
    print!("{}", result.oracle.render());
    println!(
        "run seed={} confirmed={}/{} completion={:.3}s mode={} verdict={}",
        args.seed,
        result.metrics.confirmed_count(),
        result.metrics.submitted_count(),
        result.completion as f64 / 1e9,
        result.config.scenario.mode,
        if result.passed() { "pass" } else { "FAIL" },
    );
    Ok(result.passed())
}

fn cmd_sweep(args: SweepArgs) -> anyhow::Result<bool> {
    let cfg = ScenarioConfig::from_file(&args.config)?;
    let (key, values) = args
        .vary
        .split_once('=')
        .ok_or_else(|| anyhow::anyhow!("--vary expects KEY=V1,V2,..."))?;
    let values: Vec<&str> = values.split(',').filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        anyhow::bail!("--vary needs at least one value");
    }
    std::fs::create_dir_all(&args.out)?;
    let mut rows =
        String::from("key,value,seed,mean_latency_ms,throughput_tps,confirmed,submitted,pass\n");
    let mut all_pass = true;
    let mut run_index = 0u64;
    for value in &values {
        let varied = cfg.with_override(key, value)?;
        for _ in 0..args.seeds {
            let seed = args.seed + run_index;
            run_index += 1;
            let result = match run_scenario(&varied, seed) {
                Ok(result) => result,
                Err(err) => return violation_or_usage(err),
            };
            let pass = result.passed() && result.all_confirmed;
            all_pass &= pass;
            let mean_ms = result.metrics.mean_latency(|_| true).unwrap_or(0.0) / 1e6;
            let completion_sec = (result.completion as f64 / 1e9).max(1e-9);
            let tps = result.metrics.confirmed_count() as f64 / completion_sec;
            let _ = writeln!(
                rows,
                "{},{},{},{:.6},{:.3},{},{},{}",
                key,
                value,
                seed,
                mean_ms,
                tps,
                result.metrics.confirmed_count(),
                result.metrics.submitted_count(),
                if pass { "pass" } else { "fail" }
            );
            let run_dir = args.out.join(format!("{}={}-seed{}", key, value, seed));
            result.write_outputs(&run_dir)?;
            println!(
                "sweep {}={} seed={} mean_latency={:.3}ms tps={:.1} {}",
                key,
                value,
                seed,
                mean_ms,
                tps,
                if pass { "pass" } else { "FAIL" }
            );
        }
    }
    std::fs::write(args.out.join("sweep.csv"), rows)?;
    Ok(all_pass)
}

fn cmd_check(args: CheckArgs) -> anyhow::Result<bool> {
    let mut all_pass = true;
    let suites: Vec<Suite> = match args.suite {
        Suite::All => vec![Suite::Safety, Suite::Liveness, Suite::Atomicity, Suite::Ordering],
        s => vec![s],
    };
    for suite in suites {
        let pass = match suite {
            Suite::Safety => check_safety(args.seeds, args.out.as_deref())?,
            Suite::Liveness => check_liveness(args.seeds)?,
            Suite::Atomicity => check_atomicity(args.seeds)?,
            Suite::Ordering => check_ordering(args.seeds)?,
            Suite::All => unreachable!(),
        };
        all_pass &= pass;
    }
    Ok(all_pass)
}

fn report_line(suite: &str, index: usize, seed: u64, pass: bool, detail: &str) {
    println!(
        "check suite={suite} scenario={index} seed={seed} {} {detail}",
        if pass { "pass" } else { "FAIL" }
    );
}

fn check_safety(count: usize, out: Option<&Path>) -> anyhow::Result<bool> {
    let mut all = true;
    for (index, (cfg, seed)) in presets::safety_battery(count).into_iter().enumerate() {
        let result = match run_scenario(&cfg, seed) {
            Ok(r) => r,
            Err(err) => return violation_or_usage(err),
        };
        let pass = result.passed();
        if let Some(dir) = out {
            result.oracle.write(&dir.join(format!("safety-{index}.txt")))?;
        }
        report_line("safety", index, seed, pass, &brief(&result));
        all &= pass;
    }
    Ok(all)
}

fn check_liveness(count: usize) -> anyhow::Result<bool> {
    let mut all = true;
    for (index, (cfg, seed)) in presets::safety_battery(count).into_iter().enumerate() {
        // Calibrate the horizon from the fault-free completion time.
        let mut fault_free = cfg.clone();
        fault_free.faults.clear();
        let baseline = match run_scenario(&fault_free, seed) {
            Ok(r) => r,
            Err(err) => return violation_or_usage(err),
        };
        if !baseline.all_confirmed {
            report_line("liveness", index, seed, false, "fault-free baseline incomplete");
            all = false;
            continue;
        }
        let mut bounded = cfg.clone();
        bounded.scenario.horizon_ms = (baseline.completion / 1_000_000).max(1) * 10;
        let result = match run_scenario(&bounded, seed) {
            Ok(r) => r,
            Err(err) => return violation_or_usage(err),
        };
        let pass = result.all_confirmed;
        report_line("liveness", index, seed, pass, &brief(&result));
        all &= pass;
    }
    Ok(all)
}

fn check_atomicity(count: usize) -> anyhow::Result<bool> {
    let mut all = true;
    for index in 0..count {
        let (cfg, seed) = presets::atomicity_scenario(index);
        let result = match run_scenario(&cfg, seed) {
            Ok(r) => r,
            Err(err) => return violation_or_usage(err),
        };
        let aborted = result
            .metrics
            .per_tx
            .values()
            .filter(|(t, _)| {
                t.client_status == Some(orthrus::execution::ConfirmationStatus::ConfirmedAbort)
            })
            .count();
        let elog_empty = result.snapshots.iter().all(|s| s.escrow_entries == 0);
        let pass = result.passed() && result.all_confirmed && elog_empty && aborted > 0;
        report_line(
            "atomicity",
            index,
            seed,
            pass,
            &format!("aborted={aborted} {}", brief(&result)),
        );
        all &= pass;
    }
    Ok(all)
}

fn check_ordering(count: usize) -> anyhow::Result<bool> {
    let mut all = true;
    for index in 0..count {
        let (cfg, seed) = presets::ordering_scenario(index);
        let result = match run_scenario(&cfg, seed) {
            Ok(r) => r,
            Err(err) => return violation_or_usage(err),
        };
        let pass = result.passed() && result.all_confirmed;
        report_line("ordering", index, seed, pass, &brief(&result));
        all &= pass;
    }
    Ok(all)
}

fn brief(result: &RunResult) -> String {
    let failures: Vec<String> =
        result.oracle.failures().map(|(p, _, d)| format!("{p}: {d}")).collect();
    if failures.is_empty() {
        format!(
            "confirmed={}/{}",
            result.metrics.confirmed_count(),
            result.metrics.submitted_count()
        )
    } else {
        failures.join("; ")
    }
}
