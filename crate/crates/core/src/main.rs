use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use algorand_model::adversary::{simulate, StopReason};
use algorand_model::checker::{check_all, CheckReport};
use algorand_model::config::{PolicyKind, ScenarioConfig};
use algorand_model::explorer::{explore, Outcome};
use algorand_model::trace_io::{read_trace, write_trace};
use algorand_model::Trace;

const EXIT_OK: u8 = 0;
const EXIT_VIOLATION: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_INCONCLUSIVE: u8 = 3;

/// Simulate, check and exhaustively explore the Algorand agreement protocol.
///
/// Exit status: 0 ok, 1 safety violation or failed checker precondition,
/// 2 configuration, validation or parse error, 3 inconclusive exploration.
/// Scenario files are TOML; see the README for every key and its default.
#[derive(Debug, Parser)]
#[command(name = "algorand-model", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario, write its trace and check it.
    Run(RunArgs),
    /// Check a trace file with every checker.
    Check(CheckArgs),
    /// Exhaustively explore a scenario's state space.
    Explore(ExploreArgs),
    /// Validate a scenario file without running it.
    Validate(ConfigArg),
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Scenario file (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Adversary seed [default: run.seed from the scenario, else 0].
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Run every seed in A..B (inclusive) in parallel; --out is then a directory.
    #[arg(long, value_name = "A..B", value_parser = parse_seed_range)]
    seeds: Option<RangeInclusive<u64>>,
    /// Trace output path [default: run.out, else no trace file].
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Stop once every honest user has finished this round [default: run.max_rounds, else 3].
    #[arg(long, value_name = "N")]
    max_rounds: Option<u32>,
    /// Adversary policy: benign, partition_and_replay or random_byzantine [default: adversary.policy, else benign].
    #[arg(long)]
    policy: Option<String>,
}

#[derive(Debug, Args)]
struct CheckArgs {
    /// Trace file (JSON lines).
    trace: PathBuf,
    /// Scenario the trace must belong to (optional).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExploreArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Maximum number of branching choices per path [default: explore.depth_bound, else unbounded].
    #[arg(long, value_name = "N")]
    depth: Option<usize>,
    /// Counterexample trace path [default: explore.counterexample_out, else none].
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Round the exploration must complete [default: explore.round_goal, else 1].
    #[arg(long, value_name = "N")]
    max_rounds: Option<u32>,
}

fn parse_seed_range(s: &str) -> Result<RangeInclusive<u64>, String> {
    let (a, b) = s.split_once("..").ok_or("expected A..B")?;
    let a: u64 = a.trim().parse().map_err(|e| format!("bad start: {e}"))?;
    let b: u64 = b.trim().parse().map_err(|e| format!("bad end: {e}"))?;
    if a > b {
        return Err(format!("empty range {a}..{b}"));
    }
    Ok(a..=b)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Check(a) => cmd_check(a),
        Command::Explore(a) => cmd_explore(a),
        Command::Validate(a) => cmd_validate(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn load(path: &Path) -> anyhow::Result<ScenarioConfig> {
    Ok(ScenarioConfig::load(path)?)
}

fn write_trace_file(path: &Path, trace: &Trace, snapshot_every: usize) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    write_trace(&mut w, trace, snapshot_every)?;
    w.flush()?;
    Ok(())
}

fn verdict_code(report: &CheckReport) -> u8 {
    if report.has_violation() || report.has_precondition_failure() {
        EXIT_VIOLATION
    } else {
        EXIT_OK
    }
}

fn stop_name(r: StopReason) -> &'static str {
    match r {
        StopReason::RoundsDone => "rounds_done",
        StopReason::LabelBudget => "label_budget",
        StopReason::PeriodHorizon => "period_horizon",
        StopReason::Quiescent => "quiescent",
    }
}

struct RunResult {
    seed: u64,
    stop: StopReason,
    report: CheckReport,
}

fn run_one(cfg: &ScenarioConfig, seed: u64, out: Option<&Path>) -> anyhow::Result<RunResult> {
    let model = cfg.model()?;
    let mut policy = cfg.policy(&model.params, seed)?;
    let (trace, stop) = simulate(&model, policy.as_mut(), cfg.run_limits())?;
    if let Some(path) = out {
        write_trace_file(path, &trace, cfg.run.snapshot_every)?;
    }
    Ok(RunResult {
        seed,
        stop,
        report: check_all(&trace),
    })
}

fn cmd_run(a: RunArgs) -> anyhow::Result<u8> {
    let mut cfg = load(&a.config.config)?;
    if let Some(r) = a.max_rounds {
        cfg.run.max_rounds = r;
    }
    if let Some(p) = &a.policy {
        cfg.adversary.policy = p.parse::<PolicyKind>()?;
    }
    if let Some(s) = a.seed {
        cfg.run.seed = s;
    }
    if let Some(o) = a.out {
        cfg.run.out = Some(o);
    }
    cfg.validate()?;

    let Some(seeds) = a.seeds else {
        let r = run_one(&cfg, cfg.run.seed, cfg.run.out.as_deref())?;
        let text = format!(
            "run.seed={}\nrun.stop={}\n{}",
            r.seed,
            stop_name(r.stop),
            r.report.to_kv()
        );
        print!("{text}");
        if let Some(path) = &cfg.run.report {
            std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
        }
        return Ok(verdict_code(&r.report));
    };

    let dir = cfg.run.out.clone();
    let results: Vec<anyhow::Result<RunResult>> = seeds
        .clone()
        .into_par_iter()
        .map(|seed| {
            let out = dir.as_ref().map(|d| d.join(format!("trace-{seed}.jsonl")));
            run_one(&cfg, seed, out.as_deref())
        })
        .collect();
    let mut code = EXIT_OK;
    let mut bad = 0usize;
    for r in results {
        let r = r?;
        let c = verdict_code(&r.report);
        if c != EXIT_OK {
            bad += 1;
            code = c;
        }
        println!(
            "seed={} stop={} verdict={} certified_rounds={} multi_period_rounds={:?}",
            r.seed,
            stop_name(r.stop),
            if c == EXIT_OK { "ok" } else { "violation" },
            r.report.certifications.len(),
            r.report.multi_period_rounds()
        );
        for (name, v) in r.report.violations() {
            println!("  {name}: {v}");
        }
    }
    println!("batch.runs={}\nbatch.failing={bad}", seeds.count());
    Ok(code)
}

fn cmd_check(a: CheckArgs) -> anyhow::Result<u8> {
    let file = File::open(&a.trace).with_context(|| format!("opening {}", a.trace.display()))?;
    let trace = read_trace(BufReader::new(file))
        .with_context(|| format!("parsing {}", a.trace.display()))?;
    if let Some(path) = &a.config {
        let cfg = load(path)?;
        let expected = cfg.protocol.params();
        if expected.n_users != trace.params().n_users {
            bail!(
                "trace has {} users but {} declares {}",
                trace.params().n_users,
                path.display(),
                expected.n_users
            );
        }
        if &expected != trace.params() {
            bail!("trace parameters differ from {}", path.display());
        }
    }
    let replay = trace.validate();
    let report = check_all(&trace);
    match &replay {
        Ok(()) => println!("trace.replay=ok"),
        Err(e) => println!("trace.replay=invalid\ntrace.replay.detail={e}"),
    }
    print!("{}", report.to_kv());
    Ok(if replay.is_err() {
        EXIT_VIOLATION
    } else {
        verdict_code(&report)
    })
}

fn cmd_explore(a: ExploreArgs) -> anyhow::Result<u8> {
    let cfg = load(&a.config.config)?;
    let model = cfg.explore_model()?;
    let mut ecfg = cfg.explore_config();
    if let Some(d) = a.depth {
        ecfg.depth_bound = Some(d);
    }
    if let Some(r) = a.max_rounds {
        ecfg.round_goal = r;
    }
    let report = explore(&model, &ecfg)?;
    print!("{}", report.to_kv());
    let out = a.out.or(cfg.explore.counterexample_out.clone());
    if let (Some(cx), Some(path)) = (&report.counterexample, &out) {
        write_trace_file(path, &cx.trace, cfg.run.snapshot_every)?;
        println!("explore.counterexample.path={}", path.display());
    }
    Ok(match report.outcome {
        Outcome::Complete => EXIT_OK,
        Outcome::Violation => EXIT_VIOLATION,
        Outcome::Inconclusive => EXIT_INCONCLUSIVE,
    })
}

fn cmd_validate(a: ConfigArg) -> anyhow::Result<u8> {
    let cfg = load(&a.config)?;
    let model = cfg.validate()?;
    let p = &model.params;
    println!(
        "config.valid=true\nprotocol.n_users={}\nprotocol.committee_size={}\nprotocol.tau_cert={}\nprotocol.fault_bound={}\nadversary.plan={:?}",
        p.n_users,
        p.committee_size,
        p.tau_cert,
        p.fault_bound(),
        cfg.adversary.plan
    );
    Ok(EXIT_OK)
}
