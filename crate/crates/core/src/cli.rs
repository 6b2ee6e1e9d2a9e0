//! Command-line front end: `mine`, `report`, and `gen`.

use crate::basket::{parse_transactions, MiningParams};
use crate::engine::{EngineError, DEFAULT_MB_PER_BYTE};
use crate::pipeline::{levels_to_json, mine, rules_to_jsonl, PipelineConfig, PipelineError};
use crate::platform::{EnergyLedger, EnergyScope, PlatformConfig, PlatformError, PowerMode};
use crate::scheduler::{EventKind, Objective, ScheduleTrace, SchedulingPolicy, Switching};
use clap::{ArgAction, Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, Write as _};
use std::path::{Path, PathBuf};

pub const PLATFORM_ENV: &str = "BASKETFORGE_PLATFORM";

/// Exit status for bad input, bad flags, or an unreadable config.
pub const EXIT_USAGE: i32 = 2;
/// Exit status for an internal consistency failure.
pub const EXIT_INVARIANT: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "basketforge",
    version,
    about = "Market basket mining on a simulated heterogeneous multi-core"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mine association rules and write rules, levels, trace, ledger, and summary.
    Mine(MineArgs),
    /// Summarize a trace and ledger written by `mine`.
    Report(ReportArgs),
    /// Generate a synthetic basket file.
    Gen(GenArgs),
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub min_support: f64,
    #[arg(long)]
    pub min_confidence: f64,
    /// Platform JSON; the built-in default when neither this nor the env var is set.
    #[arg(long, env = PLATFORM_ENV)]
    pub platform_config: Option<PathBuf>,
    #[arg(long, default_value = "fastest")]
    pub objective: Objective,
    #[arg(long, default_value = "dynamic")]
    pub switching: Switching,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub gate_idle_cores: bool,
    /// Defaults to the platform's core count.
    #[arg(long)]
    pub n_partitions: Option<usize>,
    #[arg(long)]
    pub output_dir: PathBuf,
    /// Simulated MB of work per input byte.
    #[arg(long, default_value_t = DEFAULT_MB_PER_BYTE)]
    pub mb_per_byte: f64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub ledger: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub n_transactions: usize,
    #[arg(long)]
    pub n_items: usize,
    /// Expected items per transaction.
    #[arg(long)]
    pub density: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn invariant(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_INVARIANT,
            message: message.into(),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Basket(_)
            | PipelineError::Platform(_)
            | PipelineError::UniverseTooLarge { .. }
            | PipelineError::Engine(
                EngineError::Config(_) | EngineError::Platform(_) | EngineError::InvalidTask(_),
            ) => EXIT_USAGE,
            _ => EXIT_INVARIANT,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

/// Parses `args` and runs the command, returning the text for stdout.
pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Mine(args) => cmd_mine(&args),
        Command::Report(args) => cmd_report(&args),
        Command::Gen(args) => cmd_gen(&args),
    }
}

fn resolve_platform(path: Option<&Path>) -> Result<PlatformConfig, CliError> {
    match path {
        None => Ok(PlatformConfig::default()),
        Some(p) => PlatformConfig::load(p)
            .map_err(|e: PlatformError| CliError::usage(format!("{}: {e}", p.display()))),
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    n_transactions: usize,
    rules: usize,
    level_sizes: Vec<usize>,
    makespan: f64,
    total_joules: f64,
    jobs: &'a [String],
    objective: Objective,
    switching: Switching,
    gate_idle_cores: bool,
    n_partitions: usize,
}

/// Writes every file under a temporary name first, then renames them all,
/// so a failure never leaves a partial set behind.
fn write_all_atomically(dir: &Path, files: &[(&str, String)]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::usage(format!("{}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(io)?;
    let mut staged = Vec::with_capacity(files.len());
    for (name, contents) in files {
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        tmp.write_all(contents.as_bytes()).map_err(io)?;
        tmp.as_file().sync_all().map_err(io)?;
        staged.push((tmp, dir.join(name)));
    }
    for (tmp, target) in staged {
        tmp.persist(&target).map_err(|e| io(e.error))?;
    }
    Ok(())
}

pub fn cmd_mine(args: &MineArgs) -> Result<String, CliError> {
    let platform = resolve_platform(args.platform_config.as_deref())?;
    let params = MiningParams::new(args.min_support, args.min_confidence)
        .map_err(|e| CliError::usage(e.to_string()))?;
    if args.n_partitions == Some(0) {
        return Err(CliError::usage("--n-partitions must be at least 1"));
    }
    if !(args.mb_per_byte > 0.0 && args.mb_per_byte.is_finite()) {
        return Err(CliError::usage("--mb-per-byte must be positive"));
    }
    let file = fs::File::open(&args.input)
        .map_err(|e| CliError::usage(format!("{}: {e}", args.input.display())))?;
    let dataset = parse_transactions(BufReader::new(file))
        .map_err(|e| CliError::usage(format!("{}: {e}", args.input.display())))?;

    let cfg = PipelineConfig {
        platform,
        policy: SchedulingPolicy {
            objective: args.objective,
            gate_idle_cores: args.gate_idle_cores,
            switching: args.switching,
        },
        n_partitions: args.n_partitions,
        mb_per_byte: args.mb_per_byte,
        ..PipelineConfig::default()
    };
    let run = mine(&dataset, &params, &cfg)?;
    run.trace.check_total_order().map_err(CliError::invariant)?;
    run.ledger.check_tiling().map_err(CliError::invariant)?;

    let summary = Summary {
        n_transactions: run.result.n_transactions,
        rules: run.result.rules.len(),
        level_sizes: run.result.levels.iter().map(|l| l.len()).collect(),
        makespan: run.trace.makespan.as_secs_f64(),
        total_joules: run.ledger.total_energy(EnergyScope::All),
        jobs: &run.jobs,
        objective: args.objective,
        switching: args.switching,
        gate_idle_cores: args.gate_idle_cores,
        n_partitions: cfg.partitions(),
    };
    let summary_json = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    write_all_atomically(
        &args.output_dir,
        &[
            ("rules.jsonl", rules_to_jsonl(&run.result.rules)),
            ("levels.json", levels_to_json(&run.result.levels) + "\n"),
            ("trace.jsonl", run.trace.to_jsonl()),
            ("ledger.json", run.ledger.to_json() + "\n"),
            ("summary.json", summary_json),
        ],
    )?;

    Ok(format!(
        "transactions: {}\nfrequent itemsets per level: {:?}\nrules: {}\nmakespan: {:.6} s\ntotal energy: {:.6} J\noutput: {}\n",
        summary.n_transactions,
        summary.level_sizes,
        summary.rules,
        summary.makespan,
        summary.total_joules,
        args.output_dir.display()
    ))
}

#[derive(Default)]
struct PhaseSpan {
    start: Option<f64>,
    end: f64,
}

pub fn cmd_report(args: &ReportArgs) -> Result<String, CliError> {
    let read = |p: &Path| {
        fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))
    };
    let trace = ScheduleTrace::from_jsonl(&read(&args.trace)?).map_err(|(line, msg)| {
        CliError::usage(format!("{}: line {line}: {msg}", args.trace.display()))
    })?;
    let ledger = EnergyLedger::from_json(&read(&args.ledger)?)
        .map_err(|msg| CliError::usage(format!("{}: {msg}", args.ledger.display())))?;
    Ok(render_report(&trace, &ledger))
}

pub fn render_report(trace: &ScheduleTrace, ledger: &EnergyLedger) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "tasks: {}", trace.count(EventKind::Submit));
    let _ = writeln!(out, "makespan: {:.6} s", trace.makespan.as_secs_f64());
    let _ = writeln!(out, "switches: {}", trace.count(EventKind::Switch));
    let _ = writeln!(
        out,
        "total energy: {:.6} J",
        ledger.total_energy(EnergyScope::All)
    );
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:>4} {:>12} {:>12} {:>12} {:>12}",
        "core", "busy_s", "idle_s", "off_s", "joules"
    );
    for core in 0..ledger.n_cores {
        let secs = |m| ledger.time_in_mode(core, m).as_secs_f64();
        let _ = writeln!(
            out,
            "{core:>4} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
            secs(PowerMode::Busy),
            secs(PowerMode::Idle),
            secs(PowerMode::Off),
            ledger.total_energy(EnergyScope::Core(core))
        );
    }

    // Task ids look like "<job>/<phase>/<index>".
    let mut phases: BTreeMap<(usize, String, String), PhaseSpan> = BTreeMap::new();
    let mut first_seen: BTreeMap<(String, String), usize> = BTreeMap::new();
    for e in &trace.events {
        let mut parts = e.task_id.splitn(3, '/');
        let (Some(job), Some(phase), Some(_)) = (parts.next(), parts.next(), parts.next()) else {
            continue;
        };
        let next = first_seen.len();
        let order = *first_seen
            .entry((job.to_string(), phase.to_string()))
            .or_insert(next);
        let span = phases
            .entry((order, job.to_string(), phase.to_string()))
            .or_default();
        let t = e.time.as_secs_f64();
        match e.kind {
            EventKind::Start | EventKind::ThreadStart => {
                span.start = Some(span.start.map_or(t, |s| s.min(t)))
            }
            EventKind::End => span.end = span.end.max(t),
            _ => {}
        }
    }
    if !phases.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<20} {:<8} {:>12} {:>12} {:>12}",
            "job", "phase", "start_s", "end_s", "duration_s"
        );
        for ((_, job, phase), span) in &phases {
            let start = span.start.unwrap_or(span.end);
            let _ = writeln!(
                out,
                "{job:<20} {phase:<8} {start:>12.6} {:>12.6} {:>12.6}",
                span.end,
                span.end - start
            );
        }
    }
    out
}

/// Zero-padded so that lexical order matches numeric order.
fn item_name(i: usize, n_items: usize) -> String {
    let width = (n_items.max(1) - 1).to_string().len();
    format!("item{i:0width$}")
}

pub fn generate_baskets(
    n_transactions: usize,
    n_items: usize,
    density: f64,
    seed: u64,
) -> Result<String, String> {
    if n_transactions == 0 {
        return Err("--n-transactions must be at least 1".into());
    }
    if n_items == 0 {
        return Err("--n-items must be at least 1".into());
    }
    if !(density >= 1.0 && density <= n_items as f64) {
        return Err(format!("--density must lie in [1, {n_items}]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes =
        Binomial::new(n_items as u64, density / n_items as f64).map_err(|e| e.to_string())?;
    let mut out = String::new();
    for _ in 0..n_transactions {
        let size = (sizes.sample(&mut rng) as usize).clamp(1, n_items);
        let mut picks = rand::seq::index::sample(&mut rng, n_items, size).into_vec();
        picks.sort_unstable();
        let names: Vec<String> = picks.into_iter().map(|i| item_name(i, n_items)).collect();
        out.push_str(&names.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn cmd_gen(args: &GenArgs) -> Result<String, CliError> {
    let text = generate_baskets(args.n_transactions, args.n_items, args.density, args.seed)
        .map_err(CliError::usage)?;
    let dir = match args.output.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = args
        .output
        .file_name()
        .ok_or_else(|| CliError::usage(format!("{}: not a file path", args.output.display())))?
        .to_string_lossy()
        .into_owned();
    write_all_atomically(&dir, &[(name.as_str(), text)])?;
    Ok(format!(
        "wrote {} transactions over {} items to {}\n",
        args.n_transactions,
        args.n_items,
        args.output.display()
    ))
}
