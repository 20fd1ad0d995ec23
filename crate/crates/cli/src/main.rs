use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use gangsteal::trace::{write_events, write_worker_summary};
use gangsteal::workload::{
    run_experiment, ComputeMode, ExperimentSummary, GangMode, Kernel, WorkloadSpec,
};
use gangsteal::{SchedulerConfig, VictimPolicy};

/// Synthetic factorization pipelines on the gang-scheduling runtime.
#[derive(Parser, Debug)]
#[command(name = "bench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one workload configuration and report aggregated metrics.
    Run(RunArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, default_value = "lu", value_parser = parse_kernel)]
    kernel: Kernel,
    #[arg(long, default_value_t = 8)]
    workers: usize,
    #[arg(long, default_value = "hybrid", value_parser = parse_policy)]
    policy: VictimPolicy,
    /// on, off or naive; defaults to GANG_SCHED, then on.
    #[arg(long, value_parser = parse_gang)]
    gang: Option<GangMode>,
    #[arg(long, default_value_t = 4)]
    tiles: usize,
    #[arg(long, default_value_t = 4)]
    panel_team: usize,
    #[arg(long, default_value_t = 4)]
    panel_steps: usize,
    #[arg(long, default_value_t = 5000)]
    comm_latency_us: u64,
    #[arg(long, default_value_t = 500)]
    compute_us: u64,
    #[arg(long, default_value_t = 8)]
    block_cols: usize,
    #[arg(long, default_value_t = 1)]
    lookahead: usize,
    #[arg(long)]
    window: Option<usize>,
    /// auto, spin or yield.
    #[arg(long, default_value = "auto", value_parser = parse_compute)]
    compute: ComputeMode,
    /// Defaults to SCHED_SEED, then a fixed seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 6)]
    repeats: usize,
    #[arg(long, default_value_t = 30)]
    watchdog_s: u64,
    /// Event log (JSON lines) of the last execution.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Per-worker CSV summary of the last execution.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Print the aggregate as JSON instead of text.
    #[arg(long)]
    json: bool,
}

fn parse_kernel(s: &str) -> Result<Kernel, String> {
    s.parse().map_err(|e: gangsteal::SchedError| e.to_string())
}

fn parse_gang(s: &str) -> Result<GangMode, String> {
    s.parse().map_err(|e: gangsteal::SchedError| e.to_string())
}

fn parse_compute(s: &str) -> Result<ComputeMode, String> {
    s.parse().map_err(|e: gangsteal::SchedError| e.to_string())
}

fn parse_policy(s: &str) -> Result<VictimPolicy, String> {
    s.parse()
}

impl RunArgs {
    fn config(&self) -> SchedulerConfig {
        let mut cfg = SchedulerConfig::with_workers(self.workers).apply_env();
        if let Some(w) = self.window {
            cfg.steal_window = w;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.watchdog_timeout = Duration::from_secs(self.watchdog_s);
        cfg
    }

    fn spec(&self, cfg: &SchedulerConfig) -> WorkloadSpec {
        let gang = self.gang.unwrap_or(
            if std::env::var(gangsteal::config::ENV_GANG_SCHED).is_ok() {
                if cfg.gang_mode_default {
                    GangMode::On
                } else {
                    GangMode::Off
                }
            } else {
                GangMode::On
            },
        );
        WorkloadSpec {
            kernel: self.kernel,
            n_block_cols: self.block_cols,
            tiles_per_panel: self.tiles,
            panel_team_size: self.panel_team,
            panel_steps: self.panel_steps,
            compute_cost: Duration::from_micros(self.compute_us),
            comm_latency: Duration::from_micros(self.comm_latency_us),
            lookahead_depth: self.lookahead,
            gang,
            victim_policy: self.policy,
            compute_mode: self.compute,
        }
    }
}

fn print_text(s: &ExperimentSummary) {
    let spec = &s.spec;
    println!(
        "kernel={} workers={} policy={} gang={} compute={} runs={}",
        spec.kernel,
        s.n_workers,
        spec.victim_policy,
        spec.gang,
        spec.compute_mode.resolve(s.n_workers),
        s.runs.len()
    );
    let m = &s.makespan_ms;
    println!(
        "makespan_ms mean={:.3} median={:.3} min={:.3} max={:.3} stddev={:.3}",
        m.mean, m.median, m.min, m.max, m.stddev
    );
    let o = &s.overlap_ratio;
    println!(
        "overlap_ratio mean={:.4} median={:.4} min={:.4} max={:.4}",
        o.mean, o.median, o.min, o.max
    );
    let (h, r) = s.runs.iter().fold((0, 0), |(h, r), m| {
        (h + m.steals_history, r + m.steals_random)
    });
    println!("steals history={h} random={r}");
    println!("deadlock_detected={}", s.deadlock_detected);
    if let Some(e) = &s.error {
        println!("error={e}");
    }
}

fn run(args: &RunArgs) -> anyhow::Result<bool> {
    let cfg = args.config();
    let spec = args.spec(&cfg);
    let summary = run_experiment(&spec, &cfg, args.repeats).context("experiment setup failed")?;
    if let Some(path) = &args.trace {
        write_events(&summary.last_trace, path)
            .with_context(|| format!("writing trace to {}", path.display()))?;
    }
    if let Some(path) = &args.summary {
        write_worker_summary(&summary.last_trace, path)
            .with_context(|| format!("writing summary to {}", path.display()))?;
    }
    if args.json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else {
        print_text(&summary);
    }
    Ok(summary.succeeded())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => match run(&args) {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => ExitCode::from(2),
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::FAILURE
            }
        },
    }
}
