//! Synthetic blocked-factorization pipelines and the experiment driver.
//!
//! Each block column `i` contributes a panel task, a broadcast of the factored
//! panel, lookahead updates of the next `lookahead_depth` columns and a
//! trailing update that fans out `tiles_per_panel²` child tasks. Dependences
//! are expressed with column keys, so the graph is exactly what the task
//! graph derives from the key stream.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::config::SchedulerConfig;
use crate::context::Ctx;
use crate::error::{Result, SchedError};
use crate::metrics::RunMetrics;
use crate::region::RegionMode;
use crate::runtime::{RunFailure, RunReport, Runtime};
use crate::task::{Dep, DepKey, TaskGroup, TaskSpec};
use crate::trace::RunTrace;
use crate::victim::VictimPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    LuLike,
    QrLike,
    CholeskyLike,
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kernel::LuLike => "lu",
            Kernel::QrLike => "qr",
            Kernel::CholeskyLike => "chol",
        })
    }
}

impl FromStr for Kernel {
    type Err = SchedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lu" | "lu_like" => Ok(Kernel::LuLike),
            "qr" | "qr_like" => Ok(Kernel::QrLike),
            "chol" | "cholesky" | "cholesky_like" => Ok(Kernel::CholeskyLike),
            other => Err(SchedError::Config(format!("unknown kernel `{other}`"))),
        }
    }
}

/// How panel regions are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GangMode {
    On,
    /// Panel regions are work-stealing regions whose members queue like tasks.
    Off,
    /// Gang-scheduled with the eligibility check disabled.
    Naive,
}

impl fmt::Display for GangMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GangMode::On => "on",
            GangMode::Off => "off",
            GangMode::Naive => "naive",
        })
    }
}

impl FromStr for GangMode {
    type Err = SchedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on" => Ok(GangMode::On),
            "off" => Ok(GangMode::Off),
            "naive" => Ok(GangMode::Naive),
            other => Err(SchedError::Config(format!("unknown gang mode `{other}`"))),
        }
    }
}

/// How compute bodies burn their duration. Both keep the worker occupied;
/// `Yield` gives the core away between clock checks so that more workers than
/// cores still progress side by side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ComputeMode {
    /// `Spin` when there is a core per worker, `Yield` otherwise.
    Auto,
    Spin,
    Yield,
}

impl ComputeMode {
    pub fn resolve(self, n_workers: usize) -> ComputeMode {
        match self {
            ComputeMode::Auto => {
                let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
                if cores >= n_workers {
                    ComputeMode::Spin
                } else {
                    ComputeMode::Yield
                }
            }
            other => other,
        }
    }

    /// Occupies the calling context for `d` of wall-clock time.
    pub fn burn(self, d: Duration) {
        match self {
            ComputeMode::Yield => yield_for(d),
            _ => spin_for(d),
        }
    }
}

impl fmt::Display for ComputeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ComputeMode::Auto => "auto",
            ComputeMode::Spin => "spin",
            ComputeMode::Yield => "yield",
        })
    }
}

impl FromStr for ComputeMode {
    type Err = SchedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(ComputeMode::Auto),
            "spin" => Ok(ComputeMode::Spin),
            "yield" => Ok(ComputeMode::Yield),
            other => Err(SchedError::Config(format!(
                "unknown compute mode `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkloadSpec {
    pub kernel: Kernel,
    pub n_block_cols: usize,
    pub tiles_per_panel: usize,
    pub panel_team_size: usize,
    /// Barrier-synchronized column steps per panel region.
    pub panel_steps: usize,
    /// Duration of one child task or one panel step.
    pub compute_cost: Duration,
    pub comm_latency: Duration,
    pub lookahead_depth: usize,
    pub gang: GangMode,
    pub victim_policy: VictimPolicy,
    pub compute_mode: ComputeMode,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            kernel: Kernel::LuLike,
            n_block_cols: 8,
            tiles_per_panel: 4,
            panel_team_size: 4,
            panel_steps: 4,
            compute_cost: Duration::from_micros(500),
            comm_latency: Duration::from_millis(5),
            lookahead_depth: 1,
            gang: GangMode::On,
            victim_policy: VictimPolicy::Hybrid,
            compute_mode: ComputeMode::Auto,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_block_cols", self.n_block_cols),
            ("tiles_per_panel", self.tiles_per_panel),
            ("panel_team_size", self.panel_team_size),
            ("panel_steps", self.panel_steps),
            ("lookahead_depth", self.lookahead_depth),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(SchedError::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Scheduler settings this workload overrides on top of `base`.
    pub fn scheduler_config(&self, base: &SchedulerConfig) -> SchedulerConfig {
        SchedulerConfig {
            victim_policy: self.victim_policy,
            eligibility_check: self.gang != GangMode::Naive,
            ..base.clone()
        }
    }

    fn trailing_cost(&self) -> Duration {
        match self.kernel {
            // Householder updates do about twice the work of an LU update
            Kernel::QrLike => self.compute_cost * 2,
            _ => self.compute_cost,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeClass {
    Panel,
    Comm,
    Lookahead,
    Trailing,
}

impl NodeClass {
    pub fn label(self) -> &'static str {
        match self {
            NodeClass::Panel => "panel",
            NodeClass::Comm => "comm",
            NodeClass::Lookahead => "lookahead",
            NodeClass::Trailing => "trailing",
        }
    }
}

pub const PANEL_CHILD: &str = "panel_child";
pub const TRAILING_CHILD: &str = "trailing_child";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct WorkloadNode {
    pub index: usize,
    pub class: NodeClass,
    /// Block column whose step produced this node.
    pub step: usize,
    /// Column updated by a lookahead node.
    pub column: Option<usize>,
    pub deps: Vec<(u64, bool)>,
    pub children: usize,
    pub priority: i32,
}

impl WorkloadNode {
    fn task_deps(&self) -> Vec<Dep> {
        self.deps
            .iter()
            .map(|&(k, write)| if write { Dep::write(k) } else { Dep::read(k) })
            .collect()
    }
}

/// A deterministic task program; submitting it in `nodes` order reproduces
/// `edges()`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskProgram {
    pub spec: WorkloadSpec,
    pub nodes: Vec<WorkloadNode>,
}

fn column_key(j: usize) -> u64 {
    DepKey::tile(0, j as u32).0
}

fn broadcast_key(i: usize) -> u64 {
    DepKey::tile(1, i as u32).0
}

/// Builds the task program for `spec`.
///
/// Trailing updates exist for every column but the last; their written
/// column set is empty when the lookahead window already covers the rest of
/// the matrix.
pub fn build_workload(spec: &WorkloadSpec) -> Result<TaskProgram> {
    spec.validate()?;
    let n = spec.n_block_cols;
    let mut nodes = Vec::new();
    let mut push = |class, step, column, deps: Vec<(u64, bool)>, children, priority| {
        let index = nodes.len();
        nodes.push(WorkloadNode {
            index,
            class,
            step,
            column,
            deps,
            children,
            priority,
        });
    };
    let panel_children = match spec.kernel {
        Kernel::CholeskyLike => spec.tiles_per_panel,
        Kernel::LuLike | Kernel::QrLike => spec.panel_team_size,
    };
    for i in 0..n {
        push(
            NodeClass::Panel,
            i,
            None,
            vec![(column_key(i), true)],
            panel_children,
            1,
        );
        push(
            NodeClass::Comm,
            i,
            None,
            vec![(column_key(i), false), (broadcast_key(i), true)],
            0,
            1,
        );
        if i + 1 == n {
            break;
        }
        let la_end = (i + spec.lookahead_depth).min(n - 1);
        for j in i + 1..=la_end {
            push(
                NodeClass::Lookahead,
                i,
                Some(j),
                vec![(broadcast_key(i), false), (column_key(j), true)],
                0,
                1,
            );
        }
        let mut deps = vec![(broadcast_key(i), false)];
        deps.extend((la_end + 1..n).map(|j| (column_key(j), true)));
        push(
            NodeClass::Trailing,
            i,
            None,
            deps,
            spec.tiles_per_panel * spec.tiles_per_panel,
            0,
        );
    }
    Ok(TaskProgram {
        spec: spec.clone(),
        nodes,
    })
}

impl TaskProgram {
    /// Dependence edges `(from, to)` implied by the key stream.
    pub fn edges(&self) -> BTreeSet<(usize, usize)> {
        #[derive(Default)]
        struct Key {
            writer: Option<usize>,
            readers: Vec<usize>,
        }
        let mut keys: HashMap<u64, Key> = HashMap::new();
        let mut edges = BTreeSet::new();
        for node in &self.nodes {
            for &(k, write) in &node.deps {
                let st = keys.entry(k).or_default();
                edges.extend(st.writer.map(|w| (w, node.index)));
                if write {
                    edges.extend(st.readers.drain(..).map(|r| (r, node.index)));
                    st.writer = Some(node.index);
                } else {
                    st.readers.push(node.index);
                }
            }
        }
        edges.retain(|(a, b)| a != b);
        edges
    }

    /// Total number of task-graph nodes including children.
    pub fn task_count(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match (n.class, self.spec.kernel) {
                (NodeClass::Panel, Kernel::LuLike | Kernel::QrLike) => 1,
                _ => 1 + n.children,
            })
            .sum()
    }

    /// Submits every node into one task group from `ctx` and waits for it.
    pub fn execute(self: &Arc<Self>, ctx: &Ctx) -> Result<()> {
        let group = TaskGroup::new();
        for node in &self.nodes {
            let spec = TaskSpec::new(node.task_deps())
                .priority(node.priority)
                .label(node.class.label());
            let program = self.clone();
            let index = node.index;
            group.submit(ctx, spec, move |c| program.run_node(c, index))?;
        }
        group.wait(ctx);
        Ok(())
    }

    fn run_node(&self, ctx: &Ctx, index: usize) {
        let node = &self.nodes[index];
        let spec = &self.spec;
        let compute = spec.compute_mode.resolve(ctx.n_workers());
        match node.class {
            NodeClass::Panel => match spec.kernel {
                Kernel::CholeskyLike => {
                    fan_out(ctx, node.children, spec.compute_cost, compute, PANEL_CHILD)
                }
                Kernel::LuLike | Kernel::QrLike => {
                    let mode = match spec.gang {
                        GangMode::On | GangMode::Naive => RegionMode::Gang,
                        GangMode::Off => RegionMode::WorkSteal,
                    };
                    let steps = spec.panel_steps;
                    let cost = spec.compute_cost;
                    if let Err(e) = ctx.parallel(node.children, Some(mode), move |m| {
                        for _ in 0..steps {
                            compute.burn(cost);
                            m.barrier().expect("panel member outside its region");
                        }
                    }) {
                        panic!("panel region failed: {e}");
                    }
                }
            },
            NodeClass::Comm => ctx.simulate_comm(spec.comm_latency),
            NodeClass::Lookahead => compute.burn(spec.compute_cost),
            NodeClass::Trailing => fan_out(
                ctx,
                node.children,
                spec.trailing_cost(),
                compute,
                TRAILING_CHILD,
            ),
        }
    }
}

fn fan_out(ctx: &Ctx, count: usize, cost: Duration, compute: ComputeMode, label: &'static str) {
    let group = TaskGroup::new();
    for _ in 0..count {
        group
            .submit(ctx, TaskSpec::new([]).label(label), move |_| {
                compute.burn(cost)
            })
            .expect("fresh group");
    }
    group.wait(ctx);
}

/// Busy-waits for `d` of wall-clock time without yielding the worker.
pub fn spin_for(d: Duration) {
    let end = Instant::now() + d;
    while Instant::now() < end {
        std::hint::spin_loop();
    }
}

/// Busy-waits for `d` of wall-clock time, yielding the core between checks.
pub fn yield_for(d: Duration) {
    let end = Instant::now() + d;
    while Instant::now() < end {
        std::thread::yield_now();
    }
}

/// Runs one execution of `program` on `rt`.
pub fn run_program(
    rt: &mut Runtime,
    program: &Arc<TaskProgram>,
) -> std::result::Result<RunReport, RunFailure> {
    let program = program.clone();
    rt.run(move |ctx| {
        if let Err(e) = program.execute(ctx) {
            panic!("workload submission failed: {e}");
        }
    })
}

/// Mean, median and range of one metric across runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Spread {
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub stddev: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let mid = v.len() / 2;
        let median = if v.len().is_multiple_of(2) {
            (v[mid - 1] + v[mid]) / 2.0
        } else {
            v[mid]
        };
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            median,
            min: v[0],
            max: v[v.len() - 1],
            stddev: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub spec: WorkloadSpec,
    pub n_workers: usize,
    /// Metrics of the aggregated runs, warm-up excluded.
    pub runs: Vec<RunMetrics>,
    pub makespan_ms: Spread,
    pub overlap_ratio: Spread,
    pub deadlock_detected: bool,
    pub error: Option<String>,
    /// Trace of the last execution, partial if it was aborted.
    #[serde(skip)]
    pub last_trace: RunTrace,
}

impl ExperimentSummary {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

/// Executes the workload `repeats + 1` times on one runtime and aggregates all
/// but the first execution. Stops at the first failed execution.
pub fn run_experiment(
    spec: &WorkloadSpec,
    config: &SchedulerConfig,
    repeats: usize,
) -> Result<ExperimentSummary> {
    let program = Arc::new(build_workload(spec)?);
    let cfg = spec.scheduler_config(config);
    cfg.validate()?;
    if spec.gang != GangMode::Off
        && spec.kernel != Kernel::CholeskyLike
        && spec.panel_team_size > cfg.n_workers
    {
        return Err(SchedError::Capacity {
            requested: spec.panel_team_size,
            available: cfg.n_workers,
        });
    }
    let mut rt = Runtime::start(cfg.clone())?;
    let mut runs = Vec::with_capacity(repeats);
    let mut last_trace = RunTrace::default();
    let mut error = None;
    let mut deadlock_detected = false;
    for rep in 0..=repeats {
        match run_program(&mut rt, &program) {
            Ok(report) => {
                if rep > 0 {
                    runs.push(RunMetrics::from_trace(&report.trace));
                }
                last_trace = report.trace;
            }
            Err(failure) => {
                deadlock_detected = failure.is_deadlock();
                error = Some(failure.error.to_string());
                last_trace = failure.trace;
                break;
            }
        }
    }
    let makespans: Vec<f64> = runs.iter().map(|m| m.makespan_ns as f64 / 1e6).collect();
    let overlaps: Vec<f64> = runs.iter().map(|m| m.overlap_ratio).collect();
    Ok(ExperimentSummary {
        spec: spec.clone(),
        n_workers: cfg.n_workers,
        makespan_ms: Spread::of(&makespans),
        overlap_ratio: Spread::of(&overlaps),
        runs,
        deadlock_detected,
        error,
        last_trace,
    })
}
