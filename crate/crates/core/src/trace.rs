//! Execution traces.
//!
//! Workers append to their own buffers during a run; buffers are merged and
//! sorted by timestamp when the run ends. Traces are written as JSON lines
//! (one header record, then one record per event) next to a per-worker CSV
//! breakdown.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::Instant;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::context::WaitReason;
use crate::error::Result;
use crate::metrics::RunMetrics;
use crate::region::Region;
use crate::victim::SelectionMode;
use crate::worker::WorkerId;

pub const TRACE_SCHEMA: &str = "gangsteal.trace";
pub const SUMMARY_SCHEMA: &str = "gangsteal.summary";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    TaskStart,
    TaskEnd,
    Steal,
    GangDispatch,
    BarrierBlock,
    BarrierRelease,
    IdleStart,
    IdleEnd,
    Suspend,
    Resume,
}

/// How a worker obtained the item it started.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    GangDeq,
    Suspended,
    Normal,
    Steal,
    Pinned,
}

/// Why control came back to the worker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Finished,
    Pinned,
    Parked,
    Failed,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t_ns: u64,
    pub worker: usize,
    pub kind: Option<EventKind>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub item: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub task: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gang: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nest: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub region: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub victim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mode: Option<SelectionMode>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reason: Option<WaitReason>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub via: Option<Source>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub resumed: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub outcome: Option<Outcome>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub generation: Option<u64>,
    /// Innermost active gang `(id, nest level)` on the worker when the item started.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub active_gang: Option<(u64, usize)>,
    /// Region of the blocked context the worker was confined by, if any.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub confined: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub confinement: Option<String>,
}

/// Static description of a region, exported with the trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub id: u64,
    pub parent: Option<u64>,
    pub depth: usize,
    pub team_size: usize,
    pub gang: Option<u64>,
    pub gang_nest: Option<usize>,
}

pub(crate) struct TraceSink {
    base: Instant,
    run_start_ns: AtomicU64,
    enabled: AtomicBool,
    buffers: Vec<Mutex<Vec<TraceEvent>>>,
    regions: Mutex<Vec<RegionRecord>>,
}

impl TraceSink {
    pub fn new(n_workers: usize) -> Self {
        Self {
            base: Instant::now(),
            run_start_ns: AtomicU64::new(0),
            enabled: AtomicBool::new(true),
            buffers: (0..n_workers).map(|_| Mutex::new(Vec::new())).collect(),
            regions: Mutex::new(Vec::new()),
        }
    }

    pub fn set_enabled(&self, on: bool) {
        self.enabled.store(on, Ordering::Release);
    }

    pub fn now_ns(&self) -> u64 {
        let abs = self.base.elapsed().as_nanos() as u64;
        abs.saturating_sub(self.run_start_ns.load(Ordering::Acquire))
    }

    pub fn start_run(&self) {
        for b in &self.buffers {
            b.lock().clear();
        }
        self.regions.lock().clear();
        self.run_start_ns
            .store(self.base.elapsed().as_nanos() as u64, Ordering::Release);
    }

    pub fn record(&self, worker: WorkerId, kind: EventKind, fill: impl FnOnce(&mut TraceEvent)) {
        if !self.enabled.load(Ordering::Relaxed) {
            return;
        }
        let mut ev = TraceEvent {
            t_ns: self.now_ns(),
            worker: worker.index(),
            kind: Some(kind),
            ..TraceEvent::default()
        };
        fill(&mut ev);
        self.buffers[worker.index()].lock().push(ev);
    }

    pub fn register_region(&self, region: &Region) {
        if !self.enabled.load(Ordering::Relaxed) {
            return;
        }
        self.regions.lock().push(RegionRecord {
            id: region.id,
            parent: region.parent.as_ref().map(|p| p.id),
            depth: region.depth,
            team_size: region.team_size,
            gang: region.gang.map(|g| g.gang_id.0),
            gang_nest: region.gang.map(|g| g.nest_level),
        });
    }

    /// Merges per-worker buffers into one time-ordered trace.
    pub fn collect(&self) -> (Vec<TraceEvent>, Vec<RegionRecord>) {
        let mut all: Vec<TraceEvent> = self.buffers.iter().flat_map(|b| b.lock().clone()).collect();
        all.sort_by_key(|e| e.t_ns);
        (all, self.regions.lock().clone())
    }
}

/// Complete record of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub n_workers: usize,
    pub makespan_ns: u64,
    pub deadlock_detected: bool,
    pub events: Vec<TraceEvent>,
    pub regions: Vec<RegionRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema: String,
    pub version: u32,
    pub n_workers: usize,
    pub makespan_ns: u64,
    pub deadlock_detected: bool,
    pub events: usize,
    pub regions: Vec<RegionRecord>,
}

impl RunTrace {
    pub fn header(&self) -> TraceHeader {
        TraceHeader {
            schema: TRACE_SCHEMA.to_string(),
            version: SCHEMA_VERSION,
            n_workers: self.n_workers,
            makespan_ns: self.makespan_ns,
            deadlock_detected: self.deadlock_detected,
            events: self.events.len(),
            regions: self.regions.clone(),
        }
    }
}

/// Column order of the per-worker summary table.
pub const SUMMARY_COLUMNS: [&str; 10] = [
    "schema_version",
    "worker",
    "busy_ns",
    "idle_ns",
    "comm_wait_ns",
    "items_started",
    "steals_history",
    "steals_random",
    "makespan_ns",
    "deadlock_detected",
];

/// Writes the event stream as JSON lines.
pub fn write_events(trace: &RunTrace, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &trace.header()).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for ev in &trace.events {
        serde_json::to_writer(&mut out, ev).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a JSON-lines trace written by [`write_events`].
pub fn read_events(path: &Path) -> Result<RunTrace> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: TraceHeader = match lines.next() {
        Some(l) => serde_json::from_str(l).map_err(std::io::Error::from)?,
        None => {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "empty trace").into())
        }
    };
    let events = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::from))
        .collect::<std::result::Result<Vec<TraceEvent>, _>>()?;
    Ok(RunTrace {
        n_workers: header.n_workers,
        makespan_ns: header.makespan_ns,
        deadlock_detected: header.deadlock_detected,
        events,
        regions: header.regions,
    })
}

/// Writes the per-worker breakdown as CSV; a trace without events yields a
/// header-only file.
pub fn write_worker_summary(trace: &RunTrace, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_COLUMNS)?;
    if !trace.events.is_empty() {
        let m = RunMetrics::from_trace(trace);
        for (i, wm) in m.workers.iter().enumerate() {
            w.write_record([
                SCHEMA_VERSION.to_string(),
                i.to_string(),
                wm.busy_ns.to_string(),
                wm.idle_ns.to_string(),
                wm.comm_wait_ns.to_string(),
                wm.items_started.to_string(),
                wm.steals_history.to_string(),
                wm.steals_random.to_string(),
                m.makespan_ns.to_string(),
                m.deadlock_detected.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes both trace files: events to `events_path`, per-worker summary to
/// `summary_path`.
pub fn emit_trace(trace: &RunTrace, events_path: &Path, summary_path: &Path) -> Result<()> {
    write_events(trace, events_path)?;
    write_worker_summary(trace, summary_path)
}

impl From<csv::Error> for crate::error::SchedError {
    fn from(e: csv::Error) -> Self {
        crate::error::SchedError::Io(std::io::Error::other(e))
    }
}
