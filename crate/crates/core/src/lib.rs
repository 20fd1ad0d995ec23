//! Task runtime that gang-schedules blocking parallel regions onto reserved
//! workers while balancing everything else by work stealing.
//!
//! Regions forked from the top level run in gang mode by default: each member
//! is pushed to the gang queue of a lightly loaded nearby worker, and gang ids
//! plus nest levels order the gangs so that nested regions with barriers can
//! share a worker pool without waiting on each other in a cycle. Ordinary
//! tasks and work-stealing regions live in per-worker, per-nest-level queues;
//! idle workers steal using a victim history that alternates with random
//! probing.
//!
//! ```no_run
//! use gangsteal::{Runtime, SchedulerConfig};
//!
//! let mut rt = Runtime::start(SchedulerConfig::with_workers(4)).unwrap();
//! rt.run(|ctx| {
//!     ctx.parallel(4, None, |m| {
//!         // every member reaches the barrier before any passes it
//!         m.barrier().unwrap();
//!     })
//!     .unwrap();
//! })
//! .unwrap();
//! ```

pub mod config;
mod context;
pub mod error;
pub mod gang;
pub mod metrics;
pub mod queue;
pub mod region;
pub mod runtime;
pub mod task;
pub mod trace;
pub mod victim;
pub mod worker;
pub mod workload;

pub use config::{QueueKind, SchedulerConfig};
pub use context::{Ctx, ItemKind, WaitReason};
pub use error::{Result, SchedError};
pub use gang::{
    is_eligible, is_eligible_to_sched, select_reserved_workers, GangId, GangLoadTable, GangTag,
};
pub use metrics::RunMetrics;
pub use region::{RegionHandle, RegionMode};
pub use runtime::{RunFailure, RunReport, Runtime, StatsSnapshot};
pub use task::{Access, Dep, DepKey, TaskGroup, TaskId, TaskSpec};
pub use trace::{RunTrace, TraceEvent};
pub use victim::{SelectionMode, StealHistory, VictimPolicy, VictimRng};
pub use worker::WorkerId;
