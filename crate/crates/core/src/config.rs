//! Runtime configuration and environment overrides.

use std::time::Duration;

use crate::error::{Result, SchedError};
use crate::victim::VictimPolicy;

/// Environment variable enabling gang scheduling for every parallel region.
pub const ENV_GANG_SCHED: &str = "GANG_SCHED";
/// Environment variable overriding the configured seed.
pub const ENV_SCHED_SEED: &str = "SCHED_SEED";

/// Default history window for victim selection.
pub const DEFAULT_STEAL_WINDOW: usize = 8;

/// Sources consulted by a worker at a scheduling point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QueueKind {
    GangDeq,
    Suspended,
    Normal,
    Steal,
}

pub const DEFAULT_PRIORITY_ORDER: [QueueKind; 4] = [
    QueueKind::GangDeq,
    QueueKind::Suspended,
    QueueKind::Normal,
    QueueKind::Steal,
];

#[derive(Debug, Clone)]
pub struct SchedulerConfig {
    pub n_workers: usize,
    /// Gang-schedule every region that does not carry an explicit mode.
    pub gang_mode_default: bool,
    pub steal_window: usize,
    pub seed: u64,
    /// A run that makes no scheduling progress for this long is declared deadlocked.
    pub watchdog_timeout: Duration,
    pub queue_priority_order: Vec<QueueKind>,
    pub victim_policy: VictimPolicy,
    /// Disabling this reproduces the naive ULT hazard; test and demo use only.
    pub eligibility_check: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            n_workers: 4,
            gang_mode_default: false,
            steal_window: DEFAULT_STEAL_WINDOW,
            seed: 0x5eed,
            watchdog_timeout: Duration::from_secs(30),
            queue_priority_order: DEFAULT_PRIORITY_ORDER.to_vec(),
            victim_policy: VictimPolicy::Hybrid,
            eligibility_check: true,
        }
    }
}

impl SchedulerConfig {
    pub fn with_workers(n_workers: usize) -> Self {
        Self {
            n_workers,
            ..Self::default()
        }
    }

    /// Applies `GANG_SCHED` and `SCHED_SEED` from the process environment.
    pub fn apply_env(mut self) -> Self {
        self.apply_overrides(
            std::env::var(ENV_GANG_SCHED).ok().as_deref(),
            std::env::var(ENV_SCHED_SEED).ok().as_deref(),
        );
        self
    }

    pub(crate) fn apply_overrides(&mut self, gang: Option<&str>, seed: Option<&str>) {
        if let Some(v) = gang {
            self.gang_mode_default = matches!(v.trim(), "1" | "true" | "on");
        }
        if let Some(s) = seed.and_then(|s| s.trim().parse::<u64>().ok()) {
            self.seed = s;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_workers < 1 {
            return Err(SchedError::Config("n_workers must be at least 1".into()));
        }
        if self.steal_window < 1 {
            return Err(SchedError::Config("steal_window must be at least 1".into()));
        }
        if self.watchdog_timeout.is_zero() {
            return Err(SchedError::Config(
                "watchdog_timeout must be positive".into(),
            ));
        }
        let order = &self.queue_priority_order;
        for kind in DEFAULT_PRIORITY_ORDER {
            if order.iter().filter(|k| **k == kind).count() != 1 {
                return Err(SchedError::Config(format!(
                    "queue_priority_order must list {kind:?} exactly once"
                )));
            }
        }
        Ok(())
    }
}
