//! Gang identity, reserved-worker selection and the eligibility rule that
//! orders gangs so nested blocking regions cannot wait on each other in a
//! cycle.

use std::fmt;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use serde::Serialize;

use crate::error::{Result, SchedError};
use crate::worker::WorkerId;

/// Process-unique, monotonically assigned gang identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct GangId(pub u64);

impl fmt::Display for GangId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "g{}", self.0)
    }
}

#[derive(Debug, Default)]
pub struct GangIdCounter(AtomicU64);

impl GangIdCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_gang_id(&self) -> GangId {
        GangId(self.0.fetch_add(1, Ordering::Relaxed))
    }

    /// Number of ids handed out so far.
    pub fn issued(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// Gang identity stamped on every member of a gang-scheduled region.
///
/// `nest_level` is the nest level of the context that forked the region, not
/// the level the members run at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct GangTag {
    pub gang_id: GangId,
    pub nest_level: usize,
}

/// Returns whether a worker whose innermost active gang is `worker_active`
/// may adopt the gang context `ctx`.
///
/// A worker with no active gang takes anything. Otherwise the context must be
/// more deeply nested, or at the same level and from an older gang.
pub fn is_eligible_to_sched(worker_active: Option<GangTag>, ctx: GangTag) -> bool {
    is_eligible(worker_active, Some(ctx.gang_id), ctx.nest_level)
}

/// The same predicate for a context that may have no gang. Such a context
/// sorts before every gang at its nest level.
pub fn is_eligible(
    worker_active: Option<GangTag>,
    ctx_gang: Option<GangId>,
    ctx_nest: usize,
) -> bool {
    let Some(active) = worker_active else {
        return true;
    };
    if ctx_nest > active.nest_level {
        return true;
    }
    ctx_nest == active.nest_level && ctx_gang.is_none_or(|g| g < active.gang_id)
}

/// Counts of gang contexts assigned to each worker and in total.
#[derive(Debug)]
pub struct GangLoadTable {
    global: AtomicUsize,
    per_worker: Vec<AtomicUsize>,
}

impl GangLoadTable {
    pub fn new(n_workers: usize) -> Self {
        Self {
            global: AtomicUsize::new(0),
            per_worker: (0..n_workers).map(|_| AtomicUsize::new(0)).collect(),
        }
    }

    pub fn n_workers(&self) -> usize {
        self.per_worker.len()
    }

    pub fn global(&self) -> usize {
        self.global.load(Ordering::Acquire)
    }

    pub fn load(&self, worker: WorkerId) -> usize {
        self.per_worker[worker.index()].load(Ordering::Acquire)
    }

    pub fn snapshot(&self) -> Vec<usize> {
        self.per_worker
            .iter()
            .map(|c| c.load(Ordering::Acquire))
            .collect()
    }

    pub(crate) fn add(&self, workers: &[WorkerId]) {
        for w in workers {
            self.per_worker[w.index()].fetch_add(1, Ordering::AcqRel);
        }
        self.global.fetch_add(workers.len(), Ordering::AcqRel);
    }

    pub(crate) fn transfer(&self, from: WorkerId, to: WorkerId) {
        if from != to {
            self.per_worker[to.index()].fetch_add(1, Ordering::AcqRel);
            self.per_worker[from.index()].fetch_sub(1, Ordering::AcqRel);
        }
    }

    pub(crate) fn remove(&self, worker: WorkerId) -> Result<()> {
        let slot = &self.per_worker[worker.index()];
        slot.fetch_update(Ordering::AcqRel, Ordering::Acquire, |c| c.checked_sub(1))
            .map_err(|_| SchedError::Invariant("gang load underflow on worker"))?;
        self.global
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |c| c.checked_sub(1))
            .map_err(|_| SchedError::Invariant("global gang load underflow"))?;
        Ok(())
    }

    /// Picks reserved workers for a new gang; see [`select_reserved_workers`].
    pub fn get_workers(&self, n_request: usize, requester: WorkerId) -> Result<Vec<WorkerId>> {
        select_reserved_workers(n_request, requester, &self.snapshot(), self.global())
    }
}

/// Chooses `n_request` distinct workers for a gang forked on `requester`.
///
/// The scan starts just after the requester, or `n_request / 2` before it when
/// the gang would run past the last worker, and walks circularly. A worker is
/// taken when its gang load does not exceed the integer average
/// `global / n_workers`. If one full lap does not fill the request, the
/// remaining slots go to unselected workers in circular order regardless of
/// load.
pub fn select_reserved_workers(
    n_request: usize,
    requester: WorkerId,
    loads: &[usize],
    global: usize,
) -> Result<Vec<WorkerId>> {
    let n_workers = loads.len();
    if n_request == 0 {
        return Err(SchedError::Usage("a gang needs at least one member"));
    }
    if n_request > n_workers {
        return Err(SchedError::Capacity {
            requested: n_request,
            available: n_workers,
        });
    }
    let avg_load = global / n_workers;
    let me = requester.index();
    let start = if me + n_request >= n_workers {
        (me as isize - (n_request / 2) as isize).rem_euclid(n_workers as isize) as usize
    } else {
        me + 1
    };

    let mut taken = vec![false; n_workers];
    let mut reserved = Vec::with_capacity(n_request);
    for step in 0..n_workers {
        if reserved.len() == n_request {
            break;
        }
        let idx = (start + step) % n_workers;
        if loads[idx] <= avg_load {
            taken[idx] = true;
            reserved.push(WorkerId::new(idx));
        }
    }
    for step in 0..n_workers {
        if reserved.len() == n_request {
            break;
        }
        let idx = (start + step) % n_workers;
        if !taken[idx] {
            taken[idx] = true;
            reserved.push(WorkerId::new(idx));
        }
    }
    Ok(reserved)
}
