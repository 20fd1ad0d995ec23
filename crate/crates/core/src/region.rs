//! Fork/join parallel regions and their barriers.

use std::cell::Cell;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::Serialize;

use crate::context::{
    Ctx, ItemBody, ItemKind, ItemMeta, Requeue, WaitCond, WaitReason, Waiter, WorkItem,
};
use crate::error::{Result, SchedError};
use crate::gang::{GangId, GangTag};
use crate::trace::EventKind;
use crate::worker::WorkerId;

/// How the members of a region are placed on workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionMode {
    /// Members go to the gang queues of reserved workers.
    Gang,
    /// Members go to the forking worker's local queue.
    WorkSteal,
}

/// Cyclic barrier over the members of one region.
pub(crate) struct RegionBarrier {
    team_size: usize,
    generation: AtomicU64,
    state: Mutex<BarrierState>,
}

struct BarrierState {
    arrived: usize,
    waiters: Vec<Waiter>,
}

impl RegionBarrier {
    fn new(team_size: usize) -> Self {
        Self {
            team_size,
            generation: AtomicU64::new(0),
            state: Mutex::new(BarrierState {
                arrived: 0,
                waiters: Vec::new(),
            }),
        }
    }

    pub fn generation(&self) -> u64 {
        self.generation.load(Ordering::Acquire)
    }
}

struct JoinState {
    remaining: usize,
    finished: Vec<bool>,
    retired: usize,
    parent: Option<Waiter>,
}

pub(crate) struct Region {
    pub id: u64,
    pub parent: Option<Arc<Region>>,
    /// Nest level the members run at; the root region is level 0.
    pub depth: usize,
    pub team_size: usize,
    pub mode: RegionMode,
    pub gang: Option<GangTag>,
    pub reserved: Vec<WorkerId>,
    pub barrier: RegionBarrier,
    join: Mutex<JoinState>,
    done: AtomicBool,
    /// Worker and stack depth of each started member.
    directory: Mutex<Vec<Option<(WorkerId, usize)>>>,
    /// Plain count of joins, for double-join detection.
    joins: AtomicUsize,
}

impl Region {
    pub(crate) fn root(id: u64) -> Self {
        Self::new(id, None, 0, 1, RegionMode::WorkSteal, None, Vec::new())
    }

    fn new(
        id: u64,
        parent: Option<Arc<Region>>,
        depth: usize,
        team_size: usize,
        mode: RegionMode,
        gang: Option<GangTag>,
        reserved: Vec<WorkerId>,
    ) -> Self {
        Self {
            id,
            parent,
            depth,
            team_size,
            mode,
            gang,
            reserved,
            barrier: RegionBarrier::new(team_size),
            join: Mutex::new(JoinState {
                remaining: team_size,
                finished: vec![false; team_size],
                retired: 0,
                parent: None,
            }),
            done: AtomicBool::new(false),
            directory: Mutex::new(vec![None; team_size]),
            joins: AtomicUsize::new(0),
        }
    }

    pub fn is_done(&self) -> bool {
        self.done.load(Ordering::Acquire)
    }

    /// True if `self` is `ancestor` or nested (transitively) inside it.
    pub fn descends_from(&self, ancestor: &Region) -> bool {
        let mut cur = Some(self);
        while let Some(r) = cur {
            if r.id == ancestor.id {
                return true;
            }
            cur = r.parent.as_deref();
        }
        false
    }

    pub(crate) fn set_directory(&self, thread_id: usize, worker: WorkerId, internal_level: usize) {
        if let Some(slot) = self.directory.lock().get_mut(thread_id) {
            *slot = Some((worker, internal_level));
        }
    }

    pub fn directory(&self) -> Vec<Option<(WorkerId, usize)>> {
        self.directory.lock().clone()
    }

    pub(crate) fn directory_workers(&self) -> Vec<WorkerId> {
        let mut out: Vec<WorkerId> = self
            .directory
            .lock()
            .iter()
            .flatten()
            .map(|(w, _)| *w)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Records a member's arrival at the end of the region. Returns true for
    /// the last arrival, which completes the region.
    fn arrive_at_join(&self, thread_id: usize) -> Result<(bool, Option<Waiter>)> {
        let mut st = self.join.lock();
        if st.finished[thread_id] {
            return Err(SchedError::Invariant("region member finished twice"));
        }
        st.finished[thread_id] = true;
        st.remaining -= 1;
        if st.remaining == 0 {
            self.done.store(true, Ordering::Release);
            return Ok((true, st.parent.take()));
        }
        Ok((false, None))
    }

    /// Counts a gang member as retired; errors once every member already was.
    fn retire_member(&self) -> Result<bool> {
        let mut st = self.join.lock();
        if st.retired >= self.team_size {
            return Err(SchedError::Invariant(
                "gang member finished after its descriptor retired",
            ));
        }
        st.retired += 1;
        Ok(st.retired == self.team_size)
    }
}

/// Joinable handle to a forked region.
pub struct RegionHandle {
    region: Arc<Region>,
    joined: Cell<bool>,
}

impl std::fmt::Debug for RegionHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RegionHandle")
            .field("region", &self.region.id)
            .field("mode", &self.region.mode)
            .field("team_size", &self.region.team_size)
            .field("joined", &self.joined.get())
            .finish()
    }
}

impl RegionHandle {
    pub fn region_id(&self) -> u64 {
        self.region.id
    }

    pub fn mode(&self) -> RegionMode {
        self.region.mode
    }

    pub fn gang_id(&self) -> Option<GangId> {
        self.region.gang.map(|g| g.gang_id)
    }

    pub fn gang(&self) -> Option<GangTag> {
        self.region.gang
    }

    pub fn team_size(&self) -> usize {
        self.region.team_size
    }

    pub fn reserved_workers(&self) -> &[WorkerId] {
        &self.region.reserved
    }

    pub fn barrier_generation(&self) -> u64 {
        self.region.barrier.generation()
    }

    pub fn is_done(&self) -> bool {
        self.region.is_done()
    }

    /// Worker and internal nest level each member started on.
    pub fn member_directory(&self) -> Vec<Option<(WorkerId, usize)>> {
        self.region.directory()
    }

    /// Blocks `ctx` until every member has finished.
    pub fn join(&self, ctx: &Ctx) -> Result<()> {
        if self.joined.replace(true) || self.region.joins.fetch_add(1, Ordering::AcqRel) > 0 {
            return Err(SchedError::Usage("region joined twice"));
        }
        ctx.wait_region(&self.region);
        Ok(())
    }
}

pub type MemberBody = Arc<dyn Fn(&Ctx) + Send + Sync + 'static>;

impl Ctx {
    /// All following regions forked by this context and its descendants are
    /// gang-scheduled unless they carry an explicit mode.
    pub fn set_gang_sched(&self) {
        self.gang_flag.set(true);
    }

    /// Returns subsequent forks to the default placement policy.
    pub fn reset_gang_sched(&self) {
        self.gang_flag.set(false);
    }

    pub fn gang_sched_enabled(&self) -> bool {
        self.gang_flag.get()
    }

    /// Placement a fork from this context would use without an override.
    pub fn default_region_mode(&self) -> RegionMode {
        if self.gang_flag.get() || self.shared.config.gang_mode_default || self.nest_level() == 0 {
            RegionMode::Gang
        } else {
            RegionMode::WorkSteal
        }
    }

    /// Forks a region of `team_size` members each running `body`.
    pub fn fork_region(
        &self,
        team_size: usize,
        mode: Option<RegionMode>,
        body: impl Fn(&Ctx) + Send + Sync + 'static,
    ) -> Result<RegionHandle> {
        self.fork_region_shared(team_size, mode, Arc::new(body))
    }

    pub fn fork_region_shared(
        &self,
        team_size: usize,
        mode: Option<RegionMode>,
        body: MemberBody,
    ) -> Result<RegionHandle> {
        if team_size == 0 {
            return Err(SchedError::Usage("team_size must be at least 1"));
        }
        let mode = mode.unwrap_or_else(|| self.default_region_mode());
        let shared = &self.shared;
        let me = self.worker_id();
        let _fork = shared.fork_lock.lock();

        let (gang, reserved) = match mode {
            RegionMode::Gang => {
                let reserved = shared.loads.get_workers(team_size, me)?;
                let gang_id = shared.gang_ids.next_gang_id();
                shared.loads.add(&reserved);
                let tag = GangTag {
                    gang_id,
                    nest_level: self.nest_level(),
                };
                (Some(tag), reserved)
            }
            RegionMode::WorkSteal => (None, Vec::new()),
        };
        let region = Arc::new(Region::new(
            shared.next_id(),
            Some(self.meta.region.clone()),
            self.nest_level() + 1,
            team_size,
            mode,
            gang,
            reserved.clone(),
        ));
        shared.trace.register_region(&region);

        let inherit = self.gang_flag.get();
        for tid in 0..team_size {
            let body = body.clone();
            let holder = reserved.get(tid).copied().unwrap_or(me);
            let meta = Arc::new(ItemMeta {
                id: shared.next_id(),
                kind: ItemKind::Member,
                region: region.clone(),
                level: region.depth,
                gang,
                thread_id: tid,
                priority: 0,
                label: self.meta.label,
                gang_flag: inherit,
                task: None,
                group: None,
                load_holder: AtomicUsize::new(holder.index()),
                last_worker: AtomicUsize::new(holder.index()),
            });
            shared.live_add(1);
            let item = WorkItem {
                meta,
                body: ItemBody::Fresh(Box::new(move |ctx: &Ctx| body(ctx))),
            };
            match mode {
                RegionMode::Gang => {
                    let target = reserved[tid];
                    let item_id = item.meta.id;
                    shared.trace.record(me, EventKind::GangDispatch, |e| {
                        e.item = Some(item_id);
                        e.gang = gang.map(|g| g.gang_id.0);
                        e.nest = gang.map(|g| g.nest_level);
                        e.region = Some(region.id);
                        e.victim = Some(target.index());
                    });
                    shared.workers[target.index()].gang_deq.push(item);
                }
                RegionMode::WorkSteal => {
                    shared.workers[me.index()].push_local(item, region.depth);
                }
            }
        }
        drop(_fork);
        shared.sleeper.wake_all();
        Ok(RegionHandle {
            region,
            joined: Cell::new(false),
        })
    }

    /// Forks a region and joins it.
    pub fn parallel(
        &self,
        team_size: usize,
        mode: Option<RegionMode>,
        body: impl Fn(&Ctx) + Send + Sync + 'static,
    ) -> Result<()> {
        self.fork_region(team_size, mode, body)?.join(self)
    }

    /// Waits until every member of the current region reached this barrier.
    pub fn barrier(&self) -> Result<()> {
        if self.meta.kind != ItemKind::Member {
            return Err(SchedError::Usage(
                "barrier called outside a parallel region",
            ));
        }
        let region = self.meta.region.clone();
        let bar = &region.barrier;
        let mut st = bar.state.lock();
        st.arrived += 1;
        if st.arrived == bar.team_size {
            st.arrived = 0;
            let generation = bar.generation.fetch_add(1, Ordering::AcqRel) + 1;
            let waiters = std::mem::take(&mut st.waiters);
            drop(st);
            self.shared
                .trace
                .record(self.worker_id(), EventKind::BarrierRelease, |e| {
                    e.region = Some(region.id);
                    e.item = Some(self.meta.id);
                    e.generation = Some(generation);
                });
            for w in waiters {
                w.wake(&self.shared);
            }
            self.shared.sleeper.wake_all();
            return Ok(());
        }
        let generation = bar.generation();
        self.trace(EventKind::BarrierBlock, Some(WaitReason::Barrier));
        if self.is_pinning() {
            drop(st);
            self.pin_until(WaitCond::Barrier {
                region: region.clone(),
                generation,
            });
        } else {
            st.waiters.push(Waiter {
                item: self.parked_item(),
                requeue: Requeue::Normal,
            });
            drop(st);
            self.park();
        }
        self.trace(EventKind::Resume, Some(WaitReason::Barrier));
        Ok(())
    }

    pub(crate) fn wait_region(&self, region: &Arc<Region>) {
        if region.is_done() {
            return;
        }
        self.trace(EventKind::Suspend, Some(WaitReason::Join));
        if self.is_pinning() {
            self.pin_until(WaitCond::Join(region.clone()));
        } else {
            let mut st = region.join.lock();
            if st.remaining == 0 {
                drop(st);
            } else {
                st.parent = Some(Waiter {
                    item: self.parked_item(),
                    requeue: Requeue::Suspended,
                });
                drop(st);
                self.park();
            }
        }
        self.trace(EventKind::Resume, Some(WaitReason::Join));
    }

    /// End-of-body protocol for region members.
    pub(crate) fn finish_member(&self) {
        let region = self.meta.region.clone();
        let (last, parent) = match region.arrive_at_join(self.meta.thread_id) {
            Ok(v) => v,
            Err(e) => {
                self.shared.fail(e.to_string());
                return;
            }
        };
        if last {
            if let Some(p) = parent {
                p.wake(&self.shared);
            }
            self.shared.sleeper.wake_all();
        } else if self.is_pinning() {
            self.trace(EventKind::Suspend, Some(WaitReason::Join));
            self.pin_until(WaitCond::Join(region.clone()));
            self.trace(EventKind::Resume, Some(WaitReason::Join));
        }
        if self.meta.gang.is_some() {
            let holder = WorkerId::new(self.meta.load_holder.load(Ordering::Acquire));
            let result = region
                .retire_member()
                .and_then(|_| self.shared.loads.remove(holder));
            if let Err(e) = result {
                self.shared.fail(e.to_string());
            }
        }
    }
}

/// Bookkeeping for a gang member that reached its region's end; exposed for
/// direct testing of load accounting.
pub struct GangMemberLedger {
    region: Arc<Region>,
}

impl GangMemberLedger {
    pub fn new(team_size: usize) -> Self {
        Self {
            region: Arc::new(Region::new(
                0,
                None,
                1,
                team_size,
                RegionMode::Gang,
                None,
                Vec::new(),
            )),
        }
    }

    pub fn finish(&self, member: usize) -> Result<bool> {
        self.region.arrive_at_join(member)?;
        self.region.retire_member()
    }

    pub fn is_done(&self) -> bool {
        self.region.is_done()
    }
}
