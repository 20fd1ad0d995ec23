//! Workers: per-worker queues, the scheduling loop and stealing.

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use serde::Serialize;

use crate::config::QueueKind;
use crate::context::{CarrierMsg, ItemBody, ItemKind, WaitCond, WorkItem, Yield};
use crate::gang::{is_eligible_to_sched, GangTag};
use crate::queue::WorkQueue;
use crate::region::Region;
use crate::runtime::Shared;
use crate::trace::{EventKind, Outcome, Source};
use crate::victim::{StealHistory, VictimRng};

/// Deepest nest level with its own normal queue; deeper items share the last one.
pub const MAX_NEST_LEVELS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct WorkerId(usize);

impl WorkerId {
    pub const fn new(index: usize) -> Self {
        Self(index)
    }

    pub const fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w{}", self.0)
    }
}

pub(crate) fn level_slot(level: usize) -> usize {
    level.min(MAX_NEST_LEVELS - 1)
}

/// Queues of one worker that other workers may touch.
pub(crate) struct WorkerQueues {
    /// Gang members pushed here by region masters.
    pub gang_deq: WorkQueue<WorkItem>,
    /// Resumable contexts; highest local priority after gang members.
    pub suspended_q: WorkQueue<WorkItem>,
    /// Normal contexts and tasks, indexed by nest level.
    pub normal_qs: Vec<WorkQueue<WorkItem>>,
    pub idle: AtomicBool,
    /// True while a pinned context on this worker waits for a deadline.
    pub timed_wait: AtomicBool,
}

impl WorkerQueues {
    pub fn new() -> Self {
        Self {
            gang_deq: WorkQueue::new(),
            suspended_q: WorkQueue::new(),
            normal_qs: (0..MAX_NEST_LEVELS).map(|_| WorkQueue::new()).collect(),
            idle: AtomicBool::new(false),
            timed_wait: AtomicBool::new(false),
        }
    }

    pub fn push_local(&self, item: WorkItem, level: usize) {
        let prio = item.meta.priority;
        self.normal_qs[level_slot(level)].push_with_priority(item, prio);
    }

    pub fn queued(&self) -> usize {
        self.gang_deq.len()
            + self.suspended_q.len()
            + self.normal_qs.iter().map(WorkQueue::len).sum::<usize>()
    }
}

/// What a worker may run given the context pinned on top of its stack.
#[derive(Clone)]
pub(crate) enum Admission {
    /// Nothing pinned.
    Free,
    /// A gang member is blocked inside region `0`.
    MidRegion(Arc<Region>),
    /// A gang member finished its body and waits for its region to complete.
    Join(Arc<Region>),
}

impl Admission {
    /// Whether a non-gang item may run here.
    pub fn admits_normal(&self, item: &WorkItem) -> bool {
        let meta = &item.meta;
        match self {
            Admission::Free => true,
            Admission::MidRegion(r) => match meta.kind {
                ItemKind::Member => meta.region.id != r.id && meta.region.descends_from(r),
                ItemKind::Task | ItemKind::Root => meta.region.descends_from(r),
            },
            Admission::Join(r) => match meta.kind {
                ItemKind::Member => false,
                ItemKind::Task | ItemKind::Root => r.descends_from(&meta.region),
            },
        }
    }

    fn confined_region(&self) -> Option<(u64, &'static str)> {
        match self {
            Admission::Free => None,
            Admission::MidRegion(r) => Some((r.id, "mid")),
            Admission::Join(r) => Some((r.id, "join")),
        }
    }
}

struct Frame {
    item_id: u64,
    gang: Option<GangTag>,
    region: Arc<Region>,
    carrier: Sender<CarrierMsg>,
    cond: Option<WaitCond>,
}

/// Private state of one worker thread.
pub(crate) struct WorkerState {
    pub id: WorkerId,
    shared: Arc<Shared>,
    stack: Vec<Frame>,
    pub history: StealHistory,
    pub rng: VictimRng,
    reply_tx: Sender<Yield>,
    reply_rx: Receiver<Yield>,
    idle_rounds: u32,
    idle_since: Option<Instant>,
}

impl WorkerState {
    pub fn new(shared: Arc<Shared>, id: WorkerId) -> Self {
        let (reply_tx, reply_rx) = unbounded();
        Self {
            id,
            history: StealHistory::new(shared.config.steal_window),
            rng: VictimRng::new(shared.config.seed, id),
            shared,
            stack: Vec::new(),
            reply_tx,
            reply_rx,
            idle_rounds: 0,
            idle_since: None,
        }
    }

    fn queues(&self) -> &WorkerQueues {
        &self.shared.workers[self.id.index()]
    }

    /// Depth of the stack of pinned contexts.
    pub fn internal_nest_level(&self) -> usize {
        self.stack.len()
    }

    /// Innermost active gang on this worker.
    pub fn active_gang(&self) -> Option<GangTag> {
        self.stack.last().and_then(|f| f.gang)
    }

    pub fn active_gangs(&self) -> Vec<GangTag> {
        self.stack.iter().filter_map(|f| f.gang).collect()
    }

    pub(crate) fn admission(&self) -> Admission {
        match self.stack.last() {
            None => Admission::Free,
            Some(top) => match &top.cond {
                Some(WaitCond::Join(r)) if r.id == top.region.id => Admission::Join(r.clone()),
                _ => Admission::MidRegion(top.region.clone()),
            },
        }
    }

    fn gang_admissible(&self, tag: GangTag) -> bool {
        !self.shared.config.eligibility_check || is_eligible_to_sched(self.active_gang(), tag)
    }

    pub fn run(mut self) {
        while !self.shared.is_stopping() {
            self.shared.fire_timers();
            if let Some(top) = self.stack.last() {
                if top.cond.as_ref().is_some_and(WaitCond::is_met) {
                    self.end_idle();
                    self.resume_top();
                    continue;
                }
            }
            match self.schedule_next() {
                Some((item, source)) => {
                    self.end_idle();
                    self.execute(item, source);
                }
                None => self.idle(),
            }
        }
        self.end_idle();
        for frame in self.stack.drain(..) {
            let _ = frame.carrier.send(CarrierMsg::Abort);
        }
    }

    /// Returns the next item obeying the configured queue priority order.
    pub(crate) fn schedule_next(&mut self) -> Option<(WorkItem, Source)> {
        let admission = self.admission();
        let order = self.shared.config.queue_priority_order.clone();
        for kind in order {
            let found = match kind {
                QueueKind::GangDeq => self.pop_gang().map(|i| (i, Source::GangDeq)),
                QueueKind::Suspended => self
                    .queues()
                    .suspended_q
                    .pop_where(|i| admission.admits_normal(i))
                    .map(|i| (i, Source::Suspended)),
                QueueKind::Normal => self.pop_normal(&admission).map(|i| (i, Source::Normal)),
                QueueKind::Steal => self.steal(&admission).map(|i| (i, Source::Steal)),
            };
            if found.is_some() {
                return found;
            }
        }
        None
    }

    fn pop_gang(&self) -> Option<WorkItem> {
        self.queues()
            .gang_deq
            .steal_where(|item| item.meta.gang.is_some_and(|t| self.gang_admissible(t)))
    }

    fn pop_normal(&self, admission: &Admission) -> Option<WorkItem> {
        let qs = &self.queues().normal_qs;
        (0..qs.len())
            .rev()
            .find_map(|lvl| qs[lvl].pop_where(|item| admission.admits_normal(item)))
    }

    fn steal(&mut self, admission: &Admission) -> Option<WorkItem> {
        let n = self.shared.config.n_workers;
        for off in 1..n {
            let victim = WorkerId::new((self.id.index() + off) % n);
            if let Some(item) = self.steal_gang_from(victim) {
                return Some(item);
            }
        }
        match admission {
            Admission::MidRegion(region) => self.steal_within(region, admission),
            _ => (1..n).find_map(|_| self.do_workstealing(admission)),
        }
    }

    fn steal_gang_from(&self, victim: WorkerId) -> Option<WorkItem> {
        if victim == self.id {
            return None;
        }
        let item = self.shared.workers[victim.index()]
            .gang_deq
            .steal_where(|item| item.meta.gang.is_some_and(|t| self.gang_admissible(t)))?;
        let holder = WorkerId::new(
            item.meta
                .load_holder
                .swap(self.id.index(), Ordering::AcqRel),
        );
        self.shared.loads.transfer(holder, self.id);
        Some(item)
    }

    /// Removes at most one admissible item from `victim`, gang members first.
    pub(crate) fn steal_from(&self, victim: WorkerId, admission: &Admission) -> Option<WorkItem> {
        if victim == self.id {
            return None;
        }
        if let Some(item) = self.steal_gang_from(victim) {
            return Some(item);
        }
        let q = &self.shared.workers[victim.index()];
        if let Some(item) = q.suspended_q.steal_where(|i| admission.admits_normal(i)) {
            return Some(item);
        }
        q.normal_qs
            .iter()
            .find_map(|lq| lq.steal_where(|i| admission.admits_normal(i)))
    }

    /// One victim selection, steal attempt and history update.
    pub(crate) fn do_workstealing(&mut self, admission: &Admission) -> Option<WorkItem> {
        let policy = self.shared.config.victim_policy;
        let n = self.shared.config.n_workers;
        let (victim, mode) = self
            .history
            .select_victim(policy, &mut self.rng, self.id, n);
        let item = self.steal_from(victim, admission);
        self.history
            .record_steal_outcome(policy, victim, item.is_some());
        if let Some(item) = &item {
            self.shared.stats.record_steal(mode);
            self.shared.trace.record(self.id, EventKind::Steal, |e| {
                e.item = Some(item.meta.id);
                e.victim = Some(victim.index());
                e.mode = Some(mode);
                e.region = Some(item.meta.region.id);
            });
        }
        item
    }

    /// Same-region stealing for a worker whose top context is blocked in
    /// `region`: workers hosting the region's members first, then the rest.
    fn steal_within(&self, region: &Arc<Region>, admission: &Admission) -> Option<WorkItem> {
        let n = self.shared.config.n_workers;
        let mut order: Vec<WorkerId> = region.directory_workers();
        for off in 1..n {
            let w = WorkerId::new((self.id.index() + off) % n);
            if !order.contains(&w) {
                order.push(w);
            }
        }
        order.into_iter().filter(|w| *w != self.id).find_map(|w| {
            let item = self.steal_from(w, admission)?;
            self.shared.trace.record(self.id, EventKind::Steal, |e| {
                e.item = Some(item.meta.id);
                e.victim = Some(w.index());
                e.region = Some(item.meta.region.id);
            });
            Some(item)
        })
    }

    fn execute(&mut self, item: WorkItem, source: Source) {
        let meta = item.meta.clone();
        let admission = self.admission();
        if let Some(tag) = meta.gang {
            let stack = self.active_gangs();
            if stack.iter().any(|a| !is_eligible_to_sched(Some(*a), tag)) {
                self.shared.stats.record_order_violation();
            }
        }
        let active = self.active_gang();
        let resumed = matches!(item.body, ItemBody::Parked(_));
        self.shared
            .trace
            .record(self.id, EventKind::TaskStart, |e| {
                e.item = Some(meta.id);
                e.task = meta.task.as_ref().map(|t| t.id);
                e.gang = meta.gang.map(|g| g.gang_id.0);
                e.nest = Some(meta.level);
                e.region = Some(meta.region.id);
                e.label = meta.label.map(str::to_string);
                e.via = Some(source);
                e.resumed = Some(resumed);
                e.active_gang = active.map(|g| (g.gang_id.0, g.nest_level));
                if let Some((r, mode)) = admission.confined_region() {
                    e.confined = Some(r);
                    e.confinement = Some(mode.to_string());
                }
            });
        let carrier = match item.body {
            ItemBody::Fresh(body) => {
                let carrier = self.shared.carriers.acquire(&self.shared);
                if meta.kind == ItemKind::Member {
                    meta.region
                        .set_directory(meta.thread_id, self.id, self.internal_nest_level());
                }
                let _ = carrier.send(CarrierMsg::Start {
                    meta: meta.clone(),
                    body,
                    worker: self.id,
                    reply: self.reply_tx.clone(),
                });
                carrier
            }
            ItemBody::Parked(carrier) => {
                let _ = carrier.send(CarrierMsg::Resume {
                    worker: self.id,
                    reply: self.reply_tx.clone(),
                });
                carrier
            }
        };
        self.stack.push(Frame {
            item_id: meta.id,
            gang: meta.gang,
            region: meta.region.clone(),
            carrier,
            cond: None,
        });
        self.await_yield();
    }

    fn resume_top(&mut self) {
        let top = self.stack.last_mut().expect("resume with empty stack");
        top.cond = None;
        let item_id = top.item_id;
        let region = top.region.id;
        let _ = top.carrier.send(CarrierMsg::Resume {
            worker: self.id,
            reply: self.reply_tx.clone(),
        });
        self.shared
            .trace
            .record(self.id, EventKind::TaskStart, |e| {
                e.item = Some(item_id);
                e.region = Some(region);
                e.resumed = Some(true);
                e.via = Some(Source::Pinned);
            });
        self.await_yield();
    }

    fn await_yield(&mut self) {
        let y = self.reply_rx.recv().unwrap_or(Yield::Aborted);
        self.shared.note_progress();
        let top = self
            .stack
            .last_mut()
            .expect("yield without a running frame");
        let item_id = top.item_id;
        let mut reason = None;
        let outcome = match y {
            Yield::Pinned(cond) => {
                reason = Some(cond.reason());
                if matches!(cond, WaitCond::Until(_)) {
                    self.shared.workers[self.id.index()]
                        .timed_wait
                        .store(true, Ordering::Release);
                }
                top.cond = Some(cond);
                Outcome::Pinned
            }
            Yield::Finished => {
                self.stack.pop();
                Outcome::Finished
            }
            Yield::Parked => {
                self.stack.pop();
                Outcome::Parked
            }
            Yield::Failed(msg) => {
                self.stack.pop();
                self.shared.fail(msg);
                Outcome::Failed
            }
            Yield::Aborted => {
                self.stack.pop();
                Outcome::Failed
            }
        };
        if !self
            .stack
            .iter()
            .any(|f| matches!(f.cond, Some(WaitCond::Until(_))))
        {
            self.shared.workers[self.id.index()]
                .timed_wait
                .store(false, Ordering::Release);
        }
        self.shared.trace.record(self.id, EventKind::TaskEnd, |e| {
            e.item = Some(item_id);
            e.outcome = Some(outcome);
            e.reason = reason;
        });
        if outcome == Outcome::Finished {
            self.shared.item_finished();
        }
    }

    fn idle(&mut self) {
        let q = &self.shared.workers[self.id.index()];
        if self.idle_since.is_none() {
            self.idle_since = Some(Instant::now());
            self.shared
                .trace
                .record(self.id, EventKind::IdleStart, |_| {});
        }
        q.idle.store(true, Ordering::Release);
        self.idle_rounds = self.idle_rounds.saturating_add(1);
        if self.idle_rounds < 4 {
            std::thread::yield_now();
            return;
        }
        let backoff = Duration::from_micros(20u64 << (self.idle_rounds - 4).min(6));
        let mut wait = backoff;
        if let Some(at) = self.shared.next_timer() {
            wait = wait.min(at.saturating_duration_since(Instant::now()));
        }
        if let Some(WaitCond::Until(at)) = self.stack.last().and_then(|f| f.cond.as_ref()) {
            wait = wait.min(at.saturating_duration_since(Instant::now()));
        }
        if !wait.is_zero() {
            self.shared.sleeper.sleep(wait);
        }
    }

    fn end_idle(&mut self) {
        self.idle_rounds = 0;
        self.shared.workers[self.id.index()]
            .idle
            .store(false, Ordering::Release);
        if self.idle_since.take().is_some() {
            self.shared
                .trace
                .record(self.id, EventKind::IdleEnd, |_| {});
        }
    }
}
