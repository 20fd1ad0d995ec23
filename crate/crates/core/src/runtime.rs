//! Runtime startup, run supervision and teardown.

use std::cmp::{Ordering as CmpOrdering, Reverse};
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use thiserror::Error;

use crate::config::SchedulerConfig;
use crate::context::{
    CarrierPool, Ctx, ItemBody, ItemKind, ItemMeta, Requeue, WaitCond, WaitReason, WorkItem,
};
use crate::error::{Result, SchedError};
use crate::gang::{GangIdCounter, GangLoadTable};
use crate::region::Region;
use crate::task::complete_task;
use crate::trace::{EventKind, RunTrace, TraceSink};
use crate::victim::SelectionMode;
use crate::worker::{WorkerId, WorkerQueues, WorkerState};

/// How long every worker must sit idle, with nothing in flight, before a run
/// is declared deadlocked.
pub const QUIESCENCE_GRACE: Duration = Duration::from_millis(50);

const MONITOR_TICK: Duration = Duration::from_millis(2);

pub(crate) struct Sleeper {
    lock: Mutex<()>,
    cv: Condvar,
    sleepers: AtomicUsize,
}

impl Sleeper {
    fn new() -> Self {
        Self {
            lock: Mutex::new(()),
            cv: Condvar::new(),
            sleepers: AtomicUsize::new(0),
        }
    }

    pub fn sleep(&self, timeout: Duration) {
        let mut g = self.lock.lock();
        self.sleepers.fetch_add(1, Ordering::AcqRel);
        self.cv.wait_for(&mut g, timeout);
        self.sleepers.fetch_sub(1, Ordering::AcqRel);
    }

    pub fn wake_one(&self) {
        if self.sleepers.load(Ordering::Acquire) > 0 {
            let _g = self.lock.lock();
            self.cv.notify_one();
        }
    }

    pub fn wake_all(&self) {
        if self.sleepers.load(Ordering::Acquire) > 0 {
            let _g = self.lock.lock();
            self.cv.notify_all();
        }
    }
}

struct Timer {
    at: Instant,
    seq: u64,
    item: WorkItem,
}

impl PartialEq for Timer {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Timer {}
impl PartialOrd for Timer {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}
impl Ord for Timer {
    fn cmp(&self, other: &Self) -> CmpOrdering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

#[derive(Debug, Default)]
pub(crate) struct Stats {
    steals_history: AtomicU64,
    steals_random: AtomicU64,
    order_violations: AtomicU64,
}

impl Stats {
    pub fn record_steal(&self, mode: SelectionMode) {
        match mode {
            SelectionMode::History => self.steals_history.fetch_add(1, Ordering::Relaxed),
            SelectionMode::Random => self.steals_random.fetch_add(1, Ordering::Relaxed),
        };
    }

    pub fn record_order_violation(&self) {
        self.order_violations.fetch_add(1, Ordering::Relaxed);
    }
}

/// Cumulative counters since the runtime started.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StatsSnapshot {
    pub steals_history: u64,
    pub steals_random: u64,
    /// Gang contexts adopted on top of an active gang they are not ordered
    /// after. Always zero unless the eligibility check is disabled.
    pub order_violations: u64,
}

pub(crate) struct Shared {
    pub config: SchedulerConfig,
    pub workers: Vec<WorkerQueues>,
    pub gang_ids: GangIdCounter,
    pub loads: GangLoadTable,
    pub fork_lock: Mutex<()>,
    pub sleeper: Sleeper,
    pub trace: TraceSink,
    pub stats: Stats,
    pub carriers: CarrierPool,
    timers: Mutex<BinaryHeap<Reverse<Timer>>>,
    timer_seq: AtomicU64,
    progress: AtomicU64,
    live: AtomicUsize,
    ids: AtomicU64,
    stopping: AtomicBool,
    aborting: AtomicBool,
    failure: Mutex<Option<String>>,
    root_done: AtomicBool,
    /// Trace time at which the last item of the run finished.
    finished_ns: AtomicU64,
    monitor: Mutex<()>,
    monitor_cv: Condvar,
}

impl Shared {
    pub fn next_id(&self) -> u64 {
        self.ids.fetch_add(1, Ordering::Relaxed)
    }

    pub fn live_add(&self, n: usize) {
        self.live.fetch_add(n, Ordering::AcqRel);
    }

    pub fn note_progress(&self) {
        self.progress.fetch_add(1, Ordering::Relaxed);
    }

    pub fn is_stopping(&self) -> bool {
        self.stopping.load(Ordering::Acquire)
    }

    pub fn is_aborting(&self) -> bool {
        self.aborting.load(Ordering::Acquire)
    }

    pub fn fail(&self, msg: String) {
        self.failure.lock().get_or_insert(msg);
        self.wake_monitor();
    }

    fn wake_monitor(&self) {
        let _g = self.monitor.lock();
        self.monitor_cv.notify_all();
    }

    /// Called by a worker once the end of a finished item is traced.
    pub(crate) fn item_finished(&self) {
        if self.live.fetch_sub(1, Ordering::AcqRel) == 1 && self.root_done.load(Ordering::Acquire) {
            self.finished_ns
                .store(self.trace.now_ns(), Ordering::Release);
            self.wake_monitor();
        }
    }

    fn run_complete(&self) -> bool {
        self.root_done.load(Ordering::Acquire) && self.live.load(Ordering::Acquire) == 0
    }

    /// Puts a resumable context back on a worker's queues.
    pub(crate) fn enqueue(&self, worker: WorkerId, item: WorkItem, requeue: Requeue) {
        let q = &self.workers[worker.index()];
        match requeue {
            Requeue::Suspended => q.suspended_q.push(item),
            Requeue::Normal => {
                let level = item.meta.level;
                q.push_local(item, level);
            }
        }
        self.sleeper.wake_all();
    }

    fn add_timer(&self, at: Instant, item: WorkItem) {
        let seq = self.timer_seq.fetch_add(1, Ordering::Relaxed);
        self.timers.lock().push(Reverse(Timer { at, seq, item }));
        self.sleeper.wake_all();
    }

    pub fn next_timer(&self) -> Option<Instant> {
        self.timers.try_lock()?.peek().map(|t| t.0.at)
    }

    fn timers_pending(&self) -> bool {
        !self.timers.lock().is_empty()
    }

    /// Moves contexts whose deadline passed onto their workers' suspended queues.
    pub fn fire_timers(&self) {
        let now = Instant::now();
        let mut due = Vec::new();
        if let Some(mut heap) = self.timers.try_lock() {
            while heap.peek().is_some_and(|t| t.0.at <= now) {
                due.push(heap.pop().expect("peeked").0.item);
            }
        }
        for item in due {
            let w = item.meta.last_worker();
            self.enqueue(w, item, Requeue::Suspended);
        }
    }

    fn all_idle(&self) -> bool {
        self.workers
            .iter()
            .all(|q| q.idle.load(Ordering::Acquire) && !q.timed_wait.load(Ordering::Acquire))
    }
}

impl Ctx {
    /// End-of-body protocol, run on the context's carrier after `body` returns.
    pub(crate) fn finish_item(&self) {
        match self.meta.kind {
            ItemKind::Member => self.finish_member(),
            ItemKind::Task => complete_task(self),
            ItemKind::Root => self.shared.root_done.store(true, Ordering::Release),
        }
    }

    pub(crate) fn park_until(&self, at: Instant) {
        self.shared.add_timer(at, self.parked_item());
        self.park();
    }

    /// Simulates a transfer of the given latency. The context is suspended for
    /// at least `latency` while its worker runs other work.
    pub fn simulate_comm(&self, latency: Duration) {
        if latency.is_zero() {
            let t = self.shared.trace.now_ns();
            self.trace_at(t, EventKind::Suspend, Some(WaitReason::Comm));
            self.trace_at(t, EventKind::Resume, Some(WaitReason::Comm));
            return;
        }
        self.trace(EventKind::Suspend, Some(WaitReason::Comm));
        let at = Instant::now() + latency;
        if self.is_pinning() {
            self.pin_until(WaitCond::Until(at));
        } else {
            self.park_until(at);
        }
        self.trace(EventKind::Resume, Some(WaitReason::Comm));
    }
}

/// Successful run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub trace: RunTrace,
    pub wall: Duration,
}

/// Failed run, with whatever trace was collected before the abort.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct RunFailure {
    pub error: SchedError,
    pub trace: RunTrace,
}

impl RunFailure {
    pub fn is_deadlock(&self) -> bool {
        matches!(self.error, SchedError::Deadlock(_))
    }
}

/// A pool of workers executing regions and tasks.
pub struct Runtime {
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
    poisoned: bool,
}

impl Runtime {
    /// Starts `config.n_workers` workers with empty queues.
    pub fn start(config: SchedulerConfig) -> Result<Self> {
        config.validate()?;
        let n = config.n_workers;
        let shared = Arc::new(Shared {
            workers: (0..n).map(|_| WorkerQueues::new()).collect(),
            gang_ids: GangIdCounter::new(),
            loads: GangLoadTable::new(n),
            fork_lock: Mutex::new(()),
            sleeper: Sleeper::new(),
            trace: TraceSink::new(n),
            stats: Stats::default(),
            carriers: CarrierPool::new(),
            timers: Mutex::new(BinaryHeap::new()),
            timer_seq: AtomicU64::new(0),
            progress: AtomicU64::new(0),
            live: AtomicUsize::new(0),
            ids: AtomicU64::new(1),
            stopping: AtomicBool::new(false),
            aborting: AtomicBool::new(false),
            failure: Mutex::new(None),
            root_done: AtomicBool::new(false),
            finished_ns: AtomicU64::new(0),
            monitor: Mutex::new(()),
            monitor_cv: Condvar::new(),
            config,
        });
        let threads = (0..n)
            .map(|i| {
                let shared = shared.clone();
                std::thread::Builder::new()
                    .name(format!("gangsteal-w{i}"))
                    .spawn(move || WorkerState::new(shared, WorkerId::new(i)).run())
                    .map_err(SchedError::Io)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            shared,
            threads,
            poisoned: false,
        })
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.shared.config
    }

    pub fn n_workers(&self) -> usize {
        self.shared.config.n_workers
    }

    /// Number of gang ids handed out so far.
    pub fn gang_ids_issued(&self) -> u64 {
        self.shared.gang_ids.issued()
    }

    /// `(global, per-worker)` gang loads.
    pub fn gang_loads(&self) -> (usize, Vec<usize>) {
        (self.shared.loads.global(), self.shared.loads.snapshot())
    }

    /// Items still queued on every worker.
    pub fn queued_items(&self) -> usize {
        self.shared.workers.iter().map(WorkerQueues::queued).sum()
    }

    pub fn stats(&self) -> StatsSnapshot {
        let s = &self.shared.stats;
        StatsSnapshot {
            steals_history: s.steals_history.load(Ordering::Relaxed),
            steals_random: s.steals_random.load(Ordering::Relaxed),
            order_violations: s.order_violations.load(Ordering::Relaxed),
        }
    }

    /// Carrier threads created so far.
    pub fn carrier_threads(&self) -> usize {
        self.shared.carriers.live()
    }

    pub fn set_tracing(&self, on: bool) {
        self.shared.trace.set_enabled(on);
    }

    /// Waits until every worker reports idle; false on timeout.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if self.shared.all_idle() {
                return true;
            }
            std::thread::sleep(Duration::from_millis(1));
        }
        false
    }

    /// Runs `body` as the root context on worker 0 and waits until it and
    /// everything it spawned have finished.
    ///
    /// A run that stops making progress is aborted; the runtime cannot be
    /// used afterwards.
    pub fn run<F>(&mut self, body: F) -> std::result::Result<RunReport, RunFailure>
    where
        F: FnOnce(&Ctx) + Send + 'static,
    {
        if self.poisoned {
            return Err(RunFailure {
                error: SchedError::Aborted,
                trace: RunTrace::default(),
            });
        }
        let shared = &self.shared;
        shared.trace.start_run();
        shared.root_done.store(false, Ordering::Release);
        let root_region = Arc::new(Region::root(shared.next_id()));
        shared.trace.register_region(&root_region);
        let meta = Arc::new(ItemMeta {
            id: shared.next_id(),
            kind: ItemKind::Root,
            region: root_region,
            level: 0,
            gang: None,
            thread_id: 0,
            priority: 0,
            label: Some("root"),
            gang_flag: false,
            task: None,
            group: None,
            load_holder: AtomicUsize::new(0),
            last_worker: AtomicUsize::new(0),
        });
        shared.live_add(1);
        let started = Instant::now();
        shared.workers[0].push_local(
            WorkItem {
                meta,
                body: ItemBody::Fresh(Box::new(body)),
            },
            0,
        );
        shared.sleeper.wake_all();

        let watchdog = shared.config.watchdog_timeout;
        let mut last_progress = shared.progress.load(Ordering::Relaxed);
        let mut last_change = Instant::now();
        let mut stalled_since: Option<Instant> = None;
        let error = loop {
            {
                let mut g = shared.monitor.lock();
                if !shared.run_complete() && shared.failure.lock().is_none() {
                    shared.monitor_cv.wait_for(&mut g, MONITOR_TICK);
                }
            }
            if let Some(msg) = shared.failure.lock().clone() {
                break SchedError::Panicked(msg);
            }
            if shared.run_complete() {
                let makespan_ns = shared.finished_ns.load(Ordering::Acquire);
                let (events, regions) = shared.trace.collect();
                return Ok(RunReport {
                    trace: RunTrace {
                        n_workers: self.n_workers(),
                        makespan_ns,
                        deadlock_detected: false,
                        events,
                        regions,
                    },
                    wall: started.elapsed(),
                });
            }
            let progress = shared.progress.load(Ordering::Relaxed);
            let now = Instant::now();
            if progress != last_progress {
                last_progress = progress;
                last_change = now;
                stalled_since = None;
            } else if now - last_change >= watchdog {
                break SchedError::Deadlock(watchdog);
            } else if shared.all_idle() && !shared.timers_pending() {
                let since = *stalled_since.get_or_insert(now);
                if now - since >= QUIESCENCE_GRACE {
                    break SchedError::Deadlock(now - last_change);
                }
            } else {
                stalled_since = None;
            }
        };
        let makespan_ns = shared.trace.now_ns();
        self.teardown();
        let (events, regions) = self.shared.trace.collect();
        Err(RunFailure {
            trace: RunTrace {
                n_workers: self.n_workers(),
                makespan_ns,
                deadlock_detected: matches!(error, SchedError::Deadlock(_)),
                events,
                regions,
            },
            error,
        })
    }

    fn teardown(&mut self) {
        self.poisoned = true;
        self.shared.aborting.store(true, Ordering::Release);
        self.shared.stopping.store(true, Ordering::Release);
        self.shared.sleeper.wake_all();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        self.shared.carriers.shutdown();
        for q in &self.shared.workers {
            drop(q.gang_deq.drain());
            drop(q.suspended_q.drain());
            for lq in &q.normal_qs {
                drop(lq.drain());
            }
        }
        self.shared.timers.lock().clear();
    }

    /// Stops the workers and releases all threads.
    pub fn shutdown(mut self) {
        self.teardown();
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        if !self.threads.is_empty() {
            self.teardown();
        }
    }
}
