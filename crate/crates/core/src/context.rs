//! Suspendable execution contexts.
//!
//! Every work item runs on a carrier thread. A worker hands its turn to the
//! carrier and waits until the context yields back, so at most one of them
//! runs at a time. A context that blocks either stays pinned on its worker's
//! stack (gang members) or parks off the worker entirely; in the latter case
//! whoever satisfies the wait re-enqueues it and any worker may resume it.

use std::cell::{Cell, RefCell};
use std::panic::{self, AssertUnwindSafe};
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use crossbeam_channel::{unbounded, Receiver, Sender};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::gang::GangTag;
use crate::region::Region;
use crate::runtime::Shared;
use crate::task::{GroupState, TaskNode, TaskState};
use crate::trace::EventKind;
use crate::worker::WorkerId;

pub(crate) type Body = Box<dyn FnOnce(&Ctx) + Send + 'static>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    Root,
    Task,
    Member,
}

/// Why a context stopped running before finishing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaitReason {
    Barrier,
    Join,
    TaskWait,
    Comm,
}

/// Identity and scheduling metadata shared by an item and its context.
pub(crate) struct ItemMeta {
    pub id: u64,
    pub kind: ItemKind,
    /// Region the item belongs to; for members, the region they are members of.
    pub region: Arc<Region>,
    /// Nest level the item runs at; indexes the worker's normal queues.
    pub level: usize,
    pub gang: Option<GangTag>,
    pub thread_id: usize,
    pub priority: i32,
    pub label: Option<&'static str>,
    pub gang_flag: bool,
    pub task: Option<Arc<TaskNode>>,
    pub group: Option<Arc<GroupState>>,
    /// Worker currently accounting this gang context in the load table.
    pub load_holder: AtomicUsize,
    pub last_worker: AtomicUsize,
}

impl ItemMeta {
    pub fn last_worker(&self) -> WorkerId {
        WorkerId::new(self.last_worker.load(Ordering::Acquire))
    }
}

pub(crate) enum ItemBody {
    Fresh(Body),
    Parked(Sender<CarrierMsg>),
}

pub(crate) struct WorkItem {
    pub meta: Arc<ItemMeta>,
    pub body: ItemBody,
}

pub(crate) enum CarrierMsg {
    Start {
        meta: Arc<ItemMeta>,
        body: Body,
        worker: WorkerId,
        reply: Sender<Yield>,
    },
    Resume {
        worker: WorkerId,
        reply: Sender<Yield>,
    },
    Abort,
}

/// Condition a pinned context waits on.
#[derive(Clone)]
pub(crate) enum WaitCond {
    Barrier {
        region: Arc<Region>,
        generation: u64,
    },
    Join(Arc<Region>),
    Group(Arc<GroupState>),
    Until(Instant),
}

impl WaitCond {
    pub fn is_met(&self) -> bool {
        match self {
            WaitCond::Barrier { region, generation } => region.barrier.generation() > *generation,
            WaitCond::Join(region) => region.is_done(),
            WaitCond::Group(group) => group.is_idle(),
            WaitCond::Until(at) => Instant::now() >= *at,
        }
    }

    pub fn reason(&self) -> WaitReason {
        match self {
            WaitCond::Barrier { .. } => WaitReason::Barrier,
            WaitCond::Join(_) => WaitReason::Join,
            WaitCond::Group(_) => WaitReason::TaskWait,
            WaitCond::Until(_) => WaitReason::Comm,
        }
    }
}

pub(crate) enum Yield {
    Finished,
    Pinned(WaitCond),
    Parked,
    Failed(String),
    Aborted,
}

/// Unwind payload used to tear down contexts of an aborted run.
pub(crate) struct AbortUnwind;

pub(crate) struct CarrierLink {
    rx: Receiver<CarrierMsg>,
    tx: Sender<CarrierMsg>,
    worker: Cell<WorkerId>,
    reply: RefCell<Option<Sender<Yield>>>,
}

/// Where a parked context goes once its wait is over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Requeue {
    Suspended,
    Normal,
}

/// A parked context together with its re-enqueue target.
pub(crate) struct Waiter {
    pub item: WorkItem,
    pub requeue: Requeue,
}

impl Waiter {
    pub fn wake(self, shared: &Shared) {
        let worker = self.item.meta.last_worker();
        shared.enqueue(worker, self.item, self.requeue);
    }
}

/// Handle a running context uses to talk to the runtime.
///
/// A `Ctx` is only valid on the context it was handed to and cannot be sent
/// to other threads.
pub struct Ctx {
    pub(crate) shared: Arc<Shared>,
    pub(crate) meta: Arc<ItemMeta>,
    pub(crate) link: Rc<CarrierLink>,
    pub(crate) gang_flag: Cell<bool>,
}

impl Ctx {
    pub fn worker_id(&self) -> WorkerId {
        self.link.worker.get()
    }

    pub fn nest_level(&self) -> usize {
        self.meta.level
    }

    pub fn region_id(&self) -> u64 {
        self.meta.region.id
    }

    /// Member index within the enclosing region, for region members.
    pub fn thread_id(&self) -> Option<usize> {
        (self.meta.kind == ItemKind::Member).then_some(self.meta.thread_id)
    }

    pub fn team_size(&self) -> usize {
        self.meta.region.team_size
    }

    pub fn gang(&self) -> Option<GangTag> {
        self.meta.gang
    }

    pub fn item_id(&self) -> u64 {
        self.meta.id
    }

    pub fn n_workers(&self) -> usize {
        self.shared.config.n_workers
    }

    pub(crate) fn is_pinning(&self) -> bool {
        self.meta.gang.is_some()
    }

    pub(crate) fn trace(&self, kind: EventKind, reason: Option<WaitReason>) {
        self.trace_at(self.shared.trace.now_ns(), kind, reason);
    }

    pub(crate) fn trace_at(&self, t_ns: u64, kind: EventKind, reason: Option<WaitReason>) {
        self.shared.trace.record(self.worker_id(), kind, |e| {
            e.t_ns = t_ns;
            e.item = Some(self.meta.id);
            e.region = Some(self.meta.region.id);
            e.reason = reason;
            e.label = self.meta.label.map(str::to_string);
        });
    }

    /// Hands the worker back and waits to be resumed.
    pub(crate) fn yield_to_worker(&self, y: Yield) {
        let reply = self.link.reply.borrow_mut().take();
        if let Some(reply) = reply {
            let _ = reply.send(y);
        }
        match self.link.rx.recv() {
            Ok(CarrierMsg::Resume { worker, reply }) => {
                self.link.worker.set(worker);
                self.meta
                    .last_worker
                    .store(worker.index(), Ordering::Release);
                *self.link.reply.borrow_mut() = Some(reply);
                if self.shared.is_aborting() {
                    panic::resume_unwind(Box::new(AbortUnwind));
                }
            }
            Ok(CarrierMsg::Start { .. }) => unreachable!("carrier received a job while parked"),
            Ok(CarrierMsg::Abort) | Err(_) => panic::resume_unwind(Box::new(AbortUnwind)),
        }
    }

    /// Blocks a pinning context on `cond` while its worker keeps scheduling.
    pub(crate) fn pin_until(&self, cond: WaitCond) {
        while !cond.is_met() {
            self.yield_to_worker(Yield::Pinned(cond.clone()));
        }
    }

    /// Builds the parked handle for this context.
    pub(crate) fn parked_item(&self) -> WorkItem {
        WorkItem {
            meta: self.meta.clone(),
            body: ItemBody::Parked(self.link.tx.clone()),
        }
    }

    pub(crate) fn park(&self) {
        if let Some(task) = &self.meta.task {
            task.set_state(TaskState::Suspended);
        }
        self.yield_to_worker(Yield::Parked);
        if let Some(task) = &self.meta.task {
            task.set_state(TaskState::Running);
        }
    }
}

/// Pool of carrier threads reused across items.
pub(crate) struct CarrierPool {
    idle: Mutex<Vec<Sender<CarrierMsg>>>,
    all: Mutex<Vec<(Sender<CarrierMsg>, std::thread::JoinHandle<()>)>>,
}

impl CarrierPool {
    pub fn new() -> Self {
        Self {
            idle: Mutex::new(Vec::new()),
            all: Mutex::new(Vec::new()),
        }
    }

    pub fn live(&self) -> usize {
        self.all.lock().len()
    }

    pub fn acquire(&self, shared: &Arc<Shared>) -> Sender<CarrierMsg> {
        if let Some(tx) = self.idle.lock().pop() {
            return tx;
        }
        let (tx, rx) = unbounded();
        let link_tx = tx.clone();
        let weak = Arc::downgrade(shared);
        let handle = std::thread::Builder::new()
            .name("gangsteal-ctx".into())
            .spawn(move || carrier_main(weak, rx, link_tx))
            .expect("failed to spawn carrier thread");
        self.all.lock().push((tx.clone(), handle));
        tx
    }

    fn release(&self, tx: Sender<CarrierMsg>) {
        self.idle.lock().push(tx);
    }

    /// Stops every carrier, unwinding parked contexts.
    pub fn shutdown(&self) {
        let all: Vec<_> = std::mem::take(&mut *self.all.lock());
        self.idle.lock().clear();
        for (tx, _) in &all {
            let _ = tx.send(CarrierMsg::Abort);
        }
        for (tx, handle) in all {
            drop(tx);
            let _ = handle.join();
        }
    }
}

fn carrier_main(shared: std::sync::Weak<Shared>, rx: Receiver<CarrierMsg>, tx: Sender<CarrierMsg>) {
    let link = Rc::new(CarrierLink {
        rx,
        tx,
        worker: Cell::new(WorkerId::new(0)),
        reply: RefCell::new(None),
    });
    loop {
        let msg = match link.rx.recv() {
            Ok(m) => m,
            Err(_) => return,
        };
        let (meta, body, worker, reply) = match msg {
            CarrierMsg::Start {
                meta,
                body,
                worker,
                reply,
            } => (meta, body, worker, reply),
            CarrierMsg::Resume { .. } => continue,
            CarrierMsg::Abort => return,
        };
        let Some(shared) = shared.upgrade() else {
            return;
        };
        link.worker.set(worker);
        meta.last_worker.store(worker.index(), Ordering::Release);
        *link.reply.borrow_mut() = Some(reply);
        let ctx = Ctx {
            shared: shared.clone(),
            gang_flag: Cell::new(meta.gang_flag),
            meta,
            link: link.clone(),
        };
        if let Some(task) = &ctx.meta.task {
            task.set_state(TaskState::Running);
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| {
            body(&ctx);
            ctx.finish_item();
        }));
        let y = match outcome {
            Ok(()) => Yield::Finished,
            Err(payload) if payload.is::<AbortUnwind>() => Yield::Aborted,
            Err(payload) => Yield::Failed(panic_message(&payload)),
        };
        let aborted = matches!(y, Yield::Aborted);
        let failed = matches!(y, Yield::Failed(_));
        drop(ctx);
        if !aborted && !failed {
            shared.carriers.release(link.tx.clone());
        }
        if let Some(reply) = link.reply.borrow_mut().take() {
            let _ = reply.send(y);
        }
        if aborted || failed {
            return;
        }
    }
}

fn panic_message(payload: &Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".to_string()
    }
}
