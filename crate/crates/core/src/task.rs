//! Dependence-tracked tasks.
//!
//! Tasks are submitted to a [`TaskGroup`] with a list of read/write accesses
//! on opaque keys. Per key the group remembers the last writer and the
//! readers since; a read waits for the last writer, a write waits for the
//! last writer and every reader since. A task whose predecessors are all done
//! is pushed to the local queue of the worker that discovered it ready.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU8, AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::Serialize;

use crate::context::{
    Body, Ctx, ItemBody, ItemKind, ItemMeta, Requeue, WaitCond, WaitReason, Waiter, WorkItem,
};
use crate::error::{Result, SchedError};
use crate::runtime::Shared;
use crate::trace::EventKind;
use crate::worker::WorkerId;

/// Opaque dependence key, e.g. a tile coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct DepKey(pub u64);

impl DepKey {
    pub const fn tile(row: u32, col: u32) -> Self {
        Self(((row as u64) << 32) | col as u64)
    }
}

impl From<u64> for DepKey {
    fn from(v: u64) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Access {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dep {
    pub key: DepKey,
    pub access: Access,
}

impl Dep {
    pub fn read(key: impl Into<DepKey>) -> Self {
        Self {
            key: key.into(),
            access: Access::Read,
        }
    }

    pub fn write(key: impl Into<DepKey>) -> Self {
        Self {
            key: key.into(),
            access: Access::Write,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct TaskId(pub u64);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum TaskState {
    Waiting = 0,
    Ready = 1,
    Running = 2,
    Suspended = 3,
    Done = 4,
}

impl TaskState {
    fn from_u8(v: u8) -> Self {
        match v {
            0 => Self::Waiting,
            1 => Self::Ready,
            2 => Self::Running,
            3 => Self::Suspended,
            _ => Self::Done,
        }
    }
}

pub(crate) struct TaskNode {
    pub id: u64,
    unmet: AtomicUsize,
    state: AtomicU8,
    /// `None` once the task is done.
    successors: Mutex<Option<Vec<Arc<TaskNode>>>>,
    pending: Mutex<Option<WorkItem>>,
}

impl TaskNode {
    pub fn state(&self) -> TaskState {
        TaskState::from_u8(self.state.load(Ordering::Acquire))
    }

    pub(crate) fn set_state(&self, s: TaskState) {
        self.state.store(s as u8, Ordering::Release);
    }

    /// Drops one unmet dependence; returns the item if this made it ready.
    fn satisfy_one(&self) -> Option<WorkItem> {
        if self.unmet.fetch_sub(1, Ordering::AcqRel) == 1 {
            self.set_state(TaskState::Ready);
            self.pending.lock().take()
        } else {
            None
        }
    }
}

#[derive(Default)]
struct KeyState {
    last_writer: Option<Arc<TaskNode>>,
    readers: Vec<Arc<TaskNode>>,
}

pub(crate) struct GroupState {
    keys: Mutex<HashMap<DepKey, KeyState>>,
    outstanding: AtomicUsize,
    finalized: AtomicBool,
    waiter: Mutex<Option<Waiter>>,
}

impl GroupState {
    pub fn is_idle(&self) -> bool {
        self.outstanding.load(Ordering::Acquire) == 0
    }

    fn task_done(&self, shared: &Shared) {
        let mut waiter = self.waiter.lock();
        if self.outstanding.fetch_sub(1, Ordering::AcqRel) == 1 {
            if let Some(w) = waiter.take() {
                drop(waiter);
                w.wake(shared);
            }
            shared.sleeper.wake_all();
        }
    }
}

/// Options for one task submission.
#[derive(Debug, Clone, Default)]
pub struct TaskSpec {
    pub deps: Vec<Dep>,
    pub priority: i32,
    pub label: Option<&'static str>,
}

impl TaskSpec {
    pub fn new(deps: impl IntoIterator<Item = Dep>) -> Self {
        Self {
            deps: deps.into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn priority(mut self, priority: i32) -> Self {
        self.priority = priority;
        self
    }

    pub fn label(mut self, label: &'static str) -> Self {
        self.label = Some(label);
        self
    }
}

/// A set of dependence-tracked tasks that can be waited on together.
#[derive(Clone)]
pub struct TaskGroup {
    state: Arc<GroupState>,
}

impl Default for TaskGroup {
    fn default() -> Self {
        Self::new()
    }
}

impl TaskGroup {
    pub fn new() -> Self {
        Self {
            state: Arc::new(GroupState {
                keys: Mutex::new(HashMap::new()),
                outstanding: AtomicUsize::new(0),
                finalized: AtomicBool::new(false),
                waiter: Mutex::new(None),
            }),
        }
    }

    pub fn outstanding(&self) -> usize {
        self.state.outstanding.load(Ordering::Acquire)
    }

    pub fn is_finalized(&self) -> bool {
        self.state.finalized.load(Ordering::Acquire)
    }

    /// Registers a task. It runs once every conflicting earlier task in this
    /// group is done.
    pub fn submit(
        &self,
        ctx: &Ctx,
        spec: TaskSpec,
        body: impl FnOnce(&Ctx) + Send + 'static,
    ) -> Result<TaskId> {
        self.submit_boxed(ctx, spec, Box::new(body))
    }

    fn submit_boxed(&self, ctx: &Ctx, spec: TaskSpec, body: Body) -> Result<TaskId> {
        if self.is_finalized() {
            return Err(SchedError::Usage(
                "task submitted after its group was finalized",
            ));
        }
        let shared = &ctx.shared;
        let id = shared.next_id();
        // the extra unmet count holds the task back until registration is over
        let node = Arc::new(TaskNode {
            id,
            unmet: AtomicUsize::new(1),
            state: AtomicU8::new(TaskState::Waiting as u8),
            successors: Mutex::new(Some(Vec::new())),
            pending: Mutex::new(None),
        });
        let meta = Arc::new(ItemMeta {
            id,
            kind: ItemKind::Task,
            region: ctx.meta.region.clone(),
            level: ctx.nest_level(),
            gang: None,
            thread_id: 0,
            priority: spec.priority,
            label: spec.label,
            gang_flag: ctx.gang_flag.get(),
            task: Some(node.clone()),
            group: Some(self.state.clone()),
            load_holder: AtomicUsize::new(ctx.worker_id().index()),
            last_worker: AtomicUsize::new(ctx.worker_id().index()),
        });
        *node.pending.lock() = Some(WorkItem {
            meta,
            body: ItemBody::Fresh(body),
        });
        self.state.outstanding.fetch_add(1, Ordering::AcqRel);
        shared.live_add(1);

        let mut preds: Vec<Arc<TaskNode>> = Vec::new();
        {
            let mut keys = self.state.keys.lock();
            for dep in &spec.deps {
                let ks = keys.entry(dep.key).or_default();
                match dep.access {
                    Access::Read => {
                        preds.extend(ks.last_writer.clone());
                        ks.readers.push(node.clone());
                    }
                    Access::Write => {
                        preds.extend(ks.last_writer.replace(node.clone()));
                        preds.append(&mut ks.readers);
                    }
                }
            }
        }
        preds.sort_by_key(|p| p.id);
        preds.dedup_by_key(|p| p.id);
        for pred in preds.iter().filter(|p| p.id != id) {
            let mut succ = pred.successors.lock();
            if let Some(list) = succ.as_mut() {
                node.unmet.fetch_add(1, Ordering::AcqRel);
                list.push(node.clone());
            }
        }
        if let Some(item) = node.satisfy_one() {
            let level = item.meta.level;
            shared.workers[ctx.worker_id().index()].push_local(item, level);
            shared.sleeper.wake_one();
        }
        Ok(TaskId(id))
    }

    /// Blocks `ctx` until every task submitted to this group is done, then
    /// finalizes the group.
    pub fn wait(&self, ctx: &Ctx) {
        if !self.state.is_idle() {
            ctx.trace(EventKind::Suspend, Some(WaitReason::TaskWait));
            if ctx.is_pinning() {
                ctx.pin_until(WaitCond::Group(self.state.clone()));
            } else {
                let mut waiter = self.state.waiter.lock();
                if !self.state.is_idle() {
                    *waiter = Some(Waiter {
                        item: ctx.parked_item(),
                        requeue: Requeue::Suspended,
                    });
                    drop(waiter);
                    ctx.park();
                }
            }
            ctx.trace(EventKind::Resume, Some(WaitReason::TaskWait));
        }
        self.state.finalized.store(true, Ordering::Release);
    }
}

/// Completion protocol for a task body that returned.
pub(crate) fn complete_task(ctx: &Ctx) {
    let meta = &ctx.meta;
    let (Some(node), Some(group)) = (meta.task.as_ref(), meta.group.as_ref()) else {
        return;
    };
    debug_assert_eq!(node.state(), TaskState::Running);
    node.set_state(TaskState::Done);
    let successors = node.successors.lock().take().unwrap_or_default();
    let here: WorkerId = ctx.worker_id();
    let mut woke = false;
    for succ in successors {
        if let Some(item) = succ.satisfy_one() {
            let level = item.meta.level;
            ctx.shared.workers[here.index()].push_local(item, level);
            woke = true;
        }
    }
    if woke {
        ctx.shared.sleeper.wake_one();
    }
    group.task_done(&ctx.shared);
}
