//! Double-ended work queues: the owner pushes and pops at the back, thieves
//! take from the front.
//!
//! Queues are mutex-protected so that a thief can skip items it is not
//! allowed to run (confined stealing at barriers, gang eligibility) and take
//! the first admissible one instead of only the front element.

use std::collections::VecDeque;

use parking_lot::Mutex;

#[derive(Debug)]
struct Entry<T> {
    priority: i32,
    item: T,
}

#[derive(Debug)]
pub struct WorkQueue<T> {
    inner: Mutex<VecDeque<Entry<T>>>,
}

impl<T> Default for WorkQueue<T> {
    fn default() -> Self {
        Self {
            inner: Mutex::new(VecDeque::new()),
        }
    }
}

impl<T> WorkQueue<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Pushes at the owner end with default priority.
    pub fn push(&self, item: T) {
        self.push_with_priority(item, 0);
    }

    /// Inserts `item` as close to the owner end as its priority allows: it is
    /// placed behind every queued item of higher priority.
    pub fn push_with_priority(&self, item: T, priority: i32) {
        let mut q = self.inner.lock();
        let mut at = q.len();
        while at > 0 && q[at - 1].priority > priority {
            at -= 1;
        }
        q.insert(at, Entry { priority, item });
    }

    /// Owner end (LIFO).
    pub fn pop(&self) -> Option<T> {
        self.inner.lock().pop_back().map(|e| e.item)
    }

    /// Thief end (FIFO).
    pub fn steal(&self) -> Option<T> {
        self.inner.lock().pop_front().map(|e| e.item)
    }

    /// Owner-end pop of the first item satisfying `admit`.
    pub fn pop_where(&self, mut admit: impl FnMut(&T) -> bool) -> Option<T> {
        let mut q = self.inner.lock();
        let pos = q.iter().rposition(|e| admit(&e.item))?;
        q.remove(pos).map(|e| e.item)
    }

    /// Thief-end removal of the first item satisfying `admit`.
    pub fn steal_where(&self, mut admit: impl FnMut(&T) -> bool) -> Option<T> {
        let mut q = self.inner.lock();
        let pos = q.iter().position(|e| admit(&e.item))?;
        q.remove(pos).map(|e| e.item)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.lock().is_empty()
    }

    pub fn drain(&self) -> Vec<T> {
        self.inner.lock().drain(..).map(|e| e.item).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::sync::atomic::{AtomicBool, Ordering};
    use std::sync::Arc;

    #[test]
    fn owner_lifo_thief_fifo() {
        let q = WorkQueue::new();
        q.push(1);
        q.push(2);
        assert_eq!(q.pop(), Some(2));
        q.push(3);
        assert_eq!(q.steal(), Some(1));
        assert_eq!(q.steal(), Some(3));
        assert_eq!(q.steal(), None);
    }

    #[test]
    fn higher_priority_sits_at_owner_end() {
        let q = WorkQueue::new();
        q.push_with_priority("hi", 5);
        q.push_with_priority("lo", 0);
        q.push_with_priority("mid", 2);
        assert_eq!(q.pop(), Some("hi"));
        assert_eq!(q.pop(), Some("mid"));
        assert_eq!(q.pop(), Some("lo"));
    }

    #[test]
    fn filtered_removal_skips_inadmissible() {
        let q = WorkQueue::new();
        for i in 0..6 {
            q.push(i);
        }
        assert_eq!(q.steal_where(|x| x % 2 == 1), Some(1));
        assert_eq!(q.pop_where(|x| x % 2 == 0), Some(4));
        assert_eq!(q.steal_where(|x| *x > 10), None);
        assert_eq!(q.len(), 4);
    }

    #[test]
    fn concurrent_owner_and_thieves_conserve_items() {
        const N: usize = 20_000;
        let q = Arc::new(WorkQueue::new());
        let done = Arc::new(AtomicBool::new(false));
        let thieves: Vec<_> = (0..3)
            .map(|_| {
                let q = q.clone();
                let done = done.clone();
                std::thread::spawn(move || {
                    let mut got = Vec::new();
                    loop {
                        match q.steal() {
                            Some(x) => got.push(x),
                            None if done.load(Ordering::Acquire) => break,
                            None => std::thread::yield_now(),
                        }
                    }
                    got
                })
            })
            .collect();
        let mut owned = Vec::new();
        for i in 0..N {
            q.push(i);
            if i % 3 == 0 {
                owned.extend(q.pop());
            }
        }
        while let Some(x) = q.pop() {
            owned.push(x);
        }
        done.store(true, Ordering::Release);
        let mut all = owned;
        for t in thieves {
            all.extend(t.join().unwrap());
        }
        assert_eq!(all.len(), N);
        assert_eq!(all.into_iter().collect::<HashSet<_>>().len(), N);
    }
}
