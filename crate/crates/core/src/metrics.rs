//! Run metrics derived from a trace.

use std::collections::HashMap;

use serde::Serialize;

use crate::context::WaitReason;
use crate::trace::{EventKind, RunTrace};
use crate::victim::SelectionMode;

/// Half-open time interval `[start, end)` in nanoseconds.
pub type Span = (u64, u64);

/// Sorts and merges spans into a disjoint, ordered list.
pub fn merge_spans(mut spans: Vec<Span>) -> Vec<Span> {
    spans.retain(|(s, e)| e > s);
    spans.sort_unstable();
    let mut out: Vec<Span> = Vec::with_capacity(spans.len());
    for (s, e) in spans {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

pub fn total_len(spans: &[Span]) -> u64 {
    spans.iter().map(|(s, e)| e - s).sum()
}

/// Length of the intersection of two merged span lists.
pub fn overlap_len(a: &[Span], b: &[Span]) -> u64 {
    let (mut i, mut j, mut acc) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if hi > lo {
            acc += hi - lo;
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    acc
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct WorkerMetrics {
    pub busy_ns: u64,
    pub idle_ns: u64,
    /// Non-busy time during which some simulated transfer was in flight.
    pub comm_wait_ns: u64,
    pub items_started: u64,
    pub steals_history: u64,
    pub steals_random: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunMetrics {
    pub makespan_ns: u64,
    pub workers: Vec<WorkerMetrics>,
    /// Fraction of simulated-communication time during which at least one
    /// worker was executing a context.
    pub overlap_ratio: f64,
    pub comm_ns: u64,
    pub steals_history: u64,
    pub steals_random: u64,
    pub deadlock_detected: bool,
}

impl RunMetrics {
    pub fn from_trace(trace: &RunTrace) -> Self {
        let makespan = trace
            .makespan_ns
            .max(trace.events.last().map_or(0, |e| e.t_ns));
        let n = trace
            .n_workers
            .max(trace.events.iter().map(|e| e.worker + 1).max().unwrap_or(0));

        let mut busy: Vec<Vec<Span>> = vec![Vec::new(); n];
        let mut open_run: Vec<Option<u64>> = vec![None; n];
        let mut workers = vec![WorkerMetrics::default(); n];
        let mut comm_open: HashMap<u64, u64> = HashMap::new();
        let mut comm: Vec<Span> = Vec::new();

        for ev in &trace.events {
            let w = ev.worker;
            match ev.kind {
                Some(EventKind::TaskStart) => {
                    if let Some(s) = open_run[w].replace(ev.t_ns) {
                        busy[w].push((s, ev.t_ns));
                    }
                    workers[w].items_started += 1;
                }
                Some(EventKind::TaskEnd) => {
                    if let Some(s) = open_run[w].take() {
                        busy[w].push((s, ev.t_ns));
                    }
                }
                Some(EventKind::Steal) => match ev.mode {
                    Some(SelectionMode::History) => workers[w].steals_history += 1,
                    Some(SelectionMode::Random) => workers[w].steals_random += 1,
                    None => {}
                },
                Some(EventKind::Suspend) if ev.reason == Some(WaitReason::Comm) => {
                    if let Some(item) = ev.item {
                        comm_open.insert(item, ev.t_ns);
                    }
                }
                Some(EventKind::Resume) if ev.reason == Some(WaitReason::Comm) => {
                    if let Some(s) = ev.item.and_then(|i| comm_open.remove(&i)) {
                        comm.push((s, ev.t_ns));
                    }
                }
                _ => {}
            }
        }
        for (w, open) in open_run.into_iter().enumerate() {
            if let Some(s) = open {
                busy[w].push((s, makespan));
            }
        }
        comm.extend(comm_open.into_values().map(|s| (s, makespan)));

        let clip = |spans: Vec<Span>| -> Vec<Span> {
            merge_spans(
                spans
                    .into_iter()
                    .map(|(s, e)| (s.min(makespan), e.min(makespan)))
                    .collect(),
            )
        };
        let comm = clip(comm);
        let busy: Vec<Vec<Span>> = busy.into_iter().map(clip).collect();
        let any_busy = merge_spans(busy.iter().flatten().copied().collect());
        let comm_ns = total_len(&comm);

        for (w, spans) in busy.iter().enumerate() {
            let busy_ns = total_len(spans);
            let non_busy = complement(spans, makespan);
            let comm_wait = overlap_len(&non_busy, &comm);
            workers[w].busy_ns = busy_ns;
            workers[w].comm_wait_ns = comm_wait;
            workers[w].idle_ns = makespan - busy_ns - comm_wait;
        }

        let overlap_ratio = if comm_ns == 0 {
            0.0
        } else {
            overlap_len(&comm, &any_busy) as f64 / comm_ns as f64
        };
        Self {
            makespan_ns: makespan,
            steals_history: workers.iter().map(|w| w.steals_history).sum(),
            steals_random: workers.iter().map(|w| w.steals_random).sum(),
            workers,
            overlap_ratio,
            comm_ns,
            deadlock_detected: trace.deadlock_detected,
        }
    }
}

fn complement(spans: &[Span], end: u64) -> Vec<Span> {
    let mut out = Vec::new();
    let mut cursor = 0;
    for &(s, e) in spans {
        if s > cursor {
            out.push((cursor, s));
        }
        cursor = cursor.max(e);
    }
    if cursor < end {
        out.push((cursor, end));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::TraceEvent;

    fn ev(t: u64, worker: usize, kind: EventKind) -> TraceEvent {
        TraceEvent {
            t_ns: t,
            worker,
            kind: Some(kind),
            ..TraceEvent::default()
        }
    }

    fn comm(t0: u64, t1: u64, worker: usize, item: u64) -> [TraceEvent; 2] {
        let mut a = ev(t0, worker, EventKind::Suspend);
        a.reason = Some(WaitReason::Comm);
        a.item = Some(item);
        let mut b = ev(t1, worker, EventKind::Resume);
        b.reason = Some(WaitReason::Comm);
        b.item = Some(item);
        [a, b]
    }

    fn trace(mut events: Vec<TraceEvent>, makespan: u64) -> RunTrace {
        events.sort_by_key(|e| e.t_ns);
        RunTrace {
            n_workers: 2,
            makespan_ns: makespan,
            events,
            ..RunTrace::default()
        }
    }

    #[test]
    fn fully_covered_comm_overlaps_completely() {
        let mut events = comm(10, 20, 0, 7).to_vec();
        events.push(ev(5, 1, EventKind::TaskStart));
        events.push(ev(25, 1, EventKind::TaskEnd));
        let m = RunMetrics::from_trace(&trace(events, 30));
        assert_eq!(m.comm_ns, 10);
        assert_eq!(m.overlap_ratio, 1.0);
    }

    #[test]
    fn uncovered_comm_has_zero_overlap() {
        let mut events = comm(10, 20, 0, 7).to_vec();
        events.push(ev(0, 1, EventKind::TaskStart));
        events.push(ev(10, 1, EventKind::TaskEnd));
        let m = RunMetrics::from_trace(&trace(events, 30));
        assert_eq!(m.overlap_ratio, 0.0);
    }

    #[test]
    fn partial_cover() {
        let mut events = comm(10, 20, 0, 7).to_vec();
        events.push(ev(15, 1, EventKind::TaskStart));
        events.push(ev(40, 1, EventKind::TaskEnd));
        let m = RunMetrics::from_trace(&trace(events, 40));
        assert!((m.overlap_ratio - 0.5).abs() < 1e-12);
    }

    #[test]
    fn worker_time_partitions_makespan() {
        let mut events = comm(10, 30, 0, 1).to_vec();
        events.extend([
            ev(0, 0, EventKind::TaskStart),
            ev(10, 0, EventKind::TaskEnd),
            ev(30, 0, EventKind::TaskStart),
            ev(50, 0, EventKind::TaskEnd),
            ev(20, 1, EventKind::TaskStart),
            ev(45, 1, EventKind::TaskEnd),
        ]);
        let m = RunMetrics::from_trace(&trace(events, 60));
        let w0 = &m.workers[0];
        assert_eq!((w0.busy_ns, w0.comm_wait_ns, w0.idle_ns), (30, 20, 10));
        let w1 = &m.workers[1];
        assert_eq!((w1.busy_ns, w1.comm_wait_ns, w1.idle_ns), (25, 10, 25));
        for w in &m.workers {
            assert_eq!(w.busy_ns + w.idle_ns + w.comm_wait_ns, 60);
        }
    }

    #[test]
    fn span_helpers() {
        assert_eq!(
            merge_spans(vec![(5, 8), (1, 3), (2, 4), (8, 9)]),
            vec![(1, 4), (5, 9)]
        );
        assert_eq!(overlap_len(&[(0, 10)], &[(2, 3), (9, 12)]), 2);
        assert_eq!(complement(&[(2, 3)], 5), vec![(0, 2), (3, 5)]);
    }
}
