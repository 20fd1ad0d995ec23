use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use gangsteal::trace::{EventKind, Source};
use gangsteal::{Dep, RegionMode, Runtime, SchedError, SchedulerConfig, TaskGroup, TaskSpec};

fn runtime(n: usize) -> Runtime {
    let mut cfg = SchedulerConfig::with_workers(n);
    cfg.watchdog_timeout = Duration::from_secs(20);
    Runtime::start(cfg).unwrap()
}

/// Start and end instants per label.
#[derive(Clone, Default)]
struct Spans(Arc<Mutex<HashMap<&'static str, (Instant, Instant)>>>);

impl Spans {
    fn body(
        &self,
        name: &'static str,
        work: Duration,
    ) -> impl FnOnce(&gangsteal::Ctx) + Send + 'static {
        let spans = self.clone();
        move |_| {
            let start = Instant::now();
            while start.elapsed() < work {
                std::thread::yield_now();
            }
            spans
                .0
                .lock()
                .unwrap()
                .insert(name, (start, Instant::now()));
        }
    }

    fn before(&self, a: &str, b: &str) -> bool {
        let s = self.0.lock().unwrap();
        s[a].1 <= s[b].0
    }
}

#[test]
fn read_after_write_waits_for_the_writer() {
    let mut rt = runtime(4);
    let spans = Spans::default();
    let sp = spans.clone();
    rt.run(move |ctx| {
        let g = TaskGroup::new();
        g.submit(
            ctx,
            TaskSpec::new([Dep::write(1)]),
            sp.body("w", Duration::from_millis(5)),
        )
        .unwrap();
        g.submit(
            ctx,
            TaskSpec::new([Dep::read(1)]),
            sp.body("r", Duration::ZERO),
        )
        .unwrap();
        g.wait(ctx);
    })
    .unwrap();
    assert!(spans.before("w", "r"));
}

#[test]
fn readers_of_one_write_run_together() {
    let mut rt = runtime(3);
    let both = Arc::new(AtomicUsize::new(0));
    let b = both.clone();
    rt.run(move |ctx| {
        let g = TaskGroup::new();
        g.submit(ctx, TaskSpec::new([Dep::write(7)]), |_| {})
            .unwrap();
        for _ in 0..2 {
            let b = b.clone();
            g.submit(ctx, TaskSpec::new([Dep::read(7)]), move |_| {
                b.fetch_add(1, Ordering::SeqCst);
                let t = Instant::now();
                // each reader waits to see the other one running
                while b.load(Ordering::SeqCst) < 2 && t.elapsed() < Duration::from_secs(5) {
                    std::thread::yield_now();
                }
            })
            .unwrap();
        }
        g.wait(ctx);
    })
    .unwrap();
    assert_eq!(both.load(Ordering::SeqCst), 2);
}

#[test]
fn diamond_final_writer_waits_for_both_readers() {
    let mut rt = runtime(4);
    let spans = Spans::default();
    let sp = spans.clone();
    rt.run(move |ctx| {
        let g = TaskGroup::new();
        let ms = Duration::from_millis(2);
        g.submit(ctx, TaskSpec::new([Dep::write(3)]), sp.body("w0", ms))
            .unwrap();
        g.submit(ctx, TaskSpec::new([Dep::read(3)]), sp.body("r1", ms))
            .unwrap();
        g.submit(ctx, TaskSpec::new([Dep::read(3)]), sp.body("r2", 2 * ms))
            .unwrap();
        g.submit(ctx, TaskSpec::new([Dep::write(3)]), sp.body("w3", ms))
            .unwrap();
        g.wait(ctx);
    })
    .unwrap();
    for (a, b) in [("w0", "r1"), ("w0", "r2"), ("r1", "w3"), ("r2", "w3")] {
        assert!(spans.before(a, b), "{a} should finish before {b} starts");
    }
}

#[test]
fn ready_tasks_pop_by_priority_on_the_owner() {
    let mut rt = runtime(1);
    let order = Arc::new(Mutex::new(Vec::new()));
    let o = order.clone();
    rt.run(move |ctx| {
        let g = TaskGroup::new();
        for (name, prio) in [("low", 0), ("high", 5), ("mid", 1), ("low2", 0)] {
            let o = o.clone();
            g.submit(
                ctx,
                TaskSpec::new([]).priority(prio).label(name),
                move |_| o.lock().unwrap().push(name),
            )
            .unwrap();
        }
        g.wait(ctx);
    })
    .unwrap();
    let order = order.lock().unwrap();
    assert_eq!(&order[..2], &["high", "mid"]);
    assert_eq!(order.len(), 4);
}

#[test]
fn successor_of_two_racing_predecessors_runs_once() {
    let mut rt = runtime(4);
    for round in 0..40 {
        let runs = Arc::new(AtomicUsize::new(0));
        let r = runs.clone();
        let report = rt
            .run(move |ctx| {
                let g = TaskGroup::new();
                for key in [10u64, 11] {
                    g.submit(ctx, TaskSpec::new([Dep::write(key)]), |_| {
                        std::thread::yield_now();
                    })
                    .unwrap();
                }
                g.submit(
                    ctx,
                    TaskSpec::new([Dep::read(10), Dep::read(11)]).label("succ"),
                    move |_| {
                        r.fetch_add(1, Ordering::SeqCst);
                    },
                )
                .unwrap();
                g.wait(ctx);
            })
            .unwrap();
        assert_eq!(runs.load(Ordering::SeqCst), 1, "round {round}");
        let starts = report
            .trace
            .events
            .iter()
            .filter(|e| e.kind == Some(EventKind::TaskStart) && e.label.as_deref() == Some("succ"))
            .count();
        assert_eq!(starts, 1);
    }
}

#[test]
fn ready_successor_lands_on_the_completing_worker() {
    // one worker: everything released by a completion must come from that
    // worker's own queue, never through a steal
    let mut rt = runtime(1);
    let report = rt
        .run(|ctx| {
            let g = TaskGroup::new();
            g.submit(ctx, TaskSpec::new([Dep::write(1)]), |_| {})
                .unwrap();
            g.submit(ctx, TaskSpec::new([Dep::read(1)]).label("succ"), |_| {})
                .unwrap();
            g.wait(ctx);
        })
        .unwrap();
    let succ = report
        .trace
        .events
        .iter()
        .find(|e| e.kind == Some(EventKind::TaskStart) && e.label.as_deref() == Some("succ"))
        .unwrap();
    assert_eq!(succ.via, Some(Source::Normal));
}

#[test]
fn submit_after_wait_is_a_usage_error() {
    let mut rt = runtime(2);
    let err = Arc::new(Mutex::new(None));
    let e = err.clone();
    rt.run(move |ctx| {
        let g = TaskGroup::new();
        g.submit(ctx, TaskSpec::new([]), |_| {}).unwrap();
        g.wait(ctx);
        assert!(g.is_finalized());
        *e.lock().unwrap() = Some(g.submit(ctx, TaskSpec::new([]), |_| {}).unwrap_err());
    })
    .unwrap();
    assert!(matches!(
        err.lock().unwrap().take(),
        Some(SchedError::Usage(_))
    ));
}

#[test]
fn tasks_without_dependences_all_run() {
    let mut rt = runtime(4);
    let n = Arc::new(AtomicUsize::new(0));
    let c = n.clone();
    rt.run(move |ctx| {
        let g = TaskGroup::new();
        for _ in 0..500 {
            let c = c.clone();
            g.submit(ctx, TaskSpec::new([]), move |_| {
                c.fetch_add(1, Ordering::SeqCst);
            })
            .unwrap();
        }
        g.wait(ctx);
        assert_eq!(g.outstanding(), 0);
    })
    .unwrap();
    assert_eq!(n.load(Ordering::SeqCst), 500);
    assert_eq!(rt.queued_items(), 0);
}

#[test]
fn task_forking_a_region_suspends_and_resumes() {
    let mut rt = runtime(4);
    let members = Arc::new(AtomicUsize::new(0));
    let m = members.clone();
    let report = rt
        .run(move |ctx| {
            let g = TaskGroup::new();
            for _ in 0..4 {
                let m = m.clone();
                g.submit(ctx, TaskSpec::new([]).label("forker"), move |t| {
                    let m = m.clone();
                    t.parallel(3, Some(RegionMode::WorkSteal), move |_| {
                        m.fetch_add(1, Ordering::SeqCst);
                    })
                    .unwrap();
                })
                .unwrap();
            }
            g.wait(ctx);
        })
        .unwrap();
    assert_eq!(members.load(Ordering::SeqCst), 12);
    let starts: Vec<_> = report
        .trace
        .events
        .iter()
        .filter(|e| e.kind == Some(EventKind::TaskStart) && e.task.is_some())
        .collect();
    assert_eq!(
        starts.iter().filter(|e| e.resumed == Some(false)).count(),
        4
    );
    // a task parked at its join comes back through the suspended queue or a steal
    assert!(starts
        .iter()
        .filter(|e| e.resumed == Some(true))
        .all(|e| matches!(e.via, Some(Source::Suspended) | Some(Source::Steal))));
}

#[test]
fn nested_taskwait_inside_a_gang_member() {
    let mut rt = runtime(4);
    let n = Arc::new(AtomicUsize::new(0));
    let c = n.clone();
    rt.run(move |ctx| {
        let c = c.clone();
        ctx.parallel(2, Some(RegionMode::Gang), move |m| {
            let g = TaskGroup::new();
            for k in 0..10u64 {
                let c = c.clone();
                g.submit(m, TaskSpec::new([Dep::write(k % 3)]), move |t| {
                    t.simulate_comm(Duration::from_micros(200));
                    c.fetch_add(1, Ordering::SeqCst);
                })
                .unwrap();
            }
            g.wait(m);
            m.barrier().unwrap();
        })
        .unwrap();
    })
    .unwrap();
    assert_eq!(n.load(Ordering::SeqCst), 20);
}
