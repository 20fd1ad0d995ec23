mod common;

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use gangsteal::trace::{EventKind, RegionRecord, RunTrace, Source};
use gangsteal::{is_eligible_to_sched, GangId, GangTag, RegionMode, Runtime, SchedulerConfig};
use proptest::prelude::*;

fn runtime(n: usize) -> Runtime {
    let mut cfg = SchedulerConfig::with_workers(n);
    cfg.watchdog_timeout = Duration::from_secs(20);
    Runtime::start(cfg).unwrap()
}

struct Regions(HashMap<u64, RegionRecord>);

impl Regions {
    fn of(trace: &RunTrace) -> Self {
        Self(trace.regions.iter().map(|r| (r.id, r.clone())).collect())
    }

    /// `a` is `b` or lies below it. Regions missing from the record sit at the root.
    fn descends(&self, a: u64, b: u64) -> bool {
        let mut cur = Some(a);
        while let Some(id) = cur {
            if id == b {
                return true;
            }
            cur = self.0.get(&id).and_then(|r| r.parent);
        }
        false
    }

    fn depth(&self, id: u64) -> usize {
        self.0.get(&id).map_or(0, |r| r.depth)
    }

    fn gang(&self, id: u64) -> Option<GangTag> {
        let r = self.0.get(&id)?;
        Some(GangTag {
            gang_id: GangId(r.gang?),
            nest_level: r.gang_nest?,
        })
    }
}

/// Checks every scheduling decision recorded in `trace` against the admission
/// rules a blocked context imposes on its worker.
fn check_trace(trace: &RunTrace) -> Result<(), String> {
    let regions = Regions::of(trace);
    for e in trace
        .events
        .iter()
        .filter(|e| e.kind == Some(EventKind::TaskStart))
    {
        if e.via == Some(Source::Pinned) {
            continue;
        }
        let region = e.region.ok_or("start without region")?;
        // the root context lives in the depth-0 region; members sit at depth >= 1
        let is_task = e.task.is_some() || regions.depth(region) == 0;
        if let Some(tag) = regions.gang(region).filter(|_| !is_task) {
            let active = e.active_gang.map(|(g, n)| GangTag {
                gang_id: GangId(g),
                nest_level: n,
            });
            if !is_eligible_to_sched(active, tag) {
                return Err(format!(
                    "gang {tag:?} started under ineligible {active:?}: {e:?}"
                ));
            }
            continue;
        }
        let (Some(confined), Some(mode)) = (e.confined, e.confinement.as_deref()) else {
            continue;
        };
        let ok = match (mode, is_task) {
            ("mid", true) => regions.descends(region, confined),
            ("mid", false) => region != confined && regions.descends(region, confined),
            ("join", true) => {
                regions.descends(confined, region)
                    && regions.depth(region) <= regions.depth(confined)
            }
            ("join", false) => false,
            _ => return Err(format!("unknown confinement {mode}")),
        };
        if !ok {
            return Err(format!(
                "region {region} ran while confined to {confined} ({mode}): {e:?}"
            ));
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn random_nested_programs_complete_and_respect_admission(seed in any::<u64>(), n in 1usize..=6) {
        let program = common::random_program(seed, n);
        let mut rt = runtime(n);
        let report = common::run_program(&mut rt, &program)
            .map_err(|f| TestCaseError::fail(format!("seed {seed} on {n} workers: {f}")))?;
        check_trace(&report.trace).map_err(TestCaseError::fail)?;
        prop_assert_eq!(rt.gang_loads(), (0, vec![0; n]));
        prop_assert_eq!(rt.queued_items(), 0);
        prop_assert_eq!(rt.stats().order_violations, 0);
    }

    #[test]
    fn barriers_never_release_early(
        team in 2usize..=4,
        rounds in 1usize..=6,
        delays in proptest::collection::vec(0u32..40, 24),
        gang in any::<bool>(),
    ) {
        let mut rt = runtime(4);
        let arrivals = Arc::new((0..team).map(|_| AtomicUsize::new(0)).collect::<Vec<_>>());
        let bad = Arc::new(Mutex::new(Vec::new()));
        let delays = Arc::new(delays);
        let (a, b, d) = (arrivals.clone(), bad.clone(), delays.clone());
        let mode = if gang { RegionMode::Gang } else { RegionMode::WorkSteal };
        rt.run(move |ctx| {
            let (a, b, d) = (a.clone(), b.clone(), d.clone());
            ctx.parallel(team, Some(mode), move |m| {
                let me = m.thread_id().unwrap();
                for round in 0..rounds {
                    for _ in 0..d[(me * 7 + round) % d.len()] {
                        std::thread::yield_now();
                    }
                    a[me].fetch_add(1, Ordering::SeqCst);
                    m.barrier().unwrap();
                    // everyone has arrived at this round, nobody has passed the next one
                    let seen: Vec<usize> = a.iter().map(|x| x.load(Ordering::SeqCst)).collect();
                    if seen.iter().any(|&s| s < round + 1 || s > round + 2) {
                        b.lock().unwrap().push((me, round, seen));
                    }
                }
            })
            .unwrap();
        })
        .unwrap();
        prop_assert!(bad.lock().unwrap().is_empty(), "{:?}", bad.lock().unwrap());
        prop_assert!(arrivals.iter().all(|x| x.load(Ordering::SeqCst) == rounds));
    }
}

#[test]
fn gang_ids_grow_across_runs_of_one_runtime() {
    let mut rt = runtime(2);
    let ids = Arc::new(Mutex::new(Vec::new()));
    for _ in 0..3 {
        let ids = ids.clone();
        rt.run(move |ctx| {
            let h = ctx.fork_region(2, Some(RegionMode::Gang), |_| {}).unwrap();
            ids.lock().unwrap().push(h.gang_id().unwrap());
            h.join(ctx).unwrap();
        })
        .unwrap();
    }
    let ids = ids.lock().unwrap();
    assert!(ids.windows(2).all(|w| w[0] < w[1]), "{ids:?}");
    assert_eq!(rt.gang_ids_issued(), 3);
}
