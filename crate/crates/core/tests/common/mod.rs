//! Random nested-region programs shared by the stress tests.
#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use gangsteal::{Ctx, RegionMode, RunFailure, RunReport, Runtime};
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64Mcg;

#[derive(Debug, Clone)]
pub struct RegionPlan {
    pub team: usize,
    pub mode: RegionMode,
    pub barriers: usize,
    pub forks: Vec<ForkPlan>,
}

/// Regions forked together by one member just before one of its barriers.
#[derive(Debug, Clone)]
pub struct ForkPlan {
    pub member: usize,
    pub before_barrier: usize,
    pub regions: Vec<RegionPlan>,
}

#[derive(Debug, Clone)]
pub struct Program {
    pub seed: u64,
    pub n_workers: usize,
    pub top: Vec<RegionPlan>,
}

impl Program {
    pub fn members(&self) -> usize {
        fn count(r: &RegionPlan) -> usize {
            r.team
                + r.forks
                    .iter()
                    .flat_map(|f| &f.regions)
                    .map(count)
                    .sum::<usize>()
        }
        self.top.iter().map(count).sum()
    }

    pub fn depth(&self) -> usize {
        fn depth(r: &RegionPlan) -> usize {
            1 + r
                .forks
                .iter()
                .flat_map(|f| &f.regions)
                .map(depth)
                .max()
                .unwrap_or(0)
        }
        self.top.iter().map(depth).max().unwrap_or(0)
    }
}

struct Gen {
    rng: Pcg64Mcg,
    n_workers: usize,
    max_depth: usize,
    budget: usize,
    gang_share: f64,
}

impl Gen {
    fn region(&mut self, depth: usize) -> RegionPlan {
        let team = self
            .rng
            .random_range(1..=self.n_workers)
            .min(self.budget.max(1));
        self.budget = self.budget.saturating_sub(team);
        let barriers = self.rng.random_range(1..=8);
        let mode = if self.rng.random_bool(self.gang_share) {
            RegionMode::Gang
        } else {
            RegionMode::WorkSteal
        };
        let mut forks = Vec::new();
        if depth < self.max_depth {
            for before_barrier in 0..barriers {
                if self.budget == 0 || !self.rng.random_bool(0.35) {
                    continue;
                }
                let member = self.rng.random_range(0..team);
                let n = self.rng.random_range(1..=2);
                let mut regions = Vec::new();
                for _ in 0..n {
                    if self.budget == 0 {
                        break;
                    }
                    regions.push(self.region(depth + 1));
                }
                forks.push(ForkPlan {
                    member,
                    before_barrier,
                    regions,
                });
            }
        }
        RegionPlan {
            team,
            mode,
            barriers,
            forks,
        }
    }
}

/// Nesting depth at most 6, team sizes at most `n_workers`, 1 to 8 barriers
/// per region.
pub fn random_program(seed: u64, n_workers: usize) -> Program {
    let mut g = Gen {
        rng: Pcg64Mcg::seed_from_u64(seed),
        n_workers,
        max_depth: 0,
        budget: 0,
        gang_share: 0.0,
    };
    g.max_depth = g.rng.random_range(1..=6);
    g.budget = g.rng.random_range(8..=96);
    g.gang_share = g.rng.random_range(0.5..=1.0);
    let n_top = g.rng.random_range(1..=3);
    let mut top = Vec::new();
    for _ in 0..n_top {
        if g.budget == 0 {
            break;
        }
        top.push(g.region(1));
    }
    Program {
        seed,
        n_workers,
        top,
    }
}

fn run_fork(ctx: &Ctx, regions: &[RegionPlan], done: &Arc<AtomicUsize>) {
    let handles: Vec<_> = regions
        .iter()
        .map(|plan| {
            let plan = Arc::new(plan.clone());
            let arrived: Arc<Vec<AtomicUsize>> =
                Arc::new((0..plan.barriers).map(|_| AtomicUsize::new(0)).collect());
            let done = done.clone();
            let p = plan.clone();
            ctx.fork_region(plan.team, Some(plan.mode), move |m| {
                run_member(m, &p, &arrived, &done)
            })
            .expect("fork failed")
        })
        .collect();
    for h in handles {
        h.join(ctx).expect("join failed");
    }
}

fn run_member(m: &Ctx, plan: &RegionPlan, arrived: &[AtomicUsize], done: &Arc<AtomicUsize>) {
    let me = m.thread_id().expect("member");
    for (b, count) in arrived.iter().enumerate() {
        for f in plan
            .forks
            .iter()
            .filter(|f| f.member == me && f.before_barrier == b)
        {
            run_fork(m, &f.regions, done);
        }
        count.fetch_add(1, Ordering::SeqCst);
        m.barrier().expect("barrier");
        let seen = count.load(Ordering::SeqCst);
        assert!(
            seen >= plan.team,
            "passed barrier {b} with {seen} of {} arrivals",
            plan.team
        );
    }
    done.fetch_add(1, Ordering::SeqCst);
}

/// Runs `program` and checks that every member ran to completion.
pub fn run_program(rt: &mut Runtime, program: &Program) -> Result<RunReport, RunFailure> {
    let top = program.top.clone();
    let expected = program.members();
    rt.run(move |ctx| {
        let done = Arc::new(AtomicUsize::new(0));
        run_fork(ctx, &top, &done);
        assert_eq!(done.load(Ordering::SeqCst), expected, "members lost");
    })
}
