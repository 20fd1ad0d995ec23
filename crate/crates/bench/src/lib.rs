//! Fixtures shared by the scheduler benchmarks.

use std::time::Duration;

use gangsteal::workload::{ComputeMode, GangMode, Kernel, WorkloadSpec};
use gangsteal::{Ctx, Dep, RegionMode, TaskGroup, TaskSpec};

/// Deterministic per-worker gang loads with their sum.
pub fn load_table(n_workers: usize, seed: u64) -> (Vec<usize>, usize) {
    let mut x = seed | 1;
    let loads: Vec<usize> = (0..n_workers)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x % 4) as usize
        })
        .collect();
    let global = loads.iter().sum();
    (loads, global)
}

/// Small pipeline whose cost is dominated by scheduling rather than compute.
pub fn tiny_workload(kernel: Kernel, gang: GangMode) -> WorkloadSpec {
    WorkloadSpec {
        kernel,
        n_block_cols: 4,
        tiles_per_panel: 4,
        panel_team_size: 2,
        panel_steps: 2,
        compute_cost: Duration::from_micros(5),
        comm_latency: Duration::ZERO,
        gang,
        compute_mode: ComputeMode::Spin,
        ..WorkloadSpec::default()
    }
}

/// One region of `team` members, each crossing `barriers` barriers.
pub fn barrier_region(ctx: &Ctx, team: usize, barriers: usize, mode: RegionMode) {
    ctx.parallel(team, Some(mode), move |m| {
        for _ in 0..barriers {
            m.barrier().expect("barrier inside a region");
        }
    })
    .expect("fork");
}

/// `n` empty tasks chained through `width` rotating keys, then a taskwait.
pub fn task_chain(ctx: &Ctx, n: usize, width: u64) {
    let g = TaskGroup::new();
    for i in 0..n as u64 {
        let deps = [Dep::read(i % width), Dep::write((i + 1) % width)];
        g.submit(ctx, TaskSpec::new(deps), |_| {}).expect("submit");
    }
    g.wait(ctx);
}
