//! Victim selection for work stealing.
//!
//! Each worker keeps a small window of the victims of its previous successful
//! steals plus a cursor. A selection consults the slot under the cursor: a
//! recorded victim is reused, an empty slot falls back to a random draw. A
//! success records the victim and advances the cursor, so the following
//! attempt usually draws at random; a failure clears the slot and moves the
//! cursor back to the previous successful victim. Workers therefore alternate
//! between their steal history and random probing.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64Mcg;
use serde::{Deserialize, Serialize};

use crate::worker::WorkerId;

/// Sentinel for an empty history slot.
pub const NO_VICTIM: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VictimPolicy {
    /// Alternate between history and random victims.
    #[default]
    Hybrid,
    /// Keep stealing from the last successful victim; random only after a miss.
    History,
    /// Always draw a random victim.
    Random,
}

impl fmt::Display for VictimPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VictimPolicy::Hybrid => "hybrid",
            VictimPolicy::History => "history",
            VictimPolicy::Random => "random",
        })
    }
}

impl FromStr for VictimPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hybrid" => Ok(Self::Hybrid),
            "history" => Ok(Self::History),
            "random" => Ok(Self::Random),
            other => Err(format!("unknown victim policy `{other}`")),
        }
    }
}

/// How a victim was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    History,
    Random,
}

/// Per-worker pseudo-random source; only its owning worker advances it.
#[derive(Debug, Clone)]
pub struct VictimRng(Pcg64Mcg);

impl VictimRng {
    pub fn new(seed: u64, worker: WorkerId) -> Self {
        // splitmix-style spread so neighbouring workers get unrelated streams
        let mut z = seed ^ (worker.index() as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        Self(Pcg64Mcg::seed_from_u64(z ^ (z >> 31)))
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }
}

/// Uniform draw over all workers except `me`; with a single worker returns `me`.
pub fn random_victim(rng: &mut VictimRng, me: WorkerId, n_workers: usize) -> WorkerId {
    if n_workers < 2 {
        return me;
    }
    loop {
        let v = rng.below(n_workers);
        if v != me.index() {
            return WorkerId::new(v);
        }
    }
}

/// Fixed-window record of previous successful steals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StealHistory {
    prev_victim: Vec<i64>,
    idx: usize,
}

impl StealHistory {
    pub fn new(window: usize) -> Self {
        assert!(window >= 1, "steal window must be at least 1");
        Self {
            prev_victim: vec![NO_VICTIM; window],
            idx: 0,
        }
    }

    pub fn window(&self) -> usize {
        self.prev_victim.len()
    }

    pub fn cursor(&self) -> usize {
        self.idx
    }

    pub fn slots(&self) -> &[i64] {
        &self.prev_victim
    }

    pub fn current(&self) -> Option<WorkerId> {
        let v = self.prev_victim[self.idx];
        (v >= 0).then(|| WorkerId::new(v as usize))
    }

    /// Chooses the next victim. Does not modify the history.
    pub fn select_victim(
        &self,
        policy: VictimPolicy,
        rng: &mut VictimRng,
        me: WorkerId,
        n_workers: usize,
    ) -> (WorkerId, SelectionMode) {
        if policy != VictimPolicy::Random {
            if let Some(v) = self.current() {
                return (v, SelectionMode::History);
            }
        }
        (random_victim(rng, me, n_workers), SelectionMode::Random)
    }

    pub fn record_steal_outcome(&mut self, policy: VictimPolicy, victim: WorkerId, success: bool) {
        match policy {
            VictimPolicy::Random => {}
            VictimPolicy::History => {
                self.prev_victim[self.idx] = if success {
                    victim.index() as i64
                } else {
                    NO_VICTIM
                };
            }
            VictimPolicy::Hybrid => {
                if success {
                    self.prev_victim[self.idx] = victim.index() as i64;
                    self.idx = (self.idx + 1).min(self.prev_victim.len() - 1);
                } else {
                    self.prev_victim[self.idx] = NO_VICTIM;
                    self.idx = self.idx.saturating_sub(1);
                }
            }
        }
    }
}
