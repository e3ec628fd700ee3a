//! Simulation bookkeeping: checkpoints, write logs, branch statistics and
//! the speculative-coverage buffer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::isa::{Flags, RollbackReason};
use crate::memory::Memory;
use crate::sanitizers::RegTags;

/// Saved state at a simulation entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Checkpoint {
    pub regs: [u32; 16],
    pub flags: Flags,
    pub tags: RegTags,
    /// Address of the simulation-entry intrinsic; execution resumes here.
    pub pc: u32,
    pub mem_mark: usize,
    pub tag_mark: usize,
    pub cov_mark: usize,
    pub branch: u32,
    /// Episode counter value when this level was entered.
    pub budget_used: u32,
    pub depth: u32,
}

/// Pre-write contents of `width` bytes at `addr`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemLogEntry {
    pub addr: u32,
    pub bytes: [u8; 4],
    pub width: u8,
}

/// Per-branch encounter counts, shared by every execution of a fuzzing
/// session.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchStats {
    pub encounters: BTreeMap<u32, u64>,
}

impl BranchStats {
    pub fn encounters(&self, branch: u32) -> u64 {
        self.encounters.get(&branch).copied().unwrap_or(0)
    }

    pub fn bump(&mut self, branch: u32) -> u64 {
        let e = self.encounters.entry(branch).or_insert(0);
        *e += 1;
        *e
    }

    pub fn merge(&mut self, delta: &BranchStats) {
        for (b, n) in &delta.encounters {
            *self.encounters.entry(*b).or_insert(0) += n;
        }
    }
}

/// Nest depth a branch may open once its first `full_depth_runs`
/// encounters are used up: 1, then one more level each time the
/// encounter count doubles, capped at `max_depth`.
pub fn permitted_depth(encounters: u64, full_depth_runs: u32, max_depth: u32) -> u32 {
    let runs = full_depth_runs.max(1) as u64;
    if encounters <= runs {
        return max_depth;
    }
    let doublings = (encounters / runs).ilog2();
    (1 + doublings).min(max_depth)
}

/// Whether a simulation entry at `depth` (number of open checkpoints) may
/// open a further level.
pub fn nesting_decision(encounters: u64, depth: u32, max_depth: u32, full_depth_runs: u32) -> bool {
    if depth >= max_depth {
        return false;
    }
    encounters <= full_depth_runs as u64 || depth < permitted_depth(encounters, full_depth_runs, max_depth)
}

/// How an episode ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EpisodeEnd {
    Budget,
    Forced(RollbackReason),
}

impl EpisodeEnd {
    pub fn name(self) -> &'static str {
        match self {
            EpisodeEnd::Budget => "budget",
            EpisodeEnd::Forced(r) => r.name(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episodes: u64,
    pub ends: BTreeMap<String, u64>,
    /// Maximum nest depth reached per episode.
    pub depth_histogram: BTreeMap<u32, u64>,
    /// Largest number of originals executed in one episode.
    pub max_episode_originals: u32,
}

impl EpisodeStats {
    pub fn record(&mut self, end: EpisodeEnd, max_depth: u32, originals: u32) {
        self.episodes += 1;
        *self.ends.entry(end.name().to_string()).or_insert(0) += 1;
        *self.depth_histogram.entry(max_depth).or_insert(0) += 1;
        self.max_episode_originals = self.max_episode_originals.max(originals);
    }

    pub fn merge(&mut self, other: &EpisodeStats) {
        self.episodes += other.episodes;
        for (k, v) in &other.ends {
            *self.ends.entry(k.clone()).or_insert(0) += v;
        }
        for (k, v) in &other.depth_histogram {
            *self.depth_histogram.entry(*k).or_insert(0) += v;
        }
        self.max_episode_originals = self.max_episode_originals.max(other.max_episode_originals);
    }
}

/// The simulation stack plus its logs.
#[derive(Clone, Debug, Default)]
pub struct SimState {
    pub stack: Vec<Checkpoint>,
    /// Originals executed in the current episode, across all levels.
    pub counter: u32,
    pub max_depth_seen: u32,
    pub mem_log: Vec<MemLogEntry>,
    pub tag_log: Vec<(u32, u8)>,
    pub cov_buf: Vec<u32>,
    /// Set by a depth-0 rollback; the resumed entry intrinsic skips once.
    pub consumed: bool,
}

impl SimState {
    pub fn depth(&self) -> u32 {
        self.stack.len() as u32
    }

    pub fn active(&self) -> bool {
        !self.stack.is_empty()
    }

    pub fn chain(&self) -> Vec<u32> {
        self.stack.iter().map(|c| c.branch).collect()
    }

    pub fn log_write(&mut self, mem: &Memory, addr: u32, width: u32) {
        let mut bytes = [0u8; 4];
        mem.read(addr, &mut bytes[..width as usize]);
        self.mem_log.push(MemLogEntry { addr, bytes, width: width as u8 });
    }

    pub fn log_byte(&mut self, addr: u32, old: u8) {
        self.mem_log.push(MemLogEntry { addr, bytes: [old, 0, 0, 0], width: 1 });
    }

    /// Replays both logs newest-first down to `cp`'s watermarks.
    pub fn unwind_logs(&mut self, mem: &mut Memory, mem_mark: usize, tag_mark: usize) {
        while self.mem_log.len() > mem_mark {
            let e = self.mem_log.pop().unwrap();
            mem.write(e.addr, &e.bytes[..e.width as usize]);
        }
        while self.tag_log.len() > tag_mark {
            let (a, old) = self.tag_log.pop().unwrap();
            mem.write_u8(a, old);
        }
    }

    /// Unwinds every level and returns the outermost checkpoint together
    /// with the guard ids buffered during the episode.
    pub fn rollback_all(&mut self, mem: &mut Memory) -> (Checkpoint, Vec<u32>) {
        let outer = self.stack.first().cloned().expect("rollback outside simulation");
        self.unwind_logs(mem, outer.mem_mark, outer.tag_mark);
        self.stack.clear();
        let flushed = self.cov_buf.split_off(outer.cov_mark);
        self.counter = 0;
        self.max_depth_seen = 0;
        self.consumed = true;
        (outer, flushed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_table() {
        let p = |e| permitted_depth(e, 5, 6);
        assert_eq!((1..=5).map(p).collect::<Vec<_>>(), vec![6; 5]);
        assert_eq!(p(6), 1);
        assert_eq!(p(9), 1);
        assert_eq!(p(10), 2);
        assert_eq!(p(20), 3);
        assert_eq!(p(40), 4);
        assert_eq!(p(80), 5);
        assert_eq!(p(160), 6);
        assert_eq!(p(100_000), 6);
    }

    #[test]
    fn nesting_examples() {
        assert!(nesting_decision(2, 4, 6, 5));
        assert!(nesting_decision(3, 1, 6, 5));
        // 100 encounters: permitted depth 1 + floor(log2(20)) = 5.
        assert!(!nesting_decision(100, 5, 6, 5));
        assert!(!nesting_decision(10, 2, 6, 5));
        for e in [1, 5, 1000] {
            assert!(!nesting_decision(e, 6, 6, 5));
        }
    }

    #[test]
    fn two_writes_same_address_restore_first_value() {
        let mut mem = Memory::new();
        let mut sim = SimState::default();
        mem.write_uint(0x0300_0000, 4, 11);
        sim.stack.push(Checkpoint {
            regs: [0; 16],
            flags: Flags::default(),
            tags: RegTags::default(),
            pc: 0,
            mem_mark: 0,
            tag_mark: 0,
            cov_mark: 0,
            branch: 0,
            budget_used: 0,
            depth: 0,
        });
        sim.log_write(&mem, 0x0300_0000, 4);
        mem.write_uint(0x0300_0000, 4, 22);
        sim.log_write(&mem, 0x0300_0000, 4);
        mem.write_uint(0x0300_0000, 4, 33);
        assert_eq!(sim.mem_log.len(), 2);
        sim.cov_buf.extend([3, 3]);
        let (_, flushed) = sim.rollback_all(&mut mem);
        assert_eq!(mem.read_uint(0x0300_0000, 4), 11);
        assert_eq!(flushed, vec![3, 3]);
        assert!(sim.consumed && !sim.active());
    }

    proptest! {
        #[test]
        fn random_writes_roll_back_exactly(writes in proptest::collection::vec((0u32..512, any::<u32>(), prop_oneof![Just(1u32), Just(4u32)]), 0..1000)) {
            let mut mem = Memory::new();
            for i in 0..64u32 {
                mem.write_u8(0x0300_0000 + i * 7, i as u8);
            }
            let before = mem.clone();
            let mut sim = SimState::default();
            for (off, val, width) in writes {
                let addr = 0x0300_0000 + off;
                sim.log_write(&mem, addr, width);
                mem.write_uint(addr, width, val);
            }
            sim.unwind_logs(&mut mem, 0, 0);
            prop_assert!(mem == before);
        }

        #[test]
        fn permitted_depth_in_range(e in 1u64..1_000_000, runs in 1u32..10, max in 1u32..8) {
            let d = permitted_depth(e, runs, max);
            prop_assert!(d >= 1 && d <= max);
        }
    }
}
