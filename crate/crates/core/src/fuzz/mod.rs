//! Fuzzing harness: input mutation, the coverage-guided loop, gadget
//! injection and the reference explorer.
//!
//! The loop runs in rounds. Every execution of a round is derived from the
//! corpus and branch statistics as they stood when the round began, and
//! results are merged in execution order, so the outcome depends on the
//! master seed and the execution budget but not on the worker count.

pub mod inject;
pub mod oracle;

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::policy::{input_id, ReportStore};
use crate::runtime::{BranchStats, EpisodeStats};
use crate::vm::{Counters, Coverage, RunOptions, RunResult, RunStatus, Vm};

pub use inject::{inject_gadgets, score_injection, GroundTruth, InjectError, Injection, Score, Template};
pub use oracle::{oracle_explore, OracleResult};

const INTERESTING: [u8; 9] = [0, 1, 7, 8, 15, 16, 0x7f, 0x80, 0xff];

/// One random edit of `input`. `others` supplies splice partners.
pub fn mutate(input: &[u8], others: &[Vec<u8>], max_len: usize, rng: &mut impl Rng) -> Vec<u8> {
    let mut out = input.to_vec();
    if out.is_empty() {
        out.push(rng.gen());
        return out;
    }
    match rng.gen_range(0..8) {
        0 => {
            let i = rng.gen_range(0..out.len());
            out[i] ^= 1 << rng.gen_range(0..8);
        }
        1 => {
            let i = rng.gen_range(0..out.len());
            out[i] = *INTERESTING.choose(rng).unwrap();
        }
        2 => {
            let i = rng.gen_range(0..out.len());
            let d = rng.gen_range(1..=16u8);
            out[i] = if rng.gen() { out[i].wrapping_add(d) } else { out[i].wrapping_sub(d) };
        }
        3 => {
            let i = rng.gen_range(0..out.len());
            out[i] = rng.gen();
        }
        4 if out.len() < max_len => {
            let i = rng.gen_range(0..=out.len());
            out.insert(i, rng.gen());
        }
        5 if out.len() > 1 => {
            let i = rng.gen_range(0..out.len());
            out.remove(i);
        }
        6 if !others.is_empty() => {
            // Splice: a prefix of this input and a suffix of another.
            let other = others.choose(rng).unwrap();
            let cut = rng.gen_range(0..=out.len());
            let from = rng.gen_range(0..=other.len());
            out.truncate(cut);
            out.extend_from_slice(&other[from..]);
        }
        _ => {
            let i = rng.gen_range(0..out.len());
            let v = rng.gen_range(0..=32u8);
            out[i] = v;
        }
    }
    out.truncate(max_len.max(1));
    out
}

fn random_input(max_len: usize, rng: &mut impl Rng) -> Vec<u8> {
    let len = rng.gen_range(1..=max_len.max(1));
    (0..len).map(|_| rng.gen()).collect()
}

#[derive(Clone, Debug)]
pub struct FuzzConfig {
    pub executions: u64,
    /// Optional wall-clock cut-off. Runs stopped by it are not reproducible.
    pub wall_time: Option<Duration>,
    pub seed: u64,
    pub workers: usize,
    pub max_input_len: usize,
    /// Executions per round.
    pub batch: usize,
    pub run: RunOptions,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig {
            executions: 1000,
            wall_time: None,
            seed: 0,
            workers: 1,
            max_input_len: 64,
            batch: 32,
            run: RunOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub input: Vec<u8>,
    pub normal: BTreeSet<(u32, bool)>,
    pub spec: BTreeSet<u32>,
}

#[derive(Clone, Debug)]
pub struct FuzzOutcome {
    pub reports: ReportStore,
    pub coverage: Coverage,
    pub corpus: Vec<CorpusEntry>,
    pub episodes: EpisodeStats,
    pub counters: Counters,
    pub executions: u64,
    /// Number of executions whose architectural run faulted.
    pub faults: u64,
    /// Statuses that indicate a runtime invariant broke, with their input.
    pub violations: Vec<(RunStatus, Vec<u8>)>,
    pub stats: BranchStats,
    /// `(executions so far, normal coverage size, speculative coverage size)`
    /// after each round.
    pub history: Vec<(u64, usize, usize)>,
}

/// Picks the next parent: usually uniform, sometimes an entry holding the
/// rarest normal-coverage edge.
fn pick<'c>(corpus: &'c [CorpusEntry], rng: &mut impl Rng) -> &'c CorpusEntry {
    if corpus.len() > 1 && rng.gen_bool(0.3) {
        let mut freq: BTreeMap<(u32, bool), usize> = BTreeMap::new();
        for e in corpus {
            for edge in &e.normal {
                *freq.entry(*edge).or_default() += 1;
            }
        }
        if let Some((edge, _)) = freq.iter().min_by_key(|(_, n)| **n) {
            if let Some(e) = corpus.iter().find(|e| e.normal.contains(edge)) {
                return e;
            }
        }
    }
    corpus.choose(rng).unwrap()
}

/// Coverage-guided fuzzing of an instrumented image.
pub fn fuzz_loop(image: &Image, seeds: &[Vec<u8>], cfg: &FuzzConfig) -> FuzzOutcome {
    let policy = image.config.unwrap_or_default().policy;
    let mut out = FuzzOutcome {
        reports: ReportStore::new(policy),
        coverage: Coverage { normal_total: image.num_branches * 2, spec_total: image.num_guards, ..Default::default() },
        corpus: Vec::new(),
        episodes: EpisodeStats::default(),
        counters: Counters::default(),
        executions: 0,
        faults: 0,
        violations: Vec::new(),
        stats: BranchStats::default(),
        history: Vec::new(),
    };
    let mut pending_seeds: Vec<Vec<u8>> = if seeds.is_empty() { vec![Vec::new()] } else { seeds.to_vec() };
    pending_seeds.reverse();
    let started = Instant::now();
    let mut round = 0u64;
    while out.executions < cfg.executions {
        if cfg.wall_time.is_some_and(|t| started.elapsed() >= t) {
            break;
        }
        let n = (cfg.executions - out.executions).min(cfg.batch.max(1) as u64) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ round.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let others: Vec<Vec<u8>> = out.corpus.iter().map(|e| e.input.clone()).collect();
        let inputs: Vec<Vec<u8>> = (0..n)
            .map(|_| match pending_seeds.pop() {
                Some(s) => s,
                // Nothing retained yet: mutating would stay stuck near the
                // empty input, so draw fresh random inputs instead.
                None if out.corpus.is_empty() => random_input(cfg.max_input_len, &mut rng),
                None => {
                    let parent = pick(&out.corpus, &mut rng);
                    let mut child = mutate(&parent.input, &others, cfg.max_input_len, &mut rng);
                    for _ in 0..rng.gen_range(0..3) {
                        child = mutate(&child, &others, cfg.max_input_len, &mut rng);
                    }
                    child
                }
            })
            .collect();
        let results = execute_batch(image, &inputs, &out.stats, cfg);
        for (input, r) in inputs.into_iter().zip(results) {
            absorb(&mut out, input, r);
        }
        out.history.push((out.executions, out.coverage.normal.len(), out.coverage.spec.len()));
        round += 1;
    }
    out
}

fn execute_batch(image: &Image, inputs: &[Vec<u8>], stats: &BranchStats, cfg: &FuzzConfig) -> Vec<RunResult> {
    let workers = cfg.workers.clamp(1, inputs.len().max(1));
    let exec = |input: &Vec<u8>| Vm::new(image, input, stats.clone(), cfg.run.clone()).run();
    if workers == 1 {
        return inputs.iter().map(exec).collect();
    }
    let chunk = inputs.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> =
            inputs.chunks(chunk).map(|c| s.spawn(move || c.iter().map(exec).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("fuzz worker panicked")).collect()
    })
}

fn absorb(out: &mut FuzzOutcome, input: Vec<u8>, r: RunResult) {
    out.executions += 1;
    match &r.status {
        RunStatus::Fault(_) => out.faults += 1,
        RunStatus::ConfinementViolation { .. } | RunStatus::RollbackMismatch { .. } => {
            out.violations.push((r.status.clone(), input.clone()))
        }
        _ => {}
    }
    out.reports.add_run(&r.reports, &input_id(&input));
    out.episodes.merge(&r.episodes);
    out.counters.merge(&r.counters);
    out.stats.merge(&r.stats_delta);
    if out.coverage.merge(&r.coverage) {
        out.corpus.push(CorpusEntry { input, normal: r.coverage.normal, spec: r.coverage.spec });
    }
}
