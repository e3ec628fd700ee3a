//! Deterministic interpreter for plain and instrumented programs.

mod hooks;

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::config::{Mode, Policy, RewriteConfig};
use crate::image::{DOp, ExtFn, Image, Slot};
use crate::isa::{CodeLoc, Flags, MemRef, Src, STACK_SLOT, STACK_TOP};
use crate::memory::Memory;
use crate::policy::{GadgetClass, GadgetReport, ReportKey};
use crate::runtime::{BranchStats, EpisodeEnd, EpisodeStats, SimState};
use crate::sanitizers::{self, Heap, RegTags, Region, SanitizerError, TagSet};

pub const DEFAULT_MAX_STEPS: u64 = 1_000_000;

/// Environment variable that turns on checkpoint snapshot comparison.
pub const DEBUG_SNAPSHOTS_ENV: &str = "SHADOWSPEC_DEBUG_SNAPSHOTS";

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Original instructions executed before the run is cut off.
    pub max_steps: u64,
    /// Tag `read_input` bytes USER.
    pub taint_sources: bool,
    /// Allow MASSAGE-controlled addresses to produce secrets.
    pub massage: bool,
    /// Ranges tagged USER before execution starts.
    pub initial_taint: Vec<(u32, u32)>,
    /// Record speculative coverage immediately instead of buffering it.
    pub eager_spec_cov: bool,
    /// Propagate real-copy tags per instruction instead of per block.
    pub eager_real_taint: bool,
    /// Compare full state against a snapshot after every episode.
    pub check_snapshots: bool,
    /// Record the normal-mode trace of original instructions.
    pub record_trace: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            max_steps: DEFAULT_MAX_STEPS,
            taint_sources: true,
            massage: true,
            initial_taint: Vec::new(),
            eager_spec_cov: false,
            eager_real_taint: false,
            check_snapshots: std::env::var(DEBUG_SNAPSHOTS_ENV).is_ok_and(|v| v == "1"),
            record_trace: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fault {
    AccessViolation { pc: u32, addr: u32 },
    DecodeFault { pc: u32 },
    BadFree { pc: u32, addr: u32 },
    OutOfMemory { pc: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunStatus {
    Halted {
        code: u32,
    },
    InputExhausted,
    LimitExceeded,
    Fault(Fault),
    /// Simulation reached real-copy code outside a marked preamble.
    ConfinementViolation {
        pc: u32,
    },
    /// State after a rollback differed from the episode's entry snapshot.
    RollbackMismatch {
        detail: String,
    },
}

impl RunStatus {
    pub fn name(&self) -> &'static str {
        match self {
            RunStatus::Halted { .. } => "halted",
            RunStatus::InputExhausted => "input-exhausted",
            RunStatus::LimitExceeded => "limit-exceeded",
            RunStatus::Fault(_) => "fault",
            RunStatus::ConfinementViolation { .. } => "confinement-violation",
            RunStatus::RollbackMismatch { .. } => "rollback-mismatch",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub originals: u64,
    pub instrumentation: u64,
    pub guard_checks: u64,
    /// Originals executed while simulating.
    pub sim_originals: u64,
}

impl Counters {
    pub fn steps(&self) -> u64 {
        self.originals + self.instrumentation
    }

    pub fn merge(&mut self, o: &Counters) {
        self.originals += o.originals;
        self.instrumentation += o.instrumentation;
        self.guard_checks += o.guard_checks;
        self.sim_originals += o.sim_originals;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coverage {
    /// `(branch id, taken)` pairs seen in normal execution.
    pub normal: BTreeSet<(u32, bool)>,
    /// Guard ids of shadow blocks reached while simulating.
    pub spec: BTreeSet<u32>,
    pub normal_total: u32,
    pub spec_total: u32,
}

impl Coverage {
    pub fn merge(&mut self, o: &Coverage) -> bool {
        let before = (self.normal.len(), self.spec.len());
        self.normal.extend(o.normal.iter().copied());
        self.spec.extend(o.spec.iter().copied());
        self.normal_total = self.normal_total.max(o.normal_total);
        self.spec_total = self.spec_total.max(o.spec_total);
        before != (self.normal.len(), self.spec.len())
    }

    pub fn normal_percent(&self) -> f64 {
        percent(self.normal.len(), self.normal_total)
    }

    pub fn spec_percent(&self) -> f64 {
        percent(self.spec.len(), self.spec_total)
    }
}

fn percent(n: usize, total: u32) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * n as f64 / total as f64
    }
}

/// One normal-mode original instruction and the store it performed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub loc: CodeLoc,
    pub store: Option<(u32, u32)>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub status: RunStatus,
    pub reports: Vec<GadgetReport>,
    pub coverage: Coverage,
    pub counters: Counters,
    pub episodes: EpisodeStats,
    /// Encounters added to the branch statistics during this run.
    pub stats_delta: BranchStats,
    pub output: Vec<u8>,
    pub trace: Vec<TraceEvent>,
    /// Final registers and memory, for differential checks.
    pub regs: [u32; 16],
    pub memory: Memory,
}

enum Flow {
    Next,
    Jump(u32),
    Stop(RunStatus),
}

struct Snapshot {
    regs: [u32; 16],
    flags: Flags,
    tags: RegTags,
    mem: Memory,
    heap: Heap,
}

pub struct Vm<'a> {
    image: &'a Image,
    cfg: RewriteConfig,
    real_taint: bool,
    opts: RunOptions,
    pub regs: [u32; 16],
    pub flags: Flags,
    pub pc: u32,
    pub mem: Memory,
    heap: Heap,
    tags: RegTags,
    sim: SimState,
    stats: BranchStats,
    delta: BranchStats,
    counters: Counters,
    input: &'a [u8],
    input_pos: usize,
    output: Vec<u8>,
    reports: Vec<GadgetReport>,
    seen: HashSet<ReportKey>,
    norm_cov: Vec<bool>,
    spec_cov: Vec<bool>,
    block_addrs: Vec<u32>,
    pending: Option<(Option<u32>, TagSet)>,
    last_oob: bool,
    snapshot: Option<Snapshot>,
    episodes: EpisodeStats,
    trace: Vec<TraceEvent>,
}

/// Runs `image` on `input` with fresh branch statistics.
pub fn run(image: &Image, input: &[u8], opts: RunOptions) -> RunResult {
    Vm::new(image, input, BranchStats::default(), opts).run()
}

impl<'a> Vm<'a> {
    pub fn new(image: &'a Image, input: &'a [u8], stats: BranchStats, opts: RunOptions) -> Vm<'a> {
        debug_assert!(sanitizers::verify_region_table().is_ok());
        let instrumented = image.config.is_some();
        let cfg = image.config.unwrap_or_default();
        let mut mem = Memory::new();
        for (addr, bytes) in &image.data {
            mem.write(*addr, bytes);
        }
        for (addr, len) in &opts.initial_taint {
            // Out-of-range taint requests are a caller bug; ignore rather than abort the run.
            let _ = sanitizers::taint_set(&mut mem, *addr, *len, TagSet::USER);
        }
        let mut regs = [0u32; 16];
        regs[15] = STACK_TOP;
        Vm {
            image,
            cfg,
            real_taint: instrumented && cfg.policy == Policy::Kasper,
            opts,
            regs,
            flags: Flags::default(),
            pc: image.entry,
            mem,
            heap: Heap::default(),
            tags: RegTags::default(),
            sim: SimState::default(),
            stats,
            delta: BranchStats::default(),
            counters: Counters::default(),
            input,
            input_pos: 0,
            output: Vec::new(),
            reports: Vec::new(),
            seen: HashSet::new(),
            norm_cov: vec![false; image.num_branches as usize * 2],
            spec_cov: vec![false; image.num_guards as usize],
            block_addrs: Vec::new(),
            pending: None,
            last_oob: false,
            snapshot: None,
            episodes: EpisodeStats::default(),
            trace: Vec::new(),
        }
    }

    pub fn simulating(&self) -> bool {
        self.sim.active()
    }

    pub fn run(mut self) -> RunResult {
        let status = loop {
            if self.counters.originals >= self.opts.max_steps {
                break RunStatus::LimitExceeded;
            }
            let image = self.image;
            let Some(slot) = image.slot(self.pc) else {
                let f = Fault::DecodeFault { pc: self.pc };
                match self.fault(f) {
                    Ok(pc) => {
                        self.pc = pc;
                        continue;
                    }
                    Err(s) => break s,
                }
            };
            if self.sim.active()
                && self.cfg.mode == Mode::Shadows
                && !(self.image.layout.in_shadow_copy(self.pc) || slot.preamble)
            {
                break RunStatus::ConfinementViolation { pc: self.pc };
            }
            if slot.original {
                self.counters.originals += 1;
                if self.sim.active() {
                    self.sim.counter += 1;
                    self.counters.sim_originals += 1;
                }
            } else {
                self.counters.instrumentation += 1;
            }
            let flow = match self.exec(slot) {
                Ok(flow) => flow,
                Err(f) => match self.fault(f) {
                    Ok(pc) => Flow::Jump(pc),
                    Err(s) => Flow::Stop(s),
                },
            };
            match flow {
                Flow::Next => self.pc = self.pc.wrapping_add(4),
                Flow::Jump(a) => self.pc = a,
                Flow::Stop(s) => break s,
            }
        };
        self.finish(status)
    }

    fn finish(self, status: RunStatus) -> RunResult {
        let normal =
            self.norm_cov.iter().enumerate().filter(|(_, v)| **v).map(|(i, _)| ((i / 2) as u32, i % 2 == 1)).collect();
        let spec = self.spec_cov.iter().enumerate().filter(|(_, v)| **v).map(|(i, _)| i as u32).collect();
        RunResult {
            status,
            reports: self.reports,
            coverage: Coverage {
                normal,
                spec,
                normal_total: self.image.num_branches * 2,
                spec_total: self.image.num_guards,
            },
            counters: self.counters,
            episodes: self.episodes,
            stats_delta: self.delta,
            output: self.output,
            trace: self.trace,
            regs: self.regs,
            memory: self.mem,
        }
    }

    /// A fault inside simulation ends the episode; outside it ends the run.
    fn fault(&mut self, f: Fault) -> Result<u32, RunStatus> {
        if self.sim.active() {
            self.rollback(EpisodeEnd::Forced(crate::isa::RollbackReason::Fault))
        } else {
            Err(RunStatus::Fault(f))
        }
    }

    #[inline]
    fn ea(&self, m: MemRef) -> u32 {
        self.regs[m.base.0 as usize].wrapping_add(m.disp as u32)
    }

    #[inline]
    fn src(&self, s: Src) -> u32 {
        match s {
            Src::Reg(r) => self.regs[r.0 as usize],
            Src::Imm(i) => i as u32,
        }
    }

    fn check_access(&self, addr: u32, width: u32, write: bool) -> Result<(), Fault> {
        let r = Region::of(addr);
        let ok = Region::of(addr.wrapping_add(width - 1)) == r && (r.is_user_data() || (!write && r == Region::Code));
        if ok {
            Ok(())
        } else {
            Err(Fault::AccessViolation { pc: self.pc, addr })
        }
    }

    fn load(&self, addr: u32, width: u32) -> Result<u32, Fault> {
        self.check_access(addr, width, false)?;
        Ok(self.mem.read_uint(addr, width))
    }

    fn store(&mut self, addr: u32, width: u32, value: u32) -> Result<(), Fault> {
        self.check_access(addr, width, true)?;
        self.mem.write_uint(addr, width, value);
        Ok(())
    }

    fn push(&mut self, value: u32) -> Result<(), Fault> {
        let sp = self.regs[15].wrapping_sub(STACK_SLOT);
        self.store(sp, 4, value)?;
        self.regs[15] = sp;
        Ok(())
    }

    fn pop(&mut self) -> Result<u32, Fault> {
        let v = self.load(self.regs[15], 4)?;
        self.regs[15] = self.regs[15].wrapping_add(STACK_SLOT);
        Ok(v)
    }

    /// Address an original instruction touches, from the current state.
    fn access_addr(&self, slot: &Slot) -> Option<u32> {
        match &slot.op {
            DOp::Load { mem, .. } | DOp::Store { mem, .. } => Some(self.ea(*mem)),
            DOp::Push { .. } | DOp::Call { .. } | DOp::Callr { .. } => Some(self.regs[15].wrapping_sub(STACK_SLOT)),
            // A call to an external still names the slot a real call would push.
            DOp::Ext(_) if matches!(slot.src, crate::isa::Op::Call { .. }) => {
                Some(self.regs[15].wrapping_sub(STACK_SLOT))
            }
            DOp::Pop { .. } => Some(self.regs[15]),
            _ => None,
        }
    }

    fn exec(&mut self, slot: &Slot) -> Result<Flow, Fault> {
        if slot.original && !self.sim.active() {
            self.before_normal_original(slot);
        }
        let next = self.pc.wrapping_add(4);
        Ok(match &slot.op {
            DOp::Mov { dst, src } => {
                self.regs[dst.0 as usize] = self.src(*src);
                Flow::Next
            }
            DOp::Alu { op, dst, src } => {
                let d = dst.0 as usize;
                self.regs[d] = op.apply(self.regs[d], self.src(*src));
                Flow::Next
            }
            DOp::Cmp { lhs, rhs } => {
                self.flags = Flags::compare(self.regs[lhs.0 as usize], self.src(*rhs));
                Flow::Next
            }
            DOp::Load { dst, mem, width } => {
                let v = self.load(self.ea(*mem), width.bytes())?;
                self.regs[dst.0 as usize] = v;
                Flow::Next
            }
            DOp::Store { mem, src, width } => {
                let a = self.ea(*mem);
                let v = self.regs[src.0 as usize];
                self.store(a, width.bytes(), v)?;
                if self.opts.record_trace && !self.sim.active() && slot.original {
                    if let Some(t) = self.trace.last_mut() {
                        t.store = Some((a, v));
                    }
                }
                Flow::Next
            }
            DOp::Jmp { target } => Flow::Jump(*target),
            DOp::Jcc { cond, target } => {
                if cond.holds(self.flags) {
                    Flow::Jump(*target)
                } else {
                    Flow::Next
                }
            }
            DOp::Jmpr { reg } => Flow::Jump(self.regs[reg.0 as usize]),
            DOp::Call { target } => {
                self.push(next)?;
                Flow::Jump(*target)
            }
            DOp::Callr { reg } => {
                let t = self.regs[reg.0 as usize];
                self.push(next)?;
                Flow::Jump(t)
            }
            DOp::Ret => Flow::Jump(self.pop()?),
            DOp::Push { reg } => {
                self.push(self.regs[reg.0 as usize])?;
                Flow::Next
            }
            DOp::Pop { reg } => {
                let v = self.pop()?;
                self.regs[reg.0 as usize] = v;
                Flow::Next
            }
            DOp::Fence | DOp::MarkerNop | DOp::Nop => Flow::Next,
            DOp::Halt => {
                if self.sim.active() {
                    return Ok(self.forced(crate::isa::RollbackReason::ExternalCall));
                }
                Flow::Stop(RunStatus::Halted { code: 0 })
            }
            DOp::Ext(f) => {
                if self.sim.active() {
                    return Ok(self.forced(crate::isa::RollbackReason::ExternalCall));
                }
                self.ext_call(*f)?
            }
            DOp::Hook(h) => self.hook(h, slot)?,
            DOp::Guarded { when, hook } => {
                self.counters.guard_checks += 1;
                let active = match when {
                    crate::isa::ModeGuard::Normal => !self.sim.active(),
                    crate::isa::ModeGuard::Simulating => self.sim.active(),
                };
                if active {
                    self.hook(hook, slot)?
                } else {
                    Flow::Next
                }
            }
        })
    }

    /// Normal-mode bookkeeping for an original instruction: trace and
    /// real-copy taint (recorded for the block summary, or applied eagerly).
    fn before_normal_original(&mut self, slot: &Slot) {
        if self.opts.record_trace {
            self.trace.push(TraceEvent { loc: self.image.loc(slot).clone(), store: None });
        }
        if !self.real_taint {
            return;
        }
        let ea = self.access_addr(slot);
        if self.opts.eager_real_taint {
            if sanitizers::affects_tags(&slot.src) {
                sanitizers::propagate(&slot.src, ea, TagSet::EMPTY, &mut self.tags, &mut self.mem, &mut |_, _| {});
            }
        } else if let Some(a) = ea {
            // A terminator runs after the summary and is covered by its pending slot.
            if sanitizers::touches_memory(&slot.src) && slot.src.terminator().is_none() {
                self.block_addrs.push(a);
            }
        }
    }

    fn ext_call(&mut self, f: ExtFn) -> Result<Flow, Fault> {
        let pc = self.pc;
        match f {
            ExtFn::ReadInput => {
                let (buf, max) = (self.regs[0], self.regs[1]);
                let left = self.input.len() - self.input_pos;
                if left == 0 && max > 0 {
                    return Ok(Flow::Stop(RunStatus::InputExhausted));
                }
                let n = (max as usize).min(left);
                if n > 0 {
                    self.check_access(buf, n as u32, true)?;
                    let bytes = &self.input[self.input_pos..self.input_pos + n];
                    self.mem.write(buf, bytes);
                    if self.real_taint && self.opts.taint_sources {
                        let _ = sanitizers::taint_set(&mut self.mem, buf, n as u32, TagSet::USER);
                    }
                }
                self.input_pos += n;
                self.regs[0] = n as u32;
            }
            ExtFn::WriteOutput => {
                let (buf, len) = (self.regs[0], self.regs[1]);
                if len > 0 {
                    self.check_access(buf, len, false)?;
                    let mut bytes = vec![0; len as usize];
                    self.mem.read(buf, &mut bytes);
                    self.output.extend(bytes);
                }
                self.regs[0] = len;
            }
            ExtFn::Malloc => {
                self.regs[0] = match self.heap.malloc(&mut self.mem, self.regs[0]) {
                    Ok(a) => a,
                    Err(_) => return Err(Fault::OutOfMemory { pc }),
                };
            }
            ExtFn::Free => {
                let a = self.regs[0];
                match self.heap.free(&mut self.mem, a) {
                    Ok(()) => {}
                    Err(SanitizerError::BadFree(_)) | Err(_) => return Err(Fault::BadFree { pc, addr: a }),
                }
            }
            ExtFn::Exit => return Ok(Flow::Stop(RunStatus::Halted { code: self.regs[0] })),
        }
        self.tags.regs[0] = TagSet::EMPTY;
        Ok(Flow::Next)
    }

    fn report(&mut self, class: GadgetClass, slot: &Slot, access: Option<(u32, u32)>) {
        let key = ReportKey { class, loc: self.image.loc(slot).clone(), chain: self.sim.chain() };
        if self.seen.insert(key.clone()) {
            self.reports.push(GadgetReport { key, access });
        }
    }

    /// Instruction of the image at `addr`, for hooks that refer to another slot.
    fn slot_at(&self, addr: u32) -> &'a Slot {
        self.image.slot(addr).expect("hook refers to a decoded instruction")
    }
}
