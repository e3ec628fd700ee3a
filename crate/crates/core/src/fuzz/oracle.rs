//! Reference explorer for differential checks of the rewriter.
//!
//! Interprets the uninstrumented program directly. At every conditional
//! branch it clones the whole machine state and runs the clone down the
//! wrong path, applying the same budget, nesting and policy rules the
//! instrumented pipeline applies through its intrinsics. Nothing here goes
//! through trampolines, write logs or shadow copies, so agreement between
//! the two is evidence that the rewrite preserves the intended semantics.

use std::collections::BTreeSet;

use crate::config::{Policy, RewriteConfig};
use crate::image::{DOp, ExtFn, Image, LoadError, Slot};
use crate::isa::{build_cfg, Flags, Op, Program, STACK_SLOT, STACK_TOP};
use crate::memory::Memory;
use crate::policy::{self, GadgetClass, LoadEvent, ReportKey};
use crate::rewriter::check_positions;
use crate::runtime::{nesting_decision, BranchStats};
use crate::sanitizers::{self, Heap, RegTags, Region, TagSet, SHADOW_RETURN_SLOT};
use crate::vm::{RunOptions, RunStatus};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OracleResult {
    pub keys: BTreeSet<ReportKey>,
    /// Architectural outcome, by name.
    pub status: String,
    pub episodes: u64,
    pub max_episode_originals: u32,
}

/// Static facts about one instruction of the plain image.
#[derive(Clone, Copy, Debug, Default)]
struct Info {
    check_before: bool,
    check_after: bool,
    frame_enter: bool,
    branch: Option<u32>,
}

#[derive(Clone)]
struct State {
    regs: [u32; 16],
    flags: Flags,
    mem: Memory,
    heap: Heap,
    tags: RegTags,
}

enum Step {
    Next,
    Jump(u32),
    Stop(RunStatus),
}

struct Fault;

enum End {
    Rollback,
    Limit,
}

struct Oracle<'a> {
    image: Image,
    info: Vec<Info>,
    cfg: &'a RewriteConfig,
    opts: &'a RunOptions,
    input: &'a [u8],
    input_pos: usize,
    stats: BranchStats,
    total: u64,
    out: OracleResult,
}

/// Runs `program` (uninstrumented) on `input` and returns the report keys
/// speculation under `config` would produce.
pub fn oracle_explore(
    program: &Program,
    input: &[u8],
    config: &RewriteConfig,
    opts: &RunOptions,
) -> Result<OracleResult, LoadError> {
    let program = build_cfg(program);
    let image = Image::load(&program)?;
    let info = static_info(&program, config);
    let mut o = Oracle {
        image,
        info,
        cfg: config,
        opts,
        input,
        input_pos: 0,
        stats: BranchStats::default(),
        total: 0,
        out: OracleResult::default(),
    };
    let status = o.run();
    o.out.status = status.name().to_string();
    Ok(o.out)
}

fn static_info(program: &Program, config: &RewriteConfig) -> Vec<Info> {
    let mut info = Vec::new();
    let mut branch = 0u32;
    for f in &program.functions {
        for (bi, b) in f.blocks.iter().enumerate() {
            let n = b.insts.len();
            let has_term = b.insts.last().is_some_and(|i| i.op.terminator().is_some());
            let (before, at_end) = check_positions(n, has_term, config.check_interval);
            for (i, inst) in b.insts.iter().enumerate() {
                let mut x = Info {
                    check_before: before.contains(&(i + 1)),
                    check_after: at_end && i + 1 == n,
                    frame_enter: bi == 0 && i == 0,
                    branch: None,
                };
                if matches!(inst.op, Op::Jcc { .. }) {
                    x.branch = Some(branch);
                    branch += 1;
                }
                info.push(x);
            }
        }
    }
    info
}

fn check_access(addr: u32, width: u32, write: bool) -> Result<(), Fault> {
    let r = Region::of(addr);
    if Region::of(addr.wrapping_add(width - 1)) == r && (r.is_user_data() || (!write && r == Region::Code)) {
        Ok(())
    } else {
        Err(Fault)
    }
}

impl State {
    fn ea(&self, m: crate::isa::MemRef) -> u32 {
        self.regs[m.base.0 as usize].wrapping_add(m.disp as u32)
    }

    fn src(&self, s: crate::isa::Src) -> u32 {
        match s {
            crate::isa::Src::Reg(r) => self.regs[r.0 as usize],
            crate::isa::Src::Imm(i) => i as u32,
        }
    }

    fn load(&self, a: u32, w: u32) -> Result<u32, Fault> {
        check_access(a, w, false)?;
        Ok(self.mem.read_uint(a, w))
    }

    fn store(&mut self, a: u32, w: u32, v: u32) -> Result<(), Fault> {
        check_access(a, w, true)?;
        self.mem.write_uint(a, w, v);
        Ok(())
    }

    fn push(&mut self, v: u32) -> Result<(), Fault> {
        let sp = self.regs[15].wrapping_sub(STACK_SLOT);
        self.store(sp, 4, v)?;
        self.regs[15] = sp;
        Ok(())
    }

    fn pop(&mut self) -> Result<u32, Fault> {
        let v = self.load(self.regs[15], 4)?;
        self.regs[15] = self.regs[15].wrapping_add(STACK_SLOT);
        Ok(v)
    }

    /// Memory address the instruction's tag effect refers to.
    fn tag_addr(&self, op: &Op) -> Option<u32> {
        match op {
            Op::Load { mem, .. } | Op::Store { mem, .. } => Some(self.ea(*mem)),
            Op::Push { .. } | Op::Call { .. } | Op::Callr { .. } => Some(self.regs[15].wrapping_sub(STACK_SLOT)),
            Op::Pop { .. } => Some(self.regs[15]),
            _ => None,
        }
    }

    fn frame(&mut self, value: u8) {
        let sp = self.regs[15];
        let _ = sanitizers::poison(&mut self.mem, sp, 1, value, &mut |_, _| {});
    }

    /// Executes everything except externals, which the caller handles.
    fn exec(&mut self, pc: u32, op: &DOp) -> Result<Step, Fault> {
        let next = pc.wrapping_add(4);
        Ok(match op {
            DOp::Mov { dst, src } => {
                self.regs[dst.0 as usize] = self.src(*src);
                Step::Next
            }
            DOp::Alu { op, dst, src } => {
                let d = dst.0 as usize;
                self.regs[d] = op.apply(self.regs[d], self.src(*src));
                Step::Next
            }
            DOp::Cmp { lhs, rhs } => {
                self.flags = Flags::compare(self.regs[lhs.0 as usize], self.src(*rhs));
                Step::Next
            }
            DOp::Load { dst, mem, width } => {
                self.regs[dst.0 as usize] = self.load(self.ea(*mem), width.bytes())?;
                Step::Next
            }
            DOp::Store { mem, src, width } => {
                let v = self.regs[src.0 as usize];
                self.store(self.ea(*mem), width.bytes(), v)?;
                Step::Next
            }
            DOp::Jmp { target } => Step::Jump(*target),
            DOp::Jcc { cond, target } => {
                if cond.holds(self.flags) {
                    Step::Jump(*target)
                } else {
                    Step::Next
                }
            }
            DOp::Jmpr { reg } => Step::Jump(self.regs[reg.0 as usize]),
            DOp::Call { target } => {
                self.push(next)?;
                Step::Jump(*target)
            }
            DOp::Callr { reg } => {
                let t = self.regs[reg.0 as usize];
                self.push(next)?;
                Step::Jump(t)
            }
            DOp::Ret => Step::Jump(self.pop()?),
            DOp::Push { reg } => {
                self.push(self.regs[reg.0 as usize])?;
                Step::Next
            }
            DOp::Pop { reg } => {
                self.regs[reg.0 as usize] = self.pop()?;
                Step::Next
            }
            DOp::Halt => Step::Stop(RunStatus::Halted { code: 0 }),
            _ => Step::Next,
        })
    }
}

/// Where a mispredicted `jcc` at `pc` goes.
fn wrong_target(pc: u32, op: &DOp, flags: Flags) -> u32 {
    match op {
        DOp::Jcc { cond, target } if !cond.holds(flags) => *target,
        _ => pc.wrapping_add(4),
    }
}

impl Oracle<'_> {
    fn slot(&self, pc: u32) -> Option<(usize, &Slot)> {
        let s = self.image.slot(pc)?;
        let idx = ((pc - crate::isa::REAL_CODE_BASE) / 4) as usize;
        Some((idx, s))
    }

    fn limit_hit(&self) -> bool {
        self.total >= self.opts.max_steps
    }

    fn run(&mut self) -> RunStatus {
        let mut st = State {
            regs: [0; 16],
            flags: Flags::default(),
            mem: Memory::new(),
            heap: Heap::default(),
            tags: RegTags::default(),
        };
        for (a, bytes) in &self.image.data {
            st.mem.write(*a, bytes);
        }
        for (a, len) in &self.opts.initial_taint {
            let _ = sanitizers::taint_set(&mut st.mem, *a, *len, TagSet::USER);
        }
        st.regs[15] = STACK_TOP;
        let kasper = self.cfg.policy == Policy::Kasper;
        let mut pc = self.image.entry;
        loop {
            if self.limit_hit() {
                return RunStatus::LimitExceeded;
            }
            let Some((idx, slot)) = self.slot(pc) else {
                return RunStatus::Fault(crate::vm::Fault::DecodeFault { pc });
            };
            let (info, op, src) = (self.info[idx], slot.op.clone(), slot.src.clone());
            if info.frame_enter {
                st.frame(SHADOW_RETURN_SLOT);
            }
            if op == DOp::Ret {
                st.frame(0);
            }
            if let Some(b) = info.branch {
                self.stats.bump(b);
                let wrong = wrong_target(pc, &op, st.flags);
                if let End::Limit = self.speculate(&st, wrong, b) {
                    return RunStatus::LimitExceeded;
                }
            }
            self.total += 1;
            if kasper && sanitizers::affects_tags(&src) {
                let ea = st.tag_addr(&src);
                sanitizers::propagate(&src, ea, TagSet::EMPTY, &mut st.tags, &mut st.mem, &mut |_, _| {});
            }
            let step = match &op {
                DOp::Ext(f) => self.external(&mut st, *f),
                _ => st.exec(pc, &op),
            };
            match step {
                Ok(Step::Next) => pc = pc.wrapping_add(4),
                Ok(Step::Jump(t)) => pc = t,
                Ok(Step::Stop(s)) => return s,
                Err(Fault) => return RunStatus::Fault(crate::vm::Fault::AccessViolation { pc, addr: 0 }),
            }
        }
    }

    fn external(&mut self, st: &mut State, f: ExtFn) -> Result<Step, Fault> {
        match f {
            ExtFn::ReadInput => {
                let (buf, max) = (st.regs[0], st.regs[1]);
                let left = self.input.len() - self.input_pos;
                if left == 0 && max > 0 {
                    return Ok(Step::Stop(RunStatus::InputExhausted));
                }
                let n = (max as usize).min(left);
                if n > 0 {
                    check_access(buf, n as u32, true)?;
                    st.mem.write(buf, &self.input[self.input_pos..self.input_pos + n]);
                    if self.cfg.policy == Policy::Kasper && self.opts.taint_sources {
                        let _ = sanitizers::taint_set(&mut st.mem, buf, n as u32, TagSet::USER);
                    }
                }
                self.input_pos += n;
                st.regs[0] = n as u32;
            }
            ExtFn::WriteOutput => {
                if st.regs[1] > 0 {
                    check_access(st.regs[0], st.regs[1], false)?;
                }
                st.regs[0] = st.regs[1];
            }
            ExtFn::Malloc => st.regs[0] = st.heap.malloc(&mut st.mem, st.regs[0]).map_err(|_| Fault)?,
            ExtFn::Free => st.heap.free(&mut st.mem, st.regs[0]).map_err(|_| Fault)?,
            ExtFn::Exit => return Ok(Step::Stop(RunStatus::Halted { code: st.regs[0] })),
        }
        st.tags.regs[0] = TagSet::EMPTY;
        Ok(Step::Next)
    }

    fn report(&mut self, class: GadgetClass, slot_loc: u32, chain: &[u32]) {
        let loc = self.image.locs[slot_loc as usize].clone();
        self.out.keys.insert(ReportKey { class, loc, chain: chain.to_vec() });
    }

    /// One episode: the wrong path of `branch` from a private copy of `base`.
    fn speculate(&mut self, base: &State, start: u32, branch: u32) -> End {
        let mut st = base.clone();
        let mut chain = vec![branch];
        let mut counter = 0u32;
        let end = self.episode(&mut st, start, &mut chain, &mut counter);
        self.out.episodes += 1;
        self.out.max_episode_originals = self.out.max_episode_originals.max(counter);
        end
    }

    fn episode(&mut self, st: &mut State, mut pc: u32, chain: &mut Vec<u32>, counter: &mut u32) -> End {
        let kasper = self.cfg.policy == Policy::Kasper;
        let budget = self.cfg.rob_budget;
        let mut last_oob = false;
        loop {
            if self.limit_hit() {
                return End::Limit;
            }
            let Some((idx, slot)) = self.slot(pc) else {
                return End::Rollback;
            };
            let (info, op, src, loc) = (self.info[idx], slot.op.clone(), slot.src.clone(), slot.loc);
            if info.frame_enter {
                st.frame(SHADOW_RETURN_SLOT);
            }
            if info.check_before && *counter >= budget {
                return End::Rollback;
            }
            if matches!(op, DOp::Fence | DOp::Halt | DOp::Ext(_)) {
                return End::Rollback;
            }
            let escape = match &op {
                DOp::Ret => match st.load(st.regs[15], 4) {
                    Ok(t) => Some(t),
                    Err(Fault) => return End::Rollback,
                },
                DOp::Jmpr { reg } | DOp::Callr { reg } => Some(st.regs[reg.0 as usize]),
                _ => None,
            };
            if let Some(t) = escape {
                if !self.image.slot(t).is_some_and(|s| s.indirect_entry) {
                    return End::Rollback;
                }
            }
            if op == DOp::Ret {
                st.frame(0);
            }
            if let DOp::Load { mem, width, .. } | DOp::Store { mem, width, .. } = &op {
                if !mem.is_stack_relative() {
                    let v = sanitizers::asan_check(&st.mem, st.heap.brk, st.ea(*mem), width.bytes());
                    last_oob = v.is_some();
                    if !kasper {
                        for c in policy::specfuzz_classify(last_oob) {
                            self.report(c, loc, chain);
                        }
                    }
                }
            }
            let mut pending = None;
            if kasper && (sanitizers::affects_tags(&src) || matches!(src, Op::Jcc { .. })) {
                pending = Some(self.sinks(st, &src, last_oob, loc, chain));
                last_oob = false;
            }
            if let (Some(b), true) = (info.branch, self.cfg.nesting) {
                let enc = self.stats.bump(b);
                if nesting_decision(enc, chain.len() as u32, self.cfg.max_nest_depth, self.cfg.full_depth_runs) {
                    chain.push(b);
                    pc = wrong_target(pc, &op, st.flags);
                    continue;
                }
            }
            *counter += 1;
            self.total += 1;
            let step = st.exec(pc, &op);
            if self.limit_hit() {
                return End::Limit;
            }
            if let (Some((ea, extra)), Ok(_)) = (pending, &step) {
                sanitizers::propagate(&src, ea, extra, &mut st.tags, &mut st.mem, &mut |_, _| {});
            }
            match step {
                Ok(Step::Next) => pc = pc.wrapping_add(4),
                Ok(Step::Jump(t)) => pc = t,
                Ok(Step::Stop(_)) | Err(Fault) => return End::Rollback,
            }
            if info.check_after && *counter >= budget {
                return End::Rollback;
            }
        }
    }

    /// Taint sink checks before an instruction; returns what its tag
    /// propagation needs.
    fn sinks(&mut self, st: &State, src: &Op, oob: bool, loc: u32, chain: &[u32]) -> (Option<u32>, TagSet) {
        let ea = st.tag_addr(src);
        let mut extra = TagSet::EMPTY;
        let mut classes = Vec::new();
        match src {
            Op::Load { mem, .. } => {
                let at = st.tags.regs[mem.base.0 as usize];
                classes.extend(policy::kasper_on_addr_use(at));
                let (e, mds) =
                    policy::kasper_on_load(LoadEvent { addr_tags: at, oob, massage_enabled: self.opts.massage });
                extra = e;
                classes.extend(mds);
            }
            Op::Store { mem, .. } => classes.extend(policy::kasper_on_addr_use(st.tags.regs[mem.base.0 as usize])),
            Op::Jcc { .. } => classes.extend(policy::kasper_on_branch(st.tags.flags)),
            _ => {}
        }
        for c in classes {
            self.report(c, loc, chain);
        }
        (ea, extra)
    }
}
