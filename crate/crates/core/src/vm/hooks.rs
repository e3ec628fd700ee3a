//! Runtime behaviour of the rewriter's intrinsics.

use crate::config::{Mode, Policy};
use crate::image::{DOp, Hook, Slot};
use crate::isa::{EscapeKind, Op, RollbackReason};
use crate::policy::{self, LoadEvent};
use crate::runtime::{nesting_decision, Checkpoint, EpisodeEnd};
use crate::sanitizers::{self, TagSet, SHADOW_RETURN_SLOT};

use super::{Fault, Flow, RunStatus, Snapshot, Vm};

impl Vm<'_> {
    pub(super) fn hook(&mut self, h: &Hook, slot: &Slot) -> Result<Flow, Fault> {
        let sim = self.sim.active();
        Ok(match h {
            Hook::StartSim { branch } => {
                if sim {
                    Flow::Next
                } else if self.sim.consumed {
                    self.sim.consumed = false;
                    Flow::Next
                } else {
                    self.bump(*branch);
                    self.enter(*branch)
                }
            }
            Hook::NestedStartSim { branch } => {
                if !sim || !self.cfg.nesting {
                    return Ok(Flow::Next);
                }
                let enc = self.bump(*branch);
                if nesting_decision(enc, self.sim.depth(), self.cfg.max_nest_depth, self.cfg.full_depth_runs) {
                    self.enter(*branch)
                } else {
                    Flow::Next
                }
            }
            Hook::CheckRestore => {
                if sim && self.sim.counter >= self.cfg.rob_budget {
                    self.end_episode(EpisodeEnd::Budget)
                } else {
                    Flow::Next
                }
            }
            Hook::Rollback { reason } => {
                if sim {
                    self.forced(*reason)
                } else {
                    Flow::Next
                }
            }
            Hook::EscapeCheck { kind } => {
                if !sim {
                    return Ok(Flow::Next);
                }
                let target = match kind {
                    EscapeKind::Ret => self.load(self.regs[15], 4)?,
                    EscapeKind::Reg(r) => self.regs[r.0 as usize],
                };
                if self.escape_ok(target) {
                    Flow::Next
                } else {
                    self.forced(RollbackReason::IndirectEscape)
                }
            }
            Hook::ModeCheck { target } => {
                if self.cfg.mode == Mode::Shadows {
                    self.counters.guard_checks += 1;
                }
                if sim {
                    Flow::Jump(*target)
                } else {
                    Flow::Next
                }
            }
            Hook::MemLog { mem, width } => {
                if sim {
                    let a = self.ea(*mem);
                    self.sim.log_write(&self.mem, a, width.bytes());
                }
                Flow::Next
            }
            Hook::AsanCheck { mem, width } => {
                if sim {
                    let a = self.ea(*mem);
                    let v = sanitizers::asan_check(&self.mem, self.heap.brk, a, width.bytes());
                    self.last_oob = v.is_some();
                    if self.cfg.policy == Policy::SpecFuzz {
                        for c in policy::specfuzz_classify(v.is_some()) {
                            self.report(c, slot, Some((a, width.bytes())));
                        }
                    }
                }
                Flow::Next
            }
            Hook::TaintPre { inst } => {
                if sim && self.cfg.policy == Policy::Kasper {
                    self.taint_pre(*inst);
                }
                Flow::Next
            }
            Hook::TaintPost { inst } => {
                if sim && self.cfg.policy == Policy::Kasper {
                    let target = self.slot_at(*inst);
                    let (ea, extra) = self.pending.take().unwrap_or((None, TagSet::EMPTY));
                    let log = &mut self.sim.tag_log;
                    sanitizers::propagate(&target.src, ea, extra, &mut self.tags, &mut self.mem, &mut |a, o| {
                        log.push((a, o))
                    });
                }
                Flow::Next
            }
            Hook::TagSummary { summary } => {
                if !sim && !self.opts.eager_real_taint && self.real_taint {
                    let pending = Some(self.regs[15].wrapping_sub(crate::isa::STACK_SLOT));
                    self.image.summaries[*summary as usize].apply(
                        &self.block_addrs,
                        pending,
                        &mut self.tags,
                        &mut self.mem,
                    );
                }
                self.block_addrs.clear();
                Flow::Next
            }
            Hook::NormCov { branch, cond } => {
                if !sim {
                    let i = *branch as usize * 2 + cond.holds(self.flags) as usize;
                    if let Some(c) = self.norm_cov.get_mut(i) {
                        *c = true;
                    }
                }
                Flow::Next
            }
            Hook::SpecCov { guard } => {
                if sim {
                    if self.opts.eager_spec_cov {
                        self.spec_cov[*guard as usize] = true;
                    } else {
                        self.sim.cov_buf.push(*guard);
                    }
                }
                Flow::Next
            }
            Hook::FrameEnter | Hook::FrameExit => {
                let value = if matches!(h, Hook::FrameEnter) { SHADOW_RETURN_SLOT } else { 0 };
                let sp = self.regs[15];
                let log = &mut self.sim.mem_log;
                let record = sim;
                // A corrupt stack pointer is left for the next stack access to fault on.
                let _ = sanitizers::poison(&mut self.mem, sp, 1, value, &mut |a, old| {
                    if record {
                        log.push(crate::runtime::MemLogEntry { addr: a, bytes: [old, 0, 0, 0], width: 1 });
                    }
                });
                Flow::Next
            }
        })
    }

    fn bump(&mut self, branch: u32) -> u64 {
        self.delta.bump(branch);
        self.stats.bump(branch)
    }

    fn escape_ok(&self, target: u32) -> bool {
        match self.cfg.mode {
            Mode::Shadows => {
                self.image.layout.in_shadow_copy(target)
                    || (self.image.layout.in_real_copy(target)
                        && self.image.slot(target).is_some_and(|s| s.op == DOp::MarkerNop))
            }
            Mode::Mixed => self.image.slot(target).is_some_and(|s| s.indirect_entry),
        }
    }

    fn taint_pre(&mut self, inst: u32) {
        let target = self.slot_at(inst);
        let ea = self.access_addr(target);
        let mut extra = TagSet::EMPTY;
        match &target.src {
            Op::Load { mem, width, .. } => {
                let at = self.tags.regs[mem.base.0 as usize];
                let a = ea.map(|a| (a, width.bytes()));
                for c in policy::kasper_on_addr_use(at) {
                    self.report(c, target, a);
                }
                let (e, mds) = policy::kasper_on_load(LoadEvent {
                    addr_tags: at,
                    oob: self.last_oob,
                    massage_enabled: self.opts.massage,
                });
                extra = e;
                for c in mds {
                    self.report(c, target, a);
                }
            }
            Op::Store { mem, width, .. } => {
                let at = self.tags.regs[mem.base.0 as usize];
                for c in policy::kasper_on_addr_use(at) {
                    self.report(c, target, ea.map(|a| (a, width.bytes())));
                }
            }
            Op::Jcc { .. } => {
                for c in policy::kasper_on_branch(self.tags.flags) {
                    self.report(c, target, None);
                }
            }
            _ => {}
        }
        self.last_oob = false;
        if target.src.terminator().is_some() {
            // Calls get no post hook; their slot write is visible to the callee.
            let log = &mut self.sim.tag_log;
            sanitizers::propagate(&target.src, ea, extra, &mut self.tags, &mut self.mem, &mut |a, o| log.push((a, o)));
            self.pending = None;
        } else {
            self.pending = Some((ea, extra));
        }
    }

    /// Opens a simulation level for `branch` and jumps to its trampoline.
    fn enter(&mut self, branch: u32) -> Flow {
        let depth = self.sim.depth();
        if depth == 0 && self.opts.check_snapshots {
            self.snapshot = Some(Snapshot {
                regs: self.regs,
                flags: self.flags,
                tags: self.tags,
                mem: self.mem.clone(),
                heap: self.heap.clone(),
            });
        }
        self.sim.stack.push(Checkpoint {
            regs: self.regs,
            flags: self.flags,
            tags: self.tags,
            pc: self.pc,
            mem_mark: self.sim.mem_log.len(),
            tag_mark: self.sim.tag_log.len(),
            cov_mark: self.sim.cov_buf.len(),
            branch,
            budget_used: self.sim.counter,
            depth,
        });
        self.sim.max_depth_seen = self.sim.max_depth_seen.max(depth + 1);
        match self.image.trampolines.get(branch as usize) {
            Some(t) => Flow::Jump(*t),
            None => self.end_episode(EpisodeEnd::Forced(RollbackReason::Fault)),
        }
    }

    pub(super) fn forced(&mut self, reason: RollbackReason) -> Flow {
        self.end_episode(EpisodeEnd::Forced(reason))
    }

    fn end_episode(&mut self, end: EpisodeEnd) -> Flow {
        match self.rollback(end) {
            Ok(pc) => Flow::Jump(pc),
            Err(s) => Flow::Stop(s),
        }
    }

    /// Unwinds the whole simulation stack and returns the resume address.
    pub(super) fn rollback(&mut self, end: EpisodeEnd) -> Result<u32, RunStatus> {
        let originals = self.sim.counter;
        let depth = self.sim.max_depth_seen;
        let (cp, flushed) = self.sim.rollback_all(&mut self.mem);
        for g in flushed {
            if let Some(c) = self.spec_cov.get_mut(g as usize) {
                *c = true;
            }
        }
        self.regs = cp.regs;
        self.flags = cp.flags;
        self.tags = cp.tags;
        self.pending = None;
        self.last_oob = false;
        self.episodes.record(end, depth, originals);
        if let Some(snap) = self.snapshot.take() {
            let detail = if snap.regs != self.regs || snap.flags != self.flags {
                Some("registers or flags".to_string())
            } else if snap.tags != self.tags {
                Some("register tags".to_string())
            } else if snap.heap != self.heap {
                Some("heap allocator".to_string())
            } else {
                snap.mem.first_difference(&self.mem).map(|a| format!("memory at {a:#x}"))
            };
            if let Some(detail) = detail {
                return Err(RunStatus::RollbackMismatch { detail });
            }
        }
        Ok(cp.pc)
    }
}
