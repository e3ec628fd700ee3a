//! Static rewriting: shadow copies, trampolines and runtime hooks.

mod mixed;
mod units;

use std::collections::HashMap;

use thiserror::Error;

use crate::config::{ConfigError, Mode, Policy, RewriteConfig};
use crate::image::ExtFn;
use crate::isa::{
    build_cfg, real_name, shadow_name, trampoline_label, Block, CopyKind, EscapeKind, Function, Instruction, Intrinsic,
    MemRef, Op, Program, RollbackReason, Terminator, Width, SP, SPEC_SUFFIX, TRAMPOLINES,
};
use crate::sanitizers;

pub use mixed::instrument_mixed;
pub use units::{rank, Unit, Units};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RewriteError {
    #[error("program is already instrumented")]
    AlreadyInstrumented,
    #[error("symbol `{0}` collides with a shadow-copy name")]
    SymbolCollision(String),
    #[error("unknown external `{0}`")]
    UnknownExternal(String),
    #[error("undefined call target `{0}`")]
    UndefinedTarget(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Runs the full pipeline for `config.mode`.
pub fn instrument(program: &Program, config: &RewriteConfig) -> Result<Program, RewriteError> {
    config.validate()?;
    if program.instrumentation.is_some() {
        return Err(RewriteError::AlreadyInstrumented);
    }
    check_externals(program)?;
    let p = build_cfg(program);
    let mut out = match config.mode {
        Mode::Mixed => instrument_mixed(&p, config)?,
        Mode::Shadows => {
            let p = duplicate_functions(&p)?;
            let p = retarget_direct_transfers(&p);
            let p = build_trampolines(&p);
            let p = insert_simulation_entries(&p, config);
            let p = insert_restore_points(&p, config);
            let p = harden_indirect_transfers(&p);
            let p = instrument_memory_ops(&p, config);
            insert_coverage_guards(&p)
        }
    };
    out.instrumentation = Some(*config);
    Ok(out)
}

fn check_externals(program: &Program) -> Result<(), RewriteError> {
    for e in &program.externs {
        if ExtFn::from_name(e).is_none() {
            return Err(RewriteError::UnknownExternal(e.clone()));
        }
    }
    for (_, b) in program.blocks() {
        for i in &b.insts {
            match &i.op {
                Op::Ext { name } if ExtFn::from_name(name).is_none() => {
                    return Err(RewriteError::UnknownExternal(name.clone()))
                }
                Op::Call { target } if program.function(target).is_none() && !program.externs.contains(target) => {
                    return Err(RewriteError::UndefinedTarget(target.clone()))
                }
                _ => {}
            }
        }
    }
    Ok(())
}

pub(crate) fn is_shadow_body(f: &Function) -> bool {
    f.copy == CopyKind::Shadow && f.name != TRAMPOLINES
}

pub(crate) fn is_real(f: &Function) -> bool {
    f.copy == CopyKind::Real
}

/// Branch ids of real-copy conditional blocks, keyed by real block label.
pub fn branch_ids(program: &Program) -> HashMap<String, u32> {
    program.real_branches().into_iter().enumerate().map(|(i, (_, label))| (label, i as u32)).collect()
}

fn call_is_external(program: &Program, target: &str) -> bool {
    program.function(target).is_none()
}

/// Appends a `$spec` copy of every function.
pub fn duplicate_functions(program: &Program) -> Result<Program, RewriteError> {
    let mut out = program.clone();
    let mut copies = Vec::new();
    for f in &program.functions {
        if f.copy == CopyKind::Shadow || f.name.ends_with(SPEC_SUFFIX) {
            return Err(RewriteError::SymbolCollision(f.name.clone()));
        }
        for b in &f.blocks {
            if b.label.ends_with(SPEC_SUFFIX) {
                return Err(RewriteError::SymbolCollision(b.label.clone()));
            }
        }
        copies.push(Function {
            name: shadow_name(&f.name),
            copy: CopyKind::Shadow,
            blocks: f
                .blocks
                .iter()
                .map(|b| Block {
                    label: shadow_name(&b.label),
                    insts: b.insts.clone(),
                    indirect_target: b.indirect_target,
                })
                .collect(),
        });
    }
    out.functions.extend(copies);
    Ok(out)
}

/// Points shadow-copy jumps and calls at shadow code. Calls without a body
/// end the simulation instead.
pub fn retarget_direct_transfers(program: &Program) -> Program {
    let mut out = program.clone();
    for f in out.functions.iter_mut().filter(|f| is_shadow_body(f)) {
        for b in &mut f.blocks {
            let mut insts = Vec::with_capacity(b.insts.len());
            for mut inst in b.insts.drain(..) {
                match &mut inst.op {
                    Op::Jmp { target } | Op::Jcc { target, .. } => *target = shadow_name(target),
                    Op::Call { target } => {
                        if call_is_external(program, target) {
                            insts.push(Instruction::intrinsic(Intrinsic::Rollback {
                                reason: RollbackReason::ExternalCall,
                            }));
                        } else {
                            *target = shadow_name(target);
                        }
                    }
                    _ => {}
                }
                insts.push(inst);
            }
            b.insts = insts;
        }
    }
    out
}

/// `(cond, taken label, fallthrough label)` of every real conditional branch, by id.
fn real_branch_targets(program: &Program) -> Vec<(crate::isa::Cond, String, String)> {
    let mut out = Vec::new();
    for f in program.functions.iter().filter(|f| is_real(f)) {
        for (i, b) in f.blocks.iter().enumerate() {
            if b.terminator() != Terminator::Jcc {
                continue;
            }
            let Some(Op::Jcc { cond, target }) = b.insts.last().map(|i| &i.op) else { unreachable!() };
            let next = f.blocks.get(i + 1).map(|n| n.label.clone()).unwrap_or_else(|| target.clone());
            out.push((*cond, target.clone(), next));
        }
    }
    out
}

/// One trampoline per real branch: the branch's own condition sends control
/// to the shadow fallthrough, everything else to the shadow target, which
/// inverts the architectural direction.
pub fn build_trampolines(program: &Program) -> Program {
    let mut out = program.clone();
    out.functions.push(trampolines(program, true));
    out
}

pub(crate) fn trampolines(program: &Program, to_shadow: bool) -> Function {
    let name = |l: &str| if to_shadow { shadow_name(l) } else { l.to_string() };
    // The entry block is never executed; it keeps the function's own label
    // apart from the per-branch labels.
    let mut blocks = vec![Block {
        label: TRAMPOLINES.to_string(),
        insts: vec![Instruction::instr(Op::Halt)],
        indirect_target: false,
    }];
    for (id, (cond, taken, fall)) in real_branch_targets(program).into_iter().enumerate() {
        let label = trampoline_label(id as u32);
        blocks.push(Block {
            label: label.clone(),
            insts: vec![Instruction::instr(Op::Jcc { cond, target: name(&fall) })],
            indirect_target: false,
        });
        blocks.push(Block {
            label: format!("{label}.n"),
            insts: vec![Instruction::instr(Op::Jmp { target: name(&taken) })],
            indirect_target: false,
        });
    }
    Function { name: TRAMPOLINES.to_string(), blocks, copy: CopyKind::Shadow }
}

/// Index of the terminating jcc among a block's units, if any.
fn jcc_unit(u: &Units) -> Option<usize> {
    u.units.iter().rposition(|x| matches!(x.orig.op, Op::Jcc { .. }))
}

pub fn insert_simulation_entries(program: &Program, config: &RewriteConfig) -> Program {
    let ids = branch_ids(program);
    let mut out = program.clone();
    let mut sites: Vec<(usize, usize, u32)> = Vec::new();
    for (fi, f) in out.functions.iter().enumerate() {
        for (bi, b) in f.blocks.iter().enumerate() {
            if let Some(id) = ids.get(real_name(&b.label)) {
                if is_real(f) || (config.nesting && is_shadow_body(f)) {
                    sites.push((fi, bi, *id));
                }
            }
        }
    }
    for (fi, bi, id) in sites {
        let real = is_real(&out.functions[fi]);
        let b = &mut out.functions[fi].blocks[bi];
        let mut u = Units::of(b);
        if let Some(k) = jcc_unit(&u) {
            let hook = if real { Intrinsic::StartSim { branch: id } } else { Intrinsic::NestedStartSim { branch: id } };
            u.add_pre(k, Instruction::intrinsic(hook));
        }
        *b = u.into_block(&b.label, b.indirect_target);
    }
    out
}

/// 1-based positions of originals that get a budget check in front of them,
/// plus whether the block additionally gets a check at its very end.
pub fn check_positions(originals: usize, has_terminator: bool, interval: u32) -> (Vec<usize>, bool) {
    let interval = interval.max(1) as usize;
    let mut before: Vec<usize> = (2..=originals).filter(|k| (k - 1) % interval == 0).collect();
    if has_terminator {
        if before.last() != Some(&originals) {
            before.push(originals);
        }
        (before, false)
    } else {
        (before, true)
    }
}

/// Budget checks and unconditional rollbacks in shadow copies.
pub fn insert_restore_points(program: &Program, config: &RewriteConfig) -> Program {
    let mut out = program.clone();
    units::edit_blocks(&mut out, is_shadow_body, |_, _, u| {
        add_restore_points(u, config, |i| i);
    });
    out
}

pub(crate) fn add_restore_points(u: &mut Units, config: &RewriteConfig, wrap: impl Fn(Intrinsic) -> Intrinsic) {
    let n = u.units.len();
    let has_term = u.units.last().is_some_and(|x| x.orig.op.terminator().is_some());
    let (before, at_end) = check_positions(n, has_term, config.check_interval);
    for k in before {
        u.add_pre(k - 1, Instruction::intrinsic(wrap(Intrinsic::CheckRestore)));
    }
    if at_end {
        u.add_suffix(Instruction::intrinsic(wrap(Intrinsic::CheckRestore)));
    }
    for k in 0..n {
        let reason = match &u.units[k].orig.op {
            Op::Fence => Some(RollbackReason::Serialize),
            Op::Ext { .. } | Op::Halt => Some(RollbackReason::ExternalCall),
            _ => None,
        };
        if let Some(reason) = reason {
            u.add_pre(k, Instruction::intrinsic(wrap(Intrinsic::Rollback { reason })));
        }
    }
}

/// Marker preambles on real indirect-target blocks and escape checks on
/// shadow indirect transfers.
pub fn harden_indirect_transfers(program: &Program) -> Program {
    let mut out = program.clone();
    for f in out.functions.iter_mut() {
        let shadow = is_shadow_body(f);
        let real = is_real(f);
        for b in f.blocks.iter_mut() {
            let mut u = Units::of(b);
            if real && b.indirect_target {
                u.add_prefix(Instruction::instr(Op::MarkerNop));
                u.add_prefix(Instruction::intrinsic(Intrinsic::ModeCheck { shadow: shadow_name(&b.label) }));
            }
            if shadow {
                add_escape_checks(&mut u, |i| i);
            }
            *b = u.into_block(&b.label, b.indirect_target);
        }
    }
    out
}

pub(crate) fn add_escape_checks(u: &mut Units, wrap: impl Fn(Intrinsic) -> Intrinsic) {
    for k in 0..u.units.len() {
        let kind = match &u.units[k].orig.op {
            Op::Ret => EscapeKind::Ret,
            Op::Jmpr { reg } | Op::Callr { reg } => EscapeKind::Reg(*reg),
            _ => continue,
        };
        u.add_pre(k, Instruction::intrinsic(wrap(Intrinsic::EscapeCheck { kind })));
    }
}

fn slot_ref() -> MemRef {
    MemRef::new(SP, -(crate::isa::STACK_SLOT as i32))
}

/// Memory-log and poison checks for shadow code, frame poisoning in both
/// copies, and taint hooks under the kasper policy.
pub fn instrument_memory_ops(program: &Program, config: &RewriteConfig) -> Program {
    let mut out = program.clone();
    let kasper = config.policy == Policy::Kasper;
    for f in out.functions.iter_mut() {
        let shadow = is_shadow_body(f);
        let real = is_real(f);
        if !shadow && !real {
            continue;
        }
        for (bi, b) in f.blocks.iter_mut().enumerate() {
            let mut u = Units::of(b);
            if bi == 0 {
                u.add_prefix(Instruction::intrinsic(Intrinsic::FrameEnter));
            }
            for k in 0..u.units.len() {
                if u.units[k].orig.op == Op::Ret {
                    u.add_pre(k, Instruction::intrinsic(Intrinsic::FrameExit));
                }
            }
            if shadow {
                add_memory_hooks(&mut u, kasper, |i| i);
            } else if kasper {
                add_tag_summary(&mut u, |i| i);
            }
            *b = u.into_block(&b.label, b.indirect_target);
        }
    }
    out
}

pub(crate) fn add_memory_hooks(u: &mut Units, kasper: bool, wrap: impl Fn(Intrinsic) -> Intrinsic) {
    for k in 0..u.units.len() {
        let op = u.units[k].orig.op.clone();
        match &op {
            Op::Store { mem, width, .. } => {
                u.add_pre(k, Instruction::intrinsic(wrap(Intrinsic::MemLog { mem: *mem, width: *width })));
                if !mem.is_stack_relative() {
                    u.add_pre(k, Instruction::intrinsic(wrap(Intrinsic::AsanCheck { mem: *mem, width: *width })));
                }
            }
            Op::Load { mem, width, .. } => {
                if !mem.is_stack_relative() {
                    u.add_pre(k, Instruction::intrinsic(wrap(Intrinsic::AsanCheck { mem: *mem, width: *width })));
                }
            }
            Op::Push { .. } | Op::Call { .. } | Op::Callr { .. } => {
                u.add_pre(k, Instruction::intrinsic(wrap(Intrinsic::MemLog { mem: slot_ref(), width: Width::Word })));
            }
            _ => {}
        }
        if kasper && (sanitizers::affects_tags(&op) || matches!(op, Op::Jcc { .. })) {
            u.add_pre(k, Instruction::intrinsic(wrap(Intrinsic::TaintPre)));
            if op.terminator().is_none() {
                u.add_post(k, Instruction::intrinsic(wrap(Intrinsic::TaintPost)));
            }
        }
    }
}

pub(crate) fn add_tag_summary(u: &mut Units, wrap: impl Fn(Intrinsic) -> Intrinsic) {
    let summary = sanitizers::BlockSummary::compile(u.units.iter().map(|x| &x.orig.op));
    if !summary.is_empty() {
        u.add_block_end(Instruction::intrinsic(wrap(Intrinsic::TagSummary)));
    }
}

/// Normal coverage at real branches, a dense guard id per shadow block.
pub fn insert_coverage_guards(program: &Program) -> Program {
    let ids = branch_ids(program);
    let mut out = program.clone();
    let mut guard = 0u32;
    for f in out.functions.iter_mut() {
        let shadow = is_shadow_body(f);
        let real = is_real(f);
        for b in f.blocks.iter_mut() {
            let mut u = Units::of(b);
            if real {
                if let (Some(k), Some(id)) = (jcc_unit(&u), ids.get(&b.label)) {
                    let Op::Jcc { cond, .. } = u.units[k].orig.op else { unreachable!() };
                    u.add_pre(k, Instruction::intrinsic(Intrinsic::NormCov { branch: *id, cond }));
                }
            } else if shadow {
                u.add_prefix(Instruction::intrinsic(Intrinsic::SpecCov { guard }));
                guard += 1;
            }
            *b = u.into_block(&b.label, b.indirect_target);
        }
    }
    out
}

#[cfg(test)]
mod tests;
