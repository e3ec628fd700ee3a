//! Single-copy instrumentation where every hook checks the execution mode.

use crate::config::{Policy, RewriteConfig};
use crate::isa::{Instruction, Intrinsic, ModeGuard, Op, Program, RollbackReason};

use super::units::Units;
use super::{
    add_escape_checks, add_memory_hooks, add_restore_points, add_tag_summary, branch_ids, is_real, jcc_unit,
    trampolines, RewriteError,
};

fn guard(when: ModeGuard) -> impl Fn(Intrinsic) -> Intrinsic {
    move |hook| Intrinsic::Guarded { when, hook: Box::new(hook) }
}

/// Instruments `program` (already CFG-split) without duplicating it.
/// Simulation entries and normal coverage run only outside simulation;
/// sanitizer, log, restore and speculative-coverage hooks only inside it.
pub fn instrument_mixed(program: &Program, config: &RewriteConfig) -> Result<Program, RewriteError> {
    let ids = branch_ids(program);
    let kasper = config.policy == Policy::Kasper;
    let sim = guard(ModeGuard::Simulating);
    let normal = guard(ModeGuard::Normal);
    let mut out = program.clone();
    let mut next_guard = 0u32;
    for f in out.functions.iter_mut().filter(|f| is_real(f)) {
        for (bi, b) in f.blocks.iter_mut().enumerate() {
            let mut u = Units::of(b);
            if bi == 0 {
                u.add_prefix(Instruction::intrinsic(Intrinsic::FrameEnter));
            }
            u.add_prefix(Instruction::intrinsic(sim(Intrinsic::SpecCov { guard: next_guard })));
            next_guard += 1;
            add_restore_points(&mut u, config, &sim);
            for k in 0..u.units.len() {
                match &u.units[k].orig.op {
                    Op::Call { target } if program.function(target).is_none() => {
                        let hook = sim(Intrinsic::Rollback { reason: RollbackReason::ExternalCall });
                        u.add_pre(k, Instruction::intrinsic(hook));
                    }
                    Op::Ret => u.add_pre(k, Instruction::intrinsic(Intrinsic::FrameExit)),
                    _ => {}
                }
            }
            add_escape_checks(&mut u, &sim);
            add_memory_hooks(&mut u, kasper, &sim);
            if kasper {
                add_tag_summary(&mut u, &normal);
            }
            if let (Some(k), Some(id)) = (jcc_unit(&u), ids.get(&b.label)) {
                let Op::Jcc { cond, .. } = u.units[k].orig.op else { unreachable!() };
                u.add_pre(k, Instruction::intrinsic(normal(Intrinsic::NormCov { branch: *id, cond })));
                u.add_pre(k, Instruction::intrinsic(normal(Intrinsic::StartSim { branch: *id })));
                if config.nesting {
                    u.add_pre(k, Instruction::intrinsic(sim(Intrinsic::NestedStartSim { branch: *id })));
                }
            }
            *b = u.into_block(&b.label, b.indirect_target);
        }
    }
    out.functions.push(trampolines(program, false));
    Ok(out)
}
