//! Block editing in terms of original instructions and the hooks around them.
//!
//! Every inserted instruction has a fixed rank, so the final order of hooks
//! around an original does not depend on which pass inserted them first.

use crate::isa::{Block, Instruction, Intrinsic, Op};

/// Hooks attached to one original instruction.
#[derive(Clone, Debug)]
pub struct Unit {
    pub pre: Vec<Instruction>,
    pub orig: Instruction,
    pub post: Vec<Instruction>,
}

#[derive(Clone, Debug)]
pub struct Units {
    pub prefix: Vec<Instruction>,
    pub units: Vec<Unit>,
    pub suffix: Vec<Instruction>,
}

const POST_RANK: i32 = 100;

fn intrinsic_rank(i: &Intrinsic) -> i32 {
    match i {
        Intrinsic::ModeCheck { .. } => -30,
        Intrinsic::SpecCov { .. } => -20,
        Intrinsic::FrameEnter => -10,
        Intrinsic::CheckRestore => 0,
        Intrinsic::Rollback { .. } => 10,
        Intrinsic::EscapeCheck { .. } => 20,
        Intrinsic::FrameExit => 30,
        Intrinsic::MemLog { .. } => 40,
        Intrinsic::AsanCheck { .. } => 50,
        Intrinsic::TaintPre | Intrinsic::TagSummary => 60,
        Intrinsic::NormCov { .. } => 70,
        Intrinsic::StartSim { .. } | Intrinsic::NestedStartSim { .. } => 80,
        Intrinsic::TaintPost => POST_RANK,
        Intrinsic::Guarded { hook, .. } => intrinsic_rank(hook),
    }
}

/// Position class of an instrumentation instruction.
pub fn rank(inst: &Instruction) -> i32 {
    match &inst.op {
        Op::MarkerNop => -40,
        Op::Intrinsic(i) => intrinsic_rank(i),
        _ => 0,
    }
}

fn insert_ranked(list: &mut Vec<Instruction>, inst: Instruction) {
    let r = rank(&inst);
    let at = list.iter().rposition(|i| rank(i) <= r).map_or(0, |p| p + 1);
    list.insert(at, inst);
}

impl Units {
    pub fn of(block: &Block) -> Units {
        let mut u = Units { prefix: Vec::new(), units: Vec::new(), suffix: Vec::new() };
        let mut pending: Vec<Instruction> = Vec::new();
        for inst in &block.insts {
            if inst.is_original() {
                let mut pre = Vec::new();
                for p in pending.drain(..) {
                    if u.units.is_empty() && rank(&p) < 0 {
                        u.prefix.push(p);
                    } else {
                        pre.push(p);
                    }
                }
                u.units.push(Unit { pre, orig: inst.clone(), post: Vec::new() });
            } else if rank(inst) >= POST_RANK && pending.is_empty() && !u.units.is_empty() {
                u.units.last_mut().unwrap().post.push(inst.clone());
            } else {
                pending.push(inst.clone());
            }
        }
        if u.units.is_empty() {
            u.prefix.extend(pending);
        } else {
            u.suffix = pending;
        }
        u
    }

    pub fn into_block(self, label: &str, indirect_target: bool) -> Block {
        let mut insts = self.prefix;
        for unit in self.units {
            insts.extend(unit.pre);
            insts.push(unit.orig);
            insts.extend(unit.post);
        }
        insts.extend(self.suffix);
        Block { label: label.to_string(), insts, indirect_target }
    }

    pub fn add_prefix(&mut self, inst: Instruction) {
        insert_ranked(&mut self.prefix, inst);
    }

    pub fn add_pre(&mut self, k: usize, inst: Instruction) {
        insert_ranked(&mut self.units[k].pre, inst);
    }

    pub fn add_post(&mut self, k: usize, inst: Instruction) {
        insert_ranked(&mut self.units[k].post, inst);
    }

    pub fn add_suffix(&mut self, inst: Instruction) {
        insert_ranked(&mut self.suffix, inst);
    }

    /// Hooks that belong at the end of the block go before a terminator, or
    /// after everything else when the block falls through.
    pub fn add_block_end(&mut self, inst: Instruction) {
        match self.units.last() {
            Some(u) if u.orig.op.terminator().is_some() => {
                let k = self.units.len() - 1;
                self.add_pre(k, inst);
            }
            _ => self.add_suffix(inst),
        }
    }
}

/// Applies `f` to every block of functions selected by `select`.
pub fn edit_blocks(
    program: &mut crate::isa::Program,
    select: impl Fn(&crate::isa::Function) -> bool,
    mut f: impl FnMut(&crate::isa::Function, usize, &mut Units),
) {
    for fi in 0..program.functions.len() {
        if !select(&program.functions[fi]) {
            continue;
        }
        for bi in 0..program.functions[fi].blocks.len() {
            let mut units = Units::of(&program.functions[fi].blocks[bi]);
            f(&program.functions[fi], bi, &mut units);
            let b = &program.functions[fi].blocks[bi];
            let block = units.into_block(&b.label, b.indirect_target);
            program.functions[fi].blocks[bi] = block;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{Intrinsic, RollbackReason};

    #[test]
    fn insertion_order_is_rank_order() {
        let mut b = Block::new("b");
        b.insts.push(Instruction::original(Op::Fence));
        b.insts.push(Instruction::original(Op::Halt));
        let mut u = Units::of(&b);
        u.add_pre(0, Instruction::intrinsic(Intrinsic::Rollback { reason: RollbackReason::Serialize }));
        u.add_pre(0, Instruction::intrinsic(Intrinsic::CheckRestore));
        u.add_block_end(Instruction::intrinsic(Intrinsic::CheckRestore));
        u.add_prefix(Instruction::intrinsic(Intrinsic::SpecCov { guard: 0 }));
        let out = u.into_block("b", false);
        let names: Vec<String> = out.insts.iter().map(|i| i.op.to_string()).collect();
        assert_eq!(names, vec!["spec_cov #0", "check_restore", "rollback serialize", "fence", "check_restore", "halt"]);
        // Decomposing again yields the same structure.
        let again = Units::of(&out).into_block("b", false);
        assert_eq!(again, out);
    }
}
