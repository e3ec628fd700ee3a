//! Control-flow graph construction: block splitting, successors, and
//! indirect-target discovery.

use std::collections::HashSet;

use super::{Block, Function, Instruction, Op, Program, Terminator};

/// Labels of blocks that may be reached by an indirect transfer: return
/// sites (blocks right after a `call`/`callr`) and every label whose address
/// is materialized by `mov rN, label` or stored in a data segment.
pub fn indirect_target_labels(program: &Program) -> HashSet<String> {
    let mut out = HashSet::new();
    for f in &program.functions {
        for (i, b) in f.blocks.iter().enumerate() {
            if matches!(b.terminator(), Terminator::Call | Terminator::Callr) {
                if let Some(next) = f.blocks.get(i + 1) {
                    out.insert(next.label.clone());
                }
            }
            for inst in &b.insts {
                if let Op::MovLabel { label, .. } = &inst.op {
                    out.insert(label.clone());
                }
            }
        }
    }
    for d in &program.data {
        for (_, label) in &d.relocs {
            out.insert(label.clone());
        }
    }
    out
}

/// Split blocks at interior terminators, give empty blocks a `nop`, and set
/// indirect-target flags. Idempotent.
pub fn build_cfg(program: &Program) -> Program {
    let mut out = program.clone();
    for f in &mut out.functions {
        split_function(f);
    }
    let targets = indirect_target_labels(&out);
    for f in &mut out.functions {
        for b in &mut f.blocks {
            b.indirect_target = targets.contains(&b.label);
        }
    }
    out
}

fn split_function(f: &mut Function) {
    let mut blocks = Vec::with_capacity(f.blocks.len());
    for b in f.blocks.drain(..) {
        let mut cur = Block { label: b.label.clone(), insts: Vec::new(), indirect_target: b.indirect_target };
        let mut n = 0;
        let count = b.insts.len();
        for (i, inst) in b.insts.into_iter().enumerate() {
            let ends = inst.op.terminator().is_some();
            cur.insts.push(inst);
            if ends && i + 1 < count {
                n += 1;
                let next = Block::new(format!("{}.s{}", b.label, n));
                blocks.push(std::mem::replace(&mut cur, next));
            }
        }
        blocks.push(cur);
    }
    for b in &mut blocks {
        if b.insts.is_empty() {
            b.insts.push(Instruction::original(Op::Nop));
        }
    }
    f.blocks = blocks;
}

/// Intra-procedural successor labels of block `idx` of `f`.
pub fn successors(f: &Function, idx: usize) -> Vec<&str> {
    let b = &f.blocks[idx];
    let next = f.blocks.get(idx + 1).map(|n| n.label.as_str());
    let target = b.insts.last().and_then(|i| match &i.op {
        Op::Jmp { target } | Op::Jcc { target, .. } => Some(target.as_str()),
        _ => None,
    });
    match b.terminator() {
        Terminator::Jmp => target.into_iter().collect(),
        Terminator::Jcc => next.into_iter().chain(target).collect(),
        Terminator::Fallthrough | Terminator::Call | Terminator::Callr | Terminator::Ext => next.into_iter().collect(),
        Terminator::Ret | Terminator::Jmpr | Terminator::Halt => Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::assemble;

    #[test]
    fn return_site_after_call_is_flagged() {
        let p = assemble(".func a\n  call b\n  halt\n.endfunc\n.func b\n  ret\n.endfunc\n").unwrap();
        let p = build_cfg(&p);
        let a = p.function("a").unwrap();
        assert!(!a.blocks[0].indirect_target);
        assert!(a.blocks[1].indirect_target);
    }

    #[test]
    fn materialized_label_is_flagged() {
        let p = assemble(".func main\n  mov r1, handler\n  jmpr r1\nhandler:\n  halt\n.endfunc\n").unwrap();
        let p = build_cfg(&p);
        let flagged: Vec<_> = p.blocks().filter(|(_, b)| b.indirect_target).map(|(_, b)| b.label.clone()).collect();
        assert_eq!(flagged, ["handler"]);
    }

    #[test]
    fn straight_line_has_no_flags() {
        let p = build_cfg(&assemble(".func main\n  mov r1, #1\n  add r1, #2\n  halt\n.endfunc\n").unwrap());
        assert!(p.blocks().all(|(_, b)| !b.indirect_target));
    }

    #[test]
    fn splits_interior_terminators_and_is_idempotent() {
        let mut p = assemble(".func main\n  nop\n  halt\n.endfunc\n").unwrap();
        let b = &mut p.functions[0].blocks[0];
        b.insts.insert(1, Instruction::original(Op::Jmp { target: "main".into() }));
        let once = build_cfg(&p);
        assert_eq!(once.functions[0].blocks.len(), 2);
        assert_eq!(build_cfg(&once), once);
    }

    #[test]
    fn successors_follow_terminator_kind() {
        let p = assemble(".func main\n  cmp r1, #1\n  jz done\n  nop\ndone:\n  halt\n.endfunc\n").unwrap();
        let f = &p.functions[0];
        assert_eq!(successors(f, 0), ["main.L1", "done"]);
        assert_eq!(successors(f, 1), ["done"]);
        assert!(successors(f, 2).is_empty());
    }
}
