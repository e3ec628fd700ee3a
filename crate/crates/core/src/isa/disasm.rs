//! Program to assembly text. Re-assembling the output yields a structurally
//! equal program; instrumentation-origin instructions carry an `@` prefix.

use std::fmt::{self, Write};

use super::{EscapeKind, Instruction, Intrinsic, MemRef, ModeGuard, Op, Origin, Program, Src};

impl fmt::Display for Src {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Src::Reg(r) => write!(f, "{r}"),
            Src::Imm(v) => write!(f, "#{v}"),
        }
    }
}

impl fmt::Display for MemRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.disp < 0 {
            write!(f, "[{}-{}]", self.base, (self.disp as i64).unsigned_abs())
        } else {
            write!(f, "[{}+{}]", self.base, self.disp)
        }
    }
}

impl fmt::Display for Intrinsic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = self.name();
        match self {
            Intrinsic::StartSim { branch } | Intrinsic::NestedStartSim { branch } => write!(f, "{name} #{branch}"),
            Intrinsic::Rollback { reason } => write!(f, "{name} {}", reason.name()),
            Intrinsic::EscapeCheck { kind: EscapeKind::Ret } => write!(f, "{name} ret"),
            Intrinsic::EscapeCheck { kind: EscapeKind::Reg(r) } => write!(f, "{name} {r}"),
            Intrinsic::ModeCheck { shadow } => write!(f, "{name} {shadow}"),
            Intrinsic::MemLog { mem, width } | Intrinsic::AsanCheck { mem, width } => {
                write!(f, "{name} {mem}, #{}", width.bytes())
            }
            Intrinsic::NormCov { branch, cond } => write!(f, "{name} #{branch}, {}", cond.name()),
            Intrinsic::SpecCov { guard } => write!(f, "{name} #{guard}"),
            Intrinsic::Guarded { when, hook } => {
                let w = match when {
                    ModeGuard::Normal => "normal",
                    ModeGuard::Simulating => "sim",
                };
                write!(f, "{name} {w} {hook}")
            }
            Intrinsic::CheckRestore
            | Intrinsic::TaintPre
            | Intrinsic::TaintPost
            | Intrinsic::TagSummary
            | Intrinsic::FrameEnter
            | Intrinsic::FrameExit => f.write_str(name),
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Mov { dst, src } => write!(f, "mov {dst}, {src}"),
            Op::MovLabel { dst, label } => write!(f, "mov {dst}, {label}"),
            Op::Alu { op, dst, src } => write!(f, "{} {dst}, {src}", op.mnemonic()),
            Op::Cmp { lhs, rhs } => write!(f, "cmp {lhs}, {rhs}"),
            Op::Load { dst, mem, width } => {
                let m = if width.bytes() == 1 { "loadb" } else { "load" };
                write!(f, "{m} {dst}, {mem}")
            }
            Op::Store { mem, src, width } => {
                let m = if width.bytes() == 1 { "storeb" } else { "store" };
                write!(f, "{m} {mem}, {src}")
            }
            Op::Jmp { target } => write!(f, "jmp {target}"),
            Op::Jcc { cond, target } => write!(f, "{} {target}", cond.mnemonic()),
            Op::Jmpr { reg } => write!(f, "jmpr {reg}"),
            Op::Call { target } => write!(f, "call {target}"),
            Op::Callr { reg } => write!(f, "callr {reg}"),
            Op::Ret => f.write_str("ret"),
            Op::Push { reg } => write!(f, "push {reg}"),
            Op::Pop { reg } => write!(f, "pop {reg}"),
            Op::Fence => f.write_str("fence"),
            Op::Ext { name } => write!(f, "ext {name}"),
            Op::MarkerNop => f.write_str("marker_nop"),
            Op::Nop => f.write_str("nop"),
            Op::Halt => f.write_str("halt"),
            Op::Intrinsic(i) => write!(f, "{i}"),
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.origin == Origin::Instrumentation {
            f.write_str("@")?;
        }
        write!(f, "{}", self.op)
    }
}

pub fn disassemble(program: &Program) -> String {
    let mut out = String::new();
    if let Some(entry) = &program.entry {
        writeln!(out, ".entry {entry}").unwrap();
    }
    if let Some(cfg) = &program.instrumentation {
        writeln!(
            out,
            ".config policy={} mode={} nesting={} rob={} interval={} depth={} runs={}",
            cfg.policy,
            cfg.mode,
            cfg.nesting as u8,
            cfg.rob_budget,
            cfg.check_interval,
            cfg.max_nest_depth,
            cfg.full_depth_runs
        )
        .unwrap();
    }
    for e in &program.externs {
        writeln!(out, ".extern {e}").unwrap();
    }
    for d in &program.data {
        write!(out, ".data {} {}", d.name, d.bytes.len()).unwrap();
        let used = d
            .relocs
            .iter()
            .map(|(off, _)| *off as usize + 4)
            .chain(d.bytes.iter().rposition(|b| *b != 0).map(|p| p + 1))
            .max()
            .unwrap_or(0);
        let mut i = 0;
        while i < used {
            if let Some((_, label)) = d.relocs.iter().find(|(off, _)| *off as usize == i) {
                write!(out, " &{label}").unwrap();
                i += 4;
            } else {
                write!(out, " {}", d.bytes[i]).unwrap();
                i += 1;
            }
        }
        out.push('\n');
    }
    for f in &program.functions {
        writeln!(out, ".func {}", f.name).unwrap();
        for (i, b) in f.blocks.iter().enumerate() {
            if i > 0 {
                writeln!(out, "{}:", b.label).unwrap();
            }
            for inst in &b.insts {
                writeln!(out, "  {inst}").unwrap();
            }
        }
        writeln!(out, ".endfunc").unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::assemble;

    #[test]
    fn empty_program_renders_entry_only() {
        let mut p = Program::empty();
        assert_eq!(disassemble(&p), "");
        p.entry = Some("main".into());
        assert_eq!(disassemble(&p), ".entry main\n");
    }

    #[test]
    fn roundtrip_with_data_and_intrinsics() {
        let src = "\
.entry main
.extern read_input
.data tbl 12 1 2 &main 0 -1
.func main
  mov r1, tbl
  @asan_check [r1-4], #1
  @guard normal start_sim #0
  cmp r1, #0
  jz main
  @rollback escape
  loadb r2, [r1+3]
  halt
.endfunc
";
        let p = assemble(src).unwrap();
        let text = disassemble(&p);
        let q = assemble(&text).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.data[0].bytes[6..8], [0, 255]);
    }
}
