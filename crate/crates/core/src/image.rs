//! Decoding of a [`Program`] into an address-indexed executable image.

use std::collections::HashMap;

use thiserror::Error;

use crate::config::{Mode, RewriteConfig};
use crate::isa::{
    parse_trampoline_label, real_name, AluOp, CodeLoc, Cond, CopyKind, EscapeKind, Instruction, Intrinsic, Layout,
    LayoutError, MemRef, ModeGuard, Op, Program, Reg, RollbackReason, Src, Width, INST_SIZE, REAL_CODE_BASE,
    SHADOW_CODE_BASE,
};
use crate::sanitizers::BlockSummary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExtFn {
    ReadInput,
    WriteOutput,
    Malloc,
    Free,
    Exit,
}

impl ExtFn {
    pub fn from_name(name: &str) -> Option<ExtFn> {
        Some(match name {
            "read_input" => ExtFn::ReadInput,
            "write_output" => ExtFn::WriteOutput,
            "malloc" => ExtFn::Malloc,
            "free" => ExtFn::Free,
            "exit" => ExtFn::Exit,
            _ => return None,
        })
    }
}

/// Runtime hooks with symbols resolved to addresses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Hook {
    StartSim {
        branch: u32,
    },
    NestedStartSim {
        branch: u32,
    },
    CheckRestore,
    Rollback {
        reason: RollbackReason,
    },
    EscapeCheck {
        kind: EscapeKind,
    },
    ModeCheck {
        target: u32,
    },
    MemLog {
        mem: MemRef,
        width: Width,
    },
    AsanCheck {
        mem: MemRef,
        width: Width,
    },
    /// Sink checks for the original instruction at `inst`.
    TaintPre {
        inst: u32,
    },
    /// Tag propagation for the original instruction at `inst`.
    TaintPost {
        inst: u32,
    },
    TagSummary {
        summary: u32,
    },
    NormCov {
        branch: u32,
        cond: Cond,
    },
    SpecCov {
        guard: u32,
    },
    FrameEnter,
    FrameExit,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DOp {
    Mov {
        dst: Reg,
        src: Src,
    },
    Alu {
        op: AluOp,
        dst: Reg,
        src: Src,
    },
    Cmp {
        lhs: Reg,
        rhs: Src,
    },
    Load {
        dst: Reg,
        mem: MemRef,
        width: Width,
    },
    Store {
        mem: MemRef,
        src: Reg,
        width: Width,
    },
    Jmp {
        target: u32,
    },
    Jcc {
        cond: Cond,
        target: u32,
    },
    Jmpr {
        reg: Reg,
    },
    Call {
        target: u32,
    },
    Callr {
        reg: Reg,
    },
    Ret,
    Push {
        reg: Reg,
    },
    Pop {
        reg: Reg,
    },
    Fence,
    /// `ext name` or a `call` to a declared external.
    Ext(ExtFn),
    MarkerNop,
    Nop,
    Halt,
    Hook(Hook),
    Guarded {
        when: ModeGuard,
        hook: Hook,
    },
}

#[derive(Clone, Debug)]
pub struct Slot {
    pub op: DOp,
    /// The instruction as written, used by tag propagation.
    pub src: Op,
    pub original: bool,
    /// Index into [`Image::locs`].
    pub loc: u32,
    /// Part of the marker preamble of a hardened real-copy block.
    pub preamble: bool,
    /// First instruction of a block reachable by indirect transfers.
    pub indirect_entry: bool,
    pub copy: CopyKind,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LoadError {
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("program has no entry symbol")]
    NoEntry,
    #[error("undefined symbol `{0}`")]
    Undefined(String),
    #[error("unknown external `{0}`")]
    UnknownExternal(String),
    #[error("branch {0} has no trampoline")]
    MissingTrampoline(u32),
    #[error("intrinsic `{0}` is not followed by an original instruction in its block")]
    DanglingTaintHook(&'static str),
}

pub struct Image {
    pub real: Vec<Slot>,
    pub shadow: Vec<Slot>,
    pub layout: Layout,
    pub entry: u32,
    pub config: Option<RewriteConfig>,
    pub locs: Vec<CodeLoc>,
    pub trampolines: Vec<u32>,
    pub summaries: Vec<BlockSummary>,
    pub num_branches: u32,
    pub num_guards: u32,
    /// Global data, relocations applied.
    pub data: Vec<(u32, Vec<u8>)>,
}

fn resolve(layout: &Layout, sym: &str) -> Result<u32, LoadError> {
    layout.addr(sym).ok_or_else(|| LoadError::Undefined(sym.to_string()))
}

impl Image {
    pub fn load(program: &Program) -> Result<Image, LoadError> {
        let layout = program.layout()?;
        let entry = resolve(&layout, program.entry.as_deref().ok_or(LoadError::NoEntry)?)?;
        let mut locs: Vec<CodeLoc> = Vec::new();
        let mut loc_ids: HashMap<CodeLoc, u32> = HashMap::new();
        let mut intern = |loc: CodeLoc| -> u32 {
            *loc_ids.entry(loc.clone()).or_insert_with(|| {
                locs.push(loc);
                locs.len() as u32 - 1
            })
        };
        let mut real = Vec::new();
        let mut shadow = Vec::new();
        let mut summaries = Vec::new();
        let mut trampolines: HashMap<u32, u32> = HashMap::new();
        let mut num_guards = 0u32;

        for f in &program.functions {
            let func = real_name(&f.name).to_string();
            let out = match f.copy {
                CopyKind::Real => &mut real,
                CopyKind::Shadow => &mut shadow,
            };
            let mut ordinal = 0u32;
            for b in &f.blocks {
                let base = resolve(&layout, &b.label)?;
                if let Some(id) = parse_trampoline_label(&b.label) {
                    trampolines.insert(id, base);
                }
                // Ordinal of the original each instruction is attributed to.
                let mut owner = Vec::with_capacity(b.insts.len());
                let mut next = ordinal;
                for inst in &b.insts {
                    owner.push(next);
                    if inst.is_original() {
                        next += 1;
                    }
                }
                // Trailing hooks belong to the block's last original.
                if next > ordinal {
                    for o in owner.iter_mut().filter(|o| **o == next) {
                        *o = next - 1;
                    }
                }
                let has_marker = b.insts.first().is_some_and(|i| i.op == Op::MarkerNop && !i.is_original());
                for (i, inst) in b.insts.iter().enumerate() {
                    let addr = base + i as u32 * INST_SIZE;
                    let op = decode(program, &layout, b, i, inst, addr, &mut summaries, &mut num_guards)?;
                    let preamble = has_marker && i < 2 && !inst.is_original();
                    out.push(Slot {
                        op,
                        src: inst.op.clone(),
                        original: inst.is_original(),
                        loc: intern(CodeLoc { func: func.clone(), offset: owner[i] * INST_SIZE }),
                        preamble,
                        indirect_entry: i == 0 && b.indirect_target,
                        copy: f.copy,
                    });
                }
                ordinal = next;
            }
        }

        let num_branches = program.real_branches().len() as u32;
        let mut tramp_vec = Vec::new();
        if program.instrumentation.is_some() {
            for id in 0..num_branches {
                tramp_vec.push(*trampolines.get(&id).ok_or(LoadError::MissingTrampoline(id))?);
            }
        }
        let mut data = Vec::new();
        for d in &program.data {
            let mut bytes = d.bytes.clone();
            for (off, sym) in &d.relocs {
                let a = resolve(&layout, sym)?;
                let o = *off as usize;
                bytes[o..o + 4].copy_from_slice(&a.to_le_bytes());
            }
            data.push((d.addr, bytes));
        }
        Ok(Image {
            real,
            shadow,
            layout,
            entry,
            config: program.instrumentation,
            locs,
            trampolines: tramp_vec,
            summaries,
            num_branches,
            num_guards,
            data,
        })
    }

    #[inline]
    pub fn slot(&self, pc: u32) -> Option<&Slot> {
        if !pc.is_multiple_of(INST_SIZE) {
            return None;
        }
        if pc >= SHADOW_CODE_BASE {
            self.shadow.get(((pc - SHADOW_CODE_BASE) / INST_SIZE) as usize)
        } else if pc >= REAL_CODE_BASE {
            self.real.get(((pc - REAL_CODE_BASE) / INST_SIZE) as usize)
        } else {
            None
        }
    }

    pub fn mode(&self) -> Option<Mode> {
        self.config.map(|c| c.mode)
    }

    pub fn loc(&self, slot: &Slot) -> &CodeLoc {
        &self.locs[slot.loc as usize]
    }
}

#[allow(clippy::too_many_arguments)]
fn decode(
    program: &Program,
    layout: &Layout,
    block: &crate::isa::Block,
    index: usize,
    inst: &Instruction,
    addr: u32,
    summaries: &mut Vec<BlockSummary>,
    num_guards: &mut u32,
) -> Result<DOp, LoadError> {
    let ext = |name: &str| ExtFn::from_name(name).ok_or_else(|| LoadError::UnknownExternal(name.to_string()));
    Ok(match &inst.op {
        Op::Mov { dst, src } => DOp::Mov { dst: *dst, src: *src },
        Op::MovLabel { dst, label } => DOp::Mov { dst: *dst, src: Src::Imm(resolve(layout, label)? as i32) },
        Op::Alu { op, dst, src } => DOp::Alu { op: *op, dst: *dst, src: *src },
        Op::Cmp { lhs, rhs } => DOp::Cmp { lhs: *lhs, rhs: *rhs },
        Op::Load { dst, mem, width } => DOp::Load { dst: *dst, mem: *mem, width: *width },
        Op::Store { mem, src, width } => DOp::Store { mem: *mem, src: *src, width: *width },
        Op::Jmp { target } => DOp::Jmp { target: resolve(layout, target)? },
        Op::Jcc { cond, target } => DOp::Jcc { cond: *cond, target: resolve(layout, target)? },
        Op::Jmpr { reg } => DOp::Jmpr { reg: *reg },
        Op::Call { target } => match layout.addr(target) {
            Some(a) if program.function(target).is_some() => DOp::Call { target: a },
            _ if program.externs.iter().any(|e| e == target) => DOp::Ext(ext(target)?),
            _ => return Err(LoadError::Undefined(target.clone())),
        },
        Op::Callr { reg } => DOp::Callr { reg: *reg },
        Op::Ret => DOp::Ret,
        Op::Push { reg } => DOp::Push { reg: *reg },
        Op::Pop { reg } => DOp::Pop { reg: *reg },
        Op::Fence => DOp::Fence,
        Op::Ext { name } => DOp::Ext(ext(name)?),
        Op::MarkerNop => DOp::MarkerNop,
        Op::Nop => DOp::Nop,
        Op::Halt => DOp::Halt,
        Op::Intrinsic(Intrinsic::Guarded { when, hook }) => {
            DOp::Guarded { when: *when, hook: decode_hook(layout, block, index, hook, addr, summaries, num_guards)? }
        }
        Op::Intrinsic(i) => DOp::Hook(decode_hook(layout, block, index, i, addr, summaries, num_guards)?),
    })
}

fn decode_hook(
    layout: &Layout,
    block: &crate::isa::Block,
    index: usize,
    i: &Intrinsic,
    addr: u32,
    summaries: &mut Vec<BlockSummary>,
    num_guards: &mut u32,
) -> Result<Hook, LoadError> {
    Ok(match i {
        Intrinsic::StartSim { branch } => Hook::StartSim { branch: *branch },
        Intrinsic::NestedStartSim { branch } => Hook::NestedStartSim { branch: *branch },
        Intrinsic::CheckRestore => Hook::CheckRestore,
        Intrinsic::Rollback { reason } => Hook::Rollback { reason: *reason },
        Intrinsic::EscapeCheck { kind } => Hook::EscapeCheck { kind: *kind },
        Intrinsic::ModeCheck { shadow } => Hook::ModeCheck { target: resolve(layout, shadow)? },
        Intrinsic::MemLog { mem, width } => Hook::MemLog { mem: *mem, width: *width },
        Intrinsic::AsanCheck { mem, width } => Hook::AsanCheck { mem: *mem, width: *width },
        Intrinsic::TaintPre => {
            let off = block.insts[index..]
                .iter()
                .position(|i| i.is_original())
                .ok_or(LoadError::DanglingTaintHook("taint_pre"))?;
            Hook::TaintPre { inst: addr + off as u32 * INST_SIZE }
        }
        Intrinsic::TaintPost => {
            let back = block.insts[..index]
                .iter()
                .rev()
                .position(|i| i.is_original())
                .ok_or(LoadError::DanglingTaintHook("taint_post"))?;
            Hook::TaintPost { inst: addr - (back as u32 + 1) * INST_SIZE }
        }
        Intrinsic::TagSummary => {
            summaries.push(BlockSummary::compile(block.originals().map(|i| &i.op)));
            Hook::TagSummary { summary: summaries.len() as u32 - 1 }
        }
        Intrinsic::NormCov { branch, cond } => Hook::NormCov { branch: *branch, cond: *cond },
        Intrinsic::SpecCov { guard } => {
            *num_guards = (*num_guards).max(guard + 1);
            Hook::SpecCov { guard: *guard }
        }
        Intrinsic::FrameEnter => Hook::FrameEnter,
        Intrinsic::FrameExit => Hook::FrameExit,
        Intrinsic::Guarded { hook, .. } => decode_hook(layout, block, index, hook, addr, summaries, num_guards)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::assemble;

    #[test]
    fn missing_entry_is_an_error() {
        let p = assemble(".func f\n  ret\n.endfunc\n").unwrap();
        assert!(matches!(Image::load(&p), Err(LoadError::NoEntry)));
    }

    #[test]
    fn slots_are_address_indexed() {
        let p = crate::isa::build_cfg(&assemble(".entry main\n.func main\n  nop\n  halt\n.endfunc\n").unwrap());
        let img = Image::load(&p).unwrap();
        assert_eq!(img.entry, REAL_CODE_BASE);
        assert!(img.slot(img.entry).is_some());
        assert!(img.slot(img.entry + 1).is_none());
        assert!(img.shadow.is_empty());
    }
}
