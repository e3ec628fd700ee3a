//! The toy register ISA: instructions, the rewritable program model and its
//! textual assembly form.
//!
//! Programs are kept symbolic (labels, not addresses). Every block gets a
//! code address at [`Program::layout`] time; real copies live in
//! `REAL_CODE_BASE..SHADOW_CODE_BASE`, shadow copies (and trampolines) in
//! `SHADOW_CODE_BASE..GLOBALS_BASE`.

mod asm;
mod cfg;
mod disasm;
mod layout;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::RewriteConfig;

pub use asm::{assemble, AsmError};
pub use cfg::{build_cfg, indirect_target_labels, successors};
pub use disasm::disassemble;
pub use layout::{Layout, LayoutError};

/// Size in bytes of every encoded instruction.
pub const INST_SIZE: u32 = 4;
pub const REAL_CODE_BASE: u32 = 0x0001_0000;
pub const SHADOW_CODE_BASE: u32 = 0x0100_0000;
pub const GLOBALS_BASE: u32 = 0x0200_0000;
pub const HEAP_BASE: u32 = 0x0300_0000;
pub const HEAP_END: u32 = 0x0400_0000;
pub const STACK_BASE: u32 = 0x6000_0000;
pub const STACK_END: u32 = 0x7000_0000;
pub const STACK_TOP: u32 = 0x6FFF_FFF0;
/// Stack slots pushed by `push`/`call` are 8 bytes wide (4 bytes of payload),
/// which keeps every slot in its own ASan granule.
pub const STACK_SLOT: u32 = 8;

/// Suffix appended to shadow-copy symbols.
pub const SPEC_SUFFIX: &str = "$spec";
/// Name of the synthetic function holding the trampolines.
pub const TRAMPOLINES: &str = "$trampolines";

/// General-purpose register index, `r0`..`r15`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Reg(pub u8);

/// The designated stack register.
pub const SP: Reg = Reg(15);

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cond {
    Z,
    Nz,
    Lt,
    Ge,
    Ltu,
    Geu,
}

impl Cond {
    pub const ALL: [Cond; 6] = [Cond::Z, Cond::Nz, Cond::Lt, Cond::Ge, Cond::Ltu, Cond::Geu];

    pub fn mnemonic(self) -> &'static str {
        match self {
            Cond::Z => "jz",
            Cond::Nz => "jnz",
            Cond::Lt => "jlt",
            Cond::Ge => "jge",
            Cond::Ltu => "jltu",
            Cond::Geu => "jgeu",
        }
    }

    pub fn name(self) -> &'static str {
        &self.mnemonic()[1..]
    }

    pub fn from_name(s: &str) -> Option<Cond> {
        Cond::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Evaluate against a flags word.
    pub fn holds(self, flags: Flags) -> bool {
        match self {
            Cond::Z => flags.z,
            Cond::Nz => !flags.z,
            Cond::Lt => flags.n,
            Cond::Ge => !flags.n,
            Cond::Ltu => flags.c,
            Cond::Geu => !flags.c,
        }
    }
}

/// Condition flags. `cmp` is the only producer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Flags {
    pub z: bool,
    pub n: bool,
    pub c: bool,
}

impl Flags {
    pub fn compare(a: u32, b: u32) -> Flags {
        Flags { z: a == b, n: (a as i32) < (b as i32), c: a < b }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AluOp {
    Add,
    Sub,
    And,
    Or,
    Xor,
    Shl,
    Shr,
}

impl AluOp {
    pub const ALL: [AluOp; 7] = [AluOp::Add, AluOp::Sub, AluOp::And, AluOp::Or, AluOp::Xor, AluOp::Shl, AluOp::Shr];

    pub fn mnemonic(self) -> &'static str {
        match self {
            AluOp::Add => "add",
            AluOp::Sub => "sub",
            AluOp::And => "and",
            AluOp::Or => "or",
            AluOp::Xor => "xor",
            AluOp::Shl => "shl",
            AluOp::Shr => "shr",
        }
    }

    pub fn apply(self, a: u32, b: u32) -> u32 {
        match self {
            AluOp::Add => a.wrapping_add(b),
            AluOp::Sub => a.wrapping_sub(b),
            AluOp::And => a & b,
            AluOp::Or => a | b,
            AluOp::Xor => a ^ b,
            AluOp::Shl => a.wrapping_shl(b & 31),
            AluOp::Shr => a.wrapping_shr(b & 31),
        }
    }
}

/// Register or signed immediate operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Src {
    Reg(Reg),
    Imm(i32),
}

/// `[base+disp]` memory operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemRef {
    pub base: Reg,
    pub disp: i32,
}

impl MemRef {
    pub fn new(base: Reg, disp: i32) -> Self {
        MemRef { base, disp }
    }

    /// Stack-register accesses with a constant displacement skip ASan checks.
    pub fn is_stack_relative(&self) -> bool {
        self.base == SP
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Width {
    Byte,
    Word,
}

impl Width {
    pub fn bytes(self) -> u32 {
        match self {
            Width::Byte => 1,
            Width::Word => 4,
        }
    }

    pub fn from_bytes(n: i64) -> Option<Width> {
        match n {
            1 => Some(Width::Byte),
            4 => Some(Width::Word),
            _ => None,
        }
    }
}

/// Why a simulation episode was cut short.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RollbackReason {
    ExternalCall,
    Serialize,
    IndirectEscape,
    Fault,
}

impl RollbackReason {
    pub const ALL: [RollbackReason; 4] = [
        RollbackReason::ExternalCall,
        RollbackReason::Serialize,
        RollbackReason::IndirectEscape,
        RollbackReason::Fault,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RollbackReason::ExternalCall => "external",
            RollbackReason::Serialize => "serialize",
            RollbackReason::IndirectEscape => "escape",
            RollbackReason::Fault => "fault",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }
}

/// Code-pointer source checked by an escape check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EscapeKind {
    /// The return address at `[sp]`.
    Ret,
    /// The target register of `jmpr`/`callr`.
    Reg(Reg),
}

/// Execution mode a guarded hook applies to (mixed instrumentation only).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModeGuard {
    Normal,
    Simulating,
}

/// Named runtime hooks inserted by the rewriter.
///
/// `TaintPre` refers to the next original instruction of its block,
/// `TaintPost` and `TagSummary`'s block body are resolved at load time.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Intrinsic {
    StartSim { branch: u32 },
    NestedStartSim { branch: u32 },
    CheckRestore,
    Rollback { reason: RollbackReason },
    EscapeCheck { kind: EscapeKind },
    ModeCheck { shadow: String },
    MemLog { mem: MemRef, width: Width },
    AsanCheck { mem: MemRef, width: Width },
    TaintPre,
    TaintPost,
    TagSummary,
    NormCov { branch: u32, cond: Cond },
    SpecCov { guard: u32 },
    FrameEnter,
    FrameExit,
    Guarded { when: ModeGuard, hook: Box<Intrinsic> },
}

impl Intrinsic {
    pub fn name(&self) -> &'static str {
        match self {
            Intrinsic::StartSim { .. } => "start_sim",
            Intrinsic::NestedStartSim { .. } => "nested_start_sim",
            Intrinsic::CheckRestore => "check_restore",
            Intrinsic::Rollback { .. } => "rollback",
            Intrinsic::EscapeCheck { .. } => "escape_check",
            Intrinsic::ModeCheck { .. } => "mode_check",
            Intrinsic::MemLog { .. } => "mem_log",
            Intrinsic::AsanCheck { .. } => "asan_check",
            Intrinsic::TaintPre => "taint_pre",
            Intrinsic::TaintPost => "taint_post",
            Intrinsic::TagSummary => "tag_summary",
            Intrinsic::NormCov { .. } => "norm_cov",
            Intrinsic::SpecCov { .. } => "spec_cov",
            Intrinsic::FrameEnter => "frame_enter",
            Intrinsic::FrameExit => "frame_exit",
            Intrinsic::Guarded { .. } => "guard",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Mov {
        dst: Reg,
        src: Src,
    },
    /// Materialize the code address of a label.
    MovLabel {
        dst: Reg,
        label: String,
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
        target: String,
    },
    Jcc {
        cond: Cond,
        target: String,
    },
    Jmpr {
        reg: Reg,
    },
    Call {
        target: String,
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
    Ext {
        name: String,
    },
    MarkerNop,
    Nop,
    Halt,
    Intrinsic(Intrinsic),
}

/// Block terminator classification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Terminator {
    Fallthrough,
    Jmp,
    Jcc,
    Jmpr,
    Call,
    Callr,
    Ret,
    Halt,
    /// `ext` calls end a block and fall through afterwards.
    Ext,
}

impl Op {
    pub fn terminator(&self) -> Option<Terminator> {
        Some(match self {
            Op::Jmp { .. } => Terminator::Jmp,
            Op::Jcc { .. } => Terminator::Jcc,
            Op::Jmpr { .. } => Terminator::Jmpr,
            Op::Call { .. } => Terminator::Call,
            Op::Callr { .. } => Terminator::Callr,
            Op::Ret => Terminator::Ret,
            Op::Halt => Terminator::Halt,
            Op::Ext { .. } => Terminator::Ext,
            _ => return None,
        })
    }

    /// Explicit memory operand: `(mem, width, is_store)`.
    pub fn memory_access(&self) -> Option<(MemRef, Width, bool)> {
        match self {
            Op::Load { mem, width, .. } => Some((*mem, *width, false)),
            Op::Store { mem, width, .. } => Some((*mem, *width, true)),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    Original,
    Instrumentation,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub op: Op,
    pub origin: Origin,
}

impl Instruction {
    pub fn original(op: Op) -> Self {
        Instruction { op, origin: Origin::Original }
    }

    pub fn instr(op: Op) -> Self {
        Instruction { op, origin: Origin::Instrumentation }
    }

    pub fn intrinsic(i: Intrinsic) -> Self {
        Instruction::instr(Op::Intrinsic(i))
    }

    pub fn is_original(&self) -> bool {
        self.origin == Origin::Original
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CopyKind {
    Real,
    Shadow,
}

impl CopyKind {
    pub fn of_symbol(name: &str) -> CopyKind {
        if name.ends_with(SPEC_SUFFIX) || name == TRAMPOLINES {
            CopyKind::Shadow
        } else {
            CopyKind::Real
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub label: String,
    pub insts: Vec<Instruction>,
    /// Set by [`build_cfg`]: the block may be reached through an indirect transfer.
    #[serde(default)]
    pub indirect_target: bool,
}

impl Block {
    pub fn new(label: impl Into<String>) -> Self {
        Block { label: label.into(), insts: Vec::new(), indirect_target: false }
    }

    pub fn terminator(&self) -> Terminator {
        self.insts.last().and_then(|i| i.op.terminator()).unwrap_or(Terminator::Fallthrough)
    }

    pub fn copy_kind(&self) -> CopyKind {
        CopyKind::of_symbol(&self.label)
    }

    pub fn originals(&self) -> impl Iterator<Item = &Instruction> {
        self.insts.iter().filter(|i| i.is_original())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Function {
    pub name: String,
    pub blocks: Vec<Block>,
    pub copy: CopyKind,
}

impl Function {
    pub fn entry(&self) -> &Block {
        &self.blocks[0]
    }
}

/// Global data segment. `relocs` patch 4-byte little-endian code or data
/// addresses of labels into `bytes` at load time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSegment {
    pub name: String,
    pub addr: u32,
    pub bytes: Vec<u8>,
    #[serde(default)]
    pub relocs: Vec<(u32, String)>,
}

/// A whole program: functions, globals, entry symbol and, once instrumented,
/// the rewrite configuration the runtime must honour.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub functions: Vec<Function>,
    pub data: Vec<DataSegment>,
    pub entry: Option<String>,
    /// Declared external symbols that `call` may target.
    #[serde(default)]
    pub externs: Vec<String>,
    #[serde(default)]
    pub instrumentation: Option<RewriteConfig>,
}

impl Program {
    pub fn empty() -> Self {
        Program { functions: Vec::new(), data: Vec::new(), entry: None, externs: Vec::new(), instrumentation: None }
    }

    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn data_segment(&self, name: &str) -> Option<&DataSegment> {
        self.data.iter().find(|d| d.name == name)
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&Function, &Block)> {
        self.functions.iter().flat_map(|f| f.blocks.iter().map(move |b| (f, b)))
    }

    pub fn layout(&self) -> Result<Layout, LayoutError> {
        Layout::compute(self)
    }

    /// Number of original instructions across the real copy.
    pub fn original_count(&self) -> usize {
        self.functions
            .iter()
            .filter(|f| f.copy == CopyKind::Real)
            .flat_map(|f| f.blocks.iter())
            .map(|b| b.originals().count())
            .sum()
    }

    /// Conditional branches of the real copy, in layout order. The index is
    /// the branch id used by trampolines, checkpoints and reports.
    pub fn real_branches(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for f in self.functions.iter().filter(|f| f.copy == CopyKind::Real) {
            for b in &f.blocks {
                if b.terminator() == Terminator::Jcc {
                    out.push((f.name.clone(), b.label.clone()));
                }
            }
        }
        out
    }
}

/// Location of an original instruction, stable across instrumentation:
/// function name plus `INST_SIZE * ordinal` among the function's original
/// instructions.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CodeLoc {
    pub func: String,
    pub offset: u32,
}

impl fmt::Display for CodeLoc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{:#x}", self.func, self.offset)
    }
}

impl CodeLoc {
    pub fn parse(s: &str) -> Option<CodeLoc> {
        let (func, off) = s.rsplit_once('+')?;
        let off = off.strip_prefix("0x")?;
        Some(CodeLoc { func: func.to_string(), offset: u32::from_str_radix(off, 16).ok()? })
    }
}

/// Strip the shadow suffix from a symbol.
pub fn real_name(sym: &str) -> &str {
    sym.strip_suffix(SPEC_SUFFIX).unwrap_or(sym)
}

pub fn shadow_name(sym: &str) -> String {
    format!("{sym}{SPEC_SUFFIX}")
}

/// Label of the trampoline block for real-copy branch `id`.
pub fn trampoline_label(id: u32) -> String {
    format!("$tramp{id}")
}

pub fn parse_trampoline_label(label: &str) -> Option<u32> {
    label.strip_prefix("$tramp")?.parse().ok()
}
