//! Text assembler.
//!
//! One instruction per line, `;` starts a comment. Directives:
//! `.func NAME` / `.endfunc`, `.entry NAME`, `.extern NAME`,
//! `.data NAME SIZE [byte|&label ...]`, `.config key=value ...`.
//! A leading `@` marks an instrumentation-origin instruction.

use std::collections::{HashMap, HashSet};

use super::{
    AluOp, Block, Cond, CopyKind, DataSegment, EscapeKind, Function, Instruction, Intrinsic, MemRef, ModeGuard, Op,
    Origin, Program, Reg, RollbackReason, Src, Width, GLOBALS_BASE, HEAP_BASE,
};
use crate::config::{Mode, Policy, RewriteConfig};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AsmError {
    #[error("line {line}: duplicate label `{label}`")]
    DuplicateLabel { line: usize, label: String },
    #[error("line {line}: undefined label `{label}`")]
    UndefinedLabel { line: usize, label: String },
    #[error("line {line}: malformed operand `{text}`")]
    MalformedOperand { line: usize, text: String },
    #[error("line {line}: unknown mnemonic `{text}`")]
    UnknownMnemonic { line: usize, text: String },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: address overflow placing `{name}`")]
    AddressOverflow { line: usize, name: String },
}

fn syntax(line: usize, msg: impl Into<String>) -> AsmError {
    AsmError::Syntax { line, msg: msg.into() }
}

struct FuncBuilder {
    name: String,
    blocks: Vec<Block>,
    auto: usize,
    /// The previous instruction ended a block.
    needs_split: bool,
    start_line: usize,
}

impl FuncBuilder {
    fn current(&mut self) -> &mut Block {
        self.blocks.last_mut().expect("function has an entry block")
    }
}

/// Assemble source text into a [`Program`].
pub fn assemble(source: &str) -> Result<Program, AsmError> {
    let mut program = Program::empty();
    let mut func: Option<FuncBuilder> = None;
    let mut labels: HashMap<String, usize> = HashMap::new();
    let mut refs: Vec<(String, usize)> = Vec::new();
    let mut entry_line = 0;
    let mut next_data = GLOBALS_BASE;

    let define = |name: &str, line: usize, labels: &mut HashMap<String, usize>| {
        if labels.insert(name.to_string(), line).is_some() {
            Err(AsmError::DuplicateLabel { line, label: name.to_string() })
        } else {
            Ok(())
        }
    };

    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        let mut text = raw.split(';').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        if text.starts_with('.') {
            let mut parts = text.split_whitespace();
            let dir = parts.next().unwrap_or_default();
            match dir {
                ".func" => {
                    if func.is_some() {
                        return Err(syntax(line, "nested .func"));
                    }
                    let name = parts.next().ok_or_else(|| syntax(line, ".func needs a name"))?;
                    check_ident(name, line)?;
                    define(name, line, &mut labels)?;
                    func = Some(FuncBuilder {
                        name: name.to_string(),
                        blocks: vec![Block::new(name)],
                        auto: 0,
                        needs_split: false,
                        start_line: line,
                    });
                }
                ".endfunc" => {
                    let f = func.take().ok_or_else(|| syntax(line, ".endfunc without .func"))?;
                    program.functions.push(finish_function(f, line)?);
                }
                ".entry" => {
                    let name = parts.next().ok_or_else(|| syntax(line, ".entry needs a name"))?;
                    program.entry = Some(name.to_string());
                    entry_line = line;
                }
                ".extern" => {
                    let name = parts.next().ok_or_else(|| syntax(line, ".extern needs a name"))?;
                    check_ident(name, line)?;
                    define(name, line, &mut labels)?;
                    program.externs.push(name.to_string());
                }
                ".data" => {
                    let name = parts.next().ok_or_else(|| syntax(line, ".data needs a name"))?;
                    check_ident(name, line)?;
                    define(name, line, &mut labels)?;
                    let size = parts
                        .next()
                        .and_then(parse_int)
                        .filter(|s| *s >= 0)
                        .ok_or_else(|| syntax(line, ".data needs a size"))? as u32;
                    let mut bytes = Vec::new();
                    let mut relocs = Vec::new();
                    for tok in parts {
                        if let Some(label) = tok.strip_prefix('&') {
                            check_ident(label, line)?;
                            relocs.push((bytes.len() as u32, label.to_string()));
                            refs.push((label.to_string(), line));
                            bytes.extend_from_slice(&[0; 4]);
                        } else {
                            let v = parse_int(tok)
                                .filter(|v| (-128..=255).contains(v))
                                .ok_or_else(|| AsmError::MalformedOperand { line, text: tok.to_string() })?;
                            bytes.push(v as u8);
                        }
                    }
                    if bytes.len() as u32 > size {
                        return Err(syntax(line, format!("initializer longer than {size} bytes")));
                    }
                    bytes.resize(size as usize, 0);
                    let end = next_data as u64 + size as u64;
                    if end > HEAP_BASE as u64 {
                        return Err(AsmError::AddressOverflow { line, name: name.to_string() });
                    }
                    program.data.push(DataSegment { name: name.to_string(), addr: next_data, bytes, relocs });
                    next_data = ((end + 7) & !7) as u32;
                }
                ".config" => {
                    program.instrumentation = Some(parse_config(parts, line)?);
                }
                _ => return Err(syntax(line, format!("unknown directive `{dir}`"))),
            }
            continue;
        }

        let f = func.as_mut().ok_or_else(|| syntax(line, "instruction outside .func"))?;
        // Labels, possibly followed by an instruction on the same line.
        while let Some((head, rest)) = split_label(text) {
            check_ident(head, line)?;
            define(head, line, &mut labels)?;
            f.blocks.push(Block::new(head));
            f.needs_split = false;
            text = rest.trim();
        }
        if text.is_empty() {
            continue;
        }
        if f.needs_split {
            f.auto += 1;
            let label = format!("{}.L{}", f.name, f.auto);
            define(&label, line, &mut labels)?;
            f.blocks.push(Block::new(label));
            f.needs_split = false;
        }
        let inst = parse_instruction(text, line, &mut refs)?;
        f.needs_split = inst.op.terminator().is_some();
        f.current().insts.push(inst);
    }

    if let Some(f) = func {
        return Err(syntax(f.start_line, format!("function `{}` missing .endfunc", f.name)));
    }
    for (label, line) in refs {
        if !labels.contains_key(&label) {
            return Err(AsmError::UndefinedLabel { line, label });
        }
    }
    if let Some(entry) = &program.entry {
        if program.function(entry).is_none() {
            return Err(AsmError::UndefinedLabel { line: entry_line, label: entry.clone() });
        }
    }
    program.layout().map_err(|e| AsmError::AddressOverflow { line: 0, name: e.to_string() })?;
    Ok(program)
}

fn finish_function(mut f: FuncBuilder, line: usize) -> Result<Function, AsmError> {
    for b in &mut f.blocks {
        if b.insts.is_empty() {
            b.insts.push(Instruction::original(Op::Nop));
        }
    }
    let last = f.blocks.last().expect("entry block");
    use super::Terminator::*;
    match last.terminator() {
        Jmp | Jmpr | Ret | Halt => {}
        _ => return Err(syntax(line, format!("function `{}` falls through its end", f.name))),
    }
    let copy = CopyKind::of_symbol(&f.name);
    Ok(Function { name: f.name, blocks: f.blocks, copy })
}

fn split_label(text: &str) -> Option<(&str, &str)> {
    let (head, rest) = text.split_once(':')?;
    let head = head.trim();
    if head.is_empty() || head.contains(char::is_whitespace) || head.contains('[') {
        return None;
    }
    Some((head, rest))
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.' || c == '$' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '$'))
}

fn check_ident(s: &str, line: usize) -> Result<(), AsmError> {
    if is_ident(s) && parse_reg(s).is_none() {
        Ok(())
    } else {
        Err(AsmError::MalformedOperand { line, text: s.to_string() })
    }
}

fn parse_int(s: &str) -> Option<i64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s),
    };
    let v = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i64::from_str_radix(&hex.replace('_', ""), 16).ok()?
    } else {
        body.replace('_', "").parse::<i64>().ok()?
    };
    Some(if neg { -v } else { v })
}

fn parse_reg(s: &str) -> Option<Reg> {
    let n: u8 = s.strip_prefix('r')?.parse().ok()?;
    (n < 16 && !s[1..].starts_with('0') || s == "r0").then_some(Reg(n))
}

fn parse_imm(s: &str) -> Option<i32> {
    let v = parse_int(s.strip_prefix('#')?)?;
    if (i32::MIN as i64..=u32::MAX as i64).contains(&v) {
        Some(v as u32 as i32)
    } else {
        None
    }
}

fn parse_mem(s: &str) -> Option<MemRef> {
    let inner = s.strip_prefix('[')?.strip_suffix(']')?.replace(' ', "");
    let (base, disp) = if let Some(pos) = inner.find(['+', '-']) {
        let (b, d) = inner.split_at(pos);
        let sign = if d.starts_with('-') { -1 } else { 1 };
        let d = d[1..].trim_start_matches('#');
        (b.to_string(), sign * parse_int(d)?)
    } else {
        (inner.clone(), 0)
    };
    let disp = i32::try_from(disp).ok()?;
    Some(MemRef { base: parse_reg(&base)?, disp })
}

struct Operands<'a> {
    items: Vec<&'a str>,
    line: usize,
    mnemonic: &'a str,
}

impl<'a> Operands<'a> {
    fn expect(&self, n: usize) -> Result<(), AsmError> {
        if self.items.len() == n {
            Ok(())
        } else {
            Err(syntax(self.line, format!("`{}` takes {} operand(s), got {}", self.mnemonic, n, self.items.len())))
        }
    }
    fn bad(&self, i: usize) -> AsmError {
        AsmError::MalformedOperand { line: self.line, text: self.items.get(i).unwrap_or(&"").to_string() }
    }
    fn reg(&self, i: usize) -> Result<Reg, AsmError> {
        parse_reg(self.items[i]).ok_or_else(|| self.bad(i))
    }
    fn src(&self, i: usize) -> Result<Src, AsmError> {
        let t = self.items[i];
        if let Some(r) = parse_reg(t) {
            Ok(Src::Reg(r))
        } else {
            parse_imm(t).map(Src::Imm).ok_or_else(|| self.bad(i))
        }
    }
    fn imm(&self, i: usize) -> Result<i32, AsmError> {
        parse_imm(self.items[i]).ok_or_else(|| self.bad(i))
    }
    fn mem(&self, i: usize) -> Result<MemRef, AsmError> {
        parse_mem(self.items[i]).ok_or_else(|| self.bad(i))
    }
    fn label(&self, i: usize, refs: &mut Vec<(String, usize)>) -> Result<String, AsmError> {
        let t = self.items[i];
        if is_ident(t) && parse_reg(t).is_none() {
            refs.push((t.to_string(), self.line));
            Ok(t.to_string())
        } else {
            Err(self.bad(i))
        }
    }
}

fn split_operands(rest: &str) -> Vec<&str> {
    let rest = rest.trim();
    if rest.is_empty() {
        return Vec::new();
    }
    rest.split(',').map(str::trim).collect()
}

fn parse_instruction(text: &str, line: usize, refs: &mut Vec<(String, usize)>) -> Result<Instruction, AsmError> {
    let (origin, text) = match text.strip_prefix('@') {
        Some(t) => (Origin::Instrumentation, t.trim_start()),
        None => (Origin::Original, text),
    };
    let (mnemonic, rest) = text.split_once(char::is_whitespace).unwrap_or((text, ""));
    if let Some(intr) = parse_intrinsic(mnemonic, rest, line, refs)? {
        if origin == Origin::Original {
            return Err(syntax(line, format!("intrinsic `{mnemonic}` must carry the `@` prefix")));
        }
        return Ok(Instruction { op: Op::Intrinsic(intr), origin });
    }
    let ops = Operands { items: split_operands(rest), line, mnemonic };
    let op = match mnemonic {
        "mov" => {
            ops.expect(2)?;
            let dst = ops.reg(0)?;
            let t = ops.items[1];
            if parse_reg(t).is_some() || t.starts_with('#') {
                Op::Mov { dst, src: ops.src(1)? }
            } else {
                Op::MovLabel { dst, label: ops.label(1, refs)? }
            }
        }
        "cmp" => {
            ops.expect(2)?;
            Op::Cmp { lhs: ops.reg(0)?, rhs: ops.src(1)? }
        }
        "load" | "loadb" => {
            ops.expect(2)?;
            let width = if mnemonic == "load" { Width::Word } else { Width::Byte };
            Op::Load { dst: ops.reg(0)?, mem: ops.mem(1)?, width }
        }
        "store" | "storeb" => {
            ops.expect(2)?;
            let width = if mnemonic == "store" { Width::Word } else { Width::Byte };
            Op::Store { mem: ops.mem(0)?, src: ops.reg(1)?, width }
        }
        "jmp" => {
            ops.expect(1)?;
            Op::Jmp { target: ops.label(0, refs)? }
        }
        "jmpr" => {
            ops.expect(1)?;
            Op::Jmpr { reg: ops.reg(0)? }
        }
        "call" => {
            ops.expect(1)?;
            Op::Call { target: ops.label(0, refs)? }
        }
        "callr" => {
            ops.expect(1)?;
            Op::Callr { reg: ops.reg(0)? }
        }
        "push" => {
            ops.expect(1)?;
            Op::Push { reg: ops.reg(0)? }
        }
        "pop" => {
            ops.expect(1)?;
            Op::Pop { reg: ops.reg(0)? }
        }
        "ext" => {
            ops.expect(1)?;
            let name = ops.items[0];
            if !is_ident(name) {
                return Err(ops.bad(0));
            }
            Op::Ext { name: name.to_string() }
        }
        "ret" | "fence" | "marker_nop" | "nop" | "halt" => {
            ops.expect(0)?;
            match mnemonic {
                "ret" => Op::Ret,
                "fence" => Op::Fence,
                "marker_nop" => Op::MarkerNop,
                "nop" => Op::Nop,
                _ => Op::Halt,
            }
        }
        m => {
            if let Some(alu) = AluOp::ALL.into_iter().find(|a| a.mnemonic() == m) {
                ops.expect(2)?;
                Op::Alu { op: alu, dst: ops.reg(0)?, src: ops.src(1)? }
            } else if let Some(cond) = Cond::ALL.into_iter().find(|c| c.mnemonic() == m) {
                ops.expect(1)?;
                Op::Jcc { cond, target: ops.label(0, refs)? }
            } else {
                return Err(AsmError::UnknownMnemonic { line, text: m.to_string() });
            }
        }
    };
    Ok(Instruction { op, origin })
}

fn parse_intrinsic(
    mnemonic: &str,
    rest: &str,
    line: usize,
    refs: &mut Vec<(String, usize)>,
) -> Result<Option<Intrinsic>, AsmError> {
    let ops = Operands { items: split_operands(rest), line, mnemonic };
    let id = |ops: &Operands| -> Result<u32, AsmError> {
        ops.expect(1)?;
        u32::try_from(ops.imm(0)?).map_err(|_| ops.bad(0))
    };
    let mem_width = |ops: &Operands| -> Result<(MemRef, Width), AsmError> {
        ops.expect(2)?;
        let w = Width::from_bytes(ops.imm(1)? as i64).ok_or_else(|| ops.bad(1))?;
        Ok((ops.mem(0)?, w))
    };
    let intr = match mnemonic {
        "start_sim" => Intrinsic::StartSim { branch: id(&ops)? },
        "nested_start_sim" => Intrinsic::NestedStartSim { branch: id(&ops)? },
        "check_restore" => {
            ops.expect(0)?;
            Intrinsic::CheckRestore
        }
        "rollback" => {
            ops.expect(1)?;
            Intrinsic::Rollback { reason: RollbackReason::from_name(ops.items[0]).ok_or_else(|| ops.bad(0))? }
        }
        "escape_check" => {
            ops.expect(1)?;
            let kind = if ops.items[0] == "ret" { EscapeKind::Ret } else { EscapeKind::Reg(ops.reg(0)?) };
            Intrinsic::EscapeCheck { kind }
        }
        "mode_check" => {
            ops.expect(1)?;
            Intrinsic::ModeCheck { shadow: ops.label(0, refs)? }
        }
        "mem_log" => {
            let (mem, width) = mem_width(&ops)?;
            Intrinsic::MemLog { mem, width }
        }
        "asan_check" => {
            let (mem, width) = mem_width(&ops)?;
            Intrinsic::AsanCheck { mem, width }
        }
        "taint_pre" | "taint_post" | "tag_summary" | "frame_enter" | "frame_exit" => {
            ops.expect(0)?;
            match mnemonic {
                "taint_pre" => Intrinsic::TaintPre,
                "taint_post" => Intrinsic::TaintPost,
                "tag_summary" => Intrinsic::TagSummary,
                "frame_enter" => Intrinsic::FrameEnter,
                _ => Intrinsic::FrameExit,
            }
        }
        "norm_cov" => {
            ops.expect(2)?;
            let branch = u32::try_from(ops.imm(0)?).map_err(|_| ops.bad(0))?;
            let cond = Cond::from_name(ops.items[1]).ok_or_else(|| ops.bad(1))?;
            Intrinsic::NormCov { branch, cond }
        }
        "spec_cov" => Intrinsic::SpecCov { guard: id(&ops)? },
        "guard" => {
            let rest = rest.trim();
            let (when, inner) =
                rest.split_once(char::is_whitespace).ok_or_else(|| syntax(line, "guard needs a mode and a hook"))?;
            let when = match when {
                "normal" => ModeGuard::Normal,
                "sim" => ModeGuard::Simulating,
                _ => return Err(AsmError::MalformedOperand { line, text: when.to_string() }),
            };
            let inner = inner.trim();
            let (m, r) = inner.split_once(char::is_whitespace).unwrap_or((inner, ""));
            let hook = parse_intrinsic(m, r, line, refs)?
                .ok_or_else(|| AsmError::UnknownMnemonic { line, text: m.to_string() })?;
            Intrinsic::Guarded { when, hook: Box::new(hook) }
        }
        _ => return Ok(None),
    };
    Ok(Some(intr))
}

fn parse_config<'a>(parts: impl Iterator<Item = &'a str>, line: usize) -> Result<RewriteConfig, AsmError> {
    let mut cfg = RewriteConfig::default();
    let mut seen = HashSet::new();
    for kv in parts {
        let (k, v) = kv.split_once('=').ok_or_else(|| syntax(line, format!("bad config item `{kv}`")))?;
        seen.insert(k.to_string());
        let num = || v.parse::<u32>().map_err(|_| syntax(line, format!("bad value for `{k}`")));
        match k {
            "policy" => cfg.policy = v.parse::<Policy>().map_err(|e| syntax(line, e))?,
            "mode" => cfg.mode = v.parse::<Mode>().map_err(|e| syntax(line, e))?,
            "nesting" => cfg.nesting = num()? != 0,
            "rob" => cfg.rob_budget = num()?,
            "interval" => cfg.check_interval = num()?,
            "depth" => cfg.max_nest_depth = num()?,
            "runs" => cfg.full_depth_runs = num()?,
            _ => return Err(syntax(line, format!("unknown config key `{k}`"))),
        }
    }
    cfg.validate().map_err(|e| syntax(line, e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::Terminator;

    #[test]
    fn minimal_program() {
        let p = assemble(".entry main\n.func main\n  halt\n.endfunc\n").unwrap();
        assert_eq!(p.functions.len(), 1);
        assert_eq!(p.functions[0].blocks.len(), 1);
        assert_eq!(p.functions[0].blocks[0].terminator(), Terminator::Halt);
    }

    #[test]
    fn undefined_label_reports_line() {
        let err = assemble(".func main\n  nop\n  jmp missing_label\n.endfunc\n").unwrap_err();
        assert_eq!(err, AsmError::UndefinedLabel { line: 3, label: "missing_label".into() });
    }

    #[test]
    fn duplicate_label() {
        let err = assemble(".func main\nx:\n  nop\nx:\n  halt\n.endfunc\n").unwrap_err();
        assert!(matches!(err, AsmError::DuplicateLabel { line: 4, .. }));
    }

    #[test]
    fn malformed_operand() {
        let err = assemble(".func main\n  load r1, [r99+0]\n  halt\n.endfunc\n").unwrap_err();
        assert!(matches!(err, AsmError::MalformedOperand { line: 2, .. }));
    }

    #[test]
    fn data_overflow() {
        let err = assemble(".data big 0x1000000\n.data more 16\n").unwrap_err();
        assert!(matches!(err, AsmError::AddressOverflow { line: 2, .. }));
    }

    #[test]
    fn splits_after_terminators() {
        let p = assemble(".func main\n  cmp r1, #3\n  jz out\n  nop\nout:\n  halt\n.endfunc\n").unwrap();
        let labels: Vec<_> = p.functions[0].blocks.iter().map(|b| b.label.as_str()).collect();
        assert_eq!(labels, ["main", "main.L1", "out"]);
    }

    #[test]
    fn memory_operand_forms() {
        assert_eq!(parse_mem("[r3]"), Some(MemRef::new(Reg(3), 0)));
        assert_eq!(parse_mem("[r15+8]"), Some(MemRef::new(Reg(15), 8)));
        assert_eq!(parse_mem("[r2 - 0x10]"), Some(MemRef::new(Reg(2), -16)));
        assert_eq!(parse_mem("[r2+#4]"), Some(MemRef::new(Reg(2), 4)));
        assert_eq!(parse_mem("[q2+4]"), None);
    }

    #[test]
    fn intrinsic_requires_prefix() {
        assert!(assemble(".func main\n  check_restore\n  halt\n.endfunc\n").is_err());
        let p = assemble(".func main\n  @guard sim asan_check [r1+0], #4\n  halt\n.endfunc\n").unwrap();
        let inst = &p.functions[0].blocks[0].insts[0];
        assert_eq!(inst.origin, Origin::Instrumentation);
    }

    #[test]
    fn falling_off_function_is_rejected() {
        assert!(assemble(".func main\n  nop\n.endfunc\n").is_err());
    }
}
