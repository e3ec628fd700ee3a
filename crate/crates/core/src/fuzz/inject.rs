//! Artificial gadget injection and scoring against the injected ground truth.
//!
//! Templates use only r12-r14, which host programs must leave alone, and
//! read their index from the `inj_input` global. A prologue in the entry
//! block allocates the two arrays the templates index and fills `inj_input`
//! from the first eight input bytes. Fuzzing an injected program should
//! taint only `inj_input` and leave massage promotion off; see
//! [`GroundTruth::run_options`].

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{
    build_cfg, successors, AluOp, Block, CodeLoc, Cond, DataSegment, Instruction, MemRef, Op, Program, Reg, Src, Width,
    GLOBALS_BASE, INST_SIZE,
};
use crate::policy::ReportKey;
use crate::vm::RunOptions;

pub const INPUT_GLOBAL: &str = "inj_input";
const INPUT_LEN: u32 = 8;
const ARRAY1: &str = "inj_arr1";
const ARRAY2: &str = "inj_arr2";
const ARRAY1_SIZE: i32 = 16;
const ARRAY2_SIZE: i32 = 16384;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Template {
    /// `if (x < size) y = array2[array1[x] << 6]`
    DirectIndex,
    /// The index is masked with a mask wider than the array.
    MaskedIndex,
    /// The loaded byte decides a branch instead of an address.
    BranchTransmit,
}

impl Template {
    pub const ALL: [Template; 3] = [Template::DirectIndex, Template::MaskedIndex, Template::BranchTransmit];

    pub fn name(self) -> &'static str {
        match self {
            Template::DirectIndex => "direct-index",
            Template::MaskedIndex => "masked-index",
            Template::BranchTransmit => "branch-transmit",
        }
    }

    pub fn from_name(s: &str) -> Option<Template> {
        Template::ALL.into_iter().find(|t| t.name() == s)
    }
}

/// A template to splice at the start of block `site`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Injection {
    pub template: Template,
    pub site: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectedSite {
    pub template: Template,
    pub site: String,
    pub func: String,
    /// Code offsets `[start, end)` of the template within `func`.
    pub start: u32,
    pub end: u32,
}

impl InjectedSite {
    pub fn contains(&self, loc: &CodeLoc) -> bool {
        loc.func == self.func && (self.start..self.end).contains(&loc.offset)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub sites: Vec<InjectedSite>,
    /// Address of the user-input global, when anything was injected.
    pub input_addr: Option<u32>,
}

impl GroundTruth {
    /// Harness settings: only the input global is USER, no massage.
    pub fn run_options(&self, base: &RunOptions) -> RunOptions {
        RunOptions {
            taint_sources: false,
            massage: false,
            initial_taint: self.input_addr.map(|a| vec![(a, INPUT_LEN)]).unwrap_or_default(),
            ..base.clone()
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InjectError {
    #[error("`{0}` is not the successor of a conditional branch")]
    BadSite(String),
    #[error("site `{0}` is used twice")]
    DuplicateSite(String),
    #[error("program has no entry function")]
    NoEntry,
    #[error("symbol `{0}` already exists")]
    NameClash(String),
}

/// Labels of blocks a template may be spliced into: successors of real
/// conditional branches, excluding the entry function's first block.
pub fn valid_sites(program: &Program) -> Vec<String> {
    let p = build_cfg(program);
    let mut out = BTreeSet::new();
    for f in &p.functions {
        for (i, b) in f.blocks.iter().enumerate() {
            if matches!(b.insts.last().map(|x| &x.op), Some(Op::Jcc { .. })) {
                for s in successors(f, i) {
                    if Some(s) != p.entry.as_deref() {
                        out.insert(s.to_string());
                    }
                }
            }
        }
    }
    // Keep layout order so seeded choices do not depend on hashing.
    let order: Vec<String> = p.blocks().map(|(_, b)| b.label.clone()).collect();
    order.into_iter().filter(|l| out.contains(l)).collect()
}

/// Picks distinct sites for `templates` with a seeded rng.
pub fn choose_sites(program: &Program, templates: &[Template], seed: u64) -> Vec<Injection> {
    let mut sites = valid_sites(program);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sites.shuffle(&mut rng);
    templates.iter().zip(sites).map(|(t, site)| Injection { template: *t, site }).collect()
}

fn orig(op: Op) -> Instruction {
    Instruction::original(op)
}

fn r(n: u8) -> Reg {
    Reg(n)
}

fn mov_label(dst: u8, label: &str) -> Instruction {
    orig(Op::MovLabel { dst: r(dst), label: label.to_string() })
}

fn alu(op: AluOp, dst: u8, src: Src) -> Instruction {
    orig(Op::Alu { op, dst: r(dst), src })
}

fn loadb(dst: u8, base: u8, disp: i32) -> Instruction {
    orig(Op::Load { dst: r(dst), mem: MemRef::new(r(base), disp), width: Width::Byte })
}

fn load_array(dst: u8, array: &str) -> Vec<Instruction> {
    vec![mov_label(dst, array), orig(Op::Load { dst: r(dst), mem: MemRef::new(r(dst), 0), width: Width::Word })]
}

/// The template as blocks: head (ends in the bounds check), body, and an
/// optional tail; every exit goes to `skip`.
fn template_blocks(t: Template, k: usize, skip: &str) -> Vec<Vec<Instruction>> {
    let byte = (k % INPUT_LEN as usize) as i32;
    let bound = match t {
        Template::MaskedIndex => 48,
        _ => ARRAY1_SIZE,
    };
    let head = vec![
        mov_label(12, INPUT_GLOBAL),
        loadb(13, 12, byte),
        orig(Op::Cmp { lhs: r(13), rhs: Src::Imm(bound) }),
        orig(Op::Jcc { cond: Cond::Geu, target: skip.to_string() }),
    ];
    let mut body = Vec::new();
    if t == Template::MaskedIndex {
        body.push(alu(AluOp::And, 13, Src::Imm(31)));
    }
    body.extend(load_array(12, ARRAY1));
    body.push(alu(AluOp::Add, 12, Src::Reg(r(13))));
    body.push(loadb(14, 12, 0));
    match t {
        Template::BranchTransmit => {
            body.push(orig(Op::Cmp { lhs: r(14), rhs: Src::Imm(0) }));
            body.push(orig(Op::Jcc { cond: Cond::Z, target: skip.to_string() }));
            vec![head, body, vec![orig(Op::Mov { dst: r(13), src: Src::Imm(0) })]]
        }
        _ => {
            body.push(alu(AluOp::Shl, 14, Src::Imm(6)));
            body.extend(load_array(12, ARRAY2));
            body.push(alu(AluOp::Add, 12, Src::Reg(r(14))));
            body.push(loadb(14, 12, 0));
            vec![head, body]
        }
    }
}

fn prologue() -> Vec<Instruction> {
    let call = |name: &str| orig(Op::Call { target: name.to_string() });
    let mov = |d: u8, v: i32| orig(Op::Mov { dst: r(d), src: Src::Imm(v) });
    let mut out = Vec::new();
    for (array, size) in [(ARRAY1, ARRAY1_SIZE), (ARRAY2, ARRAY2_SIZE)] {
        out.push(mov(0, size));
        out.push(call("malloc"));
        out.push(mov_label(12, array));
        out.push(orig(Op::Store { mem: MemRef::new(r(12), 0), src: r(0), width: Width::Word }));
    }
    out.push(mov_label(0, INPUT_GLOBAL));
    out.push(mov(1, INPUT_LEN as i32));
    out.push(call("read_input"));
    for d in [0, 1, 12] {
        out.push(mov(d, 0));
    }
    out
}

/// Splices `injections` into `program`. With no injections the program is
/// returned unchanged.
pub fn inject_gadgets(program: &Program, injections: &[Injection]) -> Result<(Program, GroundTruth), InjectError> {
    if injections.is_empty() {
        return Ok((program.clone(), GroundTruth::default()));
    }
    let mut p = build_cfg(program);
    let valid: BTreeSet<String> = valid_sites(&p).into_iter().collect();
    let mut used = BTreeSet::new();
    for inj in injections {
        if !valid.contains(&inj.site) {
            return Err(InjectError::BadSite(inj.site.clone()));
        }
        if !used.insert(inj.site.clone()) {
            return Err(InjectError::DuplicateSite(inj.site.clone()));
        }
    }
    for name in [INPUT_GLOBAL, ARRAY1, ARRAY2] {
        if p.data_segment(name).is_some() || p.blocks().any(|(_, b)| b.label == name) {
            return Err(InjectError::NameClash(name.to_string()));
        }
    }

    for (k, inj) in injections.iter().enumerate() {
        let skip = format!("inj{k}_skip");
        let (fi, bi) = locate(&p, &inj.site).expect("validated site");
        let f = &mut p.functions[fi];
        let original = std::mem::take(&mut f.blocks[bi].insts);
        let parts = template_blocks(inj.template, k, &skip);
        let mut new_blocks = Vec::new();
        for (j, insts) in parts.into_iter().enumerate() {
            let label = if j == 0 { inj.site.clone() } else { format!("inj{k}_b{j}") };
            new_blocks.push(Block { label, insts, indirect_target: false });
        }
        new_blocks.push(Block { label: skip, insts: original, indirect_target: false });
        f.blocks.splice(bi..=bi, new_blocks);
    }

    let entry = p.entry.clone().ok_or(InjectError::NoEntry)?;
    let (fi, bi) = locate(&p, &entry).ok_or(InjectError::NoEntry)?;
    let mut insts = prologue();
    insts.append(&mut p.functions[fi].blocks[bi].insts);
    p.functions[fi].blocks[bi].insts = insts;
    for e in ["malloc", "read_input"] {
        if !p.externs.iter().any(|x| x == e) {
            p.externs.push(e.to_string());
        }
    }
    let mut next = p.data.iter().map(|d| (d.addr + d.bytes.len() as u32 + 7) & !7).max().unwrap_or(GLOBALS_BASE);
    let mut input_addr = 0;
    for (name, len) in [(INPUT_GLOBAL, INPUT_LEN), (ARRAY1, 4), (ARRAY2, 4)] {
        if name == INPUT_GLOBAL {
            input_addr = next;
        }
        p.data.push(DataSegment {
            name: name.to_string(),
            addr: next,
            bytes: vec![0; len as usize],
            relocs: Vec::new(),
        });
        next += (len + 7) & !7;
    }
    let p = build_cfg(&p);

    let mut sites = Vec::new();
    for (k, inj) in injections.iter().enumerate() {
        let (fi, bi) = locate(&p, &inj.site).expect("site survives");
        let f = &p.functions[fi];
        let ordinal: usize = f.blocks[..bi].iter().map(|b| b.insts.len()).sum();
        let skip = format!("inj{k}_skip");
        let len: usize = f.blocks[bi..].iter().take_while(|b| b.label != skip).map(|b| b.insts.len()).sum();
        sites.push(InjectedSite {
            template: inj.template,
            site: inj.site.clone(),
            func: f.name.clone(),
            start: ordinal as u32 * INST_SIZE,
            end: (ordinal + len) as u32 * INST_SIZE,
        });
    }
    Ok((p, GroundTruth { sites, input_addr: Some(input_addr) }))
}

fn locate(p: &Program, label: &str) -> Option<(usize, usize)> {
    p.functions.iter().enumerate().find_map(|(fi, f)| f.blocks.iter().position(|b| b.label == label).map(|bi| (fi, bi)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `None` when there are no reports at all.
    pub precision: Option<f64>,
    pub recall: f64,
    /// Per ground-truth site, whether a report fell inside it.
    pub found: Vec<bool>,
}

/// Matches reports against injected ranges. False positives count distinct
/// code locations outside every range.
pub fn score_injection<'a>(reports: impl IntoIterator<Item = &'a ReportKey>, gt: &GroundTruth) -> Score {
    let mut found = vec![false; gt.sites.len()];
    let mut stray = BTreeSet::new();
    let mut any = false;
    for k in reports {
        any = true;
        match gt.sites.iter().position(|s| s.contains(&k.loc)) {
            Some(i) => found[i] = true,
            None => {
                stray.insert(k.loc.clone());
            }
        }
    }
    let tp = found.iter().filter(|f| **f).count();
    let fp = stray.len();
    let precision = (any && tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
    let recall = if gt.sites.is_empty() { 0.0 } else { tp as f64 / gt.sites.len() as f64 };
    Score { tp, fp, fn_: gt.sites.len() - tp, precision, recall, found }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::assemble;
    use crate::policy::GadgetClass;

    const HOST: &str = "\
.extern read_input
.data buf 4
.entry main
.func main
  mov r0, buf
  mov r1, #4
  call read_input
  mov r2, buf
  loadb r3, [r2+0]
  cmp r3, #5
  jlt small
  add r3, #1
small:
  halt
.endfunc
.func dead
  cmp r1, #0
  jz dz
  mov r1, #2
dz:
  ret
.endfunc
";

    #[test]
    fn sites_are_branch_successors() {
        let p = assemble(HOST).unwrap();
        let sites = valid_sites(&p);
        assert!(sites.contains(&"small".to_string()));
        assert!(sites.contains(&"dz".to_string()));
        assert!(!sites.contains(&"main".to_string()));
    }

    #[test]
    fn zero_templates_change_nothing() {
        let p = assemble(HOST).unwrap();
        let (q, gt) = inject_gadgets(&p, &[]).unwrap();
        assert_eq!(p, q);
        assert!(gt.sites.is_empty());
    }

    #[test]
    fn bad_site_is_rejected() {
        let p = assemble(HOST).unwrap();
        let e = inject_gadgets(&p, &[Injection { template: Template::DirectIndex, site: "main".into() }]);
        assert_eq!(e.unwrap_err(), InjectError::BadSite("main".into()));
    }

    #[test]
    fn ranges_cover_the_template() {
        let p = assemble(HOST).unwrap();
        let inj: Vec<Injection> = ["small", "dz"]
            .iter()
            .zip(Template::ALL)
            .map(|(s, t)| Injection { template: t, site: s.to_string() })
            .collect();
        let (q, gt) = inject_gadgets(&p, &inj).unwrap();
        assert_eq!(gt.sites.len(), 2);
        let main = q.function("main").unwrap();
        let before: usize = main.blocks.iter().take_while(|b| b.label != "small").map(|b| b.insts.len()).sum();
        assert_eq!(gt.sites[0].start, before as u32 * 4);
        assert_eq!(gt.sites[0].end - gt.sites[0].start, 4 * 13);
        assert_eq!(gt.sites[1].func, "dead");
        assert_eq!(gt.sites[1].start, 12);
        // The result still assembles from its own disassembly.
        let again = build_cfg(&assemble(&crate::isa::disassemble(&q)).unwrap());
        assert_eq!(again.original_count(), q.original_count());
    }

    #[test]
    fn scoring_examples() {
        let site = |f: &str, s, e| InjectedSite {
            template: Template::DirectIndex,
            site: String::new(),
            func: f.into(),
            start: s,
            end: e,
        };
        let key = |f: &str, o| ReportKey {
            class: GadgetClass::UserMds,
            loc: CodeLoc { func: f.into(), offset: o },
            chain: vec![0],
        };
        let gt = GroundTruth { sites: (0..10).map(|i| site("m", i * 100, i * 100 + 40)).collect(), input_addr: None };
        let keys: Vec<ReportKey> = (0..8).map(|i| key("m", i * 100 + 4)).collect();
        let s = score_injection(&keys, &gt);
        assert_eq!((s.tp, s.fp, s.fn_), (8, 0, 2));
        assert_eq!(s.precision, Some(1.0));
        assert!((s.recall - 0.8).abs() < 1e-9);
        let extra = [key("m", 4), key("other", 0)];
        assert_eq!(score_injection(&extra, &gt).precision, Some(0.5));
        let none = score_injection(std::iter::empty(), &gt);
        assert_eq!((none.precision, none.recall), (None, 0.0));
    }
}
