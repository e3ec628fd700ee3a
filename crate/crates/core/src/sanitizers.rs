//! Poison shadow, tag shadow and the heap allocator that maintains them.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{BitOr, BitOrAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{Op, Src, GLOBALS_BASE, HEAP_BASE, HEAP_END, REAL_CODE_BASE, STACK_BASE, STACK_END};
use crate::memory::Memory;

pub const ASAN_SHADOW_BASE: u32 = 0x8000_0000;
pub const ASAN_SHADOW_END: u32 = 0xA000_0000;
pub const TAG_FLIP: u32 = 0x4000_0000;
pub const GRANULE: u32 = 8;

pub const SHADOW_OK: u8 = 0x00;
pub const SHADOW_REDZONE: u8 = 0xFF;
pub const SHADOW_RETURN_SLOT: u8 = 0xFE;

pub const REDZONE: u32 = 16;

/// Set of taint tags, one bit per tag.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TagSet(pub u8);

impl TagSet {
    pub const EMPTY: TagSet = TagSet(0);
    pub const USER: TagSet = TagSet(0x01);
    pub const MASSAGE: TagSet = TagSet(0x02);
    pub const SECRET: TagSet = TagSet(0x04);
    /// Provenance of a SECRET: produced from a USER-controlled address.
    pub const FROM_USER: TagSet = TagSet(0x08);
    /// Provenance of a SECRET: produced from a MASSAGE-controlled address.
    pub const FROM_MASSAGE: TagSet = TagSet(0x10);

    pub fn contains(self, other: TagSet) -> bool {
        self.0 & other.0 == other.0 && other.0 != 0
    }

    pub fn intersects(self, other: TagSet) -> bool {
        self.0 & other.0 != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl BitOr for TagSet {
    type Output = TagSet;
    fn bitor(self, rhs: TagSet) -> TagSet {
        TagSet(self.0 | rhs.0)
    }
}

impl BitOrAssign for TagSet {
    fn bitor_assign(&mut self, rhs: TagSet) {
        self.0 |= rhs.0;
    }
}

impl fmt::Debug for TagSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const NAMES: [(TagSet, &str); 5] = [
            (TagSet::USER, "USER"),
            (TagSet::MASSAGE, "MASSAGE"),
            (TagSet::SECRET, "SECRET"),
            (TagSet::FROM_USER, "from-user"),
            (TagSet::FROM_MASSAGE, "from-massage"),
        ];
        let names: Vec<&str> = NAMES.iter().filter(|(t, _)| self.contains(*t)).map(|(_, n)| *n).collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

/// Address-space regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Code,
    Globals,
    Heap,
    Stack,
    AsanShadow,
    TagShadow,
    Unmapped,
}

impl Region {
    pub fn of(addr: u32) -> Region {
        match addr {
            a if (REAL_CODE_BASE..GLOBALS_BASE).contains(&a) => Region::Code,
            a if (GLOBALS_BASE..HEAP_BASE).contains(&a) => Region::Globals,
            a if (HEAP_BASE..HEAP_END).contains(&a) => Region::Heap,
            a if (STACK_BASE..STACK_END).contains(&a) => Region::Stack,
            a if (ASAN_SHADOW_BASE..ASAN_SHADOW_END).contains(&a) => Region::AsanShadow,
            a if (0x2000_0000..0x3000_0000).contains(&a) || (0x4000_0000..0x6000_0000).contains(&a) => {
                Region::TagShadow
            }
            _ => Region::Unmapped,
        }
    }

    pub fn is_user_data(self) -> bool {
        matches!(self, Region::Globals | Region::Heap | Region::Stack)
    }

    pub fn is_privileged(self) -> bool {
        matches!(self, Region::AsanShadow | Region::TagShadow)
    }
}

/// The documented region table, `(name, start, end)`.
pub const REGION_TABLE: [(&str, u32, u32); 8] = [
    ("code", REAL_CODE_BASE, GLOBALS_BASE),
    ("globals", GLOBALS_BASE, HEAP_BASE),
    ("heap", HEAP_BASE, HEAP_END),
    ("stack", STACK_BASE, STACK_END),
    ("asan-shadow", ASAN_SHADOW_BASE, ASAN_SHADOW_END),
    ("tag-shadow(globals,heap)", GLOBALS_BASE ^ TAG_FLIP, HEAP_END ^ TAG_FLIP),
    ("tag-shadow(stack)", STACK_BASE ^ TAG_FLIP, STACK_END ^ TAG_FLIP),
    ("tag-shadow(reserved)", 0x4000_0000, 0x6000_0000),
];

/// Checks that both shadows of every user region are privileged and that
/// the region table entries do not overlap each other where they must not.
pub fn verify_region_table() -> Result<(), String> {
    for (name, start, end) in &REGION_TABLE[1..4] {
        for a in [*start, end - 1] {
            let s = asan_shadow_addr(a);
            let t = tag_addr(a);
            if !Region::of(s).is_privileged() || !Region::of(t).is_privileged() {
                return Err(format!("{name}: shadow of {a:#x} not privileged"));
            }
            if s == t || Region::of(s) == Region::of(t) {
                return Err(format!("{name}: shadows of {a:#x} collide"));
            }
        }
    }
    let user: Vec<_> = REGION_TABLE[..4].to_vec();
    for (i, a) in user.iter().enumerate() {
        for b in &user[i + 1..] {
            if a.1 < b.2 && b.1 < a.2 {
                return Err(format!("regions {} and {} overlap", a.0, b.0));
            }
        }
    }
    Ok(())
}

#[inline]
pub fn asan_shadow_addr(addr: u32) -> u32 {
    (addr >> 3).wrapping_add(ASAN_SHADOW_BASE)
}

#[inline]
pub fn tag_addr(addr: u32) -> u32 {
    addr ^ TAG_FLIP
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Violation {
    HeapOob,
    StackOob,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SanitizerError {
    #[error("range {start:#x}+{len} is outside user space")]
    OutsideUserSpace { start: u32, len: u32 },
    #[error("free of {0:#x}, which is not a live allocation")]
    BadFree(u32),
    #[error("heap exhausted allocating {0} bytes")]
    OutOfMemory(u32),
}

fn check_user_range(start: u32, len: u32) -> Result<(), SanitizerError> {
    let end = start.checked_add(len.max(1) - 1);
    match end {
        Some(end) if Region::of(start).is_user_data() && Region::of(start) == Region::of(end) => Ok(()),
        _ => Err(SanitizerError::OutsideUserSpace { start, len }),
    }
}

/// Writes `value` into the shadow of every granule overlapping the range.
/// `log` receives `(shadow_addr, previous_byte)` for each change.
pub fn poison(
    mem: &mut Memory,
    start: u32,
    len: u32,
    value: u8,
    log: &mut dyn FnMut(u32, u8),
) -> Result<(), SanitizerError> {
    check_user_range(start, len)?;
    if len == 0 {
        return Ok(());
    }
    let first = start / GRANULE;
    let last = (start + len - 1) / GRANULE;
    for g in first..=last {
        let s = asan_shadow_addr(g * GRANULE);
        let old = mem.read_u8(s);
        if old != value {
            log(s, old);
            mem.write_u8(s, value);
        }
    }
    Ok(())
}

pub fn unpoison(mem: &mut Memory, start: u32, len: u32, log: &mut dyn FnMut(u32, u8)) -> Result<(), SanitizerError> {
    poison(mem, start, len, SHADOW_OK, log)
}

/// Heap addresses at or above `heap_brk` have never been allocated and
/// count as red zone.
pub fn asan_check(mem: &Memory, heap_brk: u32, addr: u32, width: u32) -> Option<Violation> {
    let last = addr.wrapping_add(width - 1);
    let mut a = addr & !(GRANULE - 1);
    loop {
        if (heap_brk..HEAP_END).contains(&a) || (heap_brk..HEAP_END).contains(&last) {
            return Some(Violation::HeapOob);
        }
        match mem.read_u8(asan_shadow_addr(a)) {
            SHADOW_OK => {}
            SHADOW_RETURN_SLOT => return Some(Violation::StackOob),
            _ => return Some(Violation::HeapOob),
        }
        if last < a.wrapping_add(GRANULE) || a.wrapping_add(GRANULE) == 0 {
            return None;
        }
        a += GRANULE;
    }
}

/// Bump allocator with red zones on both sides of every object.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Heap {
    pub brk: u32,
    pub live: BTreeMap<u32, u32>,
}

impl Default for Heap {
    fn default() -> Self {
        Heap { brk: HEAP_BASE, live: BTreeMap::new() }
    }
}

impl Heap {
    pub fn malloc(&mut self, mem: &mut Memory, size: u32) -> Result<u32, SanitizerError> {
        let rounded = size.max(1).div_ceil(GRANULE) * GRANULE;
        let total = REDZONE
            .checked_add(rounded)
            .and_then(|t| t.checked_add(REDZONE))
            .ok_or(SanitizerError::OutOfMemory(size))?;
        if HEAP_END - self.brk < total {
            return Err(SanitizerError::OutOfMemory(size));
        }
        let base = self.brk;
        let obj = base + REDZONE;
        self.brk += total;
        let mut nolog = |_, _| {};
        poison(mem, base, REDZONE, SHADOW_REDZONE, &mut nolog)?;
        unpoison(mem, obj, rounded, &mut nolog)?;
        poison(mem, obj + rounded, REDZONE, SHADOW_REDZONE, &mut nolog)?;
        self.live.insert(obj, rounded);
        Ok(obj)
    }

    pub fn free(&mut self, mem: &mut Memory, addr: u32) -> Result<(), SanitizerError> {
        let size = self.live.remove(&addr).ok_or(SanitizerError::BadFree(addr))?;
        poison(mem, addr, size, SHADOW_REDZONE, &mut |_, _| {})
    }
}

pub fn taint_get(mem: &Memory, start: u32, len: u32) -> TagSet {
    let mut t = TagSet::EMPTY;
    for i in 0..len {
        t.0 |= mem.read_u8(tag_addr(start.wrapping_add(i)));
    }
    t
}

/// Unions `tags` into each byte of the range.
pub fn taint_set(mem: &mut Memory, start: u32, len: u32, tags: TagSet) -> Result<(), SanitizerError> {
    check_user_range(start, len)?;
    for i in 0..len {
        let a = tag_addr(start + i);
        let old = mem.read_u8(a);
        mem.write_u8(a, old | tags.0);
    }
    Ok(())
}

/// Overwrites the tags of the range, reporting previous bytes to `log`.
pub fn taint_write(mem: &mut Memory, start: u32, len: u32, tags: TagSet, log: &mut dyn FnMut(u32, u8)) {
    for i in 0..len {
        let a = tag_addr(start.wrapping_add(i));
        let old = mem.read_u8(a);
        if old != tags.0 {
            log(a, old);
            mem.write_u8(a, tags.0);
        }
    }
}

/// Register and flags taint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegTags {
    pub regs: [TagSet; 16],
    pub flags: TagSet,
}

impl RegTags {
    pub fn src(&self, src: Src) -> TagSet {
        match src {
            Src::Reg(r) => self.regs[r.0 as usize],
            Src::Imm(_) => TagSet::EMPTY,
        }
    }
}

/// Whether `op` has any effect on register, flags or memory tags.
pub fn affects_tags(op: &Op) -> bool {
    matches!(
        op,
        Op::Mov { .. }
            | Op::MovLabel { .. }
            | Op::Alu { .. }
            | Op::Cmp { .. }
            | Op::Load { .. }
            | Op::Store { .. }
            | Op::Push { .. }
            | Op::Pop { .. }
            | Op::Call { .. }
            | Op::Callr { .. }
    )
}

/// Applies the tag effect of one instruction. `ea` is the address the
/// instruction touches in memory, taken from the pre-instruction state
/// (the pushed slot for push/call, the popped slot for pop). `load_extra`
/// is added to the destination of a load.
pub fn propagate(
    op: &Op,
    ea: Option<u32>,
    load_extra: TagSet,
    tags: &mut RegTags,
    mem: &mut Memory,
    log: &mut dyn FnMut(u32, u8),
) {
    match op {
        Op::Mov { dst, src } => tags.regs[dst.0 as usize] = tags.src(*src),
        Op::MovLabel { dst, .. } => tags.regs[dst.0 as usize] = TagSet::EMPTY,
        Op::Alu { dst, src, .. } => {
            let t = tags.regs[dst.0 as usize] | tags.src(*src);
            tags.regs[dst.0 as usize] = t;
        }
        Op::Cmp { lhs, rhs } => tags.flags = tags.regs[lhs.0 as usize] | tags.src(*rhs),
        Op::Load { dst, width, .. } => {
            let a = ea.expect("load without address");
            tags.regs[dst.0 as usize] = taint_get(mem, a, width.bytes()) | load_extra;
        }
        Op::Store { src, width, .. } => {
            let a = ea.expect("store without address");
            taint_write(mem, a, width.bytes(), tags.regs[src.0 as usize], log);
        }
        Op::Push { reg } => {
            let a = ea.expect("push without address");
            taint_write(mem, a, 4, tags.regs[reg.0 as usize], log);
        }
        Op::Pop { reg } => {
            let a = ea.expect("pop without address");
            tags.regs[reg.0 as usize] = taint_get(mem, a, 4);
        }
        Op::Call { .. } | Op::Callr { .. } => {
            let a = ea.expect("call without address");
            taint_write(mem, a, 4, TagSet::EMPTY, log);
        }
        _ => {}
    }
}

/// The tag-relevant part of a real-copy block, replayed in one go.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BlockSummary {
    /// Tag-relevant instructions and whether each consumes a recorded address.
    pub ops: Vec<(Op, bool)>,
}

impl BlockSummary {
    pub fn compile<'a>(originals: impl IntoIterator<Item = &'a Op>) -> BlockSummary {
        let ops =
            originals.into_iter().filter(|op| affects_tags(op)).map(|op| (op.clone(), touches_memory(op))).collect();
        BlockSummary { ops }
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Replays the block. `addrs` are the addresses recorded while the
    /// block's body ran, in order; a trailing memory-touching terminator
    /// that has not executed yet takes `pending` instead.
    pub fn apply(&self, addrs: &[u32], pending: Option<u32>, tags: &mut RegTags, mem: &mut Memory) {
        let mut next = addrs.iter();
        for (op, uses_addr) in &self.ops {
            let ea = if *uses_addr { next.next().copied().or(pending) } else { None };
            propagate(op, ea, TagSet::EMPTY, tags, mem, &mut |_, _| {});
        }
    }
}

/// Instructions whose tag effect needs a memory address.
pub fn touches_memory(op: &Op) -> bool {
    matches!(
        op,
        Op::Load { .. } | Op::Store { .. } | Op::Push { .. } | Op::Pop { .. } | Op::Call { .. } | Op::Callr { .. }
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{AluOp, MemRef, Reg, Width, GLOBALS_BASE};

    #[test]
    fn region_table_is_consistent() {
        verify_region_table().unwrap();
        assert_eq!(Region::of(STACK_BASE ^ TAG_FLIP), Region::TagShadow);
        assert_eq!(Region::of(0), Region::Unmapped);
    }

    #[test]
    fn malloc_red_zones_are_poisoned() {
        let mut mem = Memory::new();
        let mut heap = Heap::default();
        let a = heap.malloc(&mut mem, 16).unwrap();
        assert_eq!(asan_check(&mem, heap.brk, a - 1, 1), Some(Violation::HeapOob));
        assert_eq!(asan_check(&mem, heap.brk, a + 16, 1), Some(Violation::HeapOob));
        assert_eq!(asan_check(&mem, heap.brk, a, 4), None);
        assert_eq!(asan_check(&mem, heap.brk, a + 12, 4), None);
        assert_eq!(asan_check(&mem, heap.brk, a + 14, 4), Some(Violation::HeapOob));
    }

    #[test]
    fn malloc_8_poisons_sixteen_each_side() {
        let mut mem = Memory::new();
        let mut heap = Heap::default();
        let a = heap.malloc(&mut mem, 8).unwrap();
        for off in [-16i32, -9, -1, 8, 15, 23] {
            let addr = a.wrapping_add(off as u32);
            assert!(asan_check(&mem, heap.brk, addr, 1).is_some(), "offset {off}");
        }
        assert!(asan_check(&mem, heap.brk, a + 7, 1).is_none());
    }

    #[test]
    fn free_repoisons_and_rejects_unknown() {
        let mut mem = Memory::new();
        let mut heap = Heap::default();
        let a = heap.malloc(&mut mem, 8).unwrap();
        heap.free(&mut mem, a).unwrap();
        assert!(asan_check(&mem, heap.brk, a, 4).is_some());
        assert_eq!(heap.free(&mut mem, a), Err(SanitizerError::BadFree(a)));
        assert_eq!(heap.free(&mut mem, 0x1234), Err(SanitizerError::BadFree(0x1234)));
    }

    #[test]
    fn return_slot_poison_is_stack_oob() {
        let mut mem = Memory::new();
        let slot = 0x6FFF_FFE8;
        poison(&mut mem, slot, 8, SHADOW_RETURN_SLOT, &mut |_, _| {}).unwrap();
        assert_eq!(asan_check(&mem, HEAP_BASE, slot, 4), Some(Violation::StackOob));
        assert_eq!(asan_check(&mem, HEAP_BASE, slot + 8, 4), None);
    }

    #[test]
    fn globals_are_never_poisoned_and_poison_rejects_non_user() {
        let mem = Memory::new();
        assert_eq!(asan_check(&mem, HEAP_BASE, GLOBALS_BASE + 4096, 4), None);
        let mut m = Memory::new();
        assert!(poison(&mut m, 0x8000_0000, 8, SHADOW_REDZONE, &mut |_, _| {}).is_err());
        assert!(taint_set(&mut m, 0x10, 1, TagSet::USER).is_err());
    }

    #[test]
    fn taint_union_and_empty() {
        let mut mem = Memory::new();
        assert!(taint_get(&mem, GLOBALS_BASE, 4).is_empty());
        taint_set(&mut mem, GLOBALS_BASE, 4, TagSet::USER).unwrap();
        taint_set(&mut mem, GLOBALS_BASE, 4, TagSet::SECRET).unwrap();
        let t = taint_get(&mem, GLOBALS_BASE, 4);
        assert!(t.contains(TagSet::USER) && t.contains(TagSet::SECRET));
    }

    #[test]
    fn propagation_rules() {
        let mut mem = Memory::new();
        let mut tags = RegTags::default();
        tags.regs[1] = TagSet::USER;
        let r = Reg;
        propagate(
            &Op::Alu { op: AluOp::Add, dst: r(2), src: Src::Reg(r(1)) },
            None,
            TagSet::EMPTY,
            &mut tags,
            &mut mem,
            &mut |_, _| {},
        );
        assert_eq!(tags.regs[2], TagSet::USER);
        let mut logged = Vec::new();
        let store = Op::Store { mem: MemRef::new(r(3), 0), src: r(2), width: Width::Word };
        propagate(&store, Some(GLOBALS_BASE), TagSet::EMPTY, &mut tags, &mut mem, &mut |a, o| logged.push((a, o)));
        assert_eq!(taint_get(&mem, GLOBALS_BASE, 4), TagSet::USER);
        assert_eq!(logged.len(), 4);
        tags.regs[4] = TagSet::SECRET;
        propagate(&Op::Cmp { lhs: r(4), rhs: Src::Imm(0) }, None, TagSet::EMPTY, &mut tags, &mut mem, &mut |_, _| {});
        assert_eq!(tags.flags, TagSet::SECRET);
    }

    #[test]
    fn empty_summary_for_untracked_block() {
        let ops = [Op::Nop, Op::Jmp { target: "x".into() }];
        assert!(BlockSummary::compile(ops.iter()).is_empty());
    }
}
