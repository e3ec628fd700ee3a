//! Sparse byte memory over the 32-bit address space.
//!
//! Absent pages read as zero. Two memories are equal when every byte is.

use std::collections::HashMap;
use std::hash::{BuildHasherDefault, Hasher};

pub const PAGE_SIZE: usize = 4096;
const PAGE_SHIFT: u32 = 12;

type Page = Box<[u8; PAGE_SIZE]>;

/// Multiplicative hasher for page numbers.
#[derive(Default)]
pub struct PageHasher(u64);

impl Hasher for PageHasher {
    fn finish(&self) -> u64 {
        self.0
    }
    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 = (self.0.rotate_left(8) ^ *b as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        }
    }
    fn write_u32(&mut self, n: u32) {
        self.0 = (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    }
}

#[derive(Clone, Default)]
pub struct Memory {
    pages: HashMap<u32, Page, BuildHasherDefault<PageHasher>>,
}

impl std::fmt::Debug for Memory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Memory").field("pages", &self.pages.len()).finish()
    }
}

impl Memory {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn read_u8(&self, addr: u32) -> u8 {
        match self.pages.get(&(addr >> PAGE_SHIFT)) {
            Some(p) => p[(addr as usize) & (PAGE_SIZE - 1)],
            None => 0,
        }
    }

    #[inline]
    pub fn write_u8(&mut self, addr: u32, value: u8) {
        let page = addr >> PAGE_SHIFT;
        if value == 0 && !self.pages.contains_key(&page) {
            return;
        }
        self.pages.entry(page).or_insert_with(|| Box::new([0; PAGE_SIZE]))[(addr as usize) & (PAGE_SIZE - 1)] = value;
    }

    pub fn read(&self, addr: u32, buf: &mut [u8]) {
        let off = (addr as usize) & (PAGE_SIZE - 1);
        if off + buf.len() <= PAGE_SIZE {
            match self.pages.get(&(addr >> PAGE_SHIFT)) {
                Some(p) => buf.copy_from_slice(&p[off..off + buf.len()]),
                None => buf.fill(0),
            }
        } else {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = self.read_u8(addr.wrapping_add(i as u32));
            }
        }
    }

    pub fn write(&mut self, addr: u32, data: &[u8]) {
        for (i, b) in data.iter().enumerate() {
            self.write_u8(addr.wrapping_add(i as u32), *b);
        }
    }

    pub fn read_uint(&self, addr: u32, width: u32) -> u32 {
        let mut buf = [0u8; 4];
        self.read(addr, &mut buf[..width as usize]);
        u32::from_le_bytes(buf)
    }

    pub fn write_uint(&mut self, addr: u32, width: u32, value: u32) {
        self.write(addr, &value.to_le_bytes()[..width as usize]);
    }

    pub fn fill(&mut self, addr: u32, len: u32, value: u8) {
        for i in 0..len {
            self.write_u8(addr.wrapping_add(i), value);
        }
    }

    /// Byte-wise equality restricted to addresses for which `keep` holds on
    /// the page base address.
    pub fn eq_where(&self, other: &Memory, keep: impl Fn(u32) -> bool) -> bool {
        const ZERO: [u8; PAGE_SIZE] = [0; PAGE_SIZE];
        let check = |a: &Memory, b: &Memory| {
            a.pages.iter().all(|(k, p)| {
                if !keep(k << PAGE_SHIFT) {
                    return true;
                }
                let q = b.pages.get(k).map(|q| &q[..]).unwrap_or(&ZERO[..]);
                p[..] == *q
            })
        };
        check(self, other) && check(other, self)
    }

    /// First differing address, for diagnostics.
    pub fn first_difference(&self, other: &Memory) -> Option<u32> {
        let mut keys: Vec<u32> = self.pages.keys().chain(other.pages.keys()).copied().collect();
        keys.sort_unstable();
        keys.dedup();
        for k in keys {
            let base = k << PAGE_SHIFT;
            for i in 0..PAGE_SIZE as u32 {
                if self.read_u8(base + i) != other.read_u8(base + i) {
                    return Some(base + i);
                }
            }
        }
        None
    }
}

impl PartialEq for Memory {
    fn eq(&self, other: &Self) -> bool {
        self.eq_where(other, |_| true)
    }
}

impl Eq for Memory {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absent_pages_read_zero_and_compare_equal() {
        let mut a = Memory::new();
        let b = Memory::new();
        assert_eq!(a.read_uint(0x1234, 4), 0);
        a.write_uint(0x1000, 4, 7);
        assert_ne!(a, b);
        a.write_uint(0x1000, 4, 0);
        assert_eq!(a, b);
    }

    #[test]
    fn straddling_page_boundary() {
        let mut m = Memory::new();
        m.write_uint(0x1ffe, 4, 0xAABB_CCDD);
        assert_eq!(m.read_uint(0x1ffe, 4), 0xAABB_CCDD);
        assert_eq!(m.read_u8(0x2001), 0xAA);
        assert_eq!(m.first_difference(&Memory::new()), Some(0x1ffe));
    }
}
