//! Code address assignment.

use std::collections::HashMap;

use super::{CopyKind, Program, GLOBALS_BASE, INST_SIZE, REAL_CODE_BASE, SHADOW_CODE_BASE};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LayoutError {
    #[error("{copy:?} code range overflows at function `{func}`")]
    Overflow { copy: CopyKind, func: String },
}

/// Symbol table and address map of a program.
#[derive(Debug, Clone, Default)]
pub struct Layout {
    /// Block labels, function names and data names to addresses.
    pub symbols: HashMap<String, u32>,
    pub real_end: u32,
    pub shadow_end: u32,
}

impl Layout {
    pub fn compute(program: &Program) -> Result<Layout, LayoutError> {
        let mut symbols = HashMap::new();
        let mut real = REAL_CODE_BASE;
        let mut shadow = SHADOW_CODE_BASE;
        for f in &program.functions {
            let (cursor, limit) = match f.copy {
                CopyKind::Real => (&mut real, SHADOW_CODE_BASE),
                CopyKind::Shadow => (&mut shadow, GLOBALS_BASE),
            };
            symbols.insert(f.name.clone(), *cursor);
            for b in &f.blocks {
                symbols.insert(b.label.clone(), *cursor);
                let size = b.insts.len() as u64 * INST_SIZE as u64;
                let next = *cursor as u64 + size;
                if next > limit as u64 {
                    return Err(LayoutError::Overflow { copy: f.copy, func: f.name.clone() });
                }
                *cursor = next as u32;
            }
        }
        for d in &program.data {
            symbols.insert(d.name.clone(), d.addr);
        }
        Ok(Layout { symbols, real_end: real, shadow_end: shadow })
    }

    pub fn addr(&self, sym: &str) -> Option<u32> {
        self.symbols.get(sym).copied()
    }

    pub fn in_real_copy(&self, addr: u32) -> bool {
        (REAL_CODE_BASE..self.real_end).contains(&addr)
    }

    pub fn in_shadow_copy(&self, addr: u32) -> bool {
        (SHADOW_CODE_BASE..self.shadow_end).contains(&addr)
    }
}
