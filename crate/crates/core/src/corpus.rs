//! Regression programs shipped with the crate, with inputs that drive them.

use crate::isa::{assemble, Program};

pub struct CorpusProgram {
    pub name: &'static str,
    pub source: &'static str,
    /// Inputs that exercise the interesting paths.
    pub inputs: &'static [&'static [u8]],
}

impl CorpusProgram {
    pub fn program(&self) -> Program {
        assemble(self.source).unwrap_or_else(|e| panic!("corpus program {}: {e}", self.name))
    }
}

macro_rules! corpus {
    ($($name:literal => [$($input:expr),* $(,)?]),* $(,)?) => {
        &[$(CorpusProgram {
            name: $name,
            source: include_str!(concat!("../corpus/", $name, ".s")),
            inputs: &[$($input),*],
        }),*]
    };
}

pub const PROGRAMS: &[CorpusProgram] = corpus! {
    "v1" => [&[20, 0, 0, 0], &[3, 0, 0, 0], b""],
    "v1_fence" => [&[20, 0, 0, 0], &[3, 0, 0, 0]],
    "fib" => [&[10, 0, 0, 0], &[5, 0, 0, 0]],
    "lzma" => [&[64, 0, 0, 0], &[8, 0, 0, 0]],
    "htp" => [b""],
    "yaml" => [b""],
    "escape_ptr" => [&[2, 0, 0, 0], &[0, 0, 0, 0]],
    "jump_table" => [&[2, 0, 0, 0], &[1, 0, 0, 0]],
    "rb_external" => [&[0, 0, 0, 0], &[1, 0, 0, 0]],
    "rb_fault" => [&[0, 0, 0, 0], &[0, 0, 0, 2]],
    "rb_budget" => [&[0, 0, 0, 0], &[7, 0, 0, 0]],
    "user_port" => [&[20, 0, 0, 0], &[3, 0, 0, 0]],
    "massage_cache" => [b""],
    "straight" => [&[4, 0, 0, 0]],
    "jsmn" => [br#"{"a":[1,2]}"#, br#"["x\"y",tr"#, b"]"],
};

pub fn get(name: &str) -> Option<&'static CorpusProgram> {
    PROGRAMS.iter().find(|p| p.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::disassemble;

    #[test]
    fn every_program_assembles_and_round_trips() {
        for p in PROGRAMS {
            let prog = p.program();
            let again = assemble(&disassemble(&prog)).unwrap();
            assert_eq!(again, prog, "{}", p.name);
        }
    }
}
