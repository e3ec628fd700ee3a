//! Random well-formed programs for property tests.
//!
//! Register conventions: r0-r8 scratch, r9 indirect-call target, r10 a
//! 64-byte heap object, r11 a 64-byte global, r12 the 16-byte input buffer,
//! r13/r14 loop counters, r15 the stack. Pushes and pops are balanced,
//! loops are bounded and helpers only call helpers with a higher index, so
//! every program terminates architecturally.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::isa::{assemble, Program};

#[derive(Clone, Copy, Debug)]
pub struct GenConfig {
    pub helpers: usize,
    /// Statements per body, before nesting.
    pub statements: usize,
    pub max_nesting: u32,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { helpers: 2, statements: 12, max_nesting: 2 }
    }
}

const CONDS: [&str; 6] = ["jz", "jnz", "jlt", "jge", "jltu", "jgeu"];
const ALU: [&str; 7] = ["add", "sub", "and", "or", "xor", "shl", "shr"];

struct Gen<'r, R: Rng> {
    rng: &'r mut R,
    cfg: GenConfig,
    out: String,
    labels: u32,
    func: usize,
}

impl<R: Rng> Gen<'_, R> {
    fn line(&mut self, s: impl AsRef<str>) {
        self.out.push_str("  ");
        self.out.push_str(s.as_ref());
        self.out.push('\n');
    }

    fn label(&mut self) -> String {
        self.labels += 1;
        format!("f{}_l{}", self.func, self.labels)
    }

    fn scratch(&mut self) -> u32 {
        self.rng.gen_range(0..9)
    }

    fn operand(&mut self) -> String {
        if self.rng.gen_bool(0.5) {
            format!("r{}", self.scratch())
        } else {
            format!("#{}", self.rng.gen_range(-4..70))
        }
    }

    fn block(&mut self, depth: u32, loops_free: &[u32]) {
        let n = self.rng.gen_range(1..=self.cfg.statements.max(1) / (depth as usize + 1) + 1);
        for _ in 0..n {
            self.statement(depth, loops_free);
        }
    }

    fn statement(&mut self, depth: u32, loops_free: &[u32]) {
        let nest = depth < self.cfg.max_nesting;
        let choice = self.rng.gen_range(0..100);
        match choice {
            0..=14 => {
                let (op, d, s) = (*ALU.choose(self.rng).unwrap(), self.scratch(), self.operand());
                self.line(format!("{op} r{d}, {s}"));
            }
            15..=21 => {
                let (d, s) = (self.scratch(), self.operand());
                self.line(format!("mov r{d}, {s}"));
            }
            22..=31 => {
                let d = self.scratch();
                if self.rng.gen_bool(0.5) {
                    let k = self.rng.gen_range(0..16);
                    self.line(format!("loadb r{d}, [r12+{k}]"));
                } else {
                    let k = self.rng.gen_range(0..13);
                    self.line(format!("load r{d}, [r12+{k}]"));
                }
            }
            32..=41 => {
                let (r, k) = (self.scratch(), self.rng.gen_range(0..84));
                let op = *["load", "loadb", "store", "storeb"].choose(self.rng).unwrap();
                if op.starts_with("store") {
                    self.line(format!("{op} [r10+{k}], r{r}"));
                } else {
                    self.line(format!("{op} r{r}, [r10+{k}]"));
                }
            }
            42..=49 => {
                // Register-indexed heap access, the shape of a bounds-check bypass.
                let (i, t, d) = (self.scratch(), self.scratch(), self.scratch());
                let mask = *[15, 63, 127].choose(self.rng).unwrap();
                self.line(format!("mov r{t}, r{i}"));
                self.line(format!("and r{t}, #{mask}"));
                self.line(format!("add r{t}, r10"));
                if self.rng.gen_bool(0.7) {
                    self.line(format!("loadb r{d}, [r{t}+0]"));
                } else {
                    self.line(format!("storeb [r{t}+0], r{d}"));
                }
            }
            50..=55 => {
                let (r, k) = (self.scratch(), self.rng.gen_range(0..16) * 4);
                if self.rng.gen_bool(0.5) {
                    self.line(format!("load r{r}, [r11+{k}]"));
                } else {
                    self.line(format!("store [r11+{k}], r{r}"));
                }
            }
            56..=73 if nest => {
                let (a, b) = (self.scratch(), self.operand());
                let cond = *CONDS.choose(self.rng).unwrap();
                let skip = self.label();
                self.line(format!("cmp r{a}, {b}"));
                self.line(format!("{cond} {skip}"));
                self.block(depth + 1, loops_free);
                if self.rng.gen_bool(0.3) {
                    let end = self.label();
                    self.line(format!("jmp {end}"));
                    self.out.push_str(&format!("{skip}:\n"));
                    self.block(depth + 1, loops_free);
                    self.out.push_str(&format!("{end}:\n"));
                } else {
                    self.out.push_str(&format!("{skip}:\n"));
                }
            }
            74..=79 if nest && !loops_free.is_empty() => {
                let r = loops_free[0];
                let top = self.label();
                let n = self.rng.gen_range(1..=4);
                self.line(format!("mov r{r}, #{n}"));
                self.out.push_str(&format!("{top}:\n"));
                self.block(depth + 1, &loops_free[1..]);
                self.line(format!("sub r{r}, #1"));
                self.line(format!("cmp r{r}, #0"));
                self.line(format!("jnz {top}"));
            }
            80..=84 if nest => {
                let (a, b) = (self.scratch(), self.scratch());
                self.line(format!("push r{a}"));
                self.block(depth + 1, loops_free);
                self.line(format!("pop r{b}"));
            }
            85..=91 if self.func < self.cfg.helpers => {
                let target = self.rng.gen_range(self.func..self.cfg.helpers);
                if self.func == 0 && self.rng.gen_bool(0.5) {
                    self.line("mov r9, fptrs");
                    self.line(format!("load r9, [r9+{}]", 4 * target));
                    self.line("callr r9");
                } else {
                    self.line(format!("call h{target}"));
                }
            }
            92..=93 => self.line("fence"),
            _ => {
                // Input-indexed probe behind a bounds check.
                let r: Vec<u32> = (0..9).collect::<Vec<_>>().choose_multiple(self.rng, 3).copied().collect();
                let (i, s, t) = (r[0], r[1], r[2]);
                let (k, bound) = (self.rng.gen_range(0..16), self.rng.gen_range(8..64));
                let skip = self.label();
                self.line(format!("loadb r{i}, [r12+{k}]"));
                self.line(format!("cmp r{i}, #{bound}"));
                self.line(format!("jgeu {skip}"));
                self.line(format!("mov r{t}, r10"));
                self.line(format!("add r{t}, r{i}"));
                self.line(format!("loadb r{s}, [r{t}+0]"));
                self.line(format!("and r{s}, #63"));
                self.line(format!("add r{s}, r11"));
                self.line(format!("loadb r{s}, [r{s}+0]"));
                self.out.push_str(&format!("{skip}:\n"));
            }
        }
    }
}

/// Assembly source of a random program.
pub fn generate_source(rng: &mut impl Rng, cfg: GenConfig) -> String {
    let mut g = Gen { rng, cfg, out: String::new(), labels: 0, func: 0 };
    g.out.push_str(".extern read_input\n.extern malloc\n.data g 64\n");
    if cfg.helpers > 0 {
        g.out.push_str(&format!(".data fptrs {}", 4 * cfg.helpers));
        for h in 0..cfg.helpers {
            g.out.push_str(&format!(" &h{h}"));
        }
        g.out.push('\n');
    }
    g.out.push_str(".entry main\n.func main\n");
    for l in [
        "mov r0, #64",
        "call malloc",
        "mov r10, r0",
        "mov r0, #16",
        "call malloc",
        "mov r12, r0",
        "mov r1, #16",
        "call read_input",
        "mov r11, g",
    ] {
        g.line(l);
    }
    g.block(0, &[13, 14]);
    g.line("halt");
    g.out.push_str(".endfunc\n");
    for h in 0..cfg.helpers {
        g.func = h + 1;
        g.out.push_str(&format!("\n.func h{h}\n"));
        g.line("push r13");
        g.line("push r14");
        g.block(1, &[13, 14]);
        g.line("pop r14");
        g.line("pop r13");
        g.line("ret");
        g.out.push_str(".endfunc\n");
    }
    g.out
}

/// Random program for `seed`.
pub fn generate(seed: u64, cfg: GenConfig) -> Program {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src = generate_source(&mut rng, cfg);
    assemble(&src).unwrap_or_else(|e| panic!("generated program does not assemble: {e}\n{src}"))
}

/// Inputs for a generated program: 1 to 16 random bytes each.
pub fn generate_inputs(seed: u64, n: usize) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(1..=16);
            (0..len).map(|_| if rng.gen_bool(0.5) { rng.gen_range(0..24) } else { rng.gen() }).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use crate::vm::{run, RunOptions, RunStatus};

    #[test]
    fn generated_programs_halt() {
        for seed in 0..200 {
            let p = generate(seed, GenConfig::default());
            let img = Image::load(&p).unwrap();
            for input in generate_inputs(seed, 3) {
                let r = run(&img, &input, RunOptions::default());
                assert_eq!(r.status, RunStatus::Halted { code: 0 }, "seed {seed}");
            }
        }
    }

    #[test]
    fn same_seed_same_program() {
        assert_eq!(generate(7, GenConfig::default()), generate(7, GenConfig::default()));
    }
}
