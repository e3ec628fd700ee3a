//! The ten acceptance criteria. Each prints one PASS/FAIL line; the test
//! fails if any criterion does.

use std::collections::BTreeSet;
use std::time::Instant;

use shadowspec::config::{Mode, Policy, RewriteConfig};
use shadowspec::corpus::{self, PROGRAMS};
use shadowspec::files::RunSummary;
use shadowspec::fuzz::{fuzz_loop, inject_gadgets, oracle_explore, score_injection, FuzzConfig, Injection, Template};
use shadowspec::gen::{generate, generate_inputs, GenConfig};
use shadowspec::image::Image;
use shadowspec::isa::{build_cfg, CodeLoc, Op, Program, Width, INST_SIZE};
use shadowspec::policy::{GadgetClass, ReportKey};
use shadowspec::rewriter::instrument;
use shadowspec::vm::{run, RunOptions, RunResult, RunStatus};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn image(p: &Program, cfg: &RewriteConfig) -> Image {
    Image::load(&instrument(p, cfg).unwrap()).unwrap()
}

fn snapshots() -> RunOptions {
    RunOptions { check_snapshots: true, ..Default::default() }
}

fn keys(r: &RunResult) -> BTreeSet<ReportKey> {
    r.reports.iter().map(|g| g.key.clone()).collect()
}

fn class_locs(r: &RunResult) -> BTreeSet<(GadgetClass, CodeLoc)> {
    r.reports.iter().map(|g| (g.key.class, g.key.loc.clone())).collect()
}

/// Locations of the originals of `func` matching `pred`, in order.
fn locs_where(p: &Program, func: &str, pred: impl Fn(&Op) -> bool) -> Vec<CodeLoc> {
    let p = build_cfg(p);
    let f = p.function(func).unwrap();
    f.blocks
        .iter()
        .flat_map(|b| b.originals())
        .enumerate()
        .filter(|(_, i)| pred(&i.op))
        .map(|(k, _)| CodeLoc { func: func.to_string(), offset: k as u32 * INST_SIZE })
        .collect()
}

fn longest_block(p: &Program) -> u32 {
    build_cfg(p).blocks().map(|(_, b)| b.originals().count() as u32).max().unwrap_or(0)
}

fn kasper() -> RewriteConfig {
    RewriteConfig::with_policy(Policy::Kasper)
}

fn specfuzz() -> RewriteConfig {
    RewriteConfig::with_policy(Policy::SpecFuzz)
}

fn c1_canonical_gadget() -> Outcome {
    let started = Instant::now();
    let v1 = corpus::get("v1").unwrap().program();
    let fenced = corpus::get("v1_fence").unwrap().program();
    let oob = [20u8, 0, 0, 0];
    let byte_loads = locs_where(&v1, "main", |op| matches!(op, Op::Load { width: Width::Byte, .. }));
    let (l1, l2) = (byte_loads[0].clone(), byte_loads[1].clone());

    let k = run(&image(&v1, &kasper()), &oob, RunOptions::default());
    let want = BTreeSet::from([(GadgetClass::UserMds, l1.clone()), (GadgetClass::UserCache, l2.clone())]);
    check!(class_locs(&k) == want, "kasper reported {:?}", class_locs(&k));
    let s = run(&image(&v1, &specfuzz()), &oob, RunOptions::default());
    let want = BTreeSet::from([(GadgetClass::SfOob, l1.clone())]);
    check!(class_locs(&s) == want, "specfuzz reported {:?}", class_locs(&s));
    for cfg in [kasper(), specfuzz()] {
        let r = run(&image(&fenced, &cfg), &oob, RunOptions::default());
        check!(r.reports.is_empty(), "fenced variant reported {:?} under {}", keys(&r), cfg.policy);
    }
    let elapsed = started.elapsed();
    check!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    Ok(format!("kasper {{User-MDS@{l1}, User-Cache@{l2}}}, specfuzz {{SF-OOB@{l1}}}, fenced empty, {elapsed:.2?}"))
}

fn c2_fib_walkthrough() -> Outcome {
    let fib = corpus::get("fib").unwrap().program();
    let img = image(&fib, &specfuzz());
    // Eight-entry table, i = 10: both f[i-1] and f[i-2] lie past the end.
    let r = run(&img, &[10, 0, 0, 0], snapshots());
    let loads = locs_where(&fib, "fib", |op| matches!(op, Op::Load { mem, .. } if mem.disp < 0));
    let got = class_locs(&r);
    for l in &loads {
        check!(got.contains(&(GadgetClass::SfOob, l.clone())), "no violation at {l}: {got:?}");
    }
    check!(r.status == RunStatus::Halted { code: 0 }, "status {:?}", r.status);
    check!(r.episodes.episodes >= 1, "no rollback happened");
    let result = img.layout.addr("result").unwrap();
    let value = r.memory.read_uint(result, 4);
    check!(value == u32::MAX, "architectural result {value:#x}, want -1");
    Ok(format!(
        "violations at {} and {}, {} rollback(s), result -1, snapshots clean",
        loads[0], loads[1], r.episodes.episodes
    ))
}

fn c3_escape_freedom() -> Outcome {
    let mut total = 0;
    let mut escapes = 0;
    for c in PROGRAMS {
        let n = if matches!(c.name, "escape_ptr" | "jump_table") { 10_000 } else { 500 };
        let img = image(&c.program(), &kasper());
        let seeds: Vec<Vec<u8>> = c.inputs.iter().map(|i| i.to_vec()).collect();
        let cfg = FuzzConfig { executions: n, seed: 3, max_input_len: 24, ..Default::default() };
        let out = fuzz_loop(&img, &seeds, &cfg);
        check!(out.violations.is_empty(), "{}: {:?}", c.name, out.violations[0]);
        total += out.executions;
        let e = out.episodes.ends.get("escape").copied().unwrap_or(0);
        if c.name == "jump_table" {
            check!(e >= 1, "jump_table never ended in an indirect escape");
        }
        escapes += e;
    }
    Ok(format!("{total} executions, 0 confinement violations, {escapes} indirect-escape rollbacks"))
}

fn c4_rollback_soundness() -> Outcome {
    let mut episodes = 0;
    for seed in 0..1000u64 {
        let p = generate(seed, GenConfig::default());
        let cfg = RewriteConfig {
            policy: if seed % 2 == 0 { Policy::Kasper } else { Policy::SpecFuzz },
            mode: if seed % 4 < 2 { Mode::Shadows } else { Mode::Mixed },
            ..Default::default()
        };
        let img = image(&p, &cfg);
        for input in generate_inputs(seed, 10) {
            let r = run(&img, &input, snapshots());
            check!(
                !matches!(r.status, RunStatus::RollbackMismatch { .. } | RunStatus::Fault(_)),
                "seed {seed} input {input:?}: {:?}",
                r.status
            );
            episodes += r.episodes.episodes;
        }
    }
    Ok(format!("10000 runs, {episodes} episodes, 0 snapshot mismatches"))
}

fn oracle_configs() -> Vec<RewriteConfig> {
    let mut out = Vec::new();
    for policy in [Policy::Kasper, Policy::SpecFuzz] {
        out.push(RewriteConfig { policy, nesting: false, ..Default::default() });
        for d in 1..=3 {
            out.push(RewriteConfig { policy, max_nest_depth: d, ..Default::default() });
        }
    }
    out
}

fn agree(name: &str, p: &Program, inputs: &[Vec<u8>]) -> Result<usize, String> {
    let mut n = 0;
    for cfg in oracle_configs() {
        let img = image(p, &cfg);
        for input in inputs {
            let r = run(&img, input, RunOptions::default());
            let o = oracle_explore(p, input, &cfg, &RunOptions::default()).unwrap();
            check!(keys(&r) == o.keys, "{name} {input:?} {cfg:?}: pipeline {:?} oracle {:?}", keys(&r), o.keys);
            n += 1;
        }
    }
    Ok(n)
}

fn c5_oracle_equivalence() -> Outcome {
    let mut n = 0;
    for c in PROGRAMS {
        let inputs: Vec<Vec<u8>> = c.inputs.iter().map(|i| i.to_vec()).collect();
        n += agree(c.name, &c.program(), &inputs)?;
    }
    for seed in 0..500u64 {
        n += agree(&format!("generated {seed}"), &generate(seed, GenConfig::default()), &generate_inputs(seed, 2))?;
    }
    Ok(format!("{n} comparisons (nesting off, depth 1-3, both policies), 0 divergences"))
}

fn c6_depth_gating() -> Outcome {
    let htp = corpus::get("htp").unwrap().program();
    let mut seen = Vec::new();
    for depth in 1..=6 {
        let cfg = RewriteConfig { max_nest_depth: depth, ..kasper() };
        let r = run(&image(&htp, &cfg), b"", RunOptions::default());
        let found = r.reports.iter().any(|g| g.key.class == GadgetClass::MassagePort);
        check!(found == (depth >= 3), "depth {depth}: Massage-Port found = {found}");
        seen.push(found);
    }
    let off = run(&image(&htp, &RewriteConfig { nesting: false, ..kasper() }), b"", RunOptions::default());
    check!(off.reports.iter().all(|g| g.key.class != GadgetClass::MassagePort), "reported with nesting off");

    let yaml = corpus::get("yaml").unwrap().program();
    let plain = Image::load(&build_cfg(&yaml)).unwrap();
    let f = "parse_block_sequence_entry";
    let pop = CodeLoc { func: f.into(), offset: plain.layout.addr("error").unwrap() - plain.layout.addr(f).unwrap() };
    let r = run(&image(&yaml, &specfuzz()), b"", RunOptions::default());
    check!(class_locs(&r).contains(&(GadgetClass::SfOob, pop.clone())), "no stack underflow at {pop}: {:?}", keys(&r));
    Ok(format!("three-misprediction gadget only at depth >= 3 ({seen:?}); underflow at {pop}"))
}

fn c7_injection() -> Outcome {
    let parser = corpus::get("jsmn").unwrap().program();
    let size = parser.original_count();
    let reachable = ["p_open_obj", "ps_end", "ct_parent", "pp_end", "ck_edge"];
    let mut injections: Vec<Injection> = reachable
        .iter()
        .enumerate()
        .map(|(i, s)| Injection { template: Template::ALL[i % 3], site: s.to_string() })
        .collect();
    injections.push(Injection { template: Template::DirectIndex, site: "dt_empty".into() });
    let (program, gt) = inject_gadgets(&parser, &injections).map_err(|e| e.to_string())?;
    let img = image(&program, &kasper());
    let seeds = vec![b"\0\0\0\0\0\0\0\0{\"a\":[1,2]}".to_vec()];
    let cfg = FuzzConfig {
        executions: 50_000,
        seed: 7,
        max_input_len: 32,
        run: gt.run_options(&RunOptions::default()),
        ..Default::default()
    };
    let out = fuzz_loop(&img, &seeds, &cfg);
    let s = score_injection(out.reports.keys(), &gt);
    let reachable_found = s.found[..reachable.len()].iter().filter(|f| **f).count();
    let reachable_recall = reachable_found as f64 / reachable.len() as f64;
    check!(s.precision == Some(1.0), "precision {:?} (FP {})", s.precision, s.fp);
    check!(reachable_recall == 1.0, "reachable recall {reachable_recall} ({:?})", s.found);
    check!(!s.found[reachable.len()], "dead-code site was reported");
    check!((s.tp, s.fp, s.fn_) == (5, 0, 1), "TP {} FP {} FN {}", s.tp, s.fp, s.fn_);
    Ok(format!(
        "{size}-instruction parser, {} executions: TP 5 FP 0 FN 1 (dead code), precision 100%, reachable recall 100%",
        out.executions
    ))
}

fn c8_shadows_overhead() -> Outcome {
    let p = corpus::get("straight").unwrap().program();
    let cfg_p = build_cfg(&p);
    let body = cfg_p.blocks().find(|(_, b)| b.label == "loop").unwrap().1;
    let mem_ops = body.originals().filter(|i| i.op.memory_access().is_some()).count() as u64;
    // Iterations are input byte + 4.
    let (few, many) = ([0u8, 0, 0, 0], [8u8, 0, 0, 0]);
    let extra_iters = 8;
    let counts = |mode| {
        let img = image(&p, &RewriteConfig { mode, ..kasper() });
        (run(&img, &few, RunOptions::default()).counters, run(&img, &many, RunOptions::default()).counters)
    };
    let (s_few, s_many) = counts(Mode::Shadows);
    let (m_few, m_many) = counts(Mode::Mixed);
    let shadow_loop_guards = s_many.guard_checks - s_few.guard_checks;
    let mixed_loop_guards = m_many.guard_checks - m_few.guard_checks;
    let loop_mem_ops = mem_ops * extra_iters;
    check!(shadow_loop_guards == 0, "shadows mode runs {shadow_loop_guards} guard checks in the loop body");
    check!(mixed_loop_guards >= loop_mem_ops, "mixed mode: {mixed_loop_guards} guards for {loop_mem_ops} memory ops");
    let total = |c: shadowspec::vm::Counters| (c.instrumentation + c.guard_checks) as f64;
    let ratio = total(m_many) / total(s_many);
    check!(ratio > 1.5, "mixed/shadows ratio {ratio:.2}");
    Ok(format!(
        "loop guards: shadows 0, mixed {mixed_loop_guards} for {loop_mem_ops} memory ops; mixed/shadows instrumentation+guards {ratio:.2}x"
    ))
}

fn c9_budget() -> Outcome {
    let mut worst = 0.0f64;
    let mut budget_ends = 0;
    let mut runs = 0;
    let configs = |mode| {
        [
            RewriteConfig { mode, ..kasper() },
            RewriteConfig { mode, ..specfuzz() },
            RewriteConfig { mode, rob_budget: 20, check_interval: 7, ..kasper() },
            RewriteConfig { mode, rob_budget: 40, check_interval: 40, nesting: false, ..specfuzz() },
        ]
    };
    let mut cases: Vec<(String, Program, Vec<Vec<u8>>)> = PROGRAMS
        .iter()
        .map(|c| (c.name.to_string(), c.program(), c.inputs.iter().map(|i| i.to_vec()).collect()))
        .collect();
    for seed in 0..200u64 {
        cases.push((format!("generated {seed}"), generate(seed, GenConfig::default()), generate_inputs(seed, 3)));
    }
    for (name, p, inputs) in &cases {
        let block = longest_block(p);
        for (shadow_cfg, mixed_cfg) in configs(Mode::Shadows).into_iter().zip(configs(Mode::Mixed)) {
            let bound = shadow_cfg.rob_budget + shadow_cfg.check_interval + block;
            let (si, mi) = (image(p, &shadow_cfg), image(p, &mixed_cfg));
            for input in inputs {
                let s = run(&si, input, RunOptions::default());
                let m = run(&mi, input, RunOptions::default());
                let o = oracle_explore(p, input, &shadow_cfg, &RunOptions::default()).unwrap();
                let got = s.episodes.max_episode_originals;
                check!(got <= bound, "{name} {input:?}: episode of {got} originals, bound {bound}");
                // Mixed mode runs far more instrumentation; the oracle runs
                // none. Equal episode lengths mean only originals count.
                check!(
                    got == m.episodes.max_episode_originals && got == o.max_episode_originals,
                    "{name} {input:?}: episode lengths shadows {got}, mixed {}, oracle {}",
                    m.episodes.max_episode_originals,
                    o.max_episode_originals
                );
                worst = worst.max(got as f64 / bound as f64);
                budget_ends += s.episodes.ends.get("budget").copied().unwrap_or(0);
                runs += 1;
            }
        }
    }
    check!(budget_ends > 0, "no episode ever hit the budget");
    Ok(format!("{runs} runs, longest episode {:.0}% of its bound, {budget_ends} budget rollbacks", worst * 100.0))
}

fn c10_coverage() -> Outcome {
    let mut compared = 0;
    for c in PROGRAMS {
        let p = c.program();
        for cfg in [kasper(), specfuzz(), RewriteConfig { mode: Mode::Mixed, ..kasper() }] {
            let img = image(&p, &cfg);
            for input in c.inputs {
                let lazy = run(&img, input, RunOptions::default());
                let eager = run(&img, input, RunOptions { eager_spec_cov: true, ..Default::default() });
                check!(lazy.coverage == eager.coverage, "{} {input:?} {cfg:?}: lazy and eager coverage differ", c.name);
                let json = RunSummary::of_run(&lazy, 0).to_json();
                check!(
                    json.contains("real_coverage_percent") && json.contains("shadow_coverage_percent"),
                    "summary lacks coverage percentages"
                );
                compared += 1;
            }
        }
    }
    let img = image(&corpus::get("v1").unwrap().program(), &kasper());
    let out = fuzz_loop(&img, &[], &FuzzConfig { executions: 200, ..Default::default() });
    let s = RunSummary::of_campaign(&out);
    check!(s.shadow_total > 0 && s.real_total > 0, "campaign summary without totals");
    Ok(format!(
        "{compared} runs with equal lazy/eager coverage; campaign summary real {:.1}%, shadow {:.1}%",
        s.real_coverage_percent, s.shadow_coverage_percent
    ))
}

/// Writes straight to stderr, past the test harness's output capture, so
/// the verdicts show up in a plain `cargo test` log.
fn report(line: String) {
    use std::io::Write;
    let _ = writeln!(std::io::stderr().lock(), "{line}");
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 10] = [
        ("canonical gadget detection", c1_canonical_gadget),
        ("fib walkthrough", c2_fib_walkthrough),
        ("escape-freedom", c3_escape_freedom),
        ("rollback soundness", c4_rollback_soundness),
        ("oracle equivalence", c5_oracle_equivalence),
        ("nested-speculation depth gating", c6_depth_gating),
        ("injection benchmark", c7_injection),
        ("shadows performance property", c8_shadows_overhead),
        ("budget discipline", c9_budget),
        ("coverage machinery", c10_coverage),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let started = Instant::now();
        match f() {
            Ok(detail) => report(format!("criterion {:>2} PASS  {name}: {detail} [{:.1?}]", i + 1, started.elapsed())),
            Err(why) => {
                report(format!("criterion {:>2} FAIL  {name}: {why} [{:.1?}]", i + 1, started.elapsed()));
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
