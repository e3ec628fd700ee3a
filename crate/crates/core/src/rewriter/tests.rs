use proptest::prelude::*;

use super::*;
use crate::config::{Mode, Policy, RewriteConfig};
use crate::isa::{assemble, disassemble, Cond, ModeGuard, Origin};

const SMALL: &str = "
.extern malloc
.entry main
.func main
  mov r0, #16
  call malloc
  mov r2, r0
  mov r1, #3
  cmp r1, #8
  jgeu skip
  load r3, [r2+0]
  store [r2+4], r3
  call helper
skip:
  halt
.endfunc
.func helper
  push r3
  pop r3
  ret
.endfunc
";

fn small() -> Program {
    build_cfg(&assemble(SMALL).unwrap())
}

fn names(b: &Block) -> Vec<String> {
    b.insts.iter().map(|i| i.op.to_string()).collect()
}

fn block<'a>(p: &'a Program, label: &str) -> &'a Block {
    p.blocks().map(|(_, b)| b).find(|b| b.label == label).unwrap_or_else(|| panic!("no block {label}"))
}

#[test]
fn duplication_adds_one_shadow_function_per_function() {
    let p = duplicate_functions(&small()).unwrap();
    let fs: Vec<_> = p.functions.iter().map(|f| (f.name.as_str(), f.copy)).collect();
    assert_eq!(
        fs,
        [
            ("main", CopyKind::Real),
            ("helper", CopyKind::Real),
            ("main$spec", CopyKind::Shadow),
            ("helper$spec", CopyKind::Shadow)
        ]
    );
    let shadow: usize = p.functions[2..].iter().flat_map(|f| &f.blocks).map(|b| b.originals().count()).sum();
    assert_eq!(shadow, small().original_count());
}

#[test]
fn duplication_rejects_spec_names() {
    let p = build_cfg(&assemble(".func f$spec\n  halt\n.endfunc\n").unwrap());
    assert_eq!(duplicate_functions(&p), Err(RewriteError::SymbolCollision("f$spec".into())));
}

#[test]
fn shadow_transfers_stay_in_shadow_copy() {
    let p = retarget_direct_transfers(&duplicate_functions(&small()).unwrap());
    let shadow = p.function("main$spec").unwrap();
    for b in &shadow.blocks {
        for i in &b.insts {
            match &i.op {
                Op::Jmp { target } | Op::Jcc { target, .. } => assert!(target.ends_with(SPEC_SUFFIX)),
                Op::Call { target } => assert!(target == "malloc" || target == "helper$spec"),
                _ => {}
            }
        }
    }
    let entry = names(&shadow.blocks[0]);
    let call = entry.iter().position(|s| s == "call malloc").unwrap();
    assert_eq!(entry[call - 1], "rollback external");
    // The real copy is untouched.
    assert_eq!(p.function("main").unwrap(), small().function("main").unwrap());
}

#[test]
fn trampoline_inverts_direction() {
    let p = build_trampolines(&small());
    let t = p.function(TRAMPOLINES).unwrap();
    assert_eq!(t.blocks.len(), 3);
    assert_eq!(t.blocks[1].label, "$tramp0");
    // The branch in main.L1 falls through to main.L2 and jumps to skip.
    assert_eq!(names(&t.blocks[1]), ["jgeu main.L2$spec"]);
    assert_eq!(names(&t.blocks[2]), ["jmp skip$spec"]);
}

#[test]
fn start_sim_precedes_each_real_branch() {
    let cfg = RewriteConfig::default();
    let p = instrument(&small(), &cfg).unwrap();
    let b = block(&p, "main.L1");
    let n = names(b);
    let jcc = n.iter().position(|s| s.starts_with("jgeu")).unwrap();
    assert_eq!(n[jcc - 1], "start_sim #0");
    assert_eq!(n[jcc - 2], "norm_cov #0, geu");
    let s = names(block(&p, "main.L1$spec"));
    let jcc = s.iter().position(|s| s.starts_with("jgeu")).unwrap();
    assert_eq!(s[jcc - 1], "nested_start_sim #0");
}

#[test]
fn no_nested_entries_without_nesting() {
    let cfg = RewriteConfig { nesting: false, ..Default::default() };
    let p = instrument(&small(), &cfg).unwrap();
    let text = disassemble(&p);
    assert!(!text.contains("nested_start_sim"));
    assert!(text.contains("start_sim #0"));
}

#[test]
fn check_positions_examples() {
    assert_eq!(check_positions(1, true, 50), (vec![1], false));
    assert_eq!(check_positions(1, false, 50), (vec![], true));
    assert_eq!(check_positions(5, true, 2), (vec![3, 5], false));
    assert_eq!(check_positions(5, false, 2), (vec![3, 5], true));
    assert_eq!(check_positions(7, true, 3), (vec![4, 7], false));
}

proptest! {
    /// No run of more than `interval` originals goes without a check.
    #[test]
    fn check_gaps_bounded(n in 1usize..200, term in any::<bool>(), interval in 1u32..60) {
        let (before, at_end) = check_positions(n, term, interval);
        let mut last = 0usize;
        for &k in &before {
            prop_assert!(k >= 1 && k <= n);
            prop_assert!(k - 1 - last <= interval as usize);
            last = k - 1;
        }
        let end = if at_end { n } else { *before.last().unwrap_or(&0) };
        prop_assert!(term || at_end);
        prop_assert!(n - last <= interval as usize || !at_end || end == n);
        prop_assert!(at_end || before.last() == Some(&n));
    }
}

#[test]
fn shadow_memory_ops_get_logs_and_checks() {
    let cfg = RewriteConfig::with_policy(Policy::SpecFuzz);
    let p = instrument(&small(), &cfg).unwrap();
    let s = names(block(&p, "main.L2$spec"));
    let store = s.iter().position(|x| x == "store [r2+4], r3").unwrap();
    assert_eq!(s[store - 2], "mem_log [r2+4], #4");
    assert_eq!(s[store - 1], "asan_check [r2+4], #4");
    let load = s.iter().position(|x| x == "load r3, [r2+0]").unwrap();
    assert_eq!(s[load - 1], "asan_check [r2+0], #4");
    // The real copy carries no sanitizer or log hooks.
    let r = names(block(&p, "main.L2"));
    assert!(r.iter().all(|x| !x.starts_with("asan_check") && !x.starts_with("mem_log")));
    assert!(!disassemble(&p).contains("taint_"));
}

#[test]
fn kasper_adds_taint_hooks_and_summaries() {
    let p = instrument(&small(), &RewriteConfig::default()).unwrap();
    let s = names(block(&p, "main.L2$spec"));
    let load = s.iter().position(|x| x == "load r3, [r2+0]").unwrap();
    assert_eq!(s[load - 1], "taint_pre");
    assert_eq!(s[load + 1], "taint_post");
    let call = s.iter().position(|x| x == "call helper$spec").unwrap();
    assert_eq!(s[call - 1], "taint_pre");
    assert_ne!(s.get(call + 1).map(String::as_str), Some("taint_post"));
    let r = names(block(&p, "main.L2"));
    assert_eq!(r.iter().filter(|x| *x == "tag_summary").count(), 1);
    assert!(r.iter().all(|x| x != "taint_pre"));
}

#[test]
fn frames_and_escape_checks() {
    let p = instrument(&small(), &RewriteConfig::default()).unwrap();
    let h = names(block(&p, "helper$spec"));
    assert_eq!(h[1], "frame_enter");
    let ret = h.iter().position(|x| x == "ret").unwrap();
    assert_eq!(&h[ret - 3..ret], ["check_restore", "escape_check ret", "frame_exit"]);
    let real = names(block(&p, "helper"));
    assert_eq!(real[0], "frame_enter");
    assert!(real.contains(&"frame_exit".to_string()));
    assert!(!real.iter().any(|x| x.starts_with("escape_check")));
}

#[test]
fn indirect_targets_get_marker_preamble() {
    let src = "
.entry main
.func main
  mov r1, tgt
  jmpr r1
tgt:
  halt
.endfunc
";
    let p = instrument(&assemble(src).unwrap(), &RewriteConfig::default()).unwrap();
    let t = names(block(&p, "tgt"));
    assert_eq!(&t[..2], ["marker_nop", "mode_check tgt$spec"]);
    let s = names(block(&p, "main$spec"));
    let j = s.iter().position(|x| x == "jmpr r1").unwrap();
    assert!(s[..j].contains(&"escape_check r1".to_string()));
}

#[test]
fn fence_and_halt_end_simulation() {
    let src = ".entry main\n.func main\n  fence\n  halt\n.endfunc\n";
    let p = instrument(&assemble(src).unwrap(), &RewriteConfig::default()).unwrap();
    let s = names(block(&p, "main$spec"));
    let f = s.iter().position(|x| x == "fence").unwrap();
    assert_eq!(s[f - 1], "rollback serialize");
    let h = s.iter().position(|x| x == "halt").unwrap();
    assert_eq!(s[h - 1], "rollback external");
}

#[test]
fn spec_guards_are_dense() {
    let p = instrument(&small(), &RewriteConfig::default()).unwrap();
    let mut guards = Vec::new();
    for (_, b) in p.blocks() {
        for i in &b.insts {
            if let Op::Intrinsic(Intrinsic::SpecCov { guard }) = &i.op {
                guards.push(*guard);
            }
        }
    }
    let shadow_blocks = p.blocks().filter(|(f, _)| is_shadow_body(f)).count();
    assert_eq!(guards, (0..shadow_blocks as u32).collect::<Vec<_>>());
}

#[test]
fn originals_are_preserved_in_order() {
    let src = small();
    let p = instrument(&src, &RewriteConfig::default()).unwrap();
    for f in &src.functions {
        let real: Vec<_> =
            p.function(&f.name).unwrap().blocks.iter().flat_map(|b| b.originals()).map(|i| &i.op).collect();
        let before: Vec<_> = f.blocks.iter().flat_map(|b| b.originals()).map(|i| &i.op).collect();
        assert_eq!(real, before);
    }
}

#[test]
fn output_reassembles() {
    for mode in [Mode::Shadows, Mode::Mixed] {
        let cfg = RewriteConfig { mode, ..Default::default() };
        let p = instrument(&small(), &cfg).unwrap();
        let again = build_cfg(&assemble(&disassemble(&p)).unwrap());
        assert_eq!(again, p);
    }
}

#[test]
fn double_instrumentation_is_rejected() {
    let p = instrument(&small(), &RewriteConfig::default()).unwrap();
    assert_eq!(instrument(&p, &RewriteConfig::default()), Err(RewriteError::AlreadyInstrumented));
}

#[test]
fn unknown_external_is_rejected() {
    let p = assemble(".extern frobnicate\n.func main\n  call frobnicate\n  halt\n.endfunc\n").unwrap();
    assert_eq!(instrument(&p, &RewriteConfig::default()), Err(RewriteError::UnknownExternal("frobnicate".into())));
}

#[test]
fn bad_config_is_rejected() {
    let cfg = RewriteConfig { check_interval: 500, ..Default::default() };
    assert!(matches!(instrument(&small(), &cfg), Err(RewriteError::Config(_))));
}

#[test]
fn mixed_mode_guards_everything_but_frames() {
    let cfg = RewriteConfig { mode: Mode::Mixed, ..Default::default() };
    let p = instrument(&small(), &cfg).unwrap();
    assert!(p.functions.iter().all(|f| !f.name.ends_with(SPEC_SUFFIX)));
    let mut seen_normal = 0;
    for (_, b) in p.blocks() {
        for i in b.insts.iter().filter(|i| i.origin == Origin::Instrumentation) {
            match &i.op {
                Op::Intrinsic(Intrinsic::FrameEnter | Intrinsic::FrameExit) => {}
                Op::Intrinsic(Intrinsic::Guarded { when, hook }) => {
                    let normal_only = matches!(
                        **hook,
                        Intrinsic::StartSim { .. } | Intrinsic::NormCov { .. } | Intrinsic::TagSummary
                    );
                    assert_eq!(*when == ModeGuard::Normal, normal_only, "{hook}");
                    seen_normal += normal_only as usize;
                }
                Op::Jcc { .. } | Op::Jmp { .. } | Op::Halt => {}
                other => panic!("unguarded hook {other}"),
            }
        }
    }
    assert!(seen_normal >= 3);
    let t = p.function(TRAMPOLINES).unwrap();
    assert_eq!(names(&t.blocks[1]), ["jgeu main.L2"]);
    assert_eq!(names(&t.blocks[2]), ["jmp skip"]);
}

#[test]
fn branch_ids_follow_layout_order() {
    let src = "
.entry main
.func main
  cmp r1, #0
  jz a
  cmp r1, #1
  jnz a
a:
  halt
.endfunc
";
    let p = build_cfg(&assemble(src).unwrap());
    let ids = branch_ids(&p);
    assert_eq!(ids["main"], 0);
    assert_eq!(ids["main.L1"], 1);
    let t = trampolines(&p, true);
    let Op::Jcc { cond, .. } = &t.blocks[3].insts[0].op else { panic!() };
    assert_eq!(*cond, Cond::Nz);
}
