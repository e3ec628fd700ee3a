use std::collections::BTreeSet;

use shadowspec::config::{Mode, Policy, RewriteConfig};
use shadowspec::corpus::PROGRAMS;
use shadowspec::fuzz::oracle_explore;
use shadowspec::image::Image;
use shadowspec::rewriter::instrument;
use shadowspec::vm::{run, RunOptions};

fn configs() -> Vec<RewriteConfig> {
    let mut out = Vec::new();
    for policy in [Policy::Kasper, Policy::SpecFuzz] {
        for mode in [Mode::Shadows, Mode::Mixed] {
            out.push(RewriteConfig { policy, mode, nesting: false, ..Default::default() });
            for d in 1..=3 {
                out.push(RewriteConfig { policy, mode, max_nest_depth: d, ..Default::default() });
            }
        }
    }
    out
}

#[test]
fn corpus_agrees_with_oracle() {
    for c in PROGRAMS {
        let program = c.program();
        for cfg in configs() {
            let img = Image::load(&instrument(&program, &cfg).unwrap()).unwrap();
            for input in c.inputs {
                let opts = RunOptions { check_snapshots: true, ..RunOptions::default() };
                let r = run(&img, input, opts.clone());
                let got: BTreeSet<_> = r.reports.iter().map(|g| g.key.clone()).collect();
                let want = oracle_explore(&program, input, &cfg, &opts).unwrap();
                assert_eq!(got, want.keys, "{} {:?} {:?}", c.name, input, cfg);
                assert_eq!(r.status.name(), want.status, "{} {:?}", c.name, input);
                assert_eq!(r.episodes.episodes, want.episodes, "{} {:?} {:?}", c.name, input, cfg);
            }
        }
    }
}

#[test]
fn generated_programs_agree_with_oracle() {
    use shadowspec::gen::{generate, generate_inputs, GenConfig};
    for seed in 0..150u64 {
        let program = generate(seed, GenConfig::default());
        for cfg in configs() {
            let img = Image::load(&instrument(&program, &cfg).unwrap()).unwrap();
            for input in generate_inputs(seed, 2) {
                let opts = RunOptions { check_snapshots: true, ..RunOptions::default() };
                let r = run(&img, &input, opts.clone());
                let got: BTreeSet<_> = r.reports.iter().map(|g| g.key.clone()).collect();
                let want = oracle_explore(&program, &input, &cfg, &opts).unwrap();
                assert_eq!(got, want.keys, "seed {seed} {:?} {:?}", input, cfg);
                assert_eq!(r.status.name(), want.status, "seed {seed} {:?}", input);
                assert_eq!(r.episodes.episodes, want.episodes, "seed {seed} {:?} {:?}", input, cfg);
            }
        }
    }
}
