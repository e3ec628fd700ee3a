use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use shadowspec::config::{Mode, Policy, RewriteConfig};
use shadowspec::files::{program_from_json, program_to_json, RunSummary};
use shadowspec::fuzz::inject::choose_sites;
use shadowspec::fuzz::{fuzz_loop, inject_gadgets, score_injection, FuzzConfig, GroundTruth, Injection, Template};
use shadowspec::image::Image;
use shadowspec::isa::{assemble, build_cfg, disassemble, Program};
use shadowspec::policy::{input_id, ReportStore};
use shadowspec::rewriter::instrument;
use shadowspec::vm::{Counters, RunOptions, RunStatus, Vm};

#[derive(Parser)]
#[command(name = "shadowspec", version, about = "Find speculative-execution gadgets in toy-ISA programs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Pipeline {
    #[arg(long, default_value = "kasper")]
    policy: Policy,
    #[arg(long, default_value = "shadows")]
    mode: Mode,
    /// Simulate only one misprediction at a time.
    #[arg(long)]
    no_nest: bool,
    #[arg(long, default_value_t = shadowspec::config::DEFAULT_ROB_BUDGET)]
    rob_budget: u32,
    #[arg(long, default_value_t = shadowspec::config::DEFAULT_CHECK_INTERVAL)]
    check_interval: u32,
    #[arg(long, default_value_t = shadowspec::config::DEFAULT_MAX_NEST_DEPTH)]
    max_depth: u32,
}

impl Pipeline {
    fn config(&self) -> RewriteConfig {
        RewriteConfig {
            policy: self.policy,
            mode: self.mode,
            nesting: !self.no_nest,
            rob_budget: self.rob_budget,
            check_interval: self.check_interval,
            max_nest_depth: self.max_depth,
            ..Default::default()
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Assemble source into a program file.
    Assemble {
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Rewrite a program into its instrumented form.
    Instrument {
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Write assembly text instead of a program file.
        #[arg(long)]
        disasm: bool,
        /// Write before.s and after.s into this directory.
        #[arg(long)]
        dump_dir: Option<PathBuf>,
        #[command(flatten)]
        pipeline: Pipeline,
    },
    /// Run one input and print its findings.
    Run {
        program: PathBuf,
        input: PathBuf,
        #[arg(long)]
        reports: Option<PathBuf>,
        #[arg(long)]
        summary: Option<PathBuf>,
        #[command(flatten)]
        pipeline: Pipeline,
    },
    /// Coverage-guided fuzzing from a corpus directory.
    Fuzz {
        program: PathBuf,
        corpus: PathBuf,
        #[arg(long, default_value_t = 1000)]
        executions: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        /// Directory for reports.txt and summary.json.
        #[arg(long, default_value = "shadowspec-out")]
        out: PathBuf,
        /// Ground truth of an injected program; switches to the injection harness.
        #[arg(long)]
        harness: Option<PathBuf>,
        /// Also write retained inputs into the corpus directory.
        #[arg(long)]
        save_corpus: bool,
        #[command(flatten)]
        pipeline: Pipeline,
    },
    /// Splice gadget templates into a program.
    Inject {
        program: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Where to write the ground truth.
        #[arg(long)]
        gt: PathBuf,
        /// Comma-separated: direct-index, masked-index, branch-transmit.
        #[arg(long, value_delimiter = ',')]
        templates: Vec<String>,
        /// Comma-separated block labels, one per template.
        #[arg(long, value_delimiter = ',')]
        sites: Vec<String>,
        /// Choose sites at random when none are given.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a report file against an injection ground truth.
    Score { reports: PathBuf, gt: PathBuf },
    /// Print a report file grouped by gadget class.
    Report { reports: PathBuf },
    /// Count originals, instrumentation and guard checks for the plain
    /// program and its shadows and mixed rewrites.
    BenchOverhead {
        program: PathBuf,
        input: PathBuf,
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        pipeline: Pipeline,
    },
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn usage(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 1, err: err.into() }
}

fn build(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, err: err.into() }
}

fn runtime(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 3, err: err.into() }
}

type Res<T = ()> = Result<T, Failure>;

fn read(path: &Path) -> Res<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display())).map_err(usage)
}

fn write(path: &Path, data: impl AsRef<[u8]>) -> Res {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(usage)?;
    }
    fs::write(path, data).with_context(|| format!("writing {}", path.display())).map_err(usage)
}

fn emit(path: Option<&Path>, text: &str) -> Res {
    match path {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Reads a program file or assembly source, telling them apart by content.
fn load_program(path: &Path) -> Res<Program> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| build(anyhow!("{}: {e}", path.display())))?;
    if text.trim_start().starts_with('{') {
        program_from_json(&text).map_err(|e| build(anyhow!("{}: {e}", path.display())))
    } else {
        assemble(&text).map_err(|e| build(anyhow!("{}: {e}", path.display())))
    }
}

/// The program as it will run: already instrumented programs are kept,
/// others are rewritten with the command-line configuration.
fn instrumented(program: Program, pipeline: &Pipeline) -> Res<Program> {
    if program.instrumentation.is_some() {
        return Ok(program);
    }
    let cfg = pipeline.config();
    cfg.validate().map_err(usage)?;
    instrument(&program, &cfg).map_err(build)
}

fn load_image(program: &Program) -> Res<Image> {
    Image::load(program).map_err(build)
}

fn policy_of(image: &Image) -> Policy {
    image.config.unwrap_or_default().policy
}

fn cmd_instrument(input: &Path, output: Option<&Path>, disasm: bool, dump: Option<&Path>, pipeline: &Pipeline) -> Res {
    let program = load_program(input)?;
    if program.instrumentation.is_some() {
        return Err(build(anyhow!("{} is already instrumented", input.display())));
    }
    let out = instrumented(program.clone(), pipeline)?;
    load_image(&out)?;
    if let Some(dir) = dump {
        write(&dir.join("before.s"), disassemble(&build_cfg(&program)))?;
        write(&dir.join("after.s"), disassemble(&out))?;
    }
    emit(output, &if disasm { disassemble(&out) } else { program_to_json(&out) })
}

fn status_failure(status: &RunStatus) -> Option<Failure> {
    match status {
        RunStatus::Halted { .. } | RunStatus::InputExhausted => None,
        other => Some(runtime(anyhow!("run ended with {}: {other:?}", other.name()))),
    }
}

fn cmd_run(program: &Path, input: &Path, reports: Option<&Path>, summary: Option<&Path>, pipeline: &Pipeline) -> Res {
    let image = load_image(&instrumented(load_program(program)?, pipeline)?)?;
    let input = read(input)?;
    let r = Vm::new(&image, &input, Default::default(), RunOptions::default()).run();
    let mut store = ReportStore::new(policy_of(&image));
    store.add_run(&r.reports, &input_id(&input));
    let s = RunSummary::of_run(&r, store.len());
    print!("{}", store.to_text());
    println!("status: {}", r.status.name());
    println!("{}", s.coverage_lines());
    if let Some(p) = reports {
        write(p, store.to_text())?;
    }
    if let Some(p) = summary {
        write(p, s.to_json())?;
    }
    match status_failure(&r.status) {
        Some(f) => Err(f),
        None => Ok(()),
    }
}

/// Seeds from a corpus directory in file-name order. A missing directory
/// is created holding a single empty seed.
fn read_corpus(dir: &Path) -> Res<Vec<Vec<u8>>> {
    if !dir.exists() {
        write(&dir.join("empty"), [])?;
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))
        .map_err(usage)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths.iter().map(|p| read(p)).collect()
}

fn read_gt(path: &Path) -> Res<GroundTruth> {
    serde_json::from_slice(&read(path)?).with_context(|| format!("parsing {}", path.display())).map_err(usage)
}

struct FuzzArgs<'a> {
    executions: u64,
    seed: u64,
    workers: usize,
    max_len: usize,
    out: &'a Path,
    harness: Option<&'a Path>,
    save_corpus: bool,
}

fn cmd_fuzz(program: &Path, corpus: &Path, a: FuzzArgs, pipeline: &Pipeline) -> Res {
    let image = load_image(&instrumented(load_program(program)?, pipeline)?)?;
    let seeds = read_corpus(corpus)?;
    let mut run = RunOptions::default();
    if let Some(gt) = a.harness {
        run = read_gt(gt)?.run_options(&run);
    }
    let cfg = FuzzConfig {
        executions: a.executions,
        seed: a.seed,
        workers: a.workers.max(1),
        max_input_len: a.max_len.max(1),
        run,
        ..Default::default()
    };
    let outcome = fuzz_loop(&image, &seeds, &cfg);
    let summary = RunSummary::of_campaign(&outcome);
    write(&a.out.join("reports.txt"), outcome.reports.to_text())?;
    write(&a.out.join("summary.json"), summary.to_json())?;
    if a.save_corpus {
        for e in &outcome.corpus {
            write(&corpus.join(input_id(&e.input)), &e.input)?;
        }
    }
    println!("executions: {}  faults: {}  findings: {}", outcome.executions, outcome.faults, outcome.reports.len());
    println!("{}", summary.coverage_lines());
    if let Some((status, input)) = outcome.violations.first() {
        return Err(runtime(anyhow!("{} on input {}", status.name(), input_id(input))));
    }
    Ok(())
}

fn cmd_inject(program: &Path, output: &Path, gt: &Path, templates: &[String], sites: &[String], seed: u64) -> Res {
    let p = load_program(program)?;
    let templates: Vec<Template> = templates
        .iter()
        .map(|t| Template::from_name(t).ok_or_else(|| usage(anyhow!("unknown template `{t}`"))))
        .collect::<Res<_>>()?;
    let injections = if sites.is_empty() {
        let chosen = choose_sites(&p, &templates, seed);
        if chosen.len() < templates.len() {
            return Err(build(anyhow!("only {} valid sites for {} templates", chosen.len(), templates.len())));
        }
        chosen
    } else {
        if sites.len() != templates.len() {
            return Err(usage(anyhow!("{} sites for {} templates", sites.len(), templates.len())));
        }
        templates.iter().zip(sites).map(|(t, s)| Injection { template: *t, site: s.clone() }).collect()
    };
    let (out, truth) = inject_gadgets(&p, &injections).map_err(build)?;
    write(output, program_to_json(&out))?;
    write(gt, serde_json::to_string_pretty(&truth).expect("ground truth serializes"))?;
    for s in &truth.sites {
        println!("{} at {} ({}+{}..{})", s.template.name(), s.site, s.func, s.start, s.end);
    }
    Ok(())
}

fn read_reports(path: &Path) -> Res<ReportStore> {
    let text = String::from_utf8(read(path)?).map_err(usage)?;
    ReportStore::from_text(&text).with_context(|| format!("parsing {}", path.display())).map_err(usage)
}

fn cmd_score(reports: &Path, gt: &Path) -> Res {
    let store = read_reports(reports)?;
    let s = score_injection(store.keys(), &read_gt(gt)?);
    let precision = s.precision.map_or("N/A".to_string(), |p| format!("{:.1}%", 100.0 * p));
    println!("TP {}  FP {}  FN {}", s.tp, s.fp, s.fn_);
    println!("precision {precision}  recall {:.1}%", 100.0 * s.recall);
    Ok(())
}

fn cmd_report(reports: &Path) -> Res {
    let store = read_reports(reports)?;
    println!("policy {}: {} findings", store.policy, store.len());
    let mut current = None;
    for (k, d) in &store.records {
        if current != Some(k.class) {
            println!("{}", k.class);
            current = Some(k.class);
        }
        println!(
            "  {} via {}  x{}  first {}",
            k.loc,
            shadowspec::policy::chain_string(&k.chain),
            d.count,
            d.first_input
        );
    }
    Ok(())
}

fn cmd_bench(program: &Path, input: &Path, json: bool, pipeline: &Pipeline) -> Res {
    let p = load_program(program)?;
    if p.instrumentation.is_some() {
        return Err(build(anyhow!("bench-overhead needs an uninstrumented program")));
    }
    let input = read(input)?;
    let mut rows: Vec<(&str, Counters)> = Vec::new();
    let plain = load_image(&build_cfg(&p))?;
    rows.push(("none", Vm::new(&plain, &input, Default::default(), RunOptions::default()).run().counters));
    for mode in [Mode::Shadows, Mode::Mixed] {
        let pl = Pipeline { mode, ..pipeline.clone() };
        let image = load_image(&instrumented(p.clone(), &pl)?)?;
        let r = Vm::new(&image, &input, Default::default(), RunOptions::default()).run();
        if let Some(f) = status_failure(&r.status) {
            return Err(f);
        }
        rows.push((if mode == Mode::Shadows { "shadows" } else { "mixed" }, r.counters));
    }
    let ratio = rows[2].1.instrumentation as f64 / rows[1].1.instrumentation.max(1) as f64;
    if json {
        let obj: serde_json::Map<String, serde_json::Value> = rows
            .iter()
            .map(|(m, c)| (m.to_string(), serde_json::to_value(c).expect("counters serialize")))
            .chain([("mixed_over_shadows".to_string(), serde_json::json!(ratio))])
            .collect();
        println!("{}", serde_json::to_string_pretty(&obj).expect("json"));
    } else {
        println!("{:<8} {:>12} {:>16} {:>13}", "mode", "originals", "instrumentation", "guard-checks");
        for (m, c) in &rows {
            println!("{:<8} {:>12} {:>16} {:>13}", m, c.originals, c.instrumentation, c.guard_checks);
        }
        println!("mixed/shadows instrumentation: {ratio:.2}x");
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Res {
    match cli.cmd {
        Cmd::Assemble { input, output } => {
            let p = load_program(&input)?;
            emit(output.as_deref(), &program_to_json(&p))
        }
        Cmd::Instrument { input, output, disasm, dump_dir, pipeline } => {
            cmd_instrument(&input, output.as_deref(), disasm, dump_dir.as_deref(), &pipeline)
        }
        Cmd::Run { program, input, reports, summary, pipeline } => {
            cmd_run(&program, &input, reports.as_deref(), summary.as_deref(), &pipeline)
        }
        Cmd::Fuzz { program, corpus, executions, seed, workers, max_len, out, harness, save_corpus, pipeline } => {
            let args =
                FuzzArgs { executions, seed, workers, max_len, out: &out, harness: harness.as_deref(), save_corpus };
            cmd_fuzz(&program, &corpus, args, &pipeline)
        }
        Cmd::Inject { program, output, gt, templates, sites, seed } => {
            cmd_inject(&program, &output, &gt, &templates, &sites, seed)
        }
        Cmd::Score { reports, gt } => cmd_score(&reports, &gt),
        Cmd::Report { reports } => cmd_report(&reports),
        Cmd::BenchOverhead { program, input, json, pipeline } => cmd_bench(&program, &input, json, &pipeline),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
