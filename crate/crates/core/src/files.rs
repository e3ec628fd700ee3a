//! On-disk formats: the program file and the run summary.
//!
//! A program file is JSON: `{"format": "shadowspec-program", "version": 1,
//! "program": {...}}`. The inner object is the serde form of [`Program`],
//! including the rewrite configuration of an instrumented program. Report
//! files are handled by [`crate::policy::ReportStore`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fuzz::FuzzOutcome;
use crate::isa::Program;
use crate::runtime::EpisodeStats;
use crate::vm::{Counters, Coverage, RunResult};

pub const PROGRAM_FORMAT: &str = "shadowspec-program";
pub const PROGRAM_VERSION: u32 = 1;
pub const SUMMARY_FORMAT: &str = "shadowspec-summary";
pub const SUMMARY_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FileError {
    #[error("malformed file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("expected a `{expected}` file, found `{found}`")]
    Format { expected: &'static str, found: String },
    #[error("unsupported version {0}")]
    Version(u32),
}

#[derive(Serialize, Deserialize)]
struct ProgramFile {
    format: String,
    version: u32,
    program: Program,
}

pub fn program_to_json(program: &Program) -> String {
    let file = ProgramFile { format: PROGRAM_FORMAT.into(), version: PROGRAM_VERSION, program: program.clone() };
    serde_json::to_string_pretty(&file).expect("programs always serialize")
}

pub fn program_from_json(text: &str) -> Result<Program, FileError> {
    let file: ProgramFile = serde_json::from_str(text)?;
    if file.format != PROGRAM_FORMAT {
        return Err(FileError::Format { expected: PROGRAM_FORMAT, found: file.format });
    }
    if file.version != PROGRAM_VERSION {
        return Err(FileError::Version(file.version));
    }
    Ok(file.program)
}

/// Totals of one run or one fuzzing campaign.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub format: String,
    pub version: u32,
    pub executions: u64,
    pub faults: u64,
    pub reports: usize,
    /// Covered real-copy branch directions, in percent of all of them.
    pub real_coverage_percent: f64,
    /// Covered shadow-copy guards, in percent of all guards.
    pub shadow_coverage_percent: f64,
    pub real_covered: usize,
    pub real_total: u32,
    pub shadow_covered: usize,
    pub shadow_total: u32,
    pub episodes: EpisodeStats,
    pub counters: Counters,
    /// Status of the last run; `None` for campaigns.
    pub status: Option<String>,
}

impl RunSummary {
    fn new(
        executions: u64,
        faults: u64,
        reports: usize,
        cov: &Coverage,
        episodes: &EpisodeStats,
        counters: Counters,
    ) -> Self {
        RunSummary {
            format: SUMMARY_FORMAT.into(),
            version: SUMMARY_VERSION,
            executions,
            faults,
            reports,
            real_coverage_percent: cov.normal_percent(),
            shadow_coverage_percent: cov.spec_percent(),
            real_covered: cov.normal.len(),
            real_total: cov.normal_total,
            shadow_covered: cov.spec.len(),
            shadow_total: cov.spec_total,
            episodes: episodes.clone(),
            counters,
            status: None,
        }
    }

    pub fn of_run(r: &RunResult, distinct_reports: usize) -> Self {
        let faults = u64::from(matches!(r.status, crate::vm::RunStatus::Fault(_)));
        let mut s = RunSummary::new(1, faults, distinct_reports, &r.coverage, &r.episodes, r.counters);
        s.status = Some(r.status.name().to_string());
        s
    }

    pub fn of_campaign(o: &FuzzOutcome) -> Self {
        RunSummary::new(o.executions, o.faults, o.reports.len(), &o.coverage, &o.episodes, o.counters)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summaries always serialize")
    }

    /// Two-line human rendering of the coverage figures.
    pub fn coverage_lines(&self) -> String {
        format!(
            "real copy coverage:   {:6.2}% ({}/{})\nshadow copy coverage: {:6.2}% ({}/{})",
            self.real_coverage_percent,
            self.real_covered,
            self.real_total,
            self.shadow_coverage_percent,
            self.shadow_covered,
            self.shadow_total
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;

    #[test]
    fn program_file_round_trips() {
        let p = corpus::get("v1").unwrap().program();
        assert_eq!(program_from_json(&program_to_json(&p)).unwrap(), p);
    }

    #[test]
    fn wrong_format_is_rejected() {
        let text = program_to_json(&Program::empty()).replace(PROGRAM_FORMAT, "other");
        assert!(matches!(program_from_json(&text), Err(FileError::Format { .. })));
        let text = program_to_json(&Program::empty()).replace("\"version\": 1", "\"version\": 9");
        assert!(matches!(program_from_json(&text), Err(FileError::Version(9))));
    }
}
