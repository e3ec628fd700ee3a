//! Rewrite configuration shared by the rewriter, the runtime and the CLI.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Policy {
    Kasper,
    SpecFuzz,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Real copy + shadow copy, each carrying only its own hooks.
    Shadows,
    /// Single copy with every hook behind a dynamic mode guard.
    Mixed,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Kasper => "kasper",
            Policy::SpecFuzz => "specfuzz",
        })
    }
}

impl FromStr for Policy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "kasper" => Ok(Policy::Kasper),
            "specfuzz" => Ok(Policy::SpecFuzz),
            _ => Err(format!("unknown policy `{s}` (expected kasper or specfuzz)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Shadows => "shadows",
            Mode::Mixed => "mixed",
        })
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "shadows" => Ok(Mode::Shadows),
            "mixed" => Ok(Mode::Mixed),
            _ => Err(format!("unknown mode `{s}` (expected shadows or mixed)")),
        }
    }
}

pub const DEFAULT_ROB_BUDGET: u32 = 250;
pub const DEFAULT_CHECK_INTERVAL: u32 = 50;
pub const DEFAULT_MAX_NEST_DEPTH: u32 = 6;
pub const DEFAULT_FULL_DEPTH_RUNS: u32 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RewriteConfig {
    pub policy: Policy,
    pub nesting: bool,
    /// Original instructions a simulation episode may execute.
    pub rob_budget: u32,
    /// Maximum original-instruction spacing between restore-point checks.
    pub check_interval: u32,
    pub max_nest_depth: u32,
    /// Encounters of a branch during which nesting is allowed up to full depth.
    pub full_depth_runs: u32,
    pub mode: Mode,
}

impl Default for RewriteConfig {
    fn default() -> Self {
        RewriteConfig {
            policy: Policy::Kasper,
            nesting: true,
            rob_budget: DEFAULT_ROB_BUDGET,
            check_interval: DEFAULT_CHECK_INTERVAL,
            max_nest_depth: DEFAULT_MAX_NEST_DEPTH,
            full_depth_runs: DEFAULT_FULL_DEPTH_RUNS,
            mode: Mode::Shadows,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("rob budget must be positive")]
    ZeroBudget,
    #[error("check interval {interval} must be in 1..={budget}")]
    BadInterval { interval: u32, budget: u32 },
    #[error("max nest depth must be positive")]
    ZeroDepth,
}

impl RewriteConfig {
    pub fn with_policy(policy: Policy) -> Self {
        RewriteConfig { policy, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.rob_budget == 0 {
            return Err(ConfigError::ZeroBudget);
        }
        if self.check_interval == 0 || self.check_interval > self.rob_budget {
            return Err(ConfigError::BadInterval { interval: self.check_interval, budget: self.rob_budget });
        }
        if self.max_nest_depth == 0 {
            return Err(ConfigError::ZeroDepth);
        }
        Ok(())
    }

    /// Deepest simulation stack the runtime may build.
    pub fn effective_depth(&self) -> u32 {
        if self.nesting {
            self.max_nest_depth
        } else {
            1
        }
    }
}
