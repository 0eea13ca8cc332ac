//! Request and response types shared by the service, its client and the
//! worker processes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decomp::CommStats;
use crate::error::{Error, ErrorCategory};
use crate::precision::Precision;

/// How model ranks talk to each other.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    /// Ranks are threads joined by in-memory channels.
    #[default]
    Threads,
    /// Ranks are threads joined by loopback TCP.
    Sockets,
    /// Ranks are child processes joined by loopback TCP.
    Process,
}

impl FromStr for TransportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "threads" => Ok(TransportKind::Threads),
            "sockets" => Ok(TransportKind::Sockets),
            "process" => Ok(TransportKind::Process),
            _ => Err(Error::config(format!(
                "unknown transport `{s}` (expected threads, sockets or process)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Fft,
    Krylov,
}

impl SolverKind {
    pub fn component(self) -> &'static str {
        match self {
            SolverKind::Fft => "fftsolver",
            SolverKind::Krylov => "iterativesolver",
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverKind::Fft => "fft",
            SolverKind::Krylov => "krylov",
        })
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "fft" => Ok(SolverKind::Fft),
            "krylov" => Ok(SolverKind::Krylov),
            _ => Err(Error::config(format!("unknown solver `{s}` (expected fft or krylov)"))),
        }
    }
}

/// One simulation. Text fields carry file contents, paths are resolved by
/// the process that executes the run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunRequest {
    /// Model configuration text (`key=value` lines). Optional on restart.
    pub config: Option<String>,
    /// I/O server XML configuration. No I/O server runs without it.
    pub io_config: Option<String>,
    /// Model ranks; 0 means 1.
    pub workers: usize,
    pub ios_ratio: Option<usize>,
    pub solver: Option<SolverKind>,
    pub precision: Option<Precision>,
    pub restart: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Overrides `nn_timesteps`.
    pub steps: Option<u64>,
    pub transport: TransportKind,
    /// Overrides the diagnostics CSV path.
    pub diagnostics: Option<PathBuf>,
    /// Extra `key=value` options applied last.
    pub overrides: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub rank: usize,
    pub timestep: u64,
    pub time: f64,
    pub loop_seconds: f64,
    pub comm: CommStats,
    pub solves: u64,
    pub solver_iterations: u64,
    pub submit_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub path: PathBuf,
    pub servers: usize,
    pub rows: usize,
    pub dropped: Vec<u64>,
    /// Seconds spent inside server actions, summed over all units.
    pub compute_seconds: f64,
    /// Seconds model ranks spent submitting, summed over ranks.
    pub submit_seconds: f64,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub workers: usize,
    /// Global shape as `[z, y, x]`.
    pub grid: [usize; 3],
    pub timestep: u64,
    pub time: f64,
    /// Slowest rank's timestep-loop wall clock.
    pub loop_seconds: f64,
    pub ranks: Vec<RankSummary>,
    pub diagnostics: Option<DiagnosticsSummary>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Weak,
    Strong,
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMode::Weak => "weak",
            BenchMode::Strong => "strong",
        })
    }
}

impl FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "weak" => Ok(BenchMode::Weak),
            "strong" => Ok(BenchMode::Strong),
            _ => Err(Error::config(format!("unknown bench mode `{s}` (expected weak or strong)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchRequest {
    pub mode: BenchMode,
    pub workers: Vec<usize>,
    /// `[z, y, x]`: per-rank cell in weak mode, global grid in strong mode.
    pub base: [usize; 3],
    pub solvers: Vec<SolverKind>,
    pub precisions: Vec<Precision>,
    pub reps: usize,
    pub steps: u64,
    pub transport: TransportKind,
    /// Model configuration; grid, solver and step options are overridden.
    pub config: Option<String>,
}

impl Default for BenchRequest {
    fn default() -> Self {
        BenchRequest {
            mode: BenchMode::Weak,
            workers: vec![1, 2, 4, 8],
            base: [64, 32, 32],
            solvers: vec![SolverKind::Fft, SolverKind::Krylov],
            precisions: vec![Precision::Single, Precision::Double],
            reps: 3,
            steps: 3,
            transport: TransportKind::Process,
            config: None,
        }
    }
}

/// One bench CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: BenchMode,
    pub workers: usize,
    pub gz: usize,
    pub gy: usize,
    pub gx: usize,
    pub solver: SolverKind,
    pub precision: Precision,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Configurations not run, with the reason.
    pub skipped: Vec<String>,
}

/// Error body returned by the service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub category: ErrorCategory,
    pub message: String,
}

impl From<&Error> for ApiError {
    fn from(e: &Error) -> Self {
        ApiError {
            category: e.category(),
            message: e.to_string(),
        }
    }
}

impl From<ApiError> for Error {
    fn from(e: ApiError) -> Self {
        Error::Remote {
            category: e.category,
            message: e.message,
        }
    }
}
