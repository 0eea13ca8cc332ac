//! Settings shared by the pressure solvers.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::KernelChoice;
use crate::options::OptionsDatabase;
use crate::precision::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preconditioner {
    None,
    #[default]
    Ilu0,
}

impl FromStr for Preconditioner {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Preconditioner::None),
            "ilu0" => Ok(Preconditioner::Ilu0),
            other => Err(Error::config(format!("unknown preconditioner `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Relative 2-norm residual target.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub precision: Precision,
    pub preconditioner: Preconditioner,
    pub kernel: KernelChoice,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tolerance: 1e-4,
            max_iterations: 1000,
            precision: Precision::Double,
            preconditioner: Preconditioner::Ilu0,
            kernel: KernelChoice::RustFft,
        }
    }
}

impl SolverConfig {
    pub fn new(tolerance: f64, precision: Precision) -> Self {
        SolverConfig {
            tolerance,
            precision,
            ..SolverConfig::default()
        }
    }

    /// Reads `solver_tolerance`, `solver_max_iterations`, `solver_precision`,
    /// `solver_preconditioner` and `fft_kernel`.
    pub fn from_options(opts: &OptionsDatabase) -> Result<Self> {
        let d = SolverConfig::default();
        let cfg = SolverConfig {
            tolerance: opts.real_or("solver_tolerance", d.tolerance)?,
            max_iterations: opts.count_or("solver_max_iterations", d.max_iterations)?,
            precision: opts
                .string_opt("solver_precision")?
                .map(|s| s.parse())
                .transpose()?
                .unwrap_or(d.precision),
            preconditioner: opts
                .string_opt("solver_preconditioner")?
                .map(|s| s.parse())
                .transpose()?
                .unwrap_or(d.preconditioner),
            kernel: opts
                .string_opt("fft_kernel")?
                .map(|s| s.parse())
                .transpose()?
                .unwrap_or(d.kernel),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::config(format!("solver_tolerance must be > 0, got {}", self.tolerance)));
        }
        if self.max_iterations == 0 {
            return Err(Error::config("solver_max_iterations must be >= 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let d = SolverConfig::from_options(&OptionsDatabase::new()).unwrap();
        assert_eq!(d, SolverConfig::default());
        let opts = OptionsDatabase::load_config(
            "solver_tolerance=1e-8\nsolver_max_iterations=50\nsolver_precision=single\nsolver_preconditioner=none",
        )
        .unwrap();
        let c = SolverConfig::from_options(&opts).unwrap();
        assert_eq!(c.tolerance, 1e-8);
        assert_eq!(c.max_iterations, 50);
        assert_eq!(c.precision, Precision::Single);
        assert_eq!(c.preconditioner, Preconditioner::None);
    }

    #[test]
    fn invalid_values_rejected() {
        for text in ["solver_tolerance=0", "solver_tolerance=-1", "solver_max_iterations=0", "solver_precision=half"] {
            let opts = OptionsDatabase::load_config(text).unwrap();
            assert!(SolverConfig::from_options(&opts).is_err(), "{text}");
        }
    }
}
