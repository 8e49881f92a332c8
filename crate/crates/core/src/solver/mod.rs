//! Centralized solution of `SYSTEM`.

mod centralized;
mod projection;

pub use centralized::{CentralSolution, CouplingMultipliers};
pub use projection::{project_capped_simplex, projection};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Allocation, Scenario};
use crate::report::ConvergenceReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Fixed step `gamma0` (shrunk by backtracking), with momentum.
    Constant,
    /// `gamma0 / sqrt(k)`.
    Diminishing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub step_rule: StepRule,
    pub gamma0: f64,
    pub max_iters: usize,
    pub tol_kkt: f64,
    pub tol_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            step_rule: StepRule::Constant,
            gamma0: 1.0,
            max_iters: 200_000,
            tol_kkt: 1e-8,
            tol_step: 1e-12,
        }
    }
}

/// Solves `SYSTEM` (any spot market is ignored). Non-convergence is reported
/// through `stop_reason`, not as an error.
pub fn solve_system(s: &Scenario, cfg: &SolverConfig) -> Result<(Allocation, ConvergenceReport)> {
    let sol = solve_with_multipliers(s, cfg)?;
    Ok((sol.allocation, sol.report))
}

/// [`solve_system`] also returning coupling multipliers and supporting prices.
pub fn solve_with_multipliers(s: &Scenario, cfg: &SolverConfig) -> Result<CentralSolution> {
    crate::model::validate(s)?;
    centralized::solve_centralized(s, cfg)
}
