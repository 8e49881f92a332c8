//! One entry point per solution method, each producing the artifacts of a run.

use std::fmt::Write as _;

use clap::ValueEnum;
use gridnum::control::{solve_single_user_with, verify_threshold_structure};
use gridnum::dual::{run_dual, DualConfig, InProcessBus, MessageBus, TcpBus, DEFAULT_ROUND_TIMEOUT};
use gridnum::greedy::{gap_upper_bound, greedy_solve};
use gridnum::model::{allocation_to_csv, feasibility_residuals, Allocation, Scenario};
use gridnum::newton::{run_newton, NewtonConfig};
use gridnum::report::{ConvergenceReport, IterRecord, StopReason};
use gridnum::solver::{solve_system, SolverConfig};
use gridnum::spot::spot_interaction_fixed_point;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    System,
    Dual,
    Spot,
    Greedy,
    Newton,
    Control,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::System => "system",
            Method::Dual => "dual",
            Method::Spot => "spot",
            Method::Greedy => "greedy",
            Method::Newton => "newton",
            Method::Control => "control",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BusKind {
    Inproc,
    Tcp,
}

/// Solver knobs shared by every method; `None` keeps the method's default.
#[derive(Debug, Clone, Default)]
pub struct Knobs {
    pub gamma: Option<f64>,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
    pub bus: Option<BusKind>,
    pub port: u16,
}

impl Knobs {
    fn solver(&self) -> SolverConfig {
        let mut cfg = SolverConfig::default();
        if let Some(g) = self.gamma {
            cfg.gamma0 = g;
        }
        if let Some(m) = self.max_iters {
            cfg.max_iters = m;
        }
        if let Some(t) = self.tol {
            cfg.tol_kkt = t;
        }
        cfg
    }

    fn dual(&self) -> DualConfig {
        let mut cfg = DualConfig::default();
        cfg.gamma0 = self.gamma.or(cfg.gamma0);
        if let Some(m) = self.max_iters {
            cfg.max_rounds = m;
        }
        if let Some(t) = self.tol {
            cfg.tol_balance = t;
            cfg.tol_gap = t;
        }
        cfg
    }

    fn bus(&self, s: &Scenario) -> Result<Box<dyn MessageBus>, CliError> {
        Ok(match self.bus.unwrap_or(BusKind::Inproc) {
            BusKind::Inproc => Box::new(InProcessBus::for_scenario(s)),
            BusKind::Tcp => Box::new(
                TcpBus::for_scenario(s, self.port, DEFAULT_ROUND_TIMEOUT).map_err(gridnum::Error::from)?,
            ),
        })
    }
}

/// Everything a method run leaves behind.
pub struct Outcome {
    pub method: Method,
    pub allocation: Allocation,
    pub report: ConvergenceReport,
    /// Extra `(file name, contents)` pairs beside the standard three.
    pub files: Vec<(&'static str, String)>,
    /// Lines printed after the summary.
    pub notes: Vec<String>,
    /// Greedy only: the a posteriori bound on its optimality gap.
    pub gap_bound: Option<f64>,
}

impl Outcome {
    fn new(method: Method, allocation: Allocation, report: ConvergenceReport) -> Self {
        Outcome {
            method,
            allocation,
            report,
            files: Vec::new(),
            notes: Vec::new(),
            gap_bound: None,
        }
    }

    pub fn converged(&self) -> bool {
        self.report.stop_reason.converged()
    }

    pub fn allocation_csv(&self, s: &Scenario) -> String {
        allocation_to_csv(s, &self.allocation)
    }
}

pub fn run_method(method: Method, s: &Scenario, knobs: &Knobs) -> Result<Outcome, CliError> {
    match method {
        Method::System => {
            let (x, rep) = solve_system(s, &knobs.solver())?;
            Ok(Outcome::new(method, x, rep))
        }
        Method::Dual => {
            let mut bus = knobs.bus(s)?;
            let (_, x, rep) = run_dual(s, &knobs.dual(), bus.as_mut())?.into_parts();
            Ok(Outcome::new(method, x, rep))
        }
        Method::Newton => {
            let cfg = NewtonConfig {
                dual: knobs.dual(),
                ..NewtonConfig::default()
            };
            let mut bus = knobs.bus(s)?;
            let (_, x, rep) = run_newton(s, &cfg, bus.as_mut())?.into_parts();
            Ok(Outcome::new(method, x, rep))
        }
        Method::Spot => spot(s, knobs),
        Method::Greedy => greedy(s, knobs),
        Method::Control => control(s, knobs),
    }
}

fn spot(s: &Scenario, knobs: &Knobs) -> Result<Outcome, CliError> {
    let Some(m) = s.spot.clone() else {
        return Err(
            gridnum::Error::Validation("method spot needs a spot block in the scenario".into()).into(),
        );
    };
    let mut bus = knobs.bus(s)?;
    let (prices, x, rep) = run_dual(s, &knobs.dual(), bus.as_mut())?.into_parts();
    let mut table = String::from("slot,spot_g,spot_price,price\n");
    for t in 0..s.slots() {
        let _ = writeln!(table, "{t},{},{},{}", x.spot[t], m.price(t, x.spot[t]), prices[t]);
    }
    let eq = spot_interaction_fixed_point(s, &knobs.dual())?;
    let mut out = Outcome::new(Method::Spot, x, rep);
    out.files.push(("spot.csv", table));
    out.notes.push(format!(
        "fixed_point outer={} converged={} internalized_gap={:.3e}",
        eq.outer_iterations, eq.converged, eq.internalized_gap
    ));
    if let Some(osc) = eq.oscillation {
        out.notes.push(format!("fixed_point oscillation={osc:.3e}"));
    }
    Ok(out)
}

fn greedy(s: &Scenario, knobs: &Knobs) -> Result<Outcome, CliError> {
    let g = greedy_solve(s)?;
    let bound = gap_upper_bound(s, &g)?;
    let residual = feasibility_residuals(&s.without_spot(), &g.allocation)?.max();
    let (_, optimum) = solve_system(s, &knobs.solver())?;
    let true_gap = optimum.final_objective - g.welfare;
    let tightness = if bound > 0.0 { true_gap / bound } else { 1.0 };
    let slots = s.slots();
    let report = ConvergenceReport {
        iterates_logged: vec![IterRecord {
            iter: slots,
            objective: g.welfare,
            kkt: residual,
            dual: Some(g.welfare + bound),
        }],
        final_objective: g.welfare,
        kkt_residual: residual,
        iterations: slots,
        stop_reason: StopReason::Kkt,
    };
    let header = "greedy_welfare,optimal_welfare,true_gap,gap_bound,bound_tightness";
    let row = format!(
        "{},{},{},{},{}",
        g.welfare, optimum.final_objective, true_gap, bound, tightness
    );
    let mut prices = String::from("slot,multiplier\n");
    for (t, l) in g.multipliers.0.iter().enumerate() {
        let _ = writeln!(prices, "{t},{l}");
    }
    let mut out = Outcome::new(Method::Greedy, g.allocation, report);
    out.notes.push(format!(
        "greedy_welfare={:.6} optimal_welfare={:.6} true_gap={:.6e} gap_bound={:.6e} bound_tightness={:.4}",
        g.welfare, optimum.final_objective, true_gap, bound, tightness
    ));
    out.files.push(("greedy.csv", format!("{header}\n{row}\n")));
    out.files.push(("multipliers.csv", prices));
    out.gap_bound = Some(bound);
    Ok(out)
}

fn control(s: &Scenario, knobs: &Knobs) -> Result<Outcome, CliError> {
    let [user] = s.users.as_slice() else {
        return Err(gridnum::Error::Validation(format!(
            "method control needs exactly one user, scenario has {}",
            s.users.len()
        ))
        .into());
    };
    let sol = solve_single_user_with(user, &s.provider, &s.horizon, &knobs.solver())?;
    let structure = verify_threshold_structure(&sol);
    let mut out = Outcome::new(Method::Control, sol.allocation.clone(), sol.report.clone());
    out.files.push(("structure.csv", structure.to_csv()));
    out.files.push(("structure.txt", structure.to_text()));
    out.notes.extend(structure.to_text().lines().map(str::to_string));
    Ok(out)
}
