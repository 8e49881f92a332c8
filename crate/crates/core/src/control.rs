//! Single-user consumption and storage control against an explicit production cost.
//!
//! At an optimum the value of stored energy after slot `t` is
//! `V_t = Δ Σ_{τ>=t} (μ^lo_τ - μ^hi_τ)`, constant wherever the level stays off
//! its bounds. Slots that charge at an unclamped rate have `c'_t = η V`, slots
//! that discharge at an unclamped rate have `c'_t = V`, and idle slots sit in
//! between. [`verify_threshold_structure`] checks exactly this.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    feasibility_residuals, validate, Allocation, Horizon, ProviderCost, Scenario, UserModel, UtilityKind,
};
use crate::report::ConvergenceReport;
use crate::solver::{solve_with_multipliers, SolverConfig};

/// Default tolerance for marginal-cost equalization.
pub const EQUALIZATION_TOL: f64 = 1e-4;
/// Default tolerance for complementary slackness and partition ordering.
pub const SLACKNESS_TOL: f64 = 1e-6;

/// Optimal single-user schedule with the multipliers of the storage constraints.
#[derive(Debug, Clone)]
pub struct SingleUserSolution {
    /// The one-user scenario that was solved.
    pub scenario: Scenario,
    pub allocation: Allocation,
    pub report: ConvergenceReport,
    /// Levels `s_1..=s_T`; empty without a battery.
    pub levels: Vec<f64>,
    /// Multiplier of `s_{t+1} >= floor_t`.
    pub level_lo: Vec<f64>,
    /// Multiplier of `s_{t+1} <= capacity`.
    pub level_hi: Vec<f64>,
    /// Provider marginal cost at the realized net demand, plus the capacity
    /// multiplier when capacity binds.
    pub marginal_cost: Vec<f64>,
    /// `max_t |μ_t · slack_t|` over both level bounds.
    pub complementarity: f64,
}

impl SingleUserSolution {
    pub fn welfare(&self) -> f64 {
        self.report.final_objective
    }
}

fn one_user(u: &UserModel, c: &ProviderCost, h: &Horizon) -> Scenario {
    Scenario {
        horizon: h.clone(),
        users: vec![u.clone()],
        provider: c.clone(),
        spot: None,
        seed: 0,
    }
}

/// Welfare-maximizing schedule for one user facing production cost `c`.
pub fn solve_single_user(u: &UserModel, c: &ProviderCost, h: &Horizon) -> Result<SingleUserSolution> {
    solve_single_user_with(u, c, h, &SolverConfig::default())
}

pub fn solve_single_user_with(
    u: &UserModel,
    c: &ProviderCost,
    h: &Horizon,
    cfg: &SolverConfig,
) -> Result<SingleUserSolution> {
    let s = one_user(u, c, h);
    validate(&s)?;
    if u.utility.kind == UtilityKind::Logarithmic && u.utility.b.iter().any(|&b| b <= 0.0) {
        return Err(Error::validation(format!(
            "user {}: utility must be strictly concave (b > 0)",
            u.id
        )));
    }
    let sol = solve_with_multipliers(&s, cfg)?;
    let n = s.slots();
    let x = sol.allocation;
    let (levels, level_lo, level_hi) = match &u.battery {
        Some(b) => (
            b.levels(&x.r[0], &x.d[0], s.dt()),
            sol.multipliers.level_lo[0].clone(),
            sol.multipliers.level_hi[0].clone(),
        ),
        None => (Vec::new(), vec![0.0; n], vec![0.0; n]),
    };
    let mut complementarity: f64 = 0.0;
    if let Some(b) = &u.battery {
        for t in 0..n {
            let lo_slack = (levels[t] - b.level_floor(t, n)).max(0.0);
            let hi_slack = (b.capacity - levels[t]).max(0.0);
            complementarity = complementarity
                .max((level_lo[t] * lo_slack).abs())
                .max((level_hi[t] * hi_slack).abs());
        }
    }
    Ok(SingleUserSolution {
        scenario: s,
        allocation: x,
        report: sol.report,
        levels,
        level_lo,
        level_hi,
        marginal_cost: sol.prices,
        complementarity,
    })
}

/// `W(with battery) - W(without battery)`, both solved to optimality.
pub fn storage_option_value(u: &UserModel, c: &ProviderCost, h: &Horizon) -> Result<f64> {
    let with = solve_single_user(u, c, h)?;
    let mut bare = u.clone();
    bare.battery = None;
    let without = solve_single_user(&bare, c, h)?;
    Ok(with.welfare() - without.welfare())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Charge,
    Idle,
    Discharge,
}

#[derive(Debug, Clone, Serialize)]
pub struct StructureRow {
    pub slot: usize,
    pub q: f64,
    pub r: f64,
    pub d: f64,
    /// Level at the end of the slot.
    pub level: f64,
    pub marginal_cost: f64,
    pub segment: usize,
    pub mode: Mode,
    /// Battery moves at a rate strictly inside its box.
    pub interior: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Segment {
    pub index: usize,
    pub first: usize,
    pub last: usize,
    /// Spread of efficiency-adjusted marginal cost over interior slots.
    pub spread: f64,
    /// Highest marginal cost among charging slots.
    pub charge_threshold: Option<f64>,
    /// Lowest marginal cost among discharging slots.
    pub discharge_threshold: Option<f64>,
    /// Largest amount by which the charge <= idle <= discharge ordering fails.
    pub ordering_violation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Check {
    pub pass: bool,
    pub residual: f64,
    pub tol: f64,
}

impl Check {
    fn new(residual: f64, tol: f64) -> Self {
        Check {
            pass: residual <= tol,
            residual,
            tol,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StructureReport {
    pub rows: Vec<StructureRow>,
    pub segments: Vec<Segment>,
    /// Slots after which the level sits on a bound.
    pub breaks: Vec<usize>,
    pub equalization: Check,
    pub partition: Check,
    pub complementary_slackness: Check,
}

impl StructureReport {
    pub fn pass(&self) -> bool {
        self.equalization.pass && self.partition.pass && self.complementary_slackness.pass
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("slot,q,r,d,level,marginal_cost,segment\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.slot, r.q, r.r, r.d, r.level, r.marginal_cost, r.segment
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let verdict = |c: &Check| if c.pass { "pass" } else { "FAIL" };
        let mut out = String::new();
        for (name, c) in [
            ("equalization", &self.equalization),
            ("partition", &self.partition),
            ("complementary_slackness", &self.complementary_slackness),
        ] {
            let _ = writeln!(
                out,
                "{name}: {} residual={:.3e} tol={:.0e}",
                verdict(c),
                c.residual,
                c.tol
            );
        }
        if !self.breaks.is_empty() {
            let list: Vec<String> = self.breaks.iter().map(|b| b.to_string()).collect();
            let _ = writeln!(out, "level on a bound after slots: {}", list.join(" "));
        }
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        for s in &self.segments {
            let _ = writeln!(
                out,
                "segment {} slots {}..={} spread={:.3e} charge<={} discharge>={}",
                s.index,
                s.first,
                s.last,
                s.spread,
                fmt(s.charge_threshold),
                fmt(s.discharge_threshold)
            );
        }
        out
    }
}

/// Diagnoses the charge/idle/discharge structure of a computed optimum.
pub fn verify_threshold_structure(sol: &SingleUserSolution) -> StructureReport {
    verify_threshold_structure_with(sol, EQUALIZATION_TOL, SLACKNESS_TOL)
}

pub fn verify_threshold_structure_with(
    sol: &SingleUserSolution,
    tol_equal: f64,
    tol_slack: f64,
) -> StructureReport {
    let s = &sol.scenario;
    let n = s.slots();
    let x = &sol.allocation;
    let user = &s.users[0];
    let Some(b) = &user.battery else {
        let rows = (0..n)
            .map(|t| StructureRow {
                slot: t,
                q: x.q[0][t],
                r: 0.0,
                d: 0.0,
                level: 0.0,
                marginal_cost: sol.marginal_cost[t],
                segment: 0,
                mode: Mode::Idle,
                interior: false,
            })
            .collect();
        return StructureReport {
            rows,
            segments: Vec::new(),
            breaks: Vec::new(),
            equalization: Check::new(0.0, tol_equal),
            partition: Check::new(0.0, tol_slack),
            complementary_slackness: Check::new(0.0, tol_slack),
        };
    };

    let scale = b.capacity.max(1.0);
    let level_eps = 1e-7 * scale;
    let rate_eps = |max: f64| 1e-7 * max.max(1.0);
    let mut rows = Vec::with_capacity(n);
    let mut breaks = Vec::new();
    let mut segment = 0;
    for t in 0..n {
        let (r, d) = (x.r[0][t], x.d[0][t]);
        let (er, ed) = (rate_eps(b.charge_rate_max), rate_eps(b.discharge_rate_max));
        let mode = if r > er && r >= d {
            Mode::Charge
        } else if d > ed {
            Mode::Discharge
        } else {
            Mode::Idle
        };
        let interior = match mode {
            Mode::Charge => r < b.charge_rate_max - er,
            Mode::Discharge => d < b.discharge_rate_max - ed,
            Mode::Idle => false,
        };
        let level = sol.levels[t];
        rows.push(StructureRow {
            slot: t,
            q: x.q[0][t],
            r,
            d,
            level,
            marginal_cost: sol.marginal_cost[t],
            segment,
            mode,
            interior,
        });
        let pinned = level <= b.level_floor(t, n) + level_eps || level >= b.capacity - level_eps;
        if pinned && t + 1 < n {
            breaks.push(t);
            segment += 1;
        }
    }

    let eta = b.efficiency;
    let adjusted = |row: &StructureRow| match row.mode {
        Mode::Charge => row.marginal_cost / eta,
        _ => row.marginal_cost,
    };
    let mut segments = Vec::new();
    let mut start = 0;
    while start < n {
        let index = rows[start].segment;
        let end = rows[start..]
            .iter()
            .position(|r| r.segment != index)
            .map_or(n, |k| start + k);
        let slice = &rows[start..end];
        let interior: Vec<f64> = slice.iter().filter(|r| r.interior).map(adjusted).collect();
        let spread = if interior.is_empty() {
            0.0
        } else {
            interior.iter().copied().fold(f64::MIN, f64::max)
                - interior.iter().copied().fold(f64::MAX, f64::min)
        };
        let extreme = |mode: Mode, pick: fn(f64, f64) -> f64, init: f64| {
            let mut v = slice
                .iter()
                .filter(|r| r.mode == mode)
                .map(|r| r.marginal_cost)
                .peekable();
            v.peek().is_some().then(|| v.fold(init, pick))
        };
        let charge_threshold = extreme(Mode::Charge, f64::max, f64::MIN);
        let discharge_threshold = extreme(Mode::Discharge, f64::min, f64::MAX);
        let idle_lo = extreme(Mode::Idle, f64::min, f64::MAX);
        let idle_hi = extreme(Mode::Idle, f64::max, f64::MIN);
        let gap = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => (a - b).max(0.0),
            _ => 0.0,
        };
        let ordering_violation = gap(charge_threshold, idle_lo)
            .max(gap(idle_hi, discharge_threshold))
            .max(gap(charge_threshold, discharge_threshold));
        segments.push(Segment {
            index,
            first: start,
            last: end - 1,
            spread,
            charge_threshold,
            discharge_threshold,
            ordering_violation,
        });
        start = end;
    }

    let equalization = segments.iter().map(|s| s.spread).fold(0.0, f64::max);
    let partition = segments.iter().map(|s| s.ordering_violation).fold(0.0, f64::max);
    StructureReport {
        rows,
        segments,
        breaks,
        equalization: Check::new(equalization, tol_equal),
        partition: Check::new(partition, tol_slack),
        complementary_slackness: Check::new(sol.complementarity, tol_slack),
    }
}

/// Largest feasibility residual of the schedule.
pub fn schedule_residual(sol: &SingleUserSolution) -> Result<f64> {
    Ok(feasibility_residuals(&sol.scenario, &sol.allocation)?.max())
}
