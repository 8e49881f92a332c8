//! Augmented-Lagrangian projected gradient for `SYSTEM`.
//!
//! The inner feasible set (consumption boxes, deferrable windows, battery rate
//! boxes) has an exact projection. Battery level bounds, provider capacity and
//! nonnegative net demand couple variables across slots or users, so they enter
//! through multipliers:
//!
//! ```text
//!   maximize  W(x) - Σ_j (1/2ρ) (max(0, λ_j + ρ g_j(x))^2 - λ_j^2)
//!   λ_j <- max(0, λ_j + ρ g_j(x))
//! ```

use crate::error::Result;
use crate::model::{welfare_unchecked, Allocation, Scenario};
use crate::report::{ConvergenceReport, IterRecord, StopReason, TraceLog};
use crate::solver::projection::{clip_battery_levels, project_inner};
use crate::solver::{SolverConfig, StepRule};

/// Multipliers of the coupling constraints at the returned point.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMultipliers {
    /// `level_lo[i][t]` prices `s_{t+1} >= floor` for user `i` (zero rows for users without a battery).
    pub level_lo: Vec<Vec<f64>>,
    /// `level_hi[i][t]` prices `s_{t+1} <= capacity`.
    pub level_hi: Vec<Vec<f64>>,
    /// Per-slot capacity multiplier.
    pub capacity: Vec<f64>,
    /// Per-slot multiplier of `net demand >= 0`. Discharging storage past
    /// total consumption only throws energy away, so this never changes the
    /// optimal value; it keeps the cost smooth at zero output.
    pub export: Vec<f64>,
}

impl CouplingMultipliers {
    fn zeros(users: usize, slots: usize) -> Self {
        CouplingMultipliers {
            level_lo: vec![vec![0.0; slots]; users],
            level_hi: vec![vec![0.0; slots]; users],
            capacity: vec![0.0; slots],
            export: vec![0.0; slots],
        }
    }
}

#[derive(Debug, Clone)]
pub struct CentralSolution {
    pub allocation: Allocation,
    pub report: ConvergenceReport,
    pub multipliers: CouplingMultipliers,
    /// Marginal cost plus capacity multiplier per slot: the supporting prices.
    pub prices: Vec<f64>,
}

/// Constraint values `g(x) <= 0` in the same layout as the multipliers.
fn constraint_values(s: &Scenario, x: &Allocation) -> CouplingMultipliers {
    let (n, m) = (s.users.len(), s.slots());
    let mut g = CouplingMultipliers::zeros(n, m);
    for (i, u) in s.users.iter().enumerate() {
        let Some(b) = &u.battery else { continue };
        for (t, level) in b.levels(&x.r[i], &x.d[i], s.dt()).into_iter().enumerate() {
            g.level_lo[i][t] = b.level_floor(t, s.slots()) - level;
            g.level_hi[i][t] = level - b.capacity;
        }
    }
    for (t, dm) in x.net_demand().into_iter().enumerate() {
        g.capacity[t] = dm - s.provider.capacity[t];
        g.export[t] = -dm;
    }
    g
}

/// Penalty weight. Kept fixed: larger weights make the cumulative level
/// constraints badly conditioned for the inner gradient steps.
const RHO: f64 = 10.0;

struct Penalty {
    lam: CouplingMultipliers,
    rho: f64,
}

impl Penalty {
    fn shifted(&self, lam: f64, g: f64) -> f64 {
        (lam + self.rho * g).max(0.0)
    }

    fn value(&self, g: &CouplingMultipliers) -> f64 {
        let term = |lam: f64, gv: f64| {
            let sh = self.shifted(lam, gv);
            (sh * sh - lam * lam) / (2.0 * self.rho)
        };
        let mut total = 0.0;
        for (ll, gl) in self.lam.level_lo.iter().zip(&g.level_lo) {
            total += ll.iter().zip(gl).map(|(&l, &v)| term(l, v)).sum::<f64>();
        }
        for (lh, gh) in self.lam.level_hi.iter().zip(&g.level_hi) {
            total += lh.iter().zip(gh).map(|(&l, &v)| term(l, v)).sum::<f64>();
        }
        let slots = |lam: &[f64], gv: &[f64]| lam.iter().zip(gv).map(|(&l, &v)| term(l, v)).sum::<f64>();
        total + slots(&self.lam.capacity, &g.capacity) + slots(&self.lam.export, &g.export)
    }

    /// Updated multipliers `max(0, λ + ρ g)`.
    fn updated(&self, g: &CouplingMultipliers) -> CouplingMultipliers {
        let upd = |lam: &Vec<Vec<f64>>, gv: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            lam.iter()
                .zip(gv)
                .map(|(l, v)| l.iter().zip(v).map(|(&a, &b)| self.shifted(a, b)).collect())
                .collect()
        };
        CouplingMultipliers {
            level_lo: upd(&self.lam.level_lo, &g.level_lo),
            level_hi: upd(&self.lam.level_hi, &g.level_hi),
            capacity: self
                .lam
                .capacity
                .iter()
                .zip(&g.capacity)
                .map(|(&a, &b)| self.shifted(a, b))
                .collect(),
            export: self
                .lam
                .export
                .iter()
                .zip(&g.export)
                .map(|(&a, &b)| self.shifted(a, b))
                .collect(),
        }
    }
}

/// Augmented objective and its gradient with respect to `q`, `r`, `d`.
fn augmented(s: &Scenario, x: &Allocation, pen: &Penalty) -> (f64, Allocation) {
    let g = constraint_values(s, x);
    let demand = x.net_demand();
    // Below zero output the cost continues as its quadratic; the export
    // constraint makes the two agree at the solution.
    let extension: f64 = (0..s.slots())
        .map(|t| {
            let q = demand[t].min(0.0);
            s.provider.c1[t] * q + 0.5 * s.provider.c2[t] * q * q
        })
        .sum();
    let value = welfare_unchecked(s, x) - extension - pen.value(&g);
    let mu = pen.updated(&g);
    let dt = s.dt();
    let mut grad = Allocation::for_scenario(s);
    for t in 0..s.slots() {
        let p = &s.provider;
        let mc = p.c1[t] + p.c2[t] * demand[t] + mu.capacity[t] - mu.export[t];
        for (i, u) in s.users.iter().enumerate() {
            grad.q[i][t] = u.utility.marginal(t, x.q[i][t]) - mc;
            if u.battery.is_some() {
                grad.r[i][t] = -mc;
                grad.d[i][t] = mc;
            }
        }
    }
    for (i, u) in s.users.iter().enumerate() {
        let Some(b) = &u.battery else { continue };
        // Level s_{t+1} depends on r_τ, d_τ for τ <= t.
        let mut w = 0.0;
        for t in (0..s.slots()).rev() {
            w += mu.level_hi[i][t] - mu.level_lo[i][t];
            grad.r[i][t] -= b.efficiency * dt * w;
            grad.d[i][t] += dt * w;
        }
    }
    (value, grad)
}

fn axpy(x: &Allocation, step: f64, g: &Allocation) -> Allocation {
    let comb = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        a.iter()
            .zip(b)
            .map(|(ra, rb)| ra.iter().zip(rb).map(|(&u, &v)| u + step * v).collect())
            .collect()
    };
    Allocation {
        q: comb(&x.q, &g.q),
        r: comb(&x.r, &g.r),
        d: comb(&x.d, &g.d),
        supply: x.supply.clone(),
        spot: x.spot.clone(),
    }
}

/// `(inner product <a - b, g>, squared distance, max abs difference)`.
fn diff_stats(a: &Allocation, b: &Allocation, g: &Allocation) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut sq = 0.0;
    let mut inf: f64 = 0.0;
    for ((ra, rb), rg) in
        a.q.iter()
            .chain(&a.r)
            .chain(&a.d)
            .zip(b.q.iter().chain(&b.r).chain(&b.d))
            .zip(g.q.iter().chain(&g.r).chain(&g.d))
    {
        for ((&u, &v), &w) in ra.iter().zip(rb).zip(rg) {
            let diff = u - v;
            dot += diff * w;
            sq += diff * diff;
            inf = inf.max(diff.abs());
        }
    }
    (dot, sq, inf)
}

fn projected(s: &Scenario, x: &Allocation) -> Allocation {
    let mut y = x.clone();
    project_inner(s, &mut y).expect("validated scenario has feasible windows");
    y
}

/// Projected-gradient stationarity residual `||x - P(x + ∇)||_inf`.
fn stationarity(s: &Scenario, x: &Allocation, grad: &Allocation) -> f64 {
    let moved = projected(s, &axpy(x, 1.0, grad));
    diff_stats(x, &moved, grad).2
}

fn max_violation(g: &CouplingMultipliers) -> f64 {
    g.level_lo
        .iter()
        .chain(&g.level_hi)
        .flatten()
        .chain(&g.capacity)
        .chain(&g.export)
        .fold(0.0, |m, &v| m.max(v))
}

/// Complementarity residual `max |min(λ, -g)|`.
fn complementarity(lam: &CouplingMultipliers, g: &CouplingMultipliers) -> f64 {
    let pairs = lam
        .level_lo
        .iter()
        .flatten()
        .zip(g.level_lo.iter().flatten())
        .chain(lam.level_hi.iter().flatten().zip(g.level_hi.iter().flatten()))
        .chain(lam.capacity.iter().zip(&g.capacity))
        .chain(lam.export.iter().zip(&g.export));
    pairs.fold(0.0, |m, (&l, &v)| m.max(l.min(-v).abs()))
}

pub(crate) fn solve_centralized(s: &Scenario, cfg: &SolverConfig) -> Result<CentralSolution> {
    let s = &s.without_spot();
    let (n, m) = (s.users.len(), s.slots());
    let mut x = projected(s, &Allocation::for_scenario(s));
    // Start inside the box so log utilities see positive consumption slopes.
    for (i, u) in s.users.iter().enumerate() {
        for t in 0..m {
            let (lo, hi) = u.bounds(t);
            if u.window_of(t).is_none() {
                x.q[i][t] = lo + 0.5 * (hi - lo).min(1.0);
            }
        }
    }
    let mut x = projected(s, &x);
    let mut pen = Penalty {
        lam: CouplingMultipliers::zeros(n, m),
        rho: RHO,
    };
    // Inner accuracy tightens with the constraint violation.
    let mut tol_inner = 1e-2f64.max(cfg.tol_kkt * 0.1);
    let mut log = TraceLog::new();
    let mut iter = 0usize;
    let mut step = cfg.gamma0;
    let mut kkt = f64::INFINITY;
    let mut stop = StopReason::MaxIters;

    'outer: for _outer in 0..1000 {
        let mut prev = x.clone();
        let mut momentum = 1.0f64;
        let (mut fx, _) = augmented(s, &x, &pen);
        let mut inner_res;
        loop {
            if iter >= cfg.max_iters {
                break 'outer;
            }
            iter += 1;
            let use_momentum = matches!(cfg.step_rule, StepRule::Constant);
            let next_m = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
            let beta = if use_momentum {
                (momentum - 1.0) / next_m
            } else {
                0.0
            };
            let y = if beta > 0.0 {
                let mut dir = x.clone();
                for (rows_y, (rows_x, rows_p)) in [
                    (&mut dir.q, (&x.q, &prev.q)),
                    (&mut dir.r, (&x.r, &prev.r)),
                    (&mut dir.d, (&x.d, &prev.d)),
                ] {
                    for (ry, (rx, rp)) in rows_y.iter_mut().zip(rows_x.iter().zip(rows_p)) {
                        for (vy, (&vx, &vp)) in ry.iter_mut().zip(rx.iter().zip(rp)) {
                            *vy = vx + beta * (vx - vp);
                        }
                    }
                }
                projected(s, &dir)
            } else {
                x.clone()
            };
            let (fy, gy) = augmented(s, &y, &pen);
            let trial_step = match cfg.step_rule {
                StepRule::Constant => step,
                StepRule::Diminishing => step.min(cfg.gamma0 / (iter as f64).sqrt()),
            };
            let mut h = trial_step;
            let (cand, fc) = loop {
                let cand = projected(s, &axpy(&y, h, &gy));
                let (fc, gc) = augmented(s, &cand, &pen);
                let (dot, sq, _) = diff_stats(&cand, &y, &gy);
                let sufficient = fc >= fy + dot - sq / (2.0 * h) - 1e-14 * (1.0 + fy.abs());
                // The same curvature bound read off the gradients, which stays
                // accurate once value differences sink into rounding noise.
                let secant = || {
                    let (dot_c, _, _) = diff_stats(&cand, &y, &gc);
                    dot - dot_c <= sq / h
                };
                if sufficient || secant() || h < 1e-14 {
                    break (cand, fc);
                }
                h *= 0.5;
                step = step.min(h);
            };
            let (_, _, moved) = diff_stats(&cand, &x, &gy);
            if fc < fx {
                // Restart momentum on ascent failure.
                momentum = 1.0;
            } else {
                momentum = next_m;
            }
            prev = std::mem::replace(&mut x, cand);
            fx = fc;
            let (_, gx) = augmented(s, &x, &pen);
            inner_res = stationarity(s, &x, &gx);
            if log.wants(iter) {
                let wel = welfare_unchecked(s, &x);
                log.push(IterRecord {
                    iter,
                    objective: wel,
                    kkt: inner_res.max(max_violation(&constraint_values(s, &x))),
                    dual: None,
                });
            }
            if inner_res <= tol_inner {
                break;
            }
            if moved <= cfg.tol_step * 1e-3 && h < 1e-12 {
                stop = StopReason::Step;
                break;
            }
        }
        let g = constraint_values(s, &x);
        let violation = max_violation(&g);
        let new_lam = pen.updated(&g);
        let compl = complementarity(&new_lam, &g);
        kkt = inner_res.max(violation).max(compl);
        pen.lam = new_lam;
        if kkt <= cfg.tol_kkt {
            stop = StopReason::Kkt;
            break;
        }
        if stop == StopReason::Step {
            break;
        }
        tol_inner = (0.1 * violation.max(compl)).clamp(cfg.tol_kkt * 0.1, 1e-2);
    }

    let mut allocation = x;
    clip_battery_levels(s, &mut allocation);
    allocation.settle_supply();
    let residual = crate::model::feasibility_residuals(s, &allocation)?.max();
    let kkt = kkt.max(residual);
    if stop == StopReason::Kkt && kkt > cfg.tol_kkt {
        stop = StopReason::Step;
    }
    let objective = welfare_unchecked(s, &allocation);
    let demand = allocation.net_demand();
    // The quadratic extension below zero output, as in `augmented`: at a
    // binding no-export constraint the free-disposal marginal cost is 0.
    let c = &s.provider;
    let prices = (0..m)
        .map(|t| (c.c1[t] + c.c2[t] * demand[t] + pen.lam.capacity[t] - pen.lam.export[t]).max(0.0))
        .collect();
    let report = log.finish(
        IterRecord {
            iter,
            objective,
            kkt,
            dual: None,
        },
        stop,
    );
    Ok(CentralSolution {
        allocation,
        report,
        multipliers: pen.lam,
        prices,
    })
}
