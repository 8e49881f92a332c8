//! Lattice-search ground truth for small instances.
//!
//! Searches a `grid_n`-per-axis lattice over the decision box: one axis per
//! free consumption slot (the last slot of each deferrable window is
//! eliminated through the energy equality), one net battery rate `r - d` per
//! battery slot, and one purchase per slot when a spot market is present.
//!
//! The objective and its supergradient are evaluated here with their own
//! formulas and share no code with [`crate::model`]. The search returns the
//! exact lattice maximizer: cells are pruned only when the tangent-plane upper
//! bound `F(c) + Σ_j max(g_j (hi_j - c_j), g_j (lo_j - c_j))`, valid for any
//! concave `F`, cannot beat the incumbent.

use crate::error::{Error, Result};
use crate::model::{Allocation, Scenario, UtilityKind};

/// Largest lattice dimension accepted.
pub const MAX_ORACLE_DIM: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Search {
    /// Tangent-plane branch and bound (exact over the lattice).
    BranchAndBound,
    /// Visit every lattice point.
    Exhaustive,
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub allocation: Allocation,
    pub objective: f64,
    /// Bound on the distance between the lattice optimum and the continuous optimum.
    pub error_bound: f64,
    pub dimension: usize,
    pub points_evaluated: u64,
}

#[derive(Debug, Clone, Copy)]
enum Var {
    Consumption { user: usize, slot: usize },
    NetRate { user: usize, slot: usize },
    Spot { slot: usize },
}

#[derive(Debug, Clone, Copy)]
struct Axis {
    var: Var,
    lo: f64,
    step: f64,
}

/// Last slot of a deferrable window, determined by the rest of the window.
struct Eliminated {
    user: usize,
    slot: usize,
    /// Free window slots whose sum fixes this one.
    others: Vec<usize>,
    total: f64,
    lo: f64,
    hi: f64,
}

struct Problem<'a> {
    s: &'a Scenario,
    axes: Vec<Axis>,
    elim: Vec<Eliminated>,
    grid_n: usize,
}

fn utility(kind: UtilityKind, a: f64, b: f64, q: f64) -> f64 {
    match kind {
        UtilityKind::Quadratic => b * q - 0.5 * q * q / a,
        // Linear continuation below zero keeps the function concave everywhere.
        UtilityKind::Logarithmic if q < 0.0 => b / a * q,
        UtilityKind::Logarithmic => b * (1.0 + q / a).ln(),
    }
}

fn utility_slope(kind: UtilityKind, a: f64, b: f64, q: f64) -> f64 {
    match kind {
        UtilityKind::Quadratic => b - q / a,
        UtilityKind::Logarithmic if q < 0.0 => b / a,
        UtilityKind::Logarithmic => b / (a + q),
    }
}

/// Point state decoded from a lattice index vector.
struct Point {
    q: Vec<Vec<f64>>,
    n: Vec<Vec<f64>>,
    g: Vec<f64>,
}

impl<'a> Problem<'a> {
    fn new(s: &'a Scenario, grid_n: usize) -> Result<Self> {
        let dt = s.dt();
        let mut axes = Vec::new();
        let mut elim = Vec::new();
        let spacing = |lo: f64, hi: f64| (hi - lo) / (grid_n - 1) as f64;
        for (i, u) in s.users.iter().enumerate() {
            let bounds = |t: usize| {
                let mut hi = u.q_max[t];
                for w in &u.deferrables {
                    if w.window_start <= t && t <= w.window_end {
                        hi = hi.min(w.per_slot_max);
                    }
                }
                (u.q_min[t], hi)
            };
            let mut last_of_window = vec![None; s.slots()];
            for w in &u.deferrables {
                last_of_window[w.window_end] = Some(w);
            }
            for t in 0..s.slots() {
                if let Some(w) = last_of_window[t] {
                    let (lo, hi) = bounds(t);
                    elim.push(Eliminated {
                        user: i,
                        slot: t,
                        others: (w.window_start..w.window_end).collect(),
                        total: w.energy_required / dt,
                        lo,
                        hi,
                    });
                } else {
                    let (lo, hi) = bounds(t);
                    axes.push(Axis {
                        var: Var::Consumption { user: i, slot: t },
                        lo,
                        step: spacing(lo, hi),
                    });
                }
            }
            if let Some(b) = u.battery.as_ref().filter(|b| b.capacity > 0.0) {
                for t in 0..s.slots() {
                    let lo = -b.discharge_rate_max;
                    axes.push(Axis {
                        var: Var::NetRate { user: i, slot: t },
                        lo,
                        step: spacing(lo, b.charge_rate_max),
                    });
                }
            }
        }
        if let Some(m) = &s.spot {
            for t in 0..s.slots() {
                axes.push(Axis {
                    var: Var::Spot { slot: t },
                    lo: 0.0,
                    step: spacing(0.0, m.g_max[t]),
                });
            }
        }
        if axes.len() > MAX_ORACLE_DIM {
            return Err(Error::DimensionGuard {
                dim: axes.len(),
                limit: MAX_ORACLE_DIM,
            });
        }
        Ok(Problem {
            s,
            axes,
            elim,
            grid_n,
        })
    }

    fn value(&self, axis: usize, k: usize) -> f64 {
        let a = &self.axes[axis];
        a.lo + a.step * k as f64
    }

    fn decode(&self, idx: &[usize]) -> Point {
        let (n_users, m) = (self.s.users.len(), self.s.slots());
        let mut p = Point {
            q: vec![vec![0.0; m]; n_users],
            n: vec![vec![0.0; m]; n_users],
            g: vec![0.0; m],
        };
        for (j, &k) in idx.iter().enumerate() {
            let v = self.value(j, k);
            match self.axes[j].var {
                Var::Consumption { user, slot } => p.q[user][slot] = v,
                Var::NetRate { user, slot } => p.n[user][slot] = v,
                Var::Spot { slot } => p.g[slot] = v,
            }
        }
        for e in &self.elim {
            let used: f64 = e.others.iter().map(|&t| p.q[e.user][t]).sum();
            p.q[e.user][e.slot] = e.total - used;
        }
        p
    }

    /// Own generation marginal cost per slot (a valid supergradient choice).
    fn marginal_costs(&self, p: &Point) -> Vec<f64> {
        let prov = &self.s.provider;
        (0..self.s.slots())
            .map(|t| {
                let own = self.demand(p, t) - p.g[t];
                if own >= 0.0 {
                    prov.c1[t] + prov.c2[t] * own
                } else {
                    0.0
                }
            })
            .collect()
    }

    fn demand(&self, p: &Point, t: usize) -> f64 {
        (0..self.s.users.len()).map(|i| p.q[i][t] + p.n[i][t]).sum()
    }

    fn objective(&self, p: &Point) -> f64 {
        let s = self.s;
        let mut total = 0.0;
        for (i, u) in s.users.iter().enumerate() {
            for t in 0..s.slots() {
                total += utility(u.utility.kind, u.utility.a[t], u.utility.b[t], p.q[i][t]);
            }
        }
        for t in 0..s.slots() {
            let own = (self.demand(p, t) - p.g[t]).max(0.0);
            total -= s.provider.c1[t] * own + 0.5 * s.provider.c2[t] * own * own;
            if let Some(m) = &s.spot {
                total -= m.pi0[t] * p.g[t] + 0.5 * m.kappa[t] * p.g[t] * p.g[t];
            }
        }
        total
    }

    fn gradient(&self, p: &Point) -> Vec<f64> {
        let s = self.s;
        let mc = self.marginal_costs(p);
        let q_slope = |i: usize, t: usize| {
            let u = &s.users[i].utility;
            utility_slope(u.kind, u.a[t], u.b[t], p.q[i][t]) - mc[t]
        };
        self.axes
            .iter()
            .map(|a| match a.var {
                Var::Consumption { user, slot } => {
                    let mut g = q_slope(user, slot);
                    for e in &self.elim {
                        if e.user == user && e.others.contains(&slot) {
                            g -= q_slope(user, e.slot);
                        }
                    }
                    g
                }
                Var::NetRate { slot, .. } => -mc[slot],
                Var::Spot { slot } => {
                    let m = s.spot.as_ref().expect("spot axis implies market");
                    mc[slot] - m.pi0[slot] - m.kappa[slot] * p.g[slot]
                }
            })
            .collect()
    }

    fn feasible(&self, p: &Point) -> bool {
        const TOL: f64 = 1e-12;
        let s = self.s;
        for e in &self.elim {
            let v = p.q[e.user][e.slot];
            if v < e.lo - TOL || v > e.hi + TOL {
                return false;
            }
        }
        for (i, u) in s.users.iter().enumerate() {
            let Some(b) = u.battery.as_ref().filter(|b| b.capacity > 0.0) else {
                continue;
            };
            let mut level = b.initial_level;
            for t in 0..s.slots() {
                let n = p.n[i][t];
                level += if n > 0.0 { b.efficiency * n } else { n } * s.dt();
                let floor = if t + 1 == s.slots() { b.initial_level } else { 0.0 };
                if level < floor - TOL || level > b.capacity + TOL {
                    return false;
                }
            }
        }
        (0..s.slots()).all(|t| {
            let own = (self.demand(p, t) - p.g[t]).max(0.0);
            own <= s.provider.capacity[t] + TOL
        })
    }

    /// False when interval bounds prove no point of the cell `[lo, hi]` feasible.
    fn cell_may_be_feasible(&self, lo: &[usize], hi: &[usize]) -> bool {
        const TOL: f64 = 1e-12;
        let s = self.s;
        let (n_users, m) = (s.users.len(), s.slots());
        let mut q = vec![vec![(0.0, 0.0); m]; n_users];
        let mut n = vec![vec![(0.0, 0.0); m]; n_users];
        let mut g = vec![(0.0, 0.0); m];
        for j in 0..self.axes.len() {
            let range = (self.value(j, lo[j]), self.value(j, hi[j]));
            match self.axes[j].var {
                Var::Consumption { user, slot } => q[user][slot] = range,
                Var::NetRate { user, slot } => n[user][slot] = range,
                Var::Spot { slot } => g[slot] = range,
            }
        }
        for e in &self.elim {
            let (used_lo, used_hi) = e
                .others
                .iter()
                .fold((0.0, 0.0), |(a, b), &t| (a + q[e.user][t].0, b + q[e.user][t].1));
            let range = (e.total - used_hi, e.total - used_lo);
            if range.1 < e.lo - TOL || range.0 > e.hi + TOL {
                return false;
            }
            q[e.user][e.slot] = range;
        }
        for (i, u) in s.users.iter().enumerate() {
            let Some(b) = u.battery.as_ref().filter(|b| b.capacity > 0.0) else {
                continue;
            };
            let flow = |v: f64| if v > 0.0 { b.efficiency * v } else { v } * s.dt();
            let (mut low, mut high) = (b.initial_level, b.initial_level);
            for t in 0..m {
                low += flow(n[i][t].0);
                high += flow(n[i][t].1);
                let floor = if t + 1 == m { b.initial_level } else { 0.0 };
                if high < floor - TOL || low > b.capacity + TOL {
                    return false;
                }
            }
        }
        (0..m).all(|t| {
            let least: f64 = (0..n_users).map(|i| q[i][t].0 + n[i][t].0).sum();
            least - g[t].1 <= s.provider.capacity[t] + TOL
        })
    }

    fn to_allocation(&self, p: &Point) -> Allocation {
        let mut x = Allocation::for_scenario(self.s);
        for i in 0..self.s.users.len() {
            for t in 0..self.s.slots() {
                x.q[i][t] = p.q[i][t];
                x.r[i][t] = p.n[i][t].max(0.0);
                x.d[i][t] = (-p.n[i][t]).max(0.0);
            }
        }
        x.spot = p.g.clone();
        x.settle_supply();
        x
    }

    /// Conservative `Σ_j L_j h_j` with per-axis slope bounds over the box.
    fn error_bound(&self) -> f64 {
        let s = self.s;
        let m = s.slots();
        let mut demand_max = vec![0.0; m];
        for u in &s.users {
            for t in 0..m {
                demand_max[t] += u.q_max[t].max(0.0);
                if let Some(b) = &u.battery {
                    demand_max[t] += b.charge_rate_max;
                }
            }
        }
        let mc_max: Vec<f64> = (0..m)
            .map(|t| s.provider.c1[t] + s.provider.c2[t] * demand_max[t])
            .collect();
        let slope_max = |i: usize, t: usize| {
            let u = &s.users[i].utility;
            let lo = s.users[i].q_min[t];
            utility_slope(u.kind, u.a[t], u.b[t], lo.min(0.0))
                .abs()
                .max(utility_slope(u.kind, u.a[t], u.b[t], s.users[i].q_max[t]).abs())
                + mc_max[t]
        };
        let mut bound = 0.0;
        for a in &self.axes {
            let l = match a.var {
                Var::Consumption { user, slot } => {
                    let mut l = slope_max(user, slot);
                    for e in &self.elim {
                        if e.user == user && e.others.contains(&slot) {
                            l += slope_max(user, e.slot);
                        }
                    }
                    l
                }
                Var::NetRate { slot, .. } => mc_max[slot],
                Var::Spot { slot } => {
                    let mk = s.spot.as_ref().expect("spot axis implies market");
                    mc_max[slot] + mk.pi0[slot] + mk.kappa[slot] * mk.g_max[slot]
                }
            };
            bound += l * a.step;
        }
        // Rounding the continuous optimum onto a feasible lattice point may move
        // every coordinate by a full step in the worst case.
        2.0 * bound
    }
}

struct Incumbent {
    value: f64,
    idx: Option<Vec<usize>>,
    evaluated: u64,
}

impl Incumbent {
    fn offer(&mut self, prob: &Problem, idx: &[usize], p: &Point) -> f64 {
        self.evaluated += 1;
        let f = prob.objective(p);
        if f > self.value && prob.feasible(p) {
            self.value = f;
            self.idx = Some(idx.to_vec());
        }
        f
    }
}

fn branch(prob: &Problem, lo: &mut Vec<usize>, hi: &mut Vec<usize>, inc: &mut Incumbent) {
    if !prob.cell_may_be_feasible(lo, hi) {
        return;
    }
    let center: Vec<usize> = lo.iter().zip(hi.iter()).map(|(&a, &b)| (a + b) / 2).collect();
    let p = prob.decode(&center);
    let f = inc.offer(prob, &center, &p);
    if lo == hi {
        return;
    }
    let grad = prob.gradient(&p);
    let mut ub = f;
    let mut split = None;
    let mut widest = f64::NEG_INFINITY;
    for j in 0..prob.axes.len() {
        let c = prob.value(j, center[j]);
        let up = grad[j] * (prob.value(j, hi[j]) - c);
        let down = grad[j] * (prob.value(j, lo[j]) - c);
        let gain = up.max(down);
        ub += gain;
        if hi[j] > lo[j] {
            let key = gain + 1e-15 * (hi[j] - lo[j]) as f64;
            if key > widest {
                widest = key;
                split = Some(j);
            }
        }
    }
    if ub <= inc.value {
        return;
    }
    let j = split.expect("non-singleton cell has a splittable axis");
    let mid = (lo[j] + hi[j]) / 2;
    let (old_lo, old_hi) = (lo[j], hi[j]);
    let upper_first = grad[j] > 0.0;
    for half in 0..2 {
        let take_upper = (half == 0) == upper_first;
        if take_upper {
            if mid + 1 > old_hi {
                continue;
            }
            lo[j] = mid + 1;
            hi[j] = old_hi;
        } else {
            lo[j] = old_lo;
            hi[j] = mid;
        }
        branch(prob, lo, hi, inc);
    }
    lo[j] = old_lo;
    hi[j] = old_hi;
}

fn exhaustive(prob: &Problem, inc: &mut Incumbent) {
    let dim = prob.axes.len();
    let mut idx = vec![0usize; dim];
    loop {
        let p = prob.decode(&idx);
        inc.offer(prob, &idx, &p);
        let mut j = 0;
        loop {
            if j == dim {
                return;
            }
            idx[j] += 1;
            if idx[j] < prob.grid_n {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
    }
}

/// Number of lattice axes the oracle would search for this scenario.
pub fn decision_dimension(s: &Scenario) -> usize {
    let mut dim = 0;
    for u in &s.users {
        dim += s.slots() - u.deferrables.len();
        if u.battery.as_ref().is_some_and(|b| b.capacity > 0.0) {
            dim += s.slots();
        }
    }
    if s.spot.is_some() {
        dim += s.slots();
    }
    dim
}

pub fn oracle_search(s: &Scenario, grid_n: usize, mode: Search) -> Result<OracleResult> {
    crate::model::validate(s)?;
    if grid_n < 2 {
        return Err(Error::Validation(
            "oracle grid needs at least 2 points per axis".into(),
        ));
    }
    let prob = Problem::new(s, grid_n)?;
    let mut inc = Incumbent {
        value: f64::NEG_INFINITY,
        idx: None,
        evaluated: 0,
    };
    match mode {
        Search::Exhaustive => exhaustive(&prob, &mut inc),
        Search::BranchAndBound => {
            let dim = prob.axes.len();
            let (mut lo, mut hi) = (vec![0; dim], vec![grid_n - 1; dim]);
            branch(&prob, &mut lo, &mut hi, &mut inc);
        }
    }
    let idx = inc
        .idx
        .ok_or_else(|| Error::Infeasible("no feasible lattice point".into()))?;
    let point = prob.decode(&idx);
    Ok(OracleResult {
        allocation: prob.to_allocation(&point),
        objective: inc.value,
        error_bound: prob.error_bound(),
        dimension: prob.axes.len(),
        points_evaluated: inc.evaluated,
    })
}

/// Best lattice point and its objective.
pub fn oracle_solve(s: &Scenario, grid_n: usize) -> Result<(Allocation, f64)> {
    let r = oracle_search(s, grid_n, Search::BranchAndBound)?;
    Ok((r.allocation, r.objective))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate;

    #[test]
    fn reference_fixture_on_fine_grid() {
        let s = generate::reference_t1();
        let (x, obj) = oracle_solve(&s, 1001).unwrap();
        assert!((x.q[0][0] - 2.0).abs() <= 0.01);
        assert!((obj - 4.0).abs() < 1e-3);
    }

    #[test]
    fn zero_value_user_picks_zero() {
        let mut s = generate::reference_t1();
        s.users[0].utility.b = vec![0.0];
        let (x, obj) = oracle_solve(&s, 101).unwrap();
        assert_eq!(x.q[0][0], 0.0);
        assert_eq!(obj, 0.0);
    }

    #[test]
    fn dimension_guard() {
        let s = generate::uniform(4, 2, 0);
        if decision_dimension(&s) > MAX_ORACLE_DIM {
            assert!(matches!(oracle_solve(&s, 11), Err(Error::DimensionGuard { .. })));
        }
        let big = generate::uniform(7, 1, 0);
        assert!(oracle_solve(&big, 11).is_err());
    }

    #[test]
    fn branch_and_bound_equals_brute_force() {
        for seed in 0..25 {
            let s = generate::random_small(seed, 4);
            let grid = if decision_dimension(&s) <= 3 { 21 } else { 9 };
            let bb = oracle_search(&s, grid, Search::BranchAndBound);
            let ex = oracle_search(&s, grid, Search::Exhaustive);
            // Coarse lattices can miss a narrow terminal-level band entirely.
            let (bb, ex) = match (bb, ex) {
                (Ok(bb), Ok(ex)) => (bb, ex),
                (Err(Error::Infeasible(_)), Err(Error::Infeasible(_))) => continue,
                (bb, ex) => panic!("seed {seed}: {:?} vs {:?}", bb.err(), ex.err()),
            };
            assert!(
                (bb.objective - ex.objective).abs() <= 1e-12 * (1.0 + ex.objective.abs()),
                "seed {seed}: {} vs {}",
                bb.objective,
                ex.objective
            );
        }
    }
}
