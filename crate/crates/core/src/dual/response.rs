//! Agent best responses to a price vector.

use microlp::{ComparisonOp, OptimizationDirection, Problem};

use crate::error::{Error, Result};
use crate::model::{Battery, PriceSignal, ProviderCost, SpotMarket, UserModel};

/// A user's reply to a price vector.
#[derive(Debug, Clone, PartialEq)]
pub struct UserSchedule {
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub d: Vec<f64>,
    /// `Σ_t u_t(q_t) - p_t (q_t + r_t - d_t)` at the reply.
    pub surplus: f64,
    /// `∂q_t/∂p_t` of the consumption reply (diagonal, `<= 0`).
    pub slope: Vec<f64>,
}

impl UserSchedule {
    pub fn draw(&self) -> Vec<f64> {
        (0..self.q.len())
            .map(|t| self.q[t] + self.r[t] - self.d[t])
            .collect()
    }
}

/// Consumption maximizing `u_t(q) - lambda q` on `[lo, hi]`.
fn clamped_demand(u: &UserModel, t: usize, lambda: f64, lo: f64, hi: f64) -> f64 {
    let q = u.utility.demand_at(t, lambda);
    if q.is_nan() {
        lo
    } else {
        q.clamp(lo, hi)
    }
}

fn interior(q: f64, lo: f64, hi: f64) -> bool {
    const EDGE: f64 = 1e-12;
    q > lo + EDGE * (1.0 + lo.abs()) && q < hi - EDGE * (1.0 + hi.abs())
}

/// Window allocation `q_t = clamp(D_t(p_t + mu))` with `Σ q_t = target`,
/// by bisection on the window multiplier `mu`.
fn solve_window(u: &UserModel, p: &[f64], slots: &[usize], target: f64) -> Vec<f64> {
    let bounds: Vec<(f64, f64)> = slots.iter().map(|&t| u.bounds(t)).collect();
    let at = |mu: f64| -> Vec<f64> {
        slots
            .iter()
            .zip(&bounds)
            .map(|(&t, &(lo, hi))| clamped_demand(u, t, p[t] + mu, lo, hi))
            .collect()
    };
    let mut mu_lo = f64::INFINITY;
    let mut mu_hi = f64::NEG_INFINITY;
    for (&t, &(lo, hi)) in slots.iter().zip(&bounds) {
        mu_lo = mu_lo.min(u.utility.marginal(t, hi) - p[t]);
        mu_hi = mu_hi.max(u.utility.marginal(t, lo) - p[t]);
    }
    mu_lo -= 1.0;
    mu_hi += 1.0;
    for _ in 0..200 {
        let mid = 0.5 * (mu_lo + mu_hi);
        if mid <= mu_lo || mid >= mu_hi {
            break;
        }
        if at(mid).iter().sum::<f64>() > target {
            mu_lo = mid;
        } else {
            mu_hi = mid;
        }
    }
    let mut q = at(0.5 * (mu_lo + mu_hi));
    // Push the rounding residue onto slots with room so the equality is exact.
    let mut residue = target - q.iter().sum::<f64>();
    for (v, &(lo, hi)) in q.iter_mut().zip(&bounds) {
        if residue == 0.0 {
            break;
        }
        let moved = (*v + residue).clamp(lo, hi);
        residue -= moved - *v;
        *v = moved;
    }
    q
}

/// Diagonal of `∂q/∂p` over one window: `-s_t + s_t^2 / Σ s` on interior slots.
fn window_slopes(u: &UserModel, slots: &[usize], q: &[f64]) -> Vec<f64> {
    let s: Vec<f64> = slots
        .iter()
        .zip(q)
        .map(|(&t, &v)| {
            let (lo, hi) = u.bounds(t);
            if interior(v, lo, hi) {
                u.utility.demand_slope(t, v)
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = s.iter().sum();
    s.iter()
        .map(|&st| if total > 0.0 { -st + st * st / total } else { 0.0 })
        .collect()
}

/// Price-taking storage arbitrage: minimize `Σ p_t (r_t - d_t)` subject to the
/// rate boxes and the level bounds (including the cyclic end-of-horizon floor).
pub(crate) fn battery_response(b: &Battery, p: &[f64], dt: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = p.len();
    if b.capacity <= 0.0 || (b.charge_rate_max <= 0.0 && b.discharge_rate_max <= 0.0) {
        return Ok((vec![0.0; n], vec![0.0; n]));
    }
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let r: Vec<_> = (0..n)
        .map(|t| lp.add_var(p[t], (0.0, b.charge_rate_max)))
        .collect();
    let d: Vec<_> = (0..n)
        .map(|t| lp.add_var(-p[t], (0.0, b.discharge_rate_max)))
        .collect();
    for t in 0..n {
        let mut expr = Vec::with_capacity(2 * (t + 1));
        for k in 0..=t {
            expr.push((r[k], b.efficiency * dt));
            expr.push((d[k], -dt));
        }
        lp.add_constraint(expr.as_slice(), ComparisonOp::Le, b.capacity - b.initial_level);
        let floor = b.level_floor(t, n) - b.initial_level;
        lp.add_constraint(expr.as_slice(), ComparisonOp::Ge, floor);
    }
    let sol = lp
        .solve()
        .map_err(|e| Error::Infeasible(format!("battery schedule: {e}")))?
        .into_solution()
        .map_err(|e| Error::Infeasible(format!("battery schedule: {e:?}")))?;
    let mut rs: Vec<f64> = r.iter().map(|&v| sol.var_value(v).max(0.0)).collect();
    let mut ds: Vec<f64> = d.iter().map(|&v| sol.var_value(v).max(0.0)).collect();
    // Simultaneous charge and discharge is never strictly better at p >= 0;
    // net it out keeping the level path.
    for t in 0..n {
        let (rt, d_t) = (rs[t], ds[t]);
        if rt > 0.0 && d_t > 0.0 {
            if b.efficiency * rt >= d_t {
                rs[t] = rt - d_t / b.efficiency;
                ds[t] = 0.0;
            } else {
                ds[t] = d_t - b.efficiency * rt;
                rs[t] = 0.0;
            }
        }
    }
    Ok((rs, ds))
}

/// The user's constrained maximizer of `Σ_t [u_t(q_t) - p_t (q_t + r_t - d_t)]`.
///
/// Consumption outside deferrable windows is the clamped inverse marginal
/// utility; inside a window the window multiplier is found by bisection; the
/// battery schedule is the arbitrage LP. Consumption and storage separate
/// because the user's constraints do not couple them.
pub fn user_best_response(u: &UserModel, p: &PriceSignal, dt: f64) -> Result<UserSchedule> {
    let n = p.len();
    let p = p.as_slice();
    let mut q = vec![0.0; n];
    let mut slope = vec![0.0; n];
    for t in 0..n {
        if u.window_of(t).is_none() {
            let (lo, hi) = u.bounds(t);
            q[t] = clamped_demand(u, t, p[t], lo, hi);
            if interior(q[t], lo, hi) {
                slope[t] = -u.utility.demand_slope(t, q[t]);
            }
        }
    }
    for w in &u.deferrables {
        let slots: Vec<usize> = w.slots().collect();
        let qw = solve_window(u, p, &slots, w.energy_required / dt);
        let sw = window_slopes(u, &slots, &qw);
        for (k, &t) in slots.iter().enumerate() {
            q[t] = qw[k];
            slope[t] = sw[k];
        }
    }
    let (r, d) = match &u.battery {
        Some(b) => battery_response(b, p, dt)?,
        None => (vec![0.0; n], vec![0.0; n]),
    };
    let surplus = (0..n)
        .map(|t| u.utility.value(t, q[t]) - p[t] * (q[t] + r[t] - d[t]))
        .sum();
    Ok(UserSchedule {
        q,
        r,
        d,
        surplus,
        slope,
    })
}

/// `supply_t = clamp((p_t - c1_t) / c2_t, 0, capacity_t)`.
pub fn provider_supply_response(c: &ProviderCost, p: &PriceSignal) -> Vec<f64> {
    (0..p.len())
        .map(|t| ((p[t] - c.c1[t]) / c.c2[t]).clamp(0.0, c.capacity[t]))
        .collect()
}

/// `∂S_t/∂p_t`: `1/c2` where the supply response is interior, else 0.
pub(crate) fn supply_slope(c: &ProviderCost, p: &PriceSignal) -> Vec<f64> {
    provider_supply_response(c, p)
        .iter()
        .enumerate()
        .map(|(t, &s)| {
            if interior(s, 0.0, c.capacity[t]) {
                1.0 / c.c2[t]
            } else {
                0.0
            }
        })
        .collect()
}

/// Purchases maximizing `p g - pi0 g - (kappa/2) g^2` on `[0, g_max]`.
pub(crate) fn spot_purchase(m: &SpotMarket, p: &PriceSignal) -> Vec<f64> {
    (0..p.len())
        .map(|t| {
            if m.kappa[t] > 0.0 {
                ((p[t] - m.pi0[t]) / m.kappa[t]).clamp(0.0, m.g_max[t])
            } else if p[t] > m.pi0[t] {
                m.g_max[t]
            } else {
                0.0
            }
        })
        .collect()
}

pub(crate) fn spot_slope(m: &SpotMarket, p: &PriceSignal) -> Vec<f64> {
    spot_purchase(m, p)
        .iter()
        .enumerate()
        .map(|(t, &g)| {
            if m.kappa[t] > 0.0 && interior(g, 0.0, m.g_max[t]) {
                1.0 / m.kappa[t]
            } else {
                0.0
            }
        })
        .collect()
}

/// `Σ_t p_t S_t - c_t(S_t)`.
pub(crate) fn provider_profit(c: &ProviderCost, p: &PriceSignal, supply: &[f64]) -> f64 {
    (0..p.len())
        .map(|t| p[t] * supply[t] - c.cost(t, supply[t]))
        .sum()
}

/// `p_t' = max(0, p_t + gamma (demand_t - supply_t))`.
pub fn price_update(p: &PriceSignal, demand: &[f64], supply: &[f64], gamma: f64) -> PriceSignal {
    PriceSignal(
        (0..p.len())
            .map(|t| (p[t] + gamma * (demand[t] - supply[t])).max(0.0))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate;
    use crate::model::DeferrableLoad;

    fn t1_user() -> UserModel {
        generate::reference_t1().users.remove(0)
    }

    #[test]
    fn closed_form_quadratic() {
        let u = t1_user();
        let r = user_best_response(&u, &PriceSignal(vec![1.0]), 1.0).unwrap();
        assert_eq!(r.q, vec![3.0]);
        assert_eq!(r.slope, vec![-1.0]);
        let r = user_best_response(&u, &PriceSignal(vec![4.0]), 1.0).unwrap();
        assert_eq!(r.q, vec![0.0]);
    }

    #[test]
    fn supply_cases() {
        let c = generate::reference_t1().provider;
        assert_eq!(provider_supply_response(&c, &PriceSignal(vec![0.0])), vec![0.0]);
        assert_eq!(provider_supply_response(&c, &PriceSignal(vec![2.0])), vec![2.0]);
        assert_eq!(provider_supply_response(&c, &PriceSignal(vec![1e9])), vec![100.0]);
    }

    #[test]
    fn price_update_cases() {
        let p = PriceSignal(vec![1.0, 0.0, 3.0]);
        let next = price_update(&p, &[2.0, 0.0, 1.0], &[2.0, 1.0, 1.0], 0.1);
        assert_eq!(next.0, vec![1.0, 0.0, 3.0]);
        let next = price_update(&PriceSignal(vec![1.0]), &[3.0], &[1.0], 0.1);
        assert!((next[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn window_meets_energy_exactly() {
        let mut u = generate::uniform(4, 1, 3).users.remove(0);
        u.deferrables = vec![DeferrableLoad {
            window_start: 0,
            window_end: 3,
            energy_required: 7.3,
            per_slot_max: 2.5,
        }];
        let r = user_best_response(&u, &PriceSignal(vec![0.5, 3.0, 1.0, 9.0]), 1.0).unwrap();
        assert!((r.q.iter().sum::<f64>() - 7.3).abs() < 1e-12);
        for t in 0..4 {
            assert!(r.q[t] >= 0.0 && r.q[t] <= 2.5);
        }
        // Cheaper slots receive at least as much as dearer ones under equal a, b.
        assert!(r.q[0] >= r.q[3]);
    }

    #[test]
    fn battery_arbitrage_direction() {
        let b = Battery {
            capacity: 2.0,
            charge_rate_max: 1.0,
            discharge_rate_max: 1.0,
            efficiency: 1.0,
            initial_level: 1.0,
        };
        let (r, d) = battery_response(&b, &[5.0, 1.0], 1.0).unwrap();
        assert!(d[0] > 0.99 && r[1] > 0.99, "{r:?} {d:?}");
        assert!(r[0].abs() < 1e-12 && d[1].abs() < 1e-12);
    }
}
