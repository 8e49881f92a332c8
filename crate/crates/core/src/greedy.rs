//! Myopic slot-by-slot scheduling and an a posteriori bound on its optimality gap.
//!
//! Each slot clears its own market: consumption responds to a slot price, the
//! provider supplies at marginal cost, and the clearing price becomes the slot
//! multiplier `λ̂_t`. Weak duality then bounds the loss of the greedy schedule by
//! `D(λ̂) - W(x_greedy)`.

use serde::Serialize;

use crate::dual::dual_value;
use crate::error::{Error, Result};
use crate::model::{validate, welfare_unchecked, Allocation, PriceSignal, Scenario};

#[derive(Debug, Clone, Serialize)]
pub struct GreedyResult {
    pub allocation: Allocation,
    /// Clearing price of each slot's static problem.
    pub multipliers: PriceSignal,
    pub welfare: f64,
}

/// Consumption band of one user in one slot.
#[derive(Clone, Copy)]
struct Band {
    lo: f64,
    hi: f64,
}

/// One slot's static market: fixed extra load plus price-responsive users.
struct SlotMarket<'a> {
    s: &'a Scenario,
    t: usize,
    bands: &'a [Band],
}

impl SlotMarket<'_> {
    fn consumption(&self, i: usize, lambda: f64) -> f64 {
        let b = self.bands[i];
        self.s.users[i]
            .utility
            .demand_at(self.t, lambda)
            .clamp(b.lo, b.hi)
    }

    fn demand(&self, lambda: f64, extra: f64) -> f64 {
        extra
            + (0..self.bands.len())
                .map(|i| self.consumption(i, lambda))
                .sum::<f64>()
    }

    fn floor_demand(&self, extra: f64) -> f64 {
        extra + self.bands.iter().map(|b| b.lo).sum::<f64>()
    }

    /// Price at which demand meets the provider's marginal cost, raised until
    /// demand fits under capacity. Returns `None` when even the demand floor
    /// exceeds capacity.
    fn clear(&self, extra: f64) -> Option<f64> {
        let cap = self.s.provider.capacity[self.t];
        if self.floor_demand(extra) > cap + 1e-12 {
            return None;
        }
        let excess = |lambda: f64| lambda - self.s.provider.marginal(self.t, self.demand(lambda, extra));
        let mut hi = self.s.provider.marginal(self.t, cap.max(0.0)) + 1.0;
        for (i, u) in self.s.users.iter().enumerate() {
            hi = hi.max(u.utility.marginal(self.t, self.bands[i].lo.max(0.0)) + 1.0);
        }
        let lambda = bisect(0.0, hi, |l| excess(l) >= 0.0);
        if self.demand(lambda, extra) <= cap {
            return Some(lambda);
        }
        Some(bisect(lambda, hi, |l| self.demand(l, extra) <= cap))
    }
}

/// Smallest point of `[lo, hi]` where the monotone predicate holds (`hi` side
/// of the final bracket).
fn bisect(mut lo: f64, mut hi: f64, pred: impl Fn(f64) -> bool) -> f64 {
    if pred(lo) {
        return lo;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if pred(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Greedy schedule of `s` (any spot market is ignored).
pub fn greedy_solve(s: &Scenario) -> Result<GreedyResult> {
    validate(s)?;
    let s = &s.without_spot();
    let (n_users, slots, dt) = (s.users.len(), s.slots(), s.dt());
    let mut x = Allocation::for_scenario(s);
    let mut lambdas = Vec::with_capacity(slots);
    // Energy still owed on each user's windows.
    let mut owed: Vec<Vec<f64>> = s
        .users
        .iter()
        .map(|u| u.deferrables.iter().map(|w| w.energy_required).collect())
        .collect();
    let mut levels: Vec<f64> = s
        .users
        .iter()
        .map(|u| u.battery.as_ref().map_or(0.0, |b| b.initial_level))
        .collect();

    for t in 0..slots {
        let bands: Vec<Band> = s
            .users
            .iter()
            .enumerate()
            .map(|(i, u)| {
                let (lo, hi) = u.bounds(t);
                match u.window_of(t) {
                    Some(k) => {
                        let w = &u.deferrables[k];
                        let later: f64 = (t + 1..=w.window_end).map(|tau| u.bounds(tau).1).sum();
                        let rest = owed[i][k] / dt;
                        let must = (rest - later).max(lo);
                        Band {
                            lo: must.min(hi),
                            hi: rest.min(hi).max(must.min(hi)),
                        }
                    }
                    None => Band { lo, hi },
                }
            })
            .collect();
        let market = SlotMarket { s, t, bands: &bands };

        // Battery draw ranges; slot 0 has no price history and idles.
        let average = (t > 0).then(|| lambdas.iter().sum::<f64>() / t as f64);
        let mut draw = vec![0.0; n_users];
        let mut ranges = vec![(0.0, 0.0); n_users];
        for (i, u) in s.users.iter().enumerate() {
            let Some(b) = &u.battery else { continue };
            let level = levels[i];
            let room = (b.capacity - level).max(0.0) / (b.efficiency * dt);
            let hi = b.charge_rate_max.min(room);
            // Level needed after this slot so the terminal floor stays reachable.
            let later = (slots - 1 - t) as f64;
            let need = (b.initial_level - b.efficiency * b.charge_rate_max * dt * later)
                .max(b.level_floor(t, slots));
            let lo = if level >= need {
                -b.discharge_rate_max.min((level - need) / dt)
            } else {
                ((need - level) / (b.efficiency * dt)).min(hi)
            };
            ranges[i] = (lo, hi.max(lo));
            draw[i] = lo.max(0.0);
        }
        if let Some(avg) = average {
            for i in 0..n_users {
                let (lo, hi) = ranges[i];
                if lo >= hi {
                    continue;
                }
                let others: f64 = draw
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, v)| v)
                    .sum();
                let cap_room = s.provider.capacity[t] - market.floor_demand(others);
                let hi = hi.min(cap_room).max(lo);
                let price = |v: f64| market.clear(others + v).unwrap_or(f64::INFINITY);
                // Move the clearing price toward the running average.
                draw[i] = if price(lo) >= avg {
                    lo
                } else if price(hi) <= avg {
                    hi
                } else {
                    bisect(lo, hi, |v| price(v) >= avg)
                };
            }
        }
        let extra: f64 = draw.iter().sum();
        let lambda = market.clear(extra).ok_or_else(|| {
            Error::validation(format!("slot {t}: committed load exceeds provider capacity"))
        })?;
        lambdas.push(lambda);

        for (i, u) in s.users.iter().enumerate() {
            let q = market.consumption(i, lambda);
            x.q[i][t] = q;
            if let Some(k) = u.window_of(t) {
                owed[i][k] -= q * dt;
                if t == u.deferrables[k].window_end {
                    owed[i][k] = 0.0;
                }
            }
            if let Some(b) = &u.battery {
                let v = draw[i];
                if v >= 0.0 {
                    x.r[i][t] = v;
                } else {
                    x.d[i][t] = -v;
                }
                levels[i] = b.step(levels[i], x.r[i][t], x.d[i][t], dt);
            }
        }
    }
    x.settle_supply();
    let welfare = welfare_unchecked(s, &x);
    Ok(GreedyResult {
        allocation: x,
        multipliers: PriceSignal(lambdas),
        welfare,
    })
}

/// `D(λ̂) - W(x)`: by weak duality at least the true optimality gap. When
/// greedy is optimal the difference is rounding noise, so it is floored at 0.
pub fn gap_upper_bound(s: &Scenario, result: &GreedyResult) -> Result<f64> {
    let s = s.without_spot();
    let bound = dual_value(&s, &result.multipliers)? - welfare_unchecked(&s, &result.allocation);
    Ok(bound.max(0.0))
}
