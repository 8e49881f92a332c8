//! Objective and constraint evaluation shared by every solver.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Allocation, Scenario};

pub(crate) fn check_dims(s: &Scenario, x: &Allocation) -> Result<()> {
    let (n, m) = (s.users.len(), s.slots());
    let rows_ok = |rows: &Vec<Vec<f64>>| rows.len() == n && rows.iter().all(|r| r.len() == m);
    if !rows_ok(&x.q) || !rows_ok(&x.r) || !rows_ok(&x.d) || x.supply.len() != m || x.spot.len() != m {
        return Err(Error::Dimension(format!(
            "allocation does not match {n} users x {m} slots"
        )));
    }
    Ok(())
}

/// Own generation implied by an allocation: demand not covered by spot.
fn own_generation(x: &Allocation, demand: &[f64], t: usize) -> f64 {
    (demand[t] - x.spot[t]).max(0.0)
}

/// Total welfare: utilities minus production cost minus spot outlay.
pub fn welfare(s: &Scenario, x: &Allocation) -> Result<f64> {
    check_dims(s, x)?;
    Ok(welfare_unchecked(s, x))
}

pub(crate) fn welfare_unchecked(s: &Scenario, x: &Allocation) -> f64 {
    let demand = x.net_demand();
    let mut total = 0.0;
    for (i, u) in s.users.iter().enumerate() {
        for t in 0..s.slots() {
            total += u.utility.value(t, x.q[i][t]);
        }
    }
    for t in 0..s.slots() {
        total -= s.provider.cost(t, own_generation(x, &demand, t));
        if let Some(m) = &s.spot {
            total -= m.outlay(t, x.spot[t]);
        }
    }
    total
}

/// Gradient of [`welfare`] with respect to `q`, `r`, `d` and spot purchases.
/// The `supply` field of the result is left at zero.
pub fn welfare_gradient(s: &Scenario, x: &Allocation) -> Result<Allocation> {
    check_dims(s, x)?;
    let demand = x.net_demand();
    let mut g = Allocation::for_scenario(s);
    for t in 0..s.slots() {
        let own = demand[t] - x.spot[t];
        let mc = s.provider.marginal(t, own);
        for (i, u) in s.users.iter().enumerate() {
            g.q[i][t] = u.utility.marginal(t, x.q[i][t]) - mc;
            if u.battery.is_some() {
                g.r[i][t] = -mc;
                g.d[i][t] = mc;
            }
        }
        if let Some(m) = &s.spot {
            g.spot[t] = mc - m.price(t, x.spot[t]);
        }
    }
    Ok(g)
}

/// Largest violation of each constraint family.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FeasibilityReport {
    /// Consumption and battery-rate bounds.
    pub bounds: f64,
    /// |Σ q Δ − E| over deferrable windows.
    pub deferrable: f64,
    /// Battery level below its floor (0, or the initial level at the end) or above capacity.
    pub battery_level: f64,
    /// Own generation above provider capacity.
    pub capacity: f64,
    /// Spot purchases outside `[0, g_max]`.
    pub spot: f64,
}

impl FeasibilityReport {
    pub fn max(&self) -> f64 {
        [
            self.bounds,
            self.deferrable,
            self.battery_level,
            self.capacity,
            self.spot,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn is_feasible(&self, tol: f64) -> bool {
        self.max() <= tol
    }
}

fn excess(v: f64, lo: f64, hi: f64) -> f64 {
    (lo - v).max(v - hi).max(0.0)
}

pub fn feasibility_residuals(s: &Scenario, x: &Allocation) -> Result<FeasibilityReport> {
    check_dims(s, x)?;
    let dt = s.dt();
    let mut rep = FeasibilityReport::default();
    for (i, u) in s.users.iter().enumerate() {
        for t in 0..s.slots() {
            let (lo, hi) = u.bounds(t);
            rep.bounds = rep.bounds.max(excess(x.q[i][t], lo, hi));
            let (rmax, dmax) = u
                .battery
                .as_ref()
                .map_or((0.0, 0.0), |b| (b.charge_rate_max, b.discharge_rate_max));
            rep.bounds = rep.bounds.max(excess(x.r[i][t], 0.0, rmax));
            rep.bounds = rep.bounds.max(excess(x.d[i][t], 0.0, dmax));
        }
        for w in &u.deferrables {
            let served: f64 = w.slots().map(|t| x.q[i][t] * dt).sum();
            rep.deferrable = rep.deferrable.max((served - w.energy_required).abs());
        }
        if let Some(b) = &u.battery {
            for (t, level) in b.levels(&x.r[i], &x.d[i], dt).into_iter().enumerate() {
                let floor = b.level_floor(t, x.slots());
                rep.battery_level = rep.battery_level.max(excess(level, floor, b.capacity));
            }
        }
    }
    let demand = x.net_demand();
    for t in 0..s.slots() {
        let own = own_generation(x, &demand, t);
        rep.capacity = rep.capacity.max(own - s.provider.capacity[t]);
        let gmax = s.spot.as_ref().map_or(0.0, |m| m.g_max[t]);
        rep.spot = rep.spot.max(excess(x.spot[t], 0.0, gmax));
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        Battery, DeferrableLoad, Horizon, ProviderCost, UserModel, UtilityKind, UtilityParams,
    };

    fn user(a: f64, b: f64, slots: usize) -> UserModel {
        UserModel {
            id: "u".into(),
            utility: UtilityParams {
                kind: UtilityKind::Quadratic,
                a: vec![a; slots],
                b: vec![b; slots],
            },
            q_min: vec![0.0; slots],
            q_max: vec![10.0; slots],
            deferrables: vec![],
            battery: None,
        }
    }

    fn scenario(users: Vec<UserModel>, slots: usize) -> Scenario {
        Scenario {
            horizon: Horizon {
                slots,
                slot_duration: 1.0,
            },
            users,
            provider: ProviderCost {
                c1: vec![0.0; slots],
                c2: vec![1.0; slots],
                capacity: vec![100.0; slots],
            },
            spot: None,
            seed: 0,
        }
    }

    #[test]
    fn two_user_hand_value() {
        let s = scenario(vec![user(1.0, 2.0, 1), user(1.0, 2.0, 1)], 1);
        let mut x = Allocation::for_scenario(&s);
        x.q[0][0] = 1.0;
        x.q[1][0] = 1.0;
        assert!((welfare(&s, &x).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_allocation_has_zero_welfare() {
        let s = scenario(vec![user(1.0, 2.0, 3), user(2.0, 1.0, 3)], 3);
        assert_eq!(welfare(&s, &Allocation::for_scenario(&s)).unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let s = scenario(vec![user(1.0, 2.0, 2)], 2);
        let x = Allocation::zeros(1, 3);
        assert!(matches!(welfare(&s, &x), Err(Error::Dimension(_))));
        assert!(feasibility_residuals(&s, &x).is_err());
    }

    #[test]
    fn hand_built_feasible_point_has_zero_residuals() {
        let mut u = user(1.0, 2.0, 3);
        u.deferrables.push(DeferrableLoad {
            window_start: 1,
            window_end: 2,
            energy_required: 2.0,
            per_slot_max: 1.5,
        });
        u.battery = Some(Battery {
            capacity: 2.0,
            charge_rate_max: 1.0,
            discharge_rate_max: 1.0,
            efficiency: 1.0,
            initial_level: 0.5,
        });
        let s = scenario(vec![u], 3);
        let mut x = Allocation::for_scenario(&s);
        x.q[0] = vec![3.0, 1.25, 0.75];
        x.r[0] = vec![1.0, 0.0, 0.0];
        x.d[0] = vec![0.0, 0.5, 0.5];
        assert_eq!(feasibility_residuals(&s, &x).unwrap().max(), 0.0);
    }

    #[test]
    fn box_violation_reported() {
        let s = scenario(vec![user(1.0, 2.0, 2)], 2);
        let mut x = Allocation::for_scenario(&s);
        x.q[0][1] = 10.5;
        let rep = feasibility_residuals(&s, &x).unwrap();
        assert!((rep.bounds - 0.5).abs() < 1e-12);
        assert_eq!(rep.deferrable, 0.0);
    }

    #[test]
    fn battery_deficit_reported() {
        let mut u = user(1.0, 2.0, 3);
        u.battery = Some(Battery {
            capacity: 5.0,
            charge_rate_max: 2.0,
            discharge_rate_max: 2.0,
            efficiency: 0.9,
            initial_level: 1.0,
        });
        let s = scenario(vec![u], 3);
        let mut x = Allocation::for_scenario(&s);
        x.d[0] = vec![0.75, 0.75, 0.0];
        x.r[0] = vec![0.0, 0.0, 2.0];
        let rep = feasibility_residuals(&s, &x).unwrap();
        assert!((rep.battery_level - 0.5).abs() < 1e-12);
    }

    #[test]
    fn capacity_violation_reported() {
        let mut s = scenario(vec![user(1.0, 2.0, 1)], 1);
        s.provider.capacity[0] = 1.0;
        let mut x = Allocation::for_scenario(&s);
        x.q[0][0] = 1.75;
        assert!((feasibility_residuals(&s, &x).unwrap().capacity - 0.75).abs() < 1e-12);
    }
}
