//! Scenario JSON ingestion and validation, allocation export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Allocation, Scenario, UtilityKind};

/// Reads, normalizes and validates a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scenario(&text)
}

pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let mut s: Scenario = serde_json::from_str(text)?;
    normalize(&mut s)?;
    validate(&s)?;
    Ok(s)
}

pub fn scenario_to_json(s: &Scenario) -> String {
    let mut text = serde_json::to_string_pretty(s).expect("scenario serializes");
    text.push('\n');
    text
}

pub fn save_scenario(s: &Scenario, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, scenario_to_json(s)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// `user,slot,q,r,d` table. Each slot also gets a `provider` row that carries
/// own supply in the `q` column and spot purchases in the `r` column.
pub fn allocation_to_csv(s: &Scenario, x: &Allocation) -> String {
    let mut out = String::from("user,slot,q,r,d\n");
    for (i, u) in s.users.iter().enumerate() {
        for t in 0..x.slots() {
            let _ = writeln!(out, "{},{t},{},{},{}", u.id, x.q[i][t], x.r[i][t], x.d[i][t]);
        }
    }
    for t in 0..x.slots() {
        let _ = writeln!(out, "provider,{t},{},{},0", x.supply[t], x.spot[t]);
    }
    out
}

fn broadcast(v: &mut Vec<f64>, slots: usize, what: &str) -> Result<()> {
    if v.len() == 1 && slots > 1 {
        *v = vec![v[0]; slots];
    }
    if v.len() != slots {
        return Err(Error::validation(format!(
            "{what} has {} entries, expected {slots}",
            v.len()
        )));
    }
    Ok(())
}

/// Expands scalar per-slot fields to full length.
fn normalize(s: &mut Scenario) -> Result<()> {
    let n = s.horizon.slots;
    if n == 0 {
        return Err(Error::validation("horizon must have at least one slot"));
    }
    for u in &mut s.users {
        broadcast(&mut u.utility.a, n, &format!("user {} utility.a", u.id))?;
        broadcast(&mut u.utility.b, n, &format!("user {} utility.b", u.id))?;
        broadcast(&mut u.q_min, n, &format!("user {} q_min", u.id))?;
        broadcast(&mut u.q_max, n, &format!("user {} q_max", u.id))?;
    }
    broadcast(&mut s.provider.c1, n, "provider.c1")?;
    broadcast(&mut s.provider.c2, n, "provider.c2")?;
    broadcast(&mut s.provider.capacity, n, "provider.capacity")?;
    if let Some(m) = &mut s.spot {
        broadcast(&mut m.pi0, n, "spot.pi0")?;
        broadcast(&mut m.kappa, n, "spot.kappa")?;
        broadcast(&mut m.g_max, n, "spot.g_max")?;
    }
    Ok(())
}

fn finite_nonneg(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite() && *x >= 0.0)
}

fn finite_pos(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite() && *x > 0.0)
}

/// Checks every scenario invariant and reports the first violation.
pub fn validate(s: &Scenario) -> Result<()> {
    let n = s.horizon.slots;
    let dt = s.horizon.slot_duration;
    if n == 0 {
        return Err(Error::validation("horizon must have at least one slot"));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::validation("slot_duration must be positive"));
    }
    if s.users.is_empty() {
        return Err(Error::validation("scenario has no users"));
    }
    let lens = |v: &[f64], what: &str| -> Result<()> {
        if v.len() != n {
            Err(Error::validation(format!(
                "{what} has {} entries, expected {n}",
                v.len()
            )))
        } else {
            Ok(())
        }
    };
    for u in &s.users {
        let id = &u.id;
        lens(&u.utility.a, "utility.a")?;
        lens(&u.utility.b, "utility.b")?;
        lens(&u.q_min, "q_min")?;
        lens(&u.q_max, "q_max")?;
        if !finite_pos(&u.utility.a) {
            return Err(Error::validation(format!(
                "user {id}: utility.a must be positive"
            )));
        }
        if !finite_nonneg(&u.utility.b) {
            return Err(Error::validation(format!(
                "user {id}: utility.b must be nonnegative"
            )));
        }
        if !finite_nonneg(&u.q_min) || u.q_max.iter().any(|x| !x.is_finite()) {
            return Err(Error::validation(format!("user {id}: q_min must be nonnegative")));
        }
        if u.q_min.iter().zip(&u.q_max).any(|(lo, hi)| lo > hi) {
            return Err(Error::validation(format!("user {id}: q_min exceeds q_max")));
        }
        if u.utility.kind == UtilityKind::Logarithmic && u.q_min.iter().any(|&x| x < 0.0) {
            return Err(Error::validation(format!("user {id}: negative bound")));
        }
        for (k, w) in u.deferrables.iter().enumerate() {
            if w.window_start > w.window_end {
                return Err(Error::validation(format!(
                    "user {id}: deferrable {k} window_start after window_end"
                )));
            }
            if w.window_end >= n {
                return Err(Error::validation(format!(
                    "user {id}: deferrable window exceeds horizon"
                )));
            }
            if !(w.energy_required.is_finite() && w.energy_required >= 0.0) {
                return Err(Error::validation(format!(
                    "user {id}: deferrable {k} energy_required must be nonnegative"
                )));
            }
            if !(w.per_slot_max.is_finite() && w.per_slot_max > 0.0) {
                return Err(Error::validation(format!(
                    "user {id}: deferrable {k} per_slot_max must be positive"
                )));
            }
            let width = (w.window_end - w.window_start + 1) as f64;
            let (mut lo, mut hi) = (0.0, 0.0);
            for t in w.slots() {
                lo += u.q_min[t] * dt;
                hi += u.q_max[t].min(w.per_slot_max) * dt;
            }
            let slack = 1e-9 * (1.0 + w.energy_required);
            if w.energy_required > width * w.per_slot_max * dt + slack
                || w.energy_required > hi + slack
                || w.energy_required < lo - slack
            {
                return Err(Error::validation(format!(
                    "user {id}: infeasible deferrable load (window {}..={}, {} kWh)",
                    w.window_start, w.window_end, w.energy_required
                )));
            }
            for (j, other) in u.deferrables.iter().enumerate().skip(k + 1) {
                if other.window_start <= w.window_end && w.window_start <= other.window_end {
                    return Err(Error::validation(format!(
                        "user {id}: overlapping deferrable windows {k} and {j}"
                    )));
                }
            }
        }
        if let Some(b) = &u.battery {
            let ok = b.capacity.is_finite()
                && b.capacity >= 0.0
                && b.charge_rate_max.is_finite()
                && b.charge_rate_max >= 0.0
                && b.discharge_rate_max.is_finite()
                && b.discharge_rate_max >= 0.0;
            if !ok {
                return Err(Error::validation(format!(
                    "user {id}: battery capacity and rates must be nonnegative"
                )));
            }
            if !(b.efficiency > 0.0 && b.efficiency <= 1.0) {
                return Err(Error::validation(format!(
                    "user {id}: battery efficiency must lie in (0, 1]"
                )));
            }
            if !(b.initial_level >= 0.0 && b.initial_level <= b.capacity) {
                return Err(Error::validation(format!(
                    "user {id}: battery initial_level outside [0, capacity]"
                )));
            }
        }
    }
    let p = &s.provider;
    lens(&p.c1, "provider.c1")?;
    lens(&p.c2, "provider.c2")?;
    lens(&p.capacity, "provider.capacity")?;
    if !finite_nonneg(&p.c1) {
        return Err(Error::validation("provider.c1 must be nonnegative"));
    }
    if !finite_pos(&p.c2) {
        return Err(Error::validation("provider.c2 must be positive"));
    }
    if !finite_nonneg(&p.capacity) {
        return Err(Error::validation("provider.capacity must be nonnegative"));
    }
    if let Some(m) = &s.spot {
        lens(&m.pi0, "spot.pi0")?;
        lens(&m.kappa, "spot.kappa")?;
        lens(&m.g_max, "spot.g_max")?;
        if !finite_nonneg(&m.pi0) || !finite_nonneg(&m.kappa) || !finite_nonneg(&m.g_max) {
            return Err(Error::validation("spot parameters must be nonnegative"));
        }
    }
    Ok(())
}
