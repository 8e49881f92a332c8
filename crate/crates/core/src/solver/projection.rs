//! Euclidean projections onto the per-user constraint sets.

use crate::error::{Error, Result};
use crate::model::{check_dims, Allocation, Scenario};

/// Points within this distance of a constraint are treated as on it.
const SNAP: f64 = 1e-12;

/// Projects `y` onto `{x : Σ x = target, lo <= x <= hi}` in place.
///
/// Sorting-based: `φ(τ) = Σ clamp(y - τ, lo, hi)` is piecewise linear and
/// nonincreasing with breakpoints at `y - hi` and `y - lo`; the breakpoints are
/// sorted (ties by slot index) and `τ` is interpolated on the bracketing piece.
pub fn project_capped_simplex(y: &mut [f64], lo: &[f64], hi: &[f64], target: f64) -> Result<()> {
    let (min_sum, max_sum): (f64, f64) = (lo.iter().sum(), hi.iter().sum());
    let scale = 1.0 + target.abs();
    if target < min_sum - 1e-9 * scale || target > max_sum + 1e-9 * scale {
        return Err(Error::Infeasible(format!(
            "window target {target} outside [{min_sum}, {max_sum}]"
        )));
    }
    let inside = y
        .iter()
        .zip(lo.iter().zip(hi))
        .all(|(&v, (&l, &h))| v >= l && v <= h);
    let sum: f64 = y.iter().sum();
    if inside && (sum - target).abs() <= SNAP * scale {
        return Ok(());
    }
    let phi = |tau: f64| -> f64 {
        y.iter()
            .zip(lo.iter().zip(hi))
            .map(|(&v, (&l, &h))| (v - tau).clamp(l, h))
            .sum()
    };
    let mut breaks: Vec<(f64, usize)> = Vec::with_capacity(2 * y.len());
    for (i, ((&v, &l), &h)) in y.iter().zip(lo).zip(hi).enumerate() {
        breaks.push((v - h, i));
        breaks.push((v - l, i));
    }
    breaks.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    // φ(first) = Σ hi and φ(last) = Σ lo; find the piece containing target.
    let (mut left, mut right) = (0usize, breaks.len() - 1);
    if target >= max_sum {
        left = 0;
        right = 0;
    } else if target <= min_sum {
        left = right;
    } else {
        while right - left > 1 {
            let mid = (left + right) / 2;
            if phi(breaks[mid].0) >= target {
                left = mid;
            } else {
                right = mid;
            }
        }
    }
    let (b0, b1) = (breaks[left].0, breaks[right].0);
    let (f0, f1) = (phi(b0), phi(b1));
    let tau = if f0 > f1 {
        b0 + (f0 - target) / (f0 - f1) * (b1 - b0)
    } else {
        b0
    };
    for ((v, &l), &h) in y.iter_mut().zip(lo).zip(hi) {
        *v = (*v - tau).clamp(l, h);
    }
    Ok(())
}

/// Exact projection onto boxes and deferrable equalities (battery levels and
/// provider capacity are not part of this set).
pub(crate) fn project_inner(s: &Scenario, x: &mut Allocation) -> Result<()> {
    let dt = s.dt();
    for (i, u) in s.users.iter().enumerate() {
        for t in 0..s.slots() {
            if u.window_of(t).is_none() {
                let (lo, hi) = u.bounds(t);
                x.q[i][t] = x.q[i][t].clamp(lo, hi);
            }
        }
        for w in &u.deferrables {
            let slots: Vec<usize> = w.slots().collect();
            let lo: Vec<f64> = slots.iter().map(|&t| u.bounds(t).0).collect();
            let hi: Vec<f64> = slots.iter().map(|&t| u.bounds(t).1).collect();
            let mut y: Vec<f64> = slots.iter().map(|&t| x.q[i][t]).collect();
            project_capped_simplex(&mut y, &lo, &hi, w.energy_required / dt)?;
            for (&t, v) in slots.iter().zip(y) {
                x.q[i][t] = v;
            }
        }
        let (rmax, dmax) = u
            .battery
            .as_ref()
            .map_or((0.0, 0.0), |b| (b.charge_rate_max, b.discharge_rate_max));
        for t in 0..s.slots() {
            x.r[i][t] = x.r[i][t].clamp(0.0, rmax);
            x.d[i][t] = x.d[i][t].clamp(0.0, dmax);
        }
    }
    let spot_cap = |t: usize| s.spot.as_ref().map_or(0.0, |m| m.g_max[t]);
    for t in 0..s.slots() {
        x.spot[t] = x.spot[t].clamp(0.0, spot_cap(t));
    }
    Ok(())
}

/// Forward pass trimming charge (on overflow) or discharge (on deficit) so the
/// level stays in `[0, capacity]`, then a backward pass restoring the terminal
/// level (an idle battery when that fails). Leaves feasible schedules untouched.
pub(crate) fn clip_battery_levels(s: &Scenario, x: &mut Allocation) {
    let dt = s.dt();
    let n = s.slots();
    for (i, u) in s.users.iter().enumerate() {
        let Some(b) = &u.battery else { continue };
        let mut level = b.initial_level;
        for t in 0..n {
            let next = b.step(level, x.r[i][t], x.d[i][t], dt);
            if next > b.capacity + SNAP {
                let cut = (next - b.capacity) / (b.efficiency * dt);
                x.r[i][t] = (x.r[i][t] - cut).max(0.0);
            } else if next < -SNAP {
                x.d[i][t] = (x.d[i][t] + next / dt).max(0.0);
            }
            level = b.step(level, x.r[i][t], x.d[i][t], dt).clamp(0.0, b.capacity);
        }
        let mut levels = b.levels(&x.r[i], &x.d[i], dt);
        let mut short = b.initial_level - levels[n - 1];
        if short <= SNAP {
            continue;
        }
        for t in (0..n).rev() {
            let headroom = levels[t..]
                .iter()
                .fold(f64::INFINITY, |m, &l| m.min(b.capacity - l))
                .max(0.0);
            let less_discharge = (x.d[i][t] * dt).min(short).min(headroom);
            let more_charge = ((b.charge_rate_max - x.r[i][t]) * b.efficiency * dt)
                .max(0.0)
                .min(short - less_discharge)
                .min(headroom - less_discharge);
            x.d[i][t] -= less_discharge / dt;
            x.r[i][t] += more_charge / (b.efficiency * dt);
            let raised = less_discharge + more_charge;
            for l in &mut levels[t..] {
                *l += raised;
            }
            short -= raised;
            if short <= SNAP {
                break;
            }
        }
        if short > SNAP {
            x.r[i] = vec![0.0; n];
            x.d[i] = vec![0.0; n];
        }
    }
}

/// Projection onto the user constraint sets followed by battery-level
/// restoration; supply is re-settled to cover the resulting demand.
pub fn projection(s: &Scenario, x_raw: &Allocation) -> Result<Allocation> {
    check_dims(s, x_raw)?;
    let mut x = x_raw.clone();
    project_inner(s, &mut x)?;
    clip_battery_levels(s, &mut x);
    x.settle_supply();
    Ok(x)
}
