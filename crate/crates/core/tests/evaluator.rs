//! Welfare and feasibility recomputed from first principles, independent of the
//! library's evaluation code, and compared on random allocations.

use gridnum::generate;
use gridnum::model::{feasibility_residuals, welfare, Allocation, Scenario, UtilityKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn utility(kind: UtilityKind, a: f64, b: f64, q: f64) -> f64 {
    match kind {
        UtilityKind::Quadratic => b * q - q * q / (2.0 * a),
        UtilityKind::Logarithmic => b * (1.0 + q / a).ln(),
    }
}

/// `Σ u - c(max(0, D - g)) - (pi0 g + kappa g^2 / 2)`, slot by slot.
fn reference_welfare(s: &Scenario, x: &Allocation) -> f64 {
    let mut total = 0.0;
    for t in 0..s.horizon.slots {
        let mut demand = 0.0;
        for (i, u) in s.users.iter().enumerate() {
            total += utility(u.utility.kind, u.utility.a[t], u.utility.b[t], x.q[i][t]);
            demand += x.q[i][t] + x.r[i][t] - x.d[i][t];
        }
        let g = x.spot[t];
        let own = f64::max(0.0, demand - g);
        let p = &s.provider;
        total -= p.c1[t] * own + p.c2[t] * own * own / 2.0;
        if let Some(m) = &s.spot {
            total -= m.pi0[t] * g + m.kappa[t] * g * g / 2.0;
        }
    }
    total
}

fn random_allocation(s: &Scenario, rng: &mut ChaCha8Rng) -> Allocation {
    let mut x = Allocation::zeros(s.users.len(), s.horizon.slots);
    for (i, u) in s.users.iter().enumerate() {
        for t in 0..s.horizon.slots {
            x.q[i][t] = rng.gen_range(0.0..u.q_max[t].max(1e-3));
            if let Some(b) = &u.battery {
                x.r[i][t] = rng.gen_range(0.0..=b.charge_rate_max);
                x.d[i][t] = rng.gen_range(0.0..=b.discharge_rate_max);
            }
        }
    }
    if let Some(m) = &s.spot {
        for t in 0..s.horizon.slots {
            x.spot[t] = rng.gen_range(0.0..=m.g_max[t]);
        }
    }
    x
}

fn scenarios() -> Vec<Scenario> {
    let mut list = vec![generate::reference_t1()];
    for seed in 0..6 {
        list.push(generate::uniform(5, 3, seed));
        list.push(generate::with_batteries(generate::peak(6, 2, seed), 0.9, seed));
        list.push(generate::with_spot(
            generate::myopia_trap(4, 2, seed),
            1.5,
            0.3,
            2.0,
        ));
        list.push(generate::random_small(seed, 6));
    }
    list
}

#[test]
fn welfare_matches_reference_evaluator() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for s in scenarios() {
        for _ in 0..20 {
            let x = random_allocation(&s, &mut rng);
            let lib = welfare(&s, &x).unwrap();
            let reference = reference_welfare(&s, &x);
            assert!(
                (lib - reference).abs() <= 1e-12 * (1.0 + reference.abs()),
                "{lib} vs {reference}"
            );
        }
    }
}

#[test]
fn hand_values() {
    let s = generate::reference_t1();
    let mut x = Allocation::zeros(1, 1);
    x.q[0][0] = 2.0;
    assert_eq!(welfare(&s, &x).unwrap(), 4.0);
    x.q[0][0] = 3.0;
    // 4*3 - 9/2 - 9/2 = 3.
    assert_eq!(welfare(&s, &x).unwrap(), 3.0);
}

/// Battery level and window residuals recomputed by direct simulation.
#[test]
fn feasibility_matches_simulation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for s in scenarios() {
        let dt = s.horizon.slot_duration;
        let n = s.horizon.slots;
        for _ in 0..10 {
            let x = random_allocation(&s, &mut rng);
            let mut level_violation: f64 = 0.0;
            let mut window_violation: f64 = 0.0;
            for (i, u) in s.users.iter().enumerate() {
                if let Some(b) = &u.battery {
                    let mut level = b.initial_level;
                    for t in 0..n {
                        level += b.efficiency * x.r[i][t] * dt - x.d[i][t] * dt;
                        let floor = if t == n - 1 { b.initial_level } else { 0.0 };
                        level_violation = level_violation.max(floor - level).max(level - b.capacity);
                    }
                }
                for w in &u.deferrables {
                    let served: f64 = (w.window_start..=w.window_end).map(|t| x.q[i][t] * dt).sum();
                    window_violation = window_violation.max((served - w.energy_required).abs());
                }
            }
            let rep = feasibility_residuals(&s, &x).unwrap();
            assert!(
                (rep.battery_level - level_violation.max(0.0)).abs() < 1e-12,
                "{rep:?} {level_violation}"
            );
            assert!(
                (rep.deferrable - window_violation).abs() < 1e-12,
                "{rep:?} {window_violation}"
            );
        }
    }
}
