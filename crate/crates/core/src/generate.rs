//! Deterministic scenario generators used by the CLI `gen` command and the test fixtures.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{
    Battery, DeferrableLoad, Horizon, ProviderCost, Scenario, SpotMarket, UserModel, UtilityKind,
    UtilityParams,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Keeps generated files short and exactly representable in decimal.
fn r3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

fn quad_user(id: String, a: Vec<f64>, b: Vec<f64>, q_max: f64) -> UserModel {
    let slots = a.len();
    UserModel {
        id,
        utility: UtilityParams {
            kind: UtilityKind::Quadratic,
            a,
            b,
        },
        q_min: vec![0.0; slots],
        q_max: vec![q_max; slots],
        deferrables: vec![],
        battery: None,
    }
}

fn provider(rng: &mut ChaCha8Rng, slots: usize, capacity: f64) -> ProviderCost {
    ProviderCost {
        c1: (0..slots).map(|_| r3(rng.gen_range(0.0..0.5))).collect(),
        c2: (0..slots).map(|_| r3(rng.gen_range(0.2..1.0))).collect(),
        capacity: vec![capacity; slots],
    }
}

/// Adds a deferrable window asking for a fraction of its energy ceiling.
fn add_window(rng: &mut ChaCha8Rng, u: &mut UserModel, slots: usize, fill: f64) {
    if slots < 2 {
        return;
    }
    let start = rng.gen_range(0..slots - 1);
    let end = rng.gen_range(start + 1..slots);
    let per_slot_max = r3(rng.gen_range(1.0..u.q_max[0].max(1.5)));
    let width = (end - start + 1) as f64;
    u.deferrables.push(DeferrableLoad {
        window_start: start,
        window_end: end,
        energy_required: r3(fill * width * per_slot_max),
        per_slot_max,
    });
}

/// Homogeneous random instance: quadratic users, some with a deferrable window.
pub fn uniform(slots: usize, users: usize, seed: u64) -> Scenario {
    let mut rng = rng(seed);
    let mut list = Vec::with_capacity(users);
    for i in 0..users {
        let a: Vec<f64> = (0..slots).map(|_| r3(rng.gen_range(0.5..2.0))).collect();
        let b: Vec<f64> = (0..slots).map(|_| r3(rng.gen_range(2.0..6.0))).collect();
        let q_max = r3(rng.gen_range(3.0..8.0));
        let mut u = quad_user(format!("u{i}"), a, b, q_max);
        if rng.gen_bool(0.5) {
            let fill = rng.gen_range(0.2..0.7);
            add_window(&mut rng, &mut u, slots, fill);
        }
        list.push(u);
    }
    let capacity = 10.0 * users as f64;
    let provider = provider(&mut rng, slots, capacity);
    Scenario {
        horizon: Horizon {
            slots,
            slot_duration: 1.0,
        },
        users: list,
        provider,
        spot: None,
        seed,
    }
}

/// Like [`uniform`] but a short contiguous block of slots carries most of the value.
pub fn peak(slots: usize, users: usize, seed: u64) -> Scenario {
    let mut s = uniform(slots, users, seed);
    let mut rng = rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    let width = (slots / 6).max(1);
    let start = rng.gen_range(0..=slots - width);
    for u in &mut s.users {
        for t in 0..slots {
            u.utility.b[t] = if (start..start + width).contains(&t) {
                r3(rng.gen_range(8.0..12.0))
            } else {
                r3(rng.gen_range(1.0..3.0))
            };
        }
    }
    s
}

/// Each user must serve a large deferrable load across the whole horizon while
/// early slots look attractive in isolation; myopic slot-by-slot scheduling
/// overpays at the deadline.
pub fn myopia_trap(slots: usize, users: usize, seed: u64) -> Scenario {
    let mut rng = rng(seed);
    let mut list = Vec::with_capacity(users);
    for i in 0..users {
        let a = vec![1.0; slots];
        let b: Vec<f64> = (0..slots)
            .map(|t| r3(6.0 - 4.0 * t as f64 / slots.max(2) as f64 + rng.gen_range(0.0..0.5)))
            .collect();
        let mut u = quad_user(format!("u{i}"), a, b, 4.0);
        if slots >= 2 {
            let per_slot_max = 3.0;
            u.deferrables.push(DeferrableLoad {
                window_start: 0,
                window_end: slots - 1,
                energy_required: r3(0.85 * slots as f64 * per_slot_max),
                per_slot_max,
            });
        }
        list.push(u);
    }
    let provider = ProviderCost {
        c1: (0..slots)
            .map(|t| r3(2.0 * (1.0 - t as f64 / slots as f64) + rng.gen_range(0.0..0.2)))
            .collect(),
        c2: vec![0.5; slots],
        capacity: vec![10.0 * users as f64; slots],
    };
    Scenario {
        horizon: Horizon {
            slots,
            slot_duration: 1.0,
        },
        users: list,
        provider,
        spot: None,
        seed,
    }
}

/// The hand-solvable instance: one user, one slot, `u(q) = 4q - q^2/2`, `c(Q) = Q^2/2`.
pub fn reference_t1() -> Scenario {
    Scenario {
        horizon: Horizon {
            slots: 1,
            slot_duration: 1.0,
        },
        users: vec![quad_user("u0".into(), vec![1.0], vec![4.0], 10.0)],
        provider: ProviderCost {
            c1: vec![0.0],
            c2: vec![1.0],
            capacity: vec![100.0],
        },
        spot: None,
        seed: 0,
    }
}

/// Gives every user a battery sized relative to its consumption ceiling.
pub fn with_batteries(mut s: Scenario, efficiency: f64, seed: u64) -> Scenario {
    let mut rng = rng(seed ^ 0x5151);
    for u in &mut s.users {
        let capacity = r3(rng.gen_range(1.0..4.0));
        u.battery = Some(Battery {
            capacity,
            charge_rate_max: r3(rng.gen_range(0.5..2.0)),
            discharge_rate_max: r3(rng.gen_range(0.5..2.0)),
            efficiency,
            initial_level: r3(rng.gen_range(0.0..capacity)),
        });
    }
    s
}

/// Attaches a spot market with the given base price and impact slope on every slot.
pub fn with_spot(mut s: Scenario, pi0: f64, kappa: f64, g_max: f64) -> Scenario {
    let n = s.slots();
    s.spot = Some(SpotMarket {
        pi0: vec![pi0; n],
        kappa: vec![kappa; n],
        g_max: vec![g_max; n],
    });
    s
}

/// Small random instance whose oracle search dimension stays at or below `max_dim`.
///
/// Mixes utility kinds, deferrable windows, batteries and binding capacities.
pub fn random_small(seed: u64, max_dim: usize) -> Scenario {
    let mut rng = rng(seed);
    loop {
        let slots = rng.gen_range(1..=3usize);
        let users = rng.gen_range(1..=2usize);
        let mut list = Vec::new();
        let mut dim = 0;
        for i in 0..users {
            let kind = if rng.gen_bool(0.5) {
                UtilityKind::Quadratic
            } else {
                UtilityKind::Logarithmic
            };
            let a: Vec<f64> = (0..slots).map(|_| r3(rng.gen_range(0.5..2.0))).collect();
            let b: Vec<f64> = (0..slots).map(|_| r3(rng.gen_range(1.0..6.0))).collect();
            let q_max = r3(rng.gen_range(2.0..5.0));
            let mut u = quad_user(format!("u{i}"), a, b, q_max);
            u.utility.kind = kind;
            dim += slots;
            if slots >= 2 && rng.gen_bool(0.4) {
                let fill = rng.gen_range(0.3..0.8);
                add_window(&mut rng, &mut u, slots, fill);
                dim -= 1;
            }
            if rng.gen_bool(0.3) {
                let capacity = r3(rng.gen_range(0.5..2.0));
                u.battery = Some(Battery {
                    capacity,
                    charge_rate_max: r3(rng.gen_range(0.5..1.5)),
                    discharge_rate_max: r3(rng.gen_range(0.5..1.5)),
                    efficiency: if rng.gen_bool(0.5) { 1.0 } else { 0.9 },
                    initial_level: r3(rng.gen_range(0.0..capacity)),
                });
                dim += slots;
            }
            list.push(u);
        }
        if dim > max_dim {
            continue;
        }
        let flexible = list.iter().all(|u| u.deferrables.is_empty());
        let capacity = if rng.gen_bool(0.3) && flexible {
            r3(rng.gen_range(1.0..3.0))
        } else {
            50.0
        };
        let provider = provider(&mut rng, slots, capacity);
        return Scenario {
            horizon: Horizon {
                slots,
                slot_duration: 1.0,
            },
            users: list,
            provider,
            spot: None,
            seed,
        };
    }
}
