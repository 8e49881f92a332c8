//! Newton steps on the dual price iteration.
//!
//! Constraints couple variables only within a slot (deferrable windows aside),
//! so the dual Hessian is diagonal and each slot's Newton step needs only the
//! sum of the agents' local slopes `∂reply_t/∂p_t`.

use serde::{Deserialize, Serialize};

use crate::dual::{
    default_gamma, provider_supply_response, run_rounds, spot_purchase, spot_slope, supply_slope,
    user_best_response, DualConfig, DualSolution, MessageBus, PriceRule, Round, Subgradient,
};
use crate::error::{Error, Result};
use crate::model::{validate, welfare_unchecked, PriceSignal, Scenario};
use crate::solver::StepRule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonConfig {
    /// Round limit, tolerances and starting prices; `gamma0` is the fallback step.
    pub dual: DualConfig,
    /// Initial damping in `(0, 1]`.
    pub alpha: f64,
    /// Slots with `|h_t|` below this take a subgradient step instead.
    pub h_floor: f64,
    /// How many times `alpha` may be halved when the mismatch stops shrinking.
    pub max_halvings: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            dual: DualConfig::default(),
            alpha: 1.0,
            h_floor: 1e-9,
            max_halvings: 8,
        }
    }
}

/// Rejects scenarios whose dual is not piecewise smooth: storage replies are
/// piecewise constant in price, and so are flat-priced spot purchases.
fn require_smooth(s: &Scenario) -> Result<()> {
    if let Some(u) = s.users.iter().find(|u| u.has_battery()) {
        return Err(Error::Unsupported(format!(
            "user {} has a battery; its price response has no slope",
            u.id
        )));
    }
    if let Some(m) = &s.spot {
        if (0..s.slots()).any(|t| m.kappa[t] == 0.0 && m.g_max[t] > 0.0) {
            return Err(Error::Unsupported(
                "spot market with zero price impact has no slope".into(),
            ));
        }
    }
    Ok(())
}

/// Mismatch `g_t = demand_t(p) - supply_t(p)` and its slope `h_t <= 0`, summed
/// from the agents' own slopes (clamped coordinates contribute 0).
pub fn dual_gradient_and_curvature(s: &Scenario, p: &PriceSignal) -> Result<(Vec<f64>, Vec<f64>)> {
    validate(s)?;
    require_smooth(s)?;
    let n = s.slots();
    if p.len() != n || !p.is_valid() {
        return Err(Error::validation("prices must be nonnegative, one per slot"));
    }
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];
    for u in &s.users {
        let rep = user_best_response(u, p, s.dt())?;
        for t in 0..n {
            g[t] += rep.q[t];
            h[t] += rep.slope[t];
        }
    }
    let supply = provider_supply_response(&s.provider, p);
    let slope = supply_slope(&s.provider, p);
    for t in 0..n {
        g[t] -= supply[t];
        h[t] -= slope[t];
    }
    if let Some(m) = &s.spot {
        let (buy, slope) = (spot_purchase(m, p), spot_slope(m, p));
        for t in 0..n {
            g[t] -= buy[t];
            h[t] -= slope[t];
        }
    }
    Ok((g, h))
}

/// `p'_t = max(0, p_t - alpha g_t / h_t)`; where `|h_t| < h_floor` the slot
/// takes the subgradient step `max(0, p_t + gamma0 g_t)` instead.
pub fn newton_price_step(
    p: &PriceSignal,
    g: &[f64],
    h: &[f64],
    alpha: f64,
    h_floor: f64,
    gamma0: f64,
) -> PriceSignal {
    PriceSignal(
        (0..p.len())
            .map(|t| {
                let next = if h[t].abs() < h_floor {
                    p[t] + gamma0 * g[t]
                } else {
                    p[t] - alpha * g[t] / h[t]
                };
                next.max(0.0)
            })
            .collect(),
    )
}

struct NewtonRule {
    alpha: f64,
    h_floor: f64,
    halvings_left: usize,
    fallback: Subgradient,
    previous: f64,
}

impl PriceRule for NewtonRule {
    fn next(&mut self, k: usize, round: &Round) -> PriceSignal {
        let norm = round
            .mismatch
            .iter()
            .enumerate()
            .map(|(t, &m)| {
                if round.prices[t] > 0.0 {
                    m.abs()
                } else {
                    m.max(0.0)
                }
            })
            .fold(0.0, f64::max);
        if norm >= self.previous && self.halvings_left > 0 {
            self.alpha *= 0.5;
            self.halvings_left -= 1;
        }
        self.previous = norm;
        // A missing slope report means at least one agent cannot supply curvature.
        let h: Vec<f64> = round.curvature.iter().map(|c| c.unwrap_or(0.0)).collect();
        newton_price_step(
            &round.prices,
            &round.mismatch,
            &h,
            self.alpha,
            self.h_floor,
            self.fallback.step(k),
        )
    }
}

/// Newton price iteration over `bus`; same stopping rule and primal recovery as
/// [`crate::dual::run_dual`].
pub fn run_newton(s: &Scenario, cfg: &NewtonConfig, bus: &mut dyn MessageBus) -> Result<DualSolution> {
    validate(s)?;
    require_smooth(s)?;
    if !(cfg.alpha > 0.0 && cfg.alpha <= 1.0) {
        return Err(Error::validation("damping must lie in (0, 1]"));
    }
    let gamma0 = cfg.dual.gamma0.unwrap_or_else(|| default_gamma(s));
    let mut rule = NewtonRule {
        alpha: cfg.alpha,
        h_floor: cfg.h_floor,
        halvings_left: cfg.max_halvings,
        fallback: Subgradient {
            gamma0,
            rule: StepRule::Constant,
        },
        previous: f64::INFINITY,
    };
    run_rounds(s, &cfg.dual, bus, &mut rule, &|x| welfare_unchecked(s, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual::InProcessBus;
    use crate::generate;

    #[test]
    fn reference_curvature() {
        let s = generate::reference_t1();
        let (g, h) = dual_gradient_and_curvature(&s, &PriceSignal(vec![1.0])).unwrap();
        assert_eq!(g, vec![2.0]);
        assert_eq!(h, vec![-2.0]);
    }

    #[test]
    fn clamped_users_drop_out() {
        let mut s = generate::reference_t1();
        s.users[0].q_max = vec![1.0];
        let (_, h) = dual_gradient_and_curvature(&s, &PriceSignal(vec![1.0])).unwrap();
        assert_eq!(h, vec![-1.0]);
    }

    #[test]
    fn step_cases() {
        let p = PriceSignal(vec![1.0, 3.0, 2.0]);
        let next = newton_price_step(&p, &[0.0, 2.0, 1.0], &[-2.0, -2.0, 0.0], 1.0, 1e-9, 0.5);
        assert_eq!(next.0, vec![1.0, 4.0, 2.5]);
        // One step from p = 0.5 on the quadratic fixture lands on p* = 2.
        let s = generate::reference_t1();
        let (g, h) = dual_gradient_and_curvature(&s, &PriceSignal(vec![0.5])).unwrap();
        assert_eq!((g[0], h[0]), (3.0, -2.0));
        let exact = newton_price_step(&PriceSignal(vec![0.5]), &g, &h, 1.0, 1e-9, 0.1);
        assert_eq!(exact.0, vec![2.0]);
    }

    #[test]
    fn reference_fixture_in_two_rounds() {
        let s = generate::reference_t1();
        let cfg = NewtonConfig {
            dual: DualConfig {
                initial_prices: Some(PriceSignal(vec![0.7])),
                ..DualConfig::default()
            },
            ..NewtonConfig::default()
        };
        let sol = run_newton(&s, &cfg, &mut InProcessBus::for_scenario(&s)).unwrap();
        assert!(sol.report.iterations <= 2, "{}", sol.report.iterations);
        assert!((sol.prices[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn batteries_rejected() {
        let s = generate::with_batteries(generate::uniform(3, 2, 0), 1.0, 0);
        assert!(matches!(
            dual_gradient_and_curvature(&s, &PriceSignal::zeros(3)),
            Err(Error::Unsupported(_))
        ));
    }
}
