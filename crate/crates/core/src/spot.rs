//! `SYS_SPOT`: the provider may cover part of demand with spot purchases.

use serde::Serialize;

use crate::dual::{
    agents_with_pricing, default_gamma, provider_supply_response, run_dual, spot_purchase, DualConfig,
    DualSolution, InProcessBus, SpotPricing, Subgradient,
};
use crate::error::{Error, Result};
use crate::model::{
    validate, welfare_unchecked, Allocation, PriceSignal, ProviderCost, Scenario, SpotMarket,
};

/// Per slot, own generation and purchases maximizing
/// `p (S + g) - c(S) - pi0 g - (kappa/2) g^2`; the two separate.
pub fn provider_spot_response(c: &ProviderCost, m: &SpotMarket, p: &PriceSignal) -> (Vec<f64>, Vec<f64>) {
    (provider_supply_response(c, p), spot_purchase(m, p))
}

fn spot_market(s: &Scenario) -> Result<&SpotMarket> {
    s.spot
        .as_ref()
        .ok_or_else(|| Error::validation("scenario has no spot market"))
}

/// Dual iteration on `SYS_SPOT` over an in-process bus.
pub fn solve_sys_spot(s: &Scenario, cfg: &DualConfig) -> Result<DualSolution> {
    spot_market(s)?;
    let mut bus = InProcessBus::for_scenario(s);
    run_dual(s, cfg, &mut bus)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointOptions {
    /// Proximal weight on purchase changes, as a multiple of `kappa`.
    pub inertia: f64,
    pub max_outer: usize,
    /// Stop when `max_t |g_t - g_t^prev|` is below this. `None` uses ten
    /// times the inner balance tolerance, the finest change the inner solves
    /// can resolve.
    pub tol: Option<f64>,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions {
            inertia: 0.5,
            max_outer: 500,
            tol: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SpotEquilibrium {
    /// Purchases `g*`.
    pub purchases: Vec<f64>,
    /// Effective spot price `pi0 + kappa g*`.
    pub spot_price: Vec<f64>,
    /// Retail prices `p*`.
    pub prices: Vec<f64>,
    pub outer_iterations: usize,
    pub converged: bool,
    /// Largest purchase change in the last outer iteration.
    pub last_change: f64,
    /// Largest purchase change over the final quarter of the outer
    /// iterations when the loop did not settle.
    pub oscillation: Option<f64>,
    /// `max_t |g*_t - g_t|` against the internalized [`solve_sys_spot`] solution.
    pub internalized_gap: f64,
    #[serde(skip)]
    pub solution: DualSolution,
}

/// Welfare with the spot outlay replaced by the linearized purchase cost.
fn linearized_objective(s: &Scenario, x: &Allocation, pricing: &SpotPricing) -> f64 {
    let SpotPricing::Linearized {
        price,
        anchor,
        inertia,
    } = pricing
    else {
        return welfare_unchecked(s, x);
    };
    let m = s.spot.as_ref().expect("linearized pricing implies a market");
    let mut w = welfare_unchecked(s, x);
    for t in 0..s.slots() {
        let g = x.spot[t];
        let pull = g - anchor[t];
        w += m.outlay(t, g) - (price[t] * g + 0.5 * inertia[t] * pull * pull);
    }
    w
}

/// Purchase/price interaction: the provider buys as a price taker at the
/// effective price `pi0 + kappa g` implied by the previous purchases, the
/// market re-prices, and the loop repeats until purchases stop moving.
pub fn spot_interaction_fixed_point(s: &Scenario, cfg: &DualConfig) -> Result<SpotEquilibrium> {
    spot_interaction_fixed_point_with(s, cfg, &FixedPointOptions::default())
}

pub fn spot_interaction_fixed_point_with(
    s: &Scenario,
    cfg: &DualConfig,
    opts: &FixedPointOptions,
) -> Result<SpotEquilibrium> {
    validate(s)?;
    let m = spot_market(s)?.clone();
    let n = s.slots();
    let gamma0 = cfg.gamma0.unwrap_or_else(|| default_gamma(s));
    let inertia: Vec<f64> = m.kappa.iter().map(|k| opts.inertia * k).collect();
    let feedback = m.kappa.iter().any(|&k| k > 0.0);
    let tol = opts.tol.unwrap_or(10.0 * cfg.tol_balance);
    let mut anchor = vec![0.0; n];
    let mut inner_cfg = cfg.clone();
    let mut changes = Vec::new();
    let mut last = None;
    for outer in 1..=opts.max_outer.max(1) {
        let pricing = SpotPricing::Linearized {
            price: (0..n).map(|t| m.price(t, anchor[t])).collect(),
            anchor: anchor.clone(),
            inertia: inertia.clone(),
        };
        let mut bus = InProcessBus::new(agents_with_pricing(s, pricing.clone()));
        let mut rule = Subgradient {
            gamma0,
            rule: cfg.step_rule,
        };
        let sol = crate::dual::run_rounds(s, &inner_cfg, &mut bus, &mut rule, &|x| {
            linearized_objective(s, x, &pricing)
        })?;
        let g = sol.allocation.spot.clone();
        let change = g
            .iter()
            .zip(&anchor)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        changes.push(change);
        inner_cfg.initial_prices = Some(sol.prices.clone());
        anchor = g;
        let settled = !feedback || change <= tol;
        last = Some((outer, sol));
        if settled {
            break;
        }
    }
    let (outer, solution) = last.expect("at least one outer iteration");
    let last_change = *changes.last().unwrap_or(&0.0);
    let converged = !feedback || last_change <= tol;
    let oscillation = (!converged).then(|| {
        let tail = &changes[changes.len() - (changes.len() / 4).max(1)..];
        tail.iter().copied().fold(0.0, f64::max)
    });
    let internal = solve_sys_spot(s, cfg)?;
    let internalized_gap = internal
        .allocation
        .spot
        .iter()
        .zip(&solution.allocation.spot)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(SpotEquilibrium {
        spot_price: (0..n).map(|t| m.price(t, solution.allocation.spot[t])).collect(),
        purchases: solution.allocation.spot.clone(),
        prices: solution.prices.0.clone(),
        outer_iterations: outer,
        converged,
        last_change,
        oscillation,
        internalized_gap,
        solution,
    })
}
