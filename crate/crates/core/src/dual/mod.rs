//! Dual decomposition of `SYSTEM`: prices are the multipliers of supply-demand
//! balance, agents answer with their best responses, and the supervisor moves
//! prices along the mismatch.

mod bus;
mod response;

pub(crate) use bus::agents_with_pricing;
pub use bus::{
    agents_for, Agent, BusError, Direction, InProcessBus, MessageBus, ProviderAgent, RoundMessage,
    SpotPricing, TcpBus, UserAgent, DEFAULT_ROUND_TIMEOUT,
};
pub use response::{price_update, provider_supply_response, user_best_response, UserSchedule};
pub(crate) use response::{provider_profit, spot_purchase, spot_slope, supply_slope};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{validate, welfare_unchecked, Allocation, PriceSignal, Scenario, UtilityKind};
use crate::report::{ConvergenceReport, IterRecord, StopReason, TraceLog};
use crate::solver::StepRule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualConfig {
    pub step_rule: StepRule,
    /// Base step; `None` picks [`default_gamma`] for the scenario.
    pub gamma0: Option<f64>,
    pub max_rounds: usize,
    /// Stop when `|dual value - primal value|` is below this...
    pub tol_gap: f64,
    /// ...and every slot's supply-demand mismatch is below this.
    pub tol_balance: f64,
    /// Starting prices; `None` uses [`default_initial_prices`].
    pub initial_prices: Option<PriceSignal>,
    /// Keep every broadcast price vector in [`DualSolution::price_trace`].
    pub record_prices: bool,
}

impl Default for DualConfig {
    fn default() -> Self {
        DualConfig {
            step_rule: StepRule::Diminishing,
            gamma0: None,
            max_rounds: 20_000,
            tol_gap: 1e-6,
            tol_balance: 1e-6,
            initial_prices: None,
            record_prices: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DualSolution {
    /// Prices of the last round.
    pub prices: PriceSignal,
    /// Recovered primal allocation.
    pub allocation: Allocation,
    pub report: ConvergenceReport,
    /// Broadcast prices of every round, when requested.
    pub price_trace: Vec<PriceSignal>,
}

impl DualSolution {
    pub fn into_parts(self) -> (PriceSignal, Allocation, ConvergenceReport) {
        (self.prices, self.allocation, self.report)
    }
}

/// `1 / max_t L_t` where `L_t` bounds the slope of slot-`t` excess demand:
/// `Σ_i a` (quadratic) or `Σ_i (a + q_max)^2 / b` (logarithmic) plus `1/c2`
/// and, with a spot market, `1/kappa`.
pub fn default_gamma(s: &Scenario) -> f64 {
    let mut worst: f64 = 0.0;
    for t in 0..s.slots() {
        let mut l = 1.0 / s.provider.c2[t];
        for u in &s.users {
            let (a, b) = (u.utility.a[t], u.utility.b[t]);
            l += match u.utility.kind {
                UtilityKind::Quadratic => a,
                UtilityKind::Logarithmic if b > 0.0 => (a + u.q_max[t]).powi(2) / b,
                UtilityKind::Logarithmic => 0.0,
            };
        }
        if let Some(m) = &s.spot {
            if m.kappa[t] > 0.0 {
                l += 1.0 / m.kappa[t];
            }
        }
        worst = worst.max(l);
    }
    1.0 / worst
}

/// Midpoint between the cheapest own generation `c1_t` and the highest
/// marginal utility at the consumption floor: the equilibrium of an
/// uncongested slot lies in between.
pub fn default_initial_prices(s: &Scenario) -> PriceSignal {
    PriceSignal(
        (0..s.slots())
            .map(|t| {
                let top = s
                    .users
                    .iter()
                    .map(|u| u.utility.marginal(t, u.q_min[t]))
                    .fold(0.0, f64::max);
                (0.5 * (s.provider.c1[t] + top)).max(0.0)
            })
            .collect(),
    )
}

/// `Σ_i max-surplus_i(p) + max-profit(p)`, the Lagrangian dual function.
pub fn dual_value(s: &Scenario, p: &PriceSignal) -> Result<f64> {
    if p.len() != s.slots() {
        return Err(Error::Dimension(format!(
            "price vector has {} slots, scenario has {}",
            p.len(),
            s.slots()
        )));
    }
    let mut total = 0.0;
    for u in &s.users {
        total += user_best_response(u, p, s.dt())?.surplus;
    }
    let supply = provider_supply_response(&s.provider, p);
    total += provider_profit(&s.provider, p, &supply);
    if let Some(m) = &s.spot {
        let g = spot_purchase(m, p);
        total += (0..p.len()).map(|t| p[t] * g[t] - m.outlay(t, g[t])).sum::<f64>();
    }
    Ok(total)
}

/// Aggregated replies of one round.
pub(crate) struct Round {
    pub prices: PriceSignal,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    pub supply: Vec<f64>,
    pub spot: Vec<f64>,
    /// `demand - supply - spot` of the replies.
    pub mismatch: Vec<f64>,
    /// `∂mismatch_t/∂p_t` when every agent reported a slope for slot `t`.
    pub curvature: Vec<Option<f64>>,
    pub dual: f64,
}

fn gather(n_users: usize, slots: usize, prices: PriceSignal, replies: Vec<RoundMessage>) -> Result<Round> {
    if replies.len() != n_users + 1 {
        return Err(
            BusError::Protocol(format!("expected {} replies, got {}", n_users + 1, replies.len())).into(),
        );
    }
    let bad = |what: &str| Error::from(BusError::Protocol(what.to_string()));
    let mut round = Round {
        prices,
        q: Vec::with_capacity(n_users),
        r: Vec::with_capacity(n_users),
        d: Vec::with_capacity(n_users),
        supply: vec![0.0; slots],
        spot: vec![0.0; slots],
        mismatch: vec![0.0; slots],
        curvature: vec![Some(0.0); slots],
        dual: 0.0,
    };
    let add_slope = |curv: &mut Vec<Option<f64>>, slope: &Option<Vec<f64>>, sign: f64| {
        for t in 0..slots {
            curv[t] = match (curv[t], slope) {
                (Some(h), Some(v)) if v.len() == slots => Some(h + sign * v[t]),
                _ => None,
            };
        }
    };
    for (k, msg) in replies.into_iter().enumerate() {
        if let Some(message) = msg.error {
            return Err(BusError::Agent { agent: k, message }.into());
        }
        if msg.agent != Some(k) {
            return Err(bad("replies out of agent order"));
        }
        if msg.payload.len() != slots {
            return Err(bad("reply payload length differs from the horizon"));
        }
        round.dual += msg.surplus.ok_or_else(|| bad("reply without surplus"))?;
        if k < n_users {
            if msg.direction != Direction::DemandReply {
                return Err(bad("user agent sent a non-demand reply"));
            }
            let take = |v: Option<Vec<f64>>| {
                v.filter(|v| v.len() == slots)
                    .ok_or_else(|| bad("demand reply without schedule"))
            };
            for t in 0..slots {
                round.mismatch[t] += msg.payload[t];
            }
            add_slope(&mut round.curvature, &msg.slope, 1.0);
            round.q.push(take(msg.q)?);
            round.r.push(take(msg.r)?);
            round.d.push(take(msg.d)?);
        } else {
            if msg.direction != Direction::SupplyReply {
                return Err(bad("provider sent a non-supply reply"));
            }
            add_slope(&mut round.curvature, &msg.slope, -1.0);
            round.supply = msg.payload;
            if let Some(g) = msg.spot.filter(|g| g.len() == slots) {
                round.spot = g;
            }
            for t in 0..slots {
                round.mismatch[t] -= round.supply[t] + round.spot[t];
            }
        }
    }
    Ok(round)
}

/// The price move between rounds.
pub(crate) trait PriceRule {
    fn next(&mut self, k: usize, round: &Round) -> PriceSignal;
}

/// `p' = max(0, p + gamma_k (demand - supply))`.
pub(crate) struct Subgradient {
    pub gamma0: f64,
    pub rule: StepRule,
}

impl Subgradient {
    pub(crate) fn step(&self, k: usize) -> f64 {
        match self.rule {
            StepRule::Constant => self.gamma0,
            StepRule::Diminishing => self.gamma0 / (k.max(1) as f64).sqrt(),
        }
    }
}

impl PriceRule for Subgradient {
    fn next(&mut self, k: usize, round: &Round) -> PriceSignal {
        let zero = vec![0.0; round.mismatch.len()];
        price_update(&round.prices, &round.mismatch, &zero, self.step(k))
    }
}

/// Running mean over the rounds since the last power of two.
struct TailMean {
    sum: Vec<f64>,
    count: usize,
}

impl TailMean {
    fn push(&mut self, k: usize, v: impl Iterator<Item = f64>) {
        if k.is_power_of_two() {
            self.sum.iter_mut().for_each(|s| *s = 0.0);
            self.count = 0;
        }
        for (s, x) in self.sum.iter_mut().zip(v) {
            *s += x;
        }
        self.count += 1;
    }

    fn mean(&self) -> impl Iterator<Item = f64> + '_ {
        let c = self.count.max(1) as f64;
        self.sum.iter().map(move |s| s / c)
    }
}

/// Primal recovery: the unique replies (consumption, supply, strictly convex
/// spot purchases) are used as they are; storage and flat-priced spot
/// purchases, which are not unique at the equilibrium price, are tail-averaged.
fn recover(s: &Scenario, round: &Round, storage: &TailMean, flat_spot: &TailMean) -> Allocation {
    let (n, m) = (s.users.len(), s.slots());
    let mut x = Allocation::for_scenario(s);
    x.q = round.q.clone();
    let mut it = storage.mean();
    for i in 0..n {
        for t in 0..m {
            x.r[i][t] = it.next().unwrap_or(0.0);
        }
        for t in 0..m {
            x.d[i][t] = it.next().unwrap_or(0.0);
        }
    }
    let flat: Vec<f64> = flat_spot.mean().collect();
    if let Some(mk) = &s.spot {
        for t in 0..m {
            x.spot[t] = if mk.kappa[t] > 0.0 { round.spot[t] } else { flat[t] };
        }
    }
    x.settle_supply();
    x
}

/// Mismatch residual: `|D - S - g|` on priced slots, excess demand only where the price is 0.
pub(crate) fn balance_residual(x: &Allocation, round: &Round) -> f64 {
    let demand = x.net_demand();
    (0..demand.len())
        .map(|t| {
            let m = demand[t] - round.supply[t] - x.spot[t];
            if round.prices[t] > 0.0 {
                m.abs()
            } else {
                m.max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// The synchronous round loop shared by the subgradient and Newton methods.
pub(crate) fn run_rounds(
    s: &Scenario,
    cfg: &DualConfig,
    bus: &mut dyn MessageBus,
    rule: &mut dyn PriceRule,
    primal: &dyn Fn(&Allocation) -> f64,
) -> Result<DualSolution> {
    validate(s)?;
    let (n, m) = (s.users.len(), s.slots());
    if bus.agent_count() != n + 1 {
        return Err(BusError::Protocol(format!(
            "bus has {} agents, scenario needs {}",
            bus.agent_count(),
            n + 1
        ))
        .into());
    }
    let mut prices = match &cfg.initial_prices {
        Some(p) if p.len() == m && p.is_valid() => p.clone(),
        Some(_) => {
            return Err(Error::validation(
                "initial prices must be nonnegative, one per slot",
            ))
        }
        None => default_initial_prices(s),
    };
    let mut storage = TailMean {
        sum: vec![0.0; 2 * n * m],
        count: 0,
    };
    let mut flat_spot = TailMean {
        sum: vec![0.0; m],
        count: 0,
    };
    let mut log = TraceLog::new();
    let mut trace = Vec::new();
    let max_rounds = cfg.max_rounds.max(1);
    let mut k = 1;
    loop {
        if cfg.record_prices {
            trace.push(prices.clone());
        }
        let replies = bus.exchange(&RoundMessage::broadcast(k, &prices))?;
        let round = gather(n, m, prices.clone(), replies)?;
        storage.push(
            k,
            round
                .r
                .iter()
                .zip(&round.d)
                .flat_map(|(r, d)| r.iter().chain(d.iter()).copied()),
        );
        flat_spot.push(k, round.spot.iter().copied());
        let x = recover(s, &round, &storage, &flat_spot);
        let objective = primal(&x);
        let kkt = balance_residual(&x, &round);
        let rec = IterRecord {
            iter: k,
            objective,
            kkt,
            dual: Some(round.dual),
        };
        let done = kkt <= cfg.tol_balance && (round.dual - objective).abs() <= cfg.tol_gap;
        if done || k >= max_rounds {
            let stop = if done {
                StopReason::Kkt
            } else {
                StopReason::MaxIters
            };
            return Ok(DualSolution {
                prices: round.prices,
                allocation: x,
                report: log.finish(rec, stop),
                price_trace: trace,
            });
        }
        if log.wants(k) {
            log.push(rec);
        }
        prices = rule.next(k, &round);
        k += 1;
    }
}

/// Subgradient price iteration over `bus`. Works on `SYSTEM` and, when the
/// scenario carries a spot market, on `SYS_SPOT`.
pub fn run_dual(s: &Scenario, cfg: &DualConfig, bus: &mut dyn MessageBus) -> Result<DualSolution> {
    validate(s)?;
    let gamma0 = cfg.gamma0.unwrap_or_else(|| default_gamma(s));
    if !(gamma0.is_finite() && gamma0 > 0.0) {
        return Err(Error::validation("gamma0 must be positive"));
    }
    let mut rule = Subgradient {
        gamma0,
        rule: cfg.step_rule,
    };
    run_rounds(s, cfg, bus, &mut rule, &|x| welfare_unchecked(s, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate;
    use crate::model::welfare;

    #[test]
    fn reference_fixture_equilibrium() {
        let s = generate::reference_t1();
        let mut bus = InProcessBus::for_scenario(&s);
        let sol = run_dual(&s, &DualConfig::default(), &mut bus).unwrap();
        assert!((sol.prices[0] - 2.0).abs() < 1e-6);
        assert!((sol.allocation.q[0][0] - 2.0).abs() < 1e-6);
        assert_eq!(sol.report.stop_reason, StopReason::Kkt);
    }

    #[test]
    fn zero_value_user_gets_nothing() {
        let mut s = generate::reference_t1();
        s.users[0].utility.b = vec![0.0];
        let mut bus = InProcessBus::for_scenario(&s);
        let sol = run_dual(&s, &DualConfig::default(), &mut bus).unwrap();
        assert_eq!(sol.allocation.q[0][0], 0.0);
        assert!(sol.report.stop_reason.converged());
    }

    #[test]
    fn dual_value_at_zero_price() {
        let s = generate::reference_t1();
        // u(q) = 4q - q^2/2 peaks at q = 4 with value 8; the provider earns nothing.
        let v = dual_value(&s, &PriceSignal(vec![0.0])).unwrap();
        assert!((v - 8.0).abs() < 1e-12);
        let v = dual_value(&s, &PriceSignal(vec![2.0])).unwrap();
        assert!((v - 4.0).abs() < 1e-12);
    }

    #[test]
    fn weak_duality_on_random_prices() {
        for seed in 0..5 {
            let s = generate::with_batteries(generate::uniform(4, 3, seed), 0.9, seed);
            let x = crate::solver::projection(&s, &Allocation::for_scenario(&s)).unwrap();
            let w = welfare(&s, &x).unwrap();
            for k in 0..5 {
                let p = PriceSignal::uniform(4, k as f64);
                assert!(dual_value(&s, &p).unwrap() >= w - 1e-9);
            }
        }
    }

    #[test]
    fn matches_centralized_on_deferrable_fixture() {
        let s = generate::uniform(6, 4, 7);
        let mut bus = InProcessBus::for_scenario(&s);
        let sol = run_dual(&s, &DualConfig::default(), &mut bus).unwrap();
        let (_, central) = crate::solver::solve_system(&s, &crate::solver::SolverConfig::default()).unwrap();
        assert!(sol.report.stop_reason.converged(), "{}", sol.report.iterations);
        assert!((sol.report.final_objective - central.final_objective).abs() < 1e-4);
    }
}
