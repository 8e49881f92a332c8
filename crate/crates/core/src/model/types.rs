use serde::{Deserialize, Deserializer, Serialize};

/// Accepts either a bare number (broadcast later to every slot) or an array.
fn per_slot<'de, D>(de: D) -> Result<Vec<f64>, D::Error>
where
    D: Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum PerSlot {
        Scalar(f64),
        Series(Vec<f64>),
    }
    Ok(match PerSlot::deserialize(de)? {
        PerSlot::Scalar(v) => vec![v],
        PerSlot::Series(v) => v,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    /// Number of time slots `T`.
    pub slots: usize,
    /// Slot length in hours.
    #[serde(default = "default_slot_duration")]
    pub slot_duration: f64,
}

fn default_slot_duration() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UtilityKind {
    Quadratic,
    Logarithmic,
}

/// Per-slot utility coefficients.
///
/// Quadratic: `u(q) = b q - q^2 / (2a)`; logarithmic: `u(q) = b ln(1 + q/a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityParams {
    pub kind: UtilityKind,
    #[serde(deserialize_with = "per_slot")]
    pub a: Vec<f64>,
    #[serde(deserialize_with = "per_slot")]
    pub b: Vec<f64>,
}

impl UtilityParams {
    pub fn value(&self, t: usize, q: f64) -> f64 {
        let (a, b) = (self.a[t], self.b[t]);
        match self.kind {
            UtilityKind::Quadratic => b * q - q * q / (2.0 * a),
            UtilityKind::Logarithmic => b * (q / a).ln_1p(),
        }
    }

    pub fn marginal(&self, t: usize, q: f64) -> f64 {
        let (a, b) = (self.a[t], self.b[t]);
        match self.kind {
            UtilityKind::Quadratic => b - q / a,
            UtilityKind::Logarithmic => b / (a + q),
        }
    }

    /// Unconstrained maximizer of `u(q) - lambda q`, i.e. the inverse of `u'`.
    /// May be infinite for the logarithmic kind at `lambda <= 0`.
    pub fn demand_at(&self, t: usize, lambda: f64) -> f64 {
        let (a, b) = (self.a[t], self.b[t]);
        match self.kind {
            UtilityKind::Quadratic => a * (b - lambda),
            UtilityKind::Logarithmic => {
                if b == 0.0 {
                    f64::NEG_INFINITY
                } else if lambda <= 0.0 {
                    f64::INFINITY
                } else {
                    b / lambda - a
                }
            }
        }
    }

    /// `|dq/dlambda|` of the unconstrained demand at consumption level `q`.
    pub fn demand_slope(&self, t: usize, q: f64) -> f64 {
        let (a, b) = (self.a[t], self.b[t]);
        match self.kind {
            UtilityKind::Quadratic => a,
            UtilityKind::Logarithmic => {
                if b == 0.0 {
                    0.0
                } else {
                    (a + q) * (a + q) / b
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeferrableLoad {
    pub window_start: usize,
    pub window_end: usize,
    /// kWh that must be consumed inside the window.
    pub energy_required: f64,
    /// kW ceiling on consumption in each window slot.
    pub per_slot_max: f64,
}

impl DeferrableLoad {
    pub fn contains(&self, t: usize) -> bool {
        self.window_start <= t && t <= self.window_end
    }

    pub fn slots(&self) -> std::ops::RangeInclusive<usize> {
        self.window_start..=self.window_end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Battery {
    pub capacity: f64,
    pub charge_rate_max: f64,
    pub discharge_rate_max: f64,
    /// Applied on charge only.
    pub efficiency: f64,
    pub initial_level: f64,
}

impl Battery {
    /// Level after one slot of charging at `r` and discharging at `d`.
    pub fn step(&self, level: f64, r: f64, d: f64, dt: f64) -> f64 {
        level + self.efficiency * r * dt - d * dt
    }

    /// Lower bound on the level after slot `t` of a `slots`-slot horizon.
    /// Storage is cyclic: the horizon must end at least as full as it began.
    pub fn level_floor(&self, t: usize, slots: usize) -> f64 {
        if t + 1 == slots {
            self.initial_level
        } else {
            0.0
        }
    }

    /// Levels `s_1..=s_T` reached by a schedule.
    pub fn levels(&self, r: &[f64], d: &[f64], dt: f64) -> Vec<f64> {
        let mut level = self.initial_level;
        r.iter()
            .zip(d)
            .map(|(&rt, &dt_)| {
                level = self.step(level, rt, dt_, dt);
                level
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserModel {
    pub id: String,
    pub utility: UtilityParams,
    #[serde(deserialize_with = "per_slot")]
    pub q_min: Vec<f64>,
    #[serde(deserialize_with = "per_slot")]
    pub q_max: Vec<f64>,
    #[serde(default)]
    pub deferrables: Vec<DeferrableLoad>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub battery: Option<Battery>,
}

impl UserModel {
    /// Index of the deferrable window covering slot `t`, if any.
    pub fn window_of(&self, t: usize) -> Option<usize> {
        self.deferrables.iter().position(|w| w.contains(t))
    }

    /// Effective consumption bounds at slot `t`, including any window ceiling.
    pub fn bounds(&self, t: usize) -> (f64, f64) {
        let hi = match self.window_of(t) {
            Some(k) => self.q_max[t].min(self.deferrables[k].per_slot_max),
            None => self.q_max[t],
        };
        (self.q_min[t], hi)
    }

    pub fn has_battery(&self) -> bool {
        self.battery.as_ref().is_some_and(|b| b.capacity > 0.0)
    }
}

/// Convex production cost `c(Q) = c1 Q + (c2/2) Q^2` with a per-slot capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderCost {
    #[serde(deserialize_with = "per_slot")]
    pub c1: Vec<f64>,
    #[serde(deserialize_with = "per_slot")]
    pub c2: Vec<f64>,
    #[serde(deserialize_with = "per_slot")]
    pub capacity: Vec<f64>,
}

impl ProviderCost {
    pub fn cost(&self, t: usize, supply: f64) -> f64 {
        let s = supply.max(0.0);
        self.c1[t] * s + 0.5 * self.c2[t] * s * s
    }

    /// Right derivative of the cost at `supply`, zero below zero output.
    pub fn marginal(&self, t: usize, supply: f64) -> f64 {
        if supply < 0.0 {
            0.0
        } else {
            self.c1[t] + self.c2[t] * supply
        }
    }
}

/// Spot market with linear price impact `pi(g) = pi0 + kappa g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotMarket {
    #[serde(deserialize_with = "per_slot")]
    pub pi0: Vec<f64>,
    #[serde(deserialize_with = "per_slot")]
    pub kappa: Vec<f64>,
    #[serde(deserialize_with = "per_slot")]
    pub g_max: Vec<f64>,
}

impl SpotMarket {
    pub fn price(&self, t: usize, g: f64) -> f64 {
        self.pi0[t] + self.kappa[t] * g
    }

    /// Integrated outlay `pi0 g + (kappa/2) g^2`.
    pub fn outlay(&self, t: usize, g: f64) -> f64 {
        self.pi0[t] * g + 0.5 * self.kappa[t] * g * g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub horizon: Horizon,
    pub users: Vec<UserModel>,
    pub provider: ProviderCost,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spot: Option<SpotMarket>,
    #[serde(default)]
    pub seed: u64,
}

impl Scenario {
    pub fn slots(&self) -> usize {
        self.horizon.slots
    }

    pub fn dt(&self) -> f64 {
        self.horizon.slot_duration
    }

    /// Copy of the scenario with the spot market removed.
    pub fn without_spot(&self) -> Scenario {
        Scenario {
            spot: None,
            ..self.clone()
        }
    }

    /// True when every user is free of deferrable windows and batteries.
    pub fn is_separable(&self) -> bool {
        self.users
            .iter()
            .all(|u| u.deferrables.is_empty() && !u.has_battery())
    }
}

/// Primal variables of one solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    /// Consumption, users x slots (kW).
    pub q: Vec<Vec<f64>>,
    /// Battery charge rate, users x slots.
    pub r: Vec<Vec<f64>>,
    /// Battery discharge rate, users x slots.
    pub d: Vec<Vec<f64>>,
    /// Provider own generation per slot.
    pub supply: Vec<f64>,
    /// Spot purchases per slot.
    pub spot: Vec<f64>,
}

impl Allocation {
    pub fn zeros(users: usize, slots: usize) -> Self {
        Allocation {
            q: vec![vec![0.0; slots]; users],
            r: vec![vec![0.0; slots]; users],
            d: vec![vec![0.0; slots]; users],
            supply: vec![0.0; slots],
            spot: vec![0.0; slots],
        }
    }

    pub fn for_scenario(s: &Scenario) -> Self {
        Self::zeros(s.users.len(), s.slots())
    }

    pub fn users(&self) -> usize {
        self.q.len()
    }

    pub fn slots(&self) -> usize {
        self.supply.len()
    }

    /// Grid draw of user `i` at slot `t`.
    pub fn draw(&self, i: usize, t: usize) -> f64 {
        self.q[i][t] + self.r[i][t] - self.d[i][t]
    }

    /// Aggregate grid draw per slot.
    pub fn net_demand(&self) -> Vec<f64> {
        (0..self.slots())
            .map(|t| (0..self.users()).map(|i| self.draw(i, t)).sum())
            .collect()
    }

    /// Sets provider supply to the demand not covered by spot purchases.
    pub fn settle_supply(&mut self) {
        let demand = self.net_demand();
        for (t, dm) in demand.into_iter().enumerate() {
            self.supply[t] = (dm - self.spot[t]).max(0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        let rows = self.q.iter().chain(&self.r).chain(&self.d);
        rows.flatten()
            .chain(&self.supply)
            .chain(&self.spot)
            .all(|v| v.is_finite())
    }
}

/// Nonnegative price per slot; the multipliers of supply-demand balance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriceSignal(pub Vec<f64>);

impl PriceSignal {
    pub fn zeros(slots: usize) -> Self {
        PriceSignal(vec![0.0; slots])
    }

    pub fn uniform(slots: usize, p: f64) -> Self {
        PriceSignal(vec![p.max(0.0); slots])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|p| p.is_finite() && *p >= 0.0)
    }
}

impl std::ops::Index<usize> for PriceSignal {
    type Output = f64;
    fn index(&self, t: usize) -> &f64 {
        &self.0[t]
    }
}
