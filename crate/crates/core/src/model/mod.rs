//! Domain types, scenario ingestion and objective evaluation.

mod eval;
mod io;
mod types;

pub(crate) use eval::{check_dims, welfare_unchecked};
pub use eval::{feasibility_residuals, welfare, welfare_gradient, FeasibilityReport};
pub use io::{allocation_to_csv, load_scenario, parse_scenario, save_scenario, scenario_to_json, validate};
pub use types::{
    Allocation, Battery, DeferrableLoad, Horizon, PriceSignal, ProviderCost, Scenario, SpotMarket, UserModel,
    UtilityKind, UtilityParams,
};
