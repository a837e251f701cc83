//! Declarative descriptions of controlled stochastic systems, noise laws,
//! cost pairs and complete scenarios.

mod config;
mod controls;
mod cost;
mod noise;
mod scenario;
mod system;

pub use config::{
    ControlsConfig, CostConfig, CostParams, NoiseConfig, ScenarioConfig, SolverConfig,
    SystemConfig,
};
pub use controls::ControlSet;
pub use cost::{CostKind, CostSpec, StateFn, StageFn};
pub use noise::{NoiseLaw, NoiseModel};
pub use scenario::{
    build_scenario, builtin_config, builtin_scenario, eval_stage_cost, RhoRule, Scenario,
    SolverHints, BUILTIN_NAMES,
};
pub use system::{Dynamics, SystemModel, TransitionFn};
