//! Deterministic crafting world: a column grid with an integer depth axis,
//! a data-driven tech tree, and tool-gated, depth-banded mining.

mod plan;
mod rules;
mod world;

pub use plan::{shortest_plan, Goal, Level, SubTask, DEFAULT_STEP_BUDGET};
pub use rules::{ItemDef, ItemId, MiningRule, Recipe, RuleSet};
pub use world::{
    bands_are_escapable, spawn_world, spawn_world_with_rules, Action, Biome, BiomeMix, Failure, Grid, Outcome,
    ReasonCode, WorldConfig, WorldState, MAX_DESERT_BAND, MIN_OPEN_BAND,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CraftError {
    #[error("unknown item `{0}`")]
    UnknownItem(ItemId),
    #[error("no recipe produces `{0}`")]
    NoRecipe(ItemId),
    #[error("`{0}` cannot be produced from raw resources")]
    Infeasible(ItemId),
    #[error("configuration error: {0}")]
    Config(String),
}
