//! Experiment orchestration: the task suite, the episode loop, scripted and
//! live experts, metrics tables, and the gateway the live console talks to.

mod episode;
mod expert;
mod gateway;
mod metrics;
mod tasks;

pub use episode::{
    bundled_policy, run_episode, run_episode_with, EpisodeRecord, FrameworkConfig, ResponseTiming, TriggerEvent, Variant,
    RECORD_SCHEMA_VERSION, SECONDS_PER_STEP,
};
pub use expert::ScriptedExpert;
pub use gateway::{
    now_ms, serve_expert_gateway, GatewayHandle, LiveExpert, QueryContext, WireClient, WireMessage, ALREADY_TIMED_OUT,
    BAD_MESSAGE, UNKNOWN_QUERY,
};
pub use metrics::{
    ablation_sweep, percent_1dp, run_suite, run_trials, scripted_episode, sweep_row, trial_seed, LevelStats, MetricsRow,
    MetricsTable, RunMeta, SuiteOutcome, SweepRow, SweepTable, LEVELS,
};
pub use tasks::{by_id, by_level, suite, TaskSpec, EASY_BUDGET, HARD_BUDGET, NORMAL_BUDGET};

use crate::craftworld::CraftError;
use crate::hfm::DialogueError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    World(#[from] CraftError),
    #[error(transparent)]
    Dialogue(#[from] DialogueError),
    #[error("unknown gap profile `{0}`")]
    UnknownGapProfile(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
