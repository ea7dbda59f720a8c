//! Active human-augmented challenge engagement on a desk-scale crafting world.
//!
//! The pieces, bottom up:
//! - [`craftworld`]: seeded simulator and ground-truth tech tree.
//! - [`planner`]: knowledge-gapped task decomposer.
//! - [`pim`]: timeout/failure tracking and the help trigger.
//! - [`hfm`]: tag-structured expert dialogue and its policy.
//! - [`grpo`]: group relative policy optimization for the dialogue policy.
//! - [`hopqa`]: synthetic multi-hop QA tasks used for training.
//! - [`qem`]: guidance routing into planner context and escape macros.
//! - [`harness`]: episodes, suites, sweeps and the expert gateway.

pub mod craftworld;
pub mod grpo;
pub mod harness;
pub mod hfm;
pub mod hopqa;
pub mod pim;
pub mod planner;
pub mod qem;
