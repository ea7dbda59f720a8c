//! The fifteen-task suite, five per level.

use serde::{Deserialize, Serialize};

use crate::craftworld::{shortest_plan, spawn_world, Biome, CraftError, ItemId, Level, WorldConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub target: ItemId,
    pub level: Level,
    pub episode_step_budget: u32,
    pub world_config: WorldConfig,
    pub gap_profile: String,
}

pub const EASY_BUDGET: u32 = 600;
pub const NORMAL_BUDGET: u32 = 800;
pub const HARD_BUDGET: u32 = 1400;

fn task(id: &str, target: &str, level: Level, spawn: Biome, gap: &str) -> TaskSpec {
    TaskSpec {
        id: id.to_owned(),
        target: target.into(),
        level,
        episode_step_budget: match level {
            Level::Easy => EASY_BUDGET,
            Level::Normal => NORMAL_BUDGET,
            Level::Hard => HARD_BUDGET,
        },
        world_config: WorldConfig { spawn_biome: Some(spawn), ..WorldConfig::default() },
        gap_profile: gap.to_owned(),
    }
}

pub fn suite() -> Vec<TaskSpec> {
    use Biome::*;
    use Level::*;
    vec![
        task("mine_log", "log", Easy, Forest, "GAP-FACT"),
        task("craft_plank", "plank", Easy, Forest, "GAP-FACT"),
        task("craft_stick", "stick", Easy, Forest, "GAP-FACT"),
        task("craft_crafting_table", "crafting_table", Easy, Forest, "GAP-FACT"),
        task("mine_dirt", "dirt", Easy, Forest, "GAP-FACT"),
        task("craft_wooden_sword", "wooden_sword", Normal, Forest, "GAP-FACT"),
        task("craft_wooden_pickaxe", "wooden_pickaxe", Normal, Forest, "GAP-FACT"),
        task("craft_wooden_axe", "wooden_axe", Normal, Forest, "GAP-FACT"),
        task("craft_bowl", "bowl", Normal, Forest, "GAP-FACT"),
        task("craft_chest", "chest", Normal, Forest, "GAP-FACT"),
        task("craft_stone_pickaxe", "stone_pickaxe", Hard, Desert, "GAP-STRAT"),
        task("craft_stone_sword", "stone_sword", Hard, Forest, "GAP-FACT"),
        task("craft_stone_axe", "stone_axe", Hard, Forest, "GAP-STRAT"),
        task("craft_furnace", "furnace", Hard, Forest, "GAP-FACT"),
        task("mine_iron_ore", "iron_ore", Hard, Forest, "GAP-FACT"),
    ]
}

pub fn by_id(id: &str) -> Option<TaskSpec> {
    suite().into_iter().find(|t| t.id == id)
}

pub fn by_level(level: Level) -> Vec<TaskSpec> {
    suite().into_iter().filter(|t| t.level == level).collect()
}

impl TaskSpec {
    /// Level implied by the full-knowledge shortest plan in the seeded world.
    pub fn derived_level(&self, seed: u64) -> Result<Option<Level>, CraftError> {
        let state = spawn_world(seed, &self.world_config)?;
        Ok(Level::from_plan_len(shortest_plan(&self.target, &state, &state.rules)?.len()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::GapProfile;

    #[test]
    fn five_per_level_with_unique_ids() {
        let s = suite();
        assert_eq!(s.len(), 15);
        for l in [Level::Easy, Level::Normal, Level::Hard] {
            assert_eq!(by_level(l).len(), 5);
        }
        let mut ids: Vec<_> = s.iter().map(|t| t.id.clone()).collect();
        ids.dedup();
        assert_eq!(ids.len(), 15);
        assert!(s.iter().all(|t| GapProfile::by_name(&t.gap_profile).is_some()));
    }

    #[test]
    fn levels_match_plan_length_bands() {
        for t in suite() {
            for seed in 0..20 {
                assert_eq!(t.derived_level(seed).unwrap(), Some(t.level), "{} seed {seed}", t.id);
            }
        }
    }
}
