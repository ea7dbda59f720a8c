//! Sub-task vocabulary and the ground-truth shortest plan.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::rules::{ItemId, RuleSet};
use super::world::{Biome, WorldState};
use super::CraftError;

/// Per-sub-task step budget attached to every planned step.
pub const DEFAULT_STEP_BUDGET: u32 = 200;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Goal {
    /// Mine `resource` until the inventory holds `until` units of `drop`.
    Gather { resource: ItemId, drop: ItemId, until: u32 },
    /// Craft until the inventory holds `until` units of `item`.
    Craft { item: ItemId, until: u32 },
    /// Dig down until `resource` is visible in the agent's cell.
    Descend { until_visible: ItemId },
    /// Climb back to the surface.
    Ascend,
    /// Walk until the agent's column is no longer in `biome`.
    LeaveBiome { biome: Biome },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubTask {
    pub goal: Goal,
    pub budget: u32,
}

impl SubTask {
    pub fn new(goal: Goal) -> Self {
        Self { goal, budget: DEFAULT_STEP_BUDGET }
    }

    pub fn is_satisfied(&self, state: &WorldState) -> bool {
        match &self.goal {
            Goal::Gather { drop, until, .. } => state.count(drop) >= *until,
            Goal::Craft { item, until } => state.count(item) >= *until,
            Goal::Descend { until_visible } => state.visible(until_visible),
            Goal::Ascend => state.agent_depth == 0,
            Goal::LeaveBiome { biome } => state.biome_here() != *biome,
        }
    }
}

impl fmt::Display for SubTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.goal {
            Goal::Gather { resource, drop, until } => write!(f, "gather {resource} until {until} {drop}"),
            Goal::Craft { item, until } => write!(f, "craft {item} until {until}"),
            Goal::Descend { until_visible } => write!(f, "dig down until {until_visible} is visible"),
            Goal::Ascend => write!(f, "climb to the surface"),
            Goal::LeaveBiome { biome } => write!(f, "leave the {biome}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Easy,
    Normal,
    Hard,
}

impl Level {
    /// Task level from the number of sub-objectives: 1-3 easy, 4-5 normal, 6-9 hard.
    pub fn from_plan_len(len: usize) -> Option<Level> {
        match len {
            1..=3 => Some(Level::Easy),
            4..=5 => Some(Level::Normal),
            6..=9 => Some(Level::Hard),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Easy => "easy",
            Level::Normal => "normal",
            Level::Hard => "hard",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Loc {
    Surface,
    Underground,
}

/// Minimum-length sub-task sequence for `target` from `state` under the full rules.
///
/// Every item in the dependency closure that is not already held needs one
/// acquisition step, plus the moves the mining bands and biome densities force.
/// Surface work is scheduled before any descent so at most one descent occurs.
pub fn shortest_plan(target: &ItemId, state: &WorldState, rules: &RuleSet) -> Result<Vec<SubTask>, CraftError> {
    rules.check_known(target)?;
    if state.has(target) {
        return Ok(vec![]);
    }
    let produce = demand(target, state, rules)?;

    let mut under: BTreeMap<ItemId, bool> = BTreeMap::new();
    let mut sched = Scheduler {
        rules,
        state,
        produce: &produce,
        done: BTreeSet::new(),
        loc: if state.agent_depth == 0 { Loc::Surface } else { Loc::Underground },
        biome: Some(state.biome_here()),
        out: vec![],
    };
    sched.visit(target, &mut under)?;
    Ok(sched.out)
}

/// Units of each item that must be produced, from consumer-first propagation.
fn demand(target: &ItemId, state: &WorldState, rules: &RuleSet) -> Result<BTreeMap<ItemId, u32>, CraftError> {
    let mut consumed: BTreeMap<ItemId, u32> = BTreeMap::new();
    let mut persistent: BTreeSet<ItemId> = BTreeSet::new();
    consumed.insert(target.clone(), 1);
    let mut produce = BTreeMap::new();
    for item in rules.topo_order()? {
        let required = consumed.get(&item).copied().unwrap_or(0) + u32::from(persistent.contains(&item));
        let need = required.saturating_sub(state.count(&item));
        if need == 0 {
            continue;
        }
        produce.insert(item.clone(), need);
        if let Some(m) = rules.source_of(&item) {
            if Biome::ALL.iter().all(|b| m.density_in(*b) <= 0.0) {
                return Err(CraftError::Infeasible(item.clone()));
            }
            if m.tier > 0 {
                let tool = rules.cheapest_tool(m.tier).ok_or_else(|| CraftError::Infeasible(item.clone()))?;
                persistent.insert(tool.clone());
            }
        } else if let Some(r) = rules.recipe_for(&item) {
            let crafts = need.div_ceil(r.count);
            for (inp, n) in &r.inputs {
                *consumed.entry(inp.clone()).or_insert(0) += crafts * n;
            }
            if let Some(s) = &r.station {
                persistent.insert(s.clone());
            }
        } else {
            return Err(CraftError::Infeasible(item.clone()));
        }
    }
    Ok(produce)
}

struct Scheduler<'a> {
    rules: &'a RuleSet,
    state: &'a WorldState,
    produce: &'a BTreeMap<ItemId, u32>,
    done: BTreeSet<ItemId>,
    loc: Loc,
    biome: Option<Biome>,
    out: Vec<SubTask>,
}

impl Scheduler<'_> {
    fn needs_underground(&self, item: &ItemId, memo: &mut BTreeMap<ItemId, bool>) -> bool {
        if let Some(v) = memo.get(item) {
            return *v;
        }
        let v = self.produce.contains_key(item)
            && (self.rules.source_of(item).is_some_and(|m| m.is_underground())
                || self.children(item).iter().any(|c| self.needs_underground(c, memo)));
        memo.insert(item.clone(), v);
        v
    }

    fn children(&self, item: &ItemId) -> Vec<ItemId> {
        let (inputs, persistent) = self.rules.dependencies(item);
        inputs.into_iter().map(|(i, _)| i).chain(persistent).collect()
    }

    fn visit(&mut self, item: &ItemId, memo: &mut BTreeMap<ItemId, bool>) -> Result<(), CraftError> {
        if !self.produce.contains_key(item) || !self.done.insert(item.clone()) {
            return Ok(());
        }
        let mut kids = self.children(item);
        kids.sort_by_key(|k| self.needs_underground(k, memo));
        for k in &kids {
            self.visit(k, memo)?;
        }
        let until = self.state.count(item) + self.produce[item];
        if let Some(m) = self.rules.source_of(item) {
            if m.is_underground() {
                if self.loc == Loc::Surface {
                    self.out.push(SubTask::new(Goal::Descend { until_visible: m.resource.clone() }));
                    self.loc = Loc::Underground;
                }
            } else {
                if self.loc == Loc::Underground {
                    self.out.push(SubTask::new(Goal::Ascend));
                    self.loc = Loc::Surface;
                }
                if let Some(b) = self.biome {
                    if m.density_in(b) <= 0.0 {
                        self.out.push(SubTask::new(Goal::LeaveBiome { biome: b }));
                        self.biome = None;
                    }
                }
            }
            self.out.push(SubTask::new(Goal::Gather { resource: m.resource.clone(), drop: item.clone(), until }));
        } else {
            self.out.push(SubTask::new(Goal::Craft { item: item.clone(), until }));
        }
        Ok(())
    }
}
