//! Symbolic task decomposer working from an explicit, possibly gapped,
//! knowledge base plus context injected at run time.
//!
//! The planner never reads the world's rule set directly. Whatever it
//! believes comes from [`KnowledgeBase`] entries and active
//! [`ContextInjection`]s, so a withheld rule produces plans that fail in the
//! world in exactly the way the missing knowledge predicts.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::craftworld::{Biome, Goal, ItemId, RuleSet, SubTask, WorldState};

/// One expressible unit of domain knowledge.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Knowledge {
    Recipe { output: ItemId, count: u32, inputs: Vec<(ItemId, u32)>, station: Option<ItemId> },
    /// `drop` is obtained by mining `resource`.
    Source { resource: ItemId, drop: ItemId },
    /// Mining `resource` requires holding `tool`.
    ToolGate { resource: ItemId, tool: ItemId },
    /// `resource` is found by digging down.
    DigDown { resource: ItemId },
    /// `resource` does not occur in `biome`; leave it first.
    LeaveBiome { resource: ItemId, biome: Biome },
}

impl Knowledge {
    pub fn id(&self) -> String {
        match self {
            Knowledge::Recipe { output, .. } => format!("recipe:{output}"),
            Knowledge::Source { resource, .. } => format!("source:{resource}"),
            Knowledge::ToolGate { resource, .. } => format!("tool:{resource}"),
            Knowledge::DigDown { resource } => format!("dig_down:{resource}"),
            Knowledge::LeaveBiome { resource, biome } => format!("leave_biome:{resource}:{biome}"),
        }
    }

    pub fn is_heuristic(&self) -> bool {
        matches!(self, Knowledge::DigDown { .. } | Knowledge::LeaveBiome { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapProfile {
    pub name: String,
    pub withheld: Vec<String>,
}

impl GapProfile {
    pub fn full() -> Self {
        Self::from_json(include_str!("../data/gap_profiles/full.json")).expect("bundled profile")
    }

    /// Tool-gating rule for stone withheld.
    pub fn gap_fact() -> Self {
        Self::from_json(include_str!("../data/gap_profiles/gap-fact.json")).expect("bundled profile")
    }

    /// Dig-down and leave-biome heuristics withheld.
    pub fn gap_strat() -> Self {
        Self::from_json(include_str!("../data/gap_profiles/gap-strat.json")).expect("bundled profile")
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_uppercase().as_str() {
            "FULL" => Some(Self::full()),
            "GAP-FACT" => Some(Self::gap_fact()),
            "GAP-STRAT" => Some(Self::gap_strat()),
            _ => None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub items: Vec<ItemId>,
    pub entries: Vec<Knowledge>,
    pub gap_profile: GapProfile,
}

impl KnowledgeBase {
    /// Everything the world's rule set implies, as planner knowledge.
    pub fn full(rules: &RuleSet) -> Self {
        let mut entries = vec![];
        for r in rules.recipes() {
            entries.push(Knowledge::Recipe {
                output: r.output.clone(),
                count: r.count,
                inputs: r.inputs.clone(),
                station: r.station.clone(),
            });
        }
        for m in rules.mining() {
            entries.push(Knowledge::Source { resource: m.resource.clone(), drop: m.drop_item().clone() });
            if m.tier > 0 {
                if let Some(tool) = rules.cheapest_tool(m.tier) {
                    entries.push(Knowledge::ToolGate { resource: m.resource.clone(), tool: tool.clone() });
                }
            }
            if m.is_underground() {
                entries.push(Knowledge::DigDown { resource: m.resource.clone() });
            } else if Biome::ALL.iter().any(|b| m.density_in(*b) > 0.0) {
                for b in Biome::ALL {
                    if m.density_in(b) <= 0.0 {
                        entries.push(Knowledge::LeaveBiome { resource: m.resource.clone(), biome: b });
                    }
                }
            }
        }
        Self { items: rules.items().cloned().collect(), entries, gap_profile: GapProfile::full() }
    }

    pub fn with_profile(rules: &RuleSet, profile: GapProfile) -> Self {
        let mut kb = Self::full(rules);
        kb.entries.retain(|k| !profile.withheld.contains(&k.id()));
        kb.gap_profile = profile;
        kb
    }

    /// Adds one entry; later entries shadow earlier ones with the same id.
    pub fn with(mut self, k: Knowledge) -> Self {
        self.entries.push(k);
        self
    }

    pub fn knows(&self, id: &str) -> bool {
        self.entries.iter().any(|k| k.id() == id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextInjection {
    pub text: String,
    pub parsed: Vec<Knowledge>,
    /// Remaining planning calls; `None` lasts for the rest of the episode.
    pub ttl: Option<u32>,
}

impl ContextInjection {
    pub fn new(text: impl Into<String>, parsed: Vec<Knowledge>) -> Self {
        Self { text: text.into(), parsed, ttl: None }
    }

    pub fn is_active(&self) -> bool {
        self.ttl != Some(0)
    }
}

/// Counts one planning call against every finite injection.
pub fn tick_injections(injections: &mut [ContextInjection]) {
    for inj in injections {
        if let Some(n) = inj.ttl.as_mut() {
            *n = n.saturating_sub(1);
        }
    }
}

/// What the planner may observe about the agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanningContext {
    pub inventory: BTreeMap<ItemId, u32>,
    pub depth: u32,
    pub biome: Biome,
}

impl PlanningContext {
    pub fn observe(state: &WorldState) -> Self {
        Self { inventory: state.inventory.clone(), depth: state.agent_depth, biome: state.biome_here() }
    }

    fn count(&self, item: &ItemId) -> u32 {
        self.inventory.get(item).copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub subtasks: Vec<SubTask>,
    /// Knowledge ids and injection texts the plan was built from.
    pub provenance: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlannerError {
    #[error("unknown target `{0}`")]
    UnknownTarget(ItemId),
    #[error("planner stuck: no known way to obtain `{0}`")]
    Stuck(ItemId),
}

/// Knowledge flattened into lookup tables, later entries winning.
struct Beliefs {
    recipes: BTreeMap<ItemId, (u32, Vec<(ItemId, u32)>, Option<ItemId>)>,
    sources: BTreeMap<ItemId, ItemId>,
    tools: BTreeMap<ItemId, ItemId>,
    dig: BTreeSet<ItemId>,
    leave: BTreeMap<ItemId, BTreeSet<Biome>>,
}

impl Beliefs {
    fn from<'a>(entries: impl Iterator<Item = &'a Knowledge>) -> Self {
        let mut b = Beliefs {
            recipes: BTreeMap::new(),
            sources: BTreeMap::new(),
            tools: BTreeMap::new(),
            dig: BTreeSet::new(),
            leave: BTreeMap::new(),
        };
        for k in entries {
            match k {
                Knowledge::Recipe { output, count, inputs, station } => {
                    b.recipes.insert(output.clone(), (*count, inputs.clone(), station.clone()));
                }
                Knowledge::Source { resource, drop } => {
                    b.sources.insert(drop.clone(), resource.clone());
                }
                Knowledge::ToolGate { resource, tool } => {
                    b.tools.insert(resource.clone(), tool.clone());
                }
                Knowledge::DigDown { resource } => {
                    b.dig.insert(resource.clone());
                }
                Knowledge::LeaveBiome { resource, biome } => {
                    b.leave.entry(resource.clone()).or_default().insert(*biome);
                }
            }
        }
        b
    }

    /// Consumed inputs then persistent needs (station or tool), as believed.
    fn deps(&self, item: &ItemId) -> Option<(Vec<(ItemId, u32)>, Vec<ItemId>)> {
        if let Some(res) = self.sources.get(item) {
            return Some((vec![], self.tools.get(res).cloned().into_iter().collect()));
        }
        self.recipes.get(item).map(|(_, inputs, station)| (inputs.clone(), station.iter().cloned().collect()))
    }

    fn consumer_first_order(&self, target: &ItemId) -> Result<Vec<ItemId>, PlannerError> {
        let mut post = vec![];
        let mut active = BTreeSet::new();
        let mut done = BTreeSet::new();
        self.order_visit(target, &mut active, &mut done, &mut post)?;
        post.reverse();
        Ok(post)
    }

    fn order_visit(
        &self,
        item: &ItemId,
        active: &mut BTreeSet<ItemId>,
        done: &mut BTreeSet<ItemId>,
        post: &mut Vec<ItemId>,
    ) -> Result<(), PlannerError> {
        if done.contains(item) {
            return Ok(());
        }
        if !active.insert(item.clone()) {
            return Err(PlannerError::Stuck(item.clone()));
        }
        let (inputs, persistent) = self.deps(item).ok_or_else(|| PlannerError::Stuck(item.clone()))?;
        for d in inputs.iter().map(|(i, _)| i).chain(persistent.iter()) {
            self.order_visit(d, active, done, post)?;
        }
        active.remove(item);
        done.insert(item.clone());
        post.push(item.clone());
        Ok(())
    }
}

/// Best plan for `target` under the knowledge base plus active injections.
pub fn decompose(
    target: &ItemId,
    kb: &KnowledgeBase,
    injections: &[ContextInjection],
    ctx: &PlanningContext,
) -> Result<Plan, PlannerError> {
    if !kb.items.contains(target) {
        return Err(PlannerError::UnknownTarget(target.clone()));
    }
    let active: Vec<&ContextInjection> = injections.iter().filter(|i| i.is_active()).collect();
    let mut provenance: Vec<String> = kb.entries.iter().map(Knowledge::id).collect();
    provenance.extend(active.iter().map(|i| format!("injection:{}", i.text)));
    if ctx.count(target) > 0 {
        return Ok(Plan { subtasks: vec![], provenance });
    }
    let beliefs = Beliefs::from(kb.entries.iter().chain(active.iter().flat_map(|i| i.parsed.iter())));

    // Demand propagation in consumer-first order.
    let mut consumed: BTreeMap<ItemId, u32> = BTreeMap::from([(target.clone(), 1)]);
    let mut persistent: BTreeSet<ItemId> = BTreeSet::new();
    let mut produce: BTreeMap<ItemId, u32> = BTreeMap::new();
    for item in beliefs.consumer_first_order(target)? {
        let required = consumed.get(&item).copied().unwrap_or(0) + u32::from(persistent.contains(&item));
        let need = required.saturating_sub(ctx.count(&item));
        if need == 0 {
            continue;
        }
        produce.insert(item.clone(), need);
        if let Some(res) = beliefs.sources.get(&item) {
            if let Some(tool) = beliefs.tools.get(res) {
                persistent.insert(tool.clone());
            }
        } else if let Some((count, inputs, station)) = beliefs.recipes.get(&item) {
            let crafts = need.div_ceil(*count);
            for (inp, n) in inputs {
                *consumed.entry(inp.clone()).or_insert(0) += crafts * n;
            }
            if let Some(s) = station {
                persistent.insert(s.clone());
            }
        }
    }

    let mut seq = Sequencer {
        beliefs: &beliefs,
        ctx,
        produce: &produce,
        visited: BTreeSet::new(),
        underground: ctx.depth > 0,
        biome: Some(ctx.biome),
        memo: BTreeMap::new(),
        out: vec![],
    };
    seq.visit(target);
    Ok(Plan { subtasks: seq.out, provenance })
}

struct Sequencer<'a> {
    beliefs: &'a Beliefs,
    ctx: &'a PlanningContext,
    produce: &'a BTreeMap<ItemId, u32>,
    visited: BTreeSet<ItemId>,
    underground: bool,
    biome: Option<Biome>,
    memo: BTreeMap<ItemId, bool>,
    out: Vec<SubTask>,
}

impl Sequencer<'_> {
    fn children(&self, item: &ItemId) -> Vec<ItemId> {
        self.beliefs
            .deps(item)
            .map(|(inputs, persistent)| inputs.into_iter().map(|(i, _)| i).chain(persistent).collect())
            .unwrap_or_default()
    }

    fn deep(&mut self, item: &ItemId) -> bool {
        if let Some(v) = self.memo.get(item) {
            return *v;
        }
        let mined_deep = self.beliefs.sources.get(item).is_some_and(|r| self.beliefs.dig.contains(r));
        let v = self.produce.contains_key(item) && (mined_deep || self.children(item).iter().any(|c| self.deep(c)));
        self.memo.insert(item.clone(), v);
        v
    }

    fn visit(&mut self, item: &ItemId) {
        if !self.produce.contains_key(item) || !self.visited.insert(item.clone()) {
            return;
        }
        let kids = self.children(item);
        let mut keyed: Vec<(bool, ItemId)> = kids.into_iter().map(|k| (self.deep(&k), k)).collect();
        keyed.sort_by_key(|(d, _)| *d);
        for (_, k) in &keyed {
            self.visit(k);
        }
        let until = self.ctx.count(item) + self.produce[item];
        if let Some(res) = self.beliefs.sources.get(item).cloned() {
            if self.beliefs.dig.contains(&res) {
                if !self.underground {
                    self.out.push(SubTask::new(Goal::Descend { until_visible: res.clone() }));
                    self.underground = true;
                }
            } else {
                if self.underground {
                    self.out.push(SubTask::new(Goal::Ascend));
                    self.underground = false;
                }
                if let Some(b) = self.biome {
                    if self.beliefs.leave.get(&res).is_some_and(|set| set.contains(&b)) {
                        self.out.push(SubTask::new(Goal::LeaveBiome { biome: b }));
                        self.biome = None;
                    }
                }
            }
            self.out.push(SubTask::new(Goal::Gather { resource: res, drop: item.clone(), until }));
        } else {
            self.out.push(SubTask::new(Goal::Craft { item: item.clone(), until }));
        }
    }
}

/// Replans after a failure using only what the planner already knows.
///
/// When the root cause is knowledge the planner lacks, the revised plan is the
/// same plan again and the retry fails the same way.
pub fn self_correct(
    plan: &Plan,
    target: &ItemId,
    kb: &KnowledgeBase,
    injections: &[ContextInjection],
    ctx: &PlanningContext,
) -> Plan {
    decompose(target, kb, injections, ctx).unwrap_or_else(|_| plan.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::craftworld::{shortest_plan, spawn_world, WorldConfig};

    fn forest() -> WorldState {
        spawn_world(11, &WorldConfig { spawn_biome: Some(Biome::Forest), ..WorldConfig::default() }).unwrap()
    }

    #[test]
    fn gap_fact_plan_mines_stone_bare_handed() {
        let s = forest();
        let kb = KnowledgeBase::with_profile(&s.rules, GapProfile::gap_fact());
        let plan = decompose(&"stone_pickaxe".into(), &kb, &[], &PlanningContext::observe(&s)).unwrap();
        assert!(plan.subtasks.iter().any(|t| matches!(&t.goal, Goal::Gather { resource, .. } if resource.as_str() == "stone")));
        assert!(!plan.subtasks.iter().any(|t| matches!(&t.goal, Goal::Craft { item, .. } if item.as_str() == "wooden_pickaxe")));
    }

    #[test]
    fn tool_injection_adds_wooden_pickaxe_before_mining() {
        let s = forest();
        let kb = KnowledgeBase::with_profile(&s.rules, GapProfile::gap_fact());
        let inj = ContextInjection::new(
            "use a wooden pickaxe for stone",
            vec![Knowledge::ToolGate { resource: "stone".into(), tool: "wooden_pickaxe".into() }],
        );
        let plan = decompose(&"stone_pickaxe".into(), &kb, &[inj], &PlanningContext::observe(&s)).unwrap();
        let pick = plan.subtasks.iter().position(|t| matches!(&t.goal, Goal::Craft { item, .. } if item.as_str() == "wooden_pickaxe"));
        let mine = plan.subtasks.iter().position(|t| matches!(&t.goal, Goal::Gather { resource, .. } if resource.as_str() == "stone"));
        assert!(pick.unwrap() < mine.unwrap());
    }

    #[test]
    fn full_knowledge_matches_ground_truth() {
        let s = forest();
        let kb = KnowledgeBase::full(&s.rules);
        for item in s.rules.items() {
            let plan = decompose(item, &kb, &[], &PlanningContext::observe(&s));
            match shortest_plan(item, &s, &s.rules) {
                Ok(truth) => assert_eq!(plan.unwrap().subtasks, truth, "{item}"),
                Err(_) => assert!(plan.is_err(), "{item}"),
            }
        }
    }

    #[test]
    fn expired_injection_has_no_effect() {
        let s = forest();
        let kb = KnowledgeBase::with_profile(&s.rules, GapProfile::gap_fact());
        let mut inj = ContextInjection::new(
            "use a wooden pickaxe for stone",
            vec![Knowledge::ToolGate { resource: "stone".into(), tool: "wooden_pickaxe".into() }],
        );
        inj.ttl = Some(1);
        let mut injections = vec![inj];
        let ctx = PlanningContext::observe(&s);
        let with = decompose(&"stone_pickaxe".into(), &kb, &injections, &ctx).unwrap();
        tick_injections(&mut injections);
        let without = decompose(&"stone_pickaxe".into(), &kb, &injections, &ctx).unwrap();
        assert_ne!(with.subtasks, without.subtasks);
        assert_eq!(without.subtasks, decompose(&"stone_pickaxe".into(), &kb, &[], &ctx).unwrap().subtasks);
    }

    #[test]
    fn unknown_and_stuck() {
        let s = forest();
        let kb = KnowledgeBase::full(&s.rules);
        let ctx = PlanningContext::observe(&s);
        assert_eq!(decompose(&"diamond".into(), &kb, &[], &ctx), Err(PlannerError::UnknownTarget("diamond".into())));
        let mut kb = kb;
        kb.entries.retain(|k| k.id() != "source:log");
        assert_eq!(decompose(&"plank".into(), &kb, &[], &ctx).unwrap_err(), PlannerError::Stuck("log".into()));
    }

    #[test]
    fn gap_profiles_serialize() {
        let p = GapProfile::gap_strat();
        assert_eq!(GapProfile::from_json(&serde_json::to_string(&p).unwrap()).unwrap(), p);
        assert!(GapProfile::by_name("gap-fact").is_some());
    }
}
