//! Tech-tree data: items, recipes and mining rules.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::CraftError;
use super::world::Biome;

/// Symbolic item identifier (`log`, `plank`, `stone_pickaxe`, ...).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(String);

impl ItemId {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ItemId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemDef {
    pub name: ItemId,
    /// Mining tier granted when held (0 = not a tool).
    #[serde(default)]
    pub tool_tier: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub output: ItemId,
    pub count: u32,
    pub inputs: Vec<(ItemId, u32)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub station: Option<ItemId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningRule {
    pub resource: ItemId,
    /// hand=0 < wooden=1 < stone=2 < iron=3
    pub tier: u8,
    pub depth_min: u32,
    pub depth_max: u32,
    /// Item added to the inventory on success; defaults to the resource itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop: Option<ItemId>,
    /// Fraction of columns of each biome holding a deposit. Absent means every column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<BTreeMap<Biome, f64>>,
}

impl MiningRule {
    pub fn drop_item(&self) -> &ItemId {
        self.drop.as_ref().unwrap_or(&self.resource)
    }

    pub fn density_in(&self, biome: Biome) -> f64 {
        match &self.density {
            None => 1.0,
            Some(map) => map.get(&biome).copied().unwrap_or(0.0),
        }
    }

    pub fn in_band(&self, depth: u32) -> bool {
        (self.depth_min..=self.depth_max).contains(&depth)
    }

    pub fn is_underground(&self) -> bool {
        self.depth_min > 0
    }
}

/// The full, ground-truth rule set. Validated on construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRuleSet", into = "RawRuleSet")]
pub struct RuleSet {
    items: Vec<ItemDef>,
    recipes: Vec<Recipe>,
    mining: Vec<MiningRule>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RawRuleSet {
    items: Vec<ItemDef>,
    recipes: Vec<Recipe>,
    mining: Vec<MiningRule>,
}

impl TryFrom<RawRuleSet> for RuleSet {
    type Error = CraftError;

    fn try_from(raw: RawRuleSet) -> Result<Self, Self::Error> {
        RuleSet::new(raw.items, raw.recipes, raw.mining)
    }
}

impl From<RuleSet> for RawRuleSet {
    fn from(r: RuleSet) -> Self {
        RawRuleSet { items: r.items, recipes: r.recipes, mining: r.mining }
    }
}

const DEFAULT_RULES: &str = include_str!("../../data/rules.json");

impl RuleSet {
    pub fn new(items: Vec<ItemDef>, recipes: Vec<Recipe>, mining: Vec<MiningRule>) -> Result<Self, CraftError> {
        let rs = Self { items, recipes, mining };
        rs.validate()?;
        Ok(rs)
    }

    /// The bundled desk-scale tech tree.
    pub fn standard() -> Self {
        Self::from_json(DEFAULT_RULES).expect("bundled rules.json is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, CraftError> {
        serde_json::from_str(text).map_err(|e| CraftError::Config(format!("rules: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("rule set serializes")
    }

    fn validate(&self) -> Result<(), CraftError> {
        let names: BTreeSet<&ItemId> = self.items.iter().map(|i| &i.name).collect();
        if names.len() != self.items.len() {
            return Err(CraftError::Config("duplicate item names".into()));
        }
        let known = |id: &ItemId| -> Result<(), CraftError> {
            if names.contains(id) { Ok(()) } else { Err(CraftError::UnknownItem(id.clone())) }
        };
        for r in &self.recipes {
            known(&r.output)?;
            if r.count == 0 {
                return Err(CraftError::Config(format!("recipe {} has zero output", r.output)));
            }
            for (inp, n) in &r.inputs {
                known(inp)?;
                if *n == 0 {
                    return Err(CraftError::Config(format!("recipe {} has zero-count input", r.output)));
                }
                if inp == &r.output {
                    return Err(CraftError::Config(format!("recipe {} consumes its own output", r.output)));
                }
            }
            if let Some(s) = &r.station {
                known(s)?;
            }
        }
        for m in &self.mining {
            known(&m.resource)?;
            known(m.drop_item())?;
            if m.depth_min > m.depth_max {
                return Err(CraftError::Config(format!("mining band for {} is empty", m.resource)));
            }
            if m.tier > 0 && self.cheapest_tool(m.tier).is_none() {
                return Err(CraftError::Config(format!("no tool reaches tier {} for {}", m.tier, m.resource)));
            }
        }
        // every item is producible or raw, and the production graph is acyclic
        for item in &self.items {
            if self.recipe_for(&item.name).is_none()
                && self.source_of(&item.name).is_none()
                && self.mining_rule(&item.name).is_none()
            {
                return Err(CraftError::Config(format!("item {} has no source", item.name)));
            }
        }
        self.topo_order()?;
        Ok(())
    }

    pub fn items(&self) -> impl Iterator<Item = &ItemId> {
        self.items.iter().map(|i| &i.name)
    }

    pub fn recipes(&self) -> &[Recipe] {
        &self.recipes
    }

    pub fn mining(&self) -> &[MiningRule] {
        &self.mining
    }

    pub fn is_known(&self, id: &ItemId) -> bool {
        self.items.iter().any(|i| &i.name == id)
    }

    pub fn check_known(&self, id: &ItemId) -> Result<(), CraftError> {
        if self.is_known(id) { Ok(()) } else { Err(CraftError::UnknownItem(id.clone())) }
    }

    pub fn tool_tier(&self, id: &ItemId) -> u8 {
        self.items.iter().find(|i| &i.name == id).map_or(0, |i| i.tool_tier)
    }

    pub fn recipe_for(&self, id: &ItemId) -> Option<&Recipe> {
        self.recipes.iter().find(|r| &r.output == id)
    }

    /// The mining rule for a resource name.
    pub fn mining_rule(&self, resource: &ItemId) -> Option<&MiningRule> {
        self.mining.iter().find(|m| &m.resource == resource)
    }

    /// The mining rule whose drop is `item`.
    pub fn source_of(&self, item: &ItemId) -> Option<&MiningRule> {
        self.mining.iter().find(|m| m.drop_item() == item)
    }

    /// Lowest-tier tool item that satisfies `tier`, ties broken by declaration order.
    pub fn cheapest_tool(&self, tier: u8) -> Option<&ItemId> {
        self.items
            .iter()
            .filter(|i| i.tool_tier >= tier && i.tool_tier > 0)
            .min_by_key(|i| i.tool_tier)
            .map(|i| &i.name)
    }

    /// Direct production dependencies of an item: consumed inputs, then
    /// persistent requirements (station or mining tool).
    pub fn dependencies(&self, item: &ItemId) -> (Vec<(ItemId, u32)>, Vec<ItemId>) {
        if let Some(m) = self.source_of(item) {
            let tools = if m.tier > 0 { self.cheapest_tool(m.tier).cloned().into_iter().collect() } else { vec![] };
            return (vec![], tools);
        }
        if let Some(r) = self.recipe_for(item) {
            return (r.inputs.clone(), r.station.iter().cloned().collect());
        }
        (vec![], vec![])
    }

    /// Items ordered so every item precedes its dependencies (consumers first).
    pub fn topo_order(&self) -> Result<Vec<ItemId>, CraftError> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            None,
            Active,
            Done,
        }
        let idx = |id: &ItemId| self.items.iter().position(|i| &i.name == id).unwrap();
        let mut marks = vec![Mark::None; self.items.len()];
        let mut post = Vec::with_capacity(self.items.len());
        fn visit(
            rs: &RuleSet,
            id: &ItemId,
            marks: &mut [Mark],
            post: &mut Vec<ItemId>,
            idx: &dyn Fn(&ItemId) -> usize,
        ) -> Result<(), CraftError> {
            let i = idx(id);
            match marks[i] {
                Mark::Done => return Ok(()),
                Mark::Active => return Err(CraftError::Config(format!("recipe cycle through {id}"))),
                Mark::None => {}
            }
            marks[i] = Mark::Active;
            let (inputs, persistent) = rs.dependencies(id);
            for (d, _) in &inputs {
                visit(rs, d, marks, post, idx)?;
            }
            for d in &persistent {
                visit(rs, d, marks, post, idx)?;
            }
            marks[i] = Mark::Done;
            post.push(id.clone());
            Ok(())
        }
        for item in &self.items {
            visit(self, &item.name, &mut marks, &mut post, &idx)?;
        }
        post.reverse();
        Ok(post)
    }
}
