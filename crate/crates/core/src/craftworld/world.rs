//! World generation and the primitive transition function.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rules::{ItemId, MiningRule, RuleSet};
use super::CraftError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Biome {
    Forest,
    Plains,
    Desert,
}

impl Biome {
    pub const ALL: [Biome; 3] = [Biome::Forest, Biome::Plains, Biome::Desert];

    pub fn name(self) -> &'static str {
        match self {
            Biome::Forest => "forest",
            Biome::Plains => "plains",
            Biome::Desert => "desert",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.name() == s)
    }
}

impl fmt::Display for Biome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiomeMix {
    pub forest: f64,
    pub plains: f64,
    pub desert: f64,
}

impl BiomeMix {
    fn weight(&self, b: Biome) -> f64 {
        match b {
            Biome::Forest => self.forest,
            Biome::Plains => self.plains,
            Biome::Desert => self.desert,
        }
    }
}

/// Desert bands never exceed this width and other bands are never narrower
/// than [`MIN_OPEN_BAND`], so a fixed eastward walk always clears a desert.
pub const MAX_DESERT_BAND: u32 = 8;
pub const MIN_OPEN_BAND: u32 = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub width: u32,
    pub height: u32,
    pub biome_mix: BiomeMix,
    #[serde(default)]
    pub spawn_biome: Option<Biome>,
    #[serde(default = "default_max_depth")]
    pub max_depth: u32,
}

fn default_max_depth() -> u32 {
    47
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            width: 48,
            height: 32,
            biome_mix: BiomeMix { forest: 0.4, plains: 0.3, desert: 0.3 },
            spawn_biome: None,
            max_depth: default_max_depth(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), CraftError> {
        if self.width == 0 || self.height == 0 {
            return Err(CraftError::Config("zero-area grid".into()));
        }
        if self.width < 8 || self.height < 8 {
            return Err(CraftError::Config(format!("grid {}x{} is smaller than 8x8", self.width, self.height)));
        }
        let m = self.biome_mix;
        let parts = [m.forest, m.plains, m.desert];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(CraftError::Config("negative biome proportion".into()));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CraftError::Config("biome proportions must sum to 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub width: u32,
    pub height: u32,
    pub max_depth: u32,
    /// Biome per x; bands run the full height.
    pub band_biomes: Vec<Biome>,
    /// Bit `i` set when mining rule `i` (with a density map) has a deposit in the column.
    deposits: Vec<u32>,
}

impl Grid {
    pub fn biome(&self, x: u32, _y: u32) -> Biome {
        self.band_biomes[x as usize]
    }

    fn has_deposit(&self, x: u32, y: u32, rule_idx: usize) -> bool {
        self.deposits[(y * self.width + x) as usize] & (1 << rule_idx) != 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Move { dx: i32, dy: i32 },
    DigDown,
    ClimbUp,
    Mine(ItemId),
    Craft(ItemId),
    Place(ItemId),
    Noop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonCode {
    ToolTierInsufficient,
    ResourceAbsent,
    MissingStation,
    MissingInputs,
    Blocked,
}

impl ReasonCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ReasonCode::ToolTierInsufficient => "tool_tier_insufficient",
            ReasonCode::ResourceAbsent => "resource_absent",
            ReasonCode::MissingStation => "missing_station",
            ReasonCode::MissingInputs => "missing_inputs",
            ReasonCode::Blocked => "blocked",
        }
    }
}

impl fmt::Display for ReasonCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub reason: ReasonCode,
    pub item: Option<ItemId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Ok,
    Failed(Failure),
}

impl Outcome {
    fn fail(reason: ReasonCode, item: Option<&ItemId>) -> Self {
        Outcome::Failed(Failure { reason, item: item.cloned() })
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, Outcome::Ok)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub grid: Arc<Grid>,
    pub rules: Arc<RuleSet>,
    pub agent_pos: (u32, u32),
    pub agent_depth: u32,
    pub inventory: BTreeMap<ItemId, u32>,
    pub step_count: u64,
    pub rng_seed: u64,
    /// Stations placed in the world, keyed by (x, y, depth).
    pub placed: BTreeMap<(u32, u32, u32), ItemId>,
}

pub fn spawn_world(seed: u64, config: &WorldConfig) -> Result<WorldState, CraftError> {
    spawn_world_with_rules(seed, config, Arc::new(RuleSet::standard()))
}

pub fn spawn_world_with_rules(seed: u64, config: &WorldConfig, rules: Arc<RuleSet>) -> Result<WorldState, CraftError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let band_biomes = generate_bands(&mut rng, config);

    let mut deposits = vec![0u32; (config.width * config.height) as usize];
    for y in 0..config.height {
        for x in 0..config.width {
            let biome = band_biomes[x as usize];
            let cell = &mut deposits[(y * config.width + x) as usize];
            for (i, rule) in rules.mining().iter().enumerate() {
                if rule.density.is_some() {
                    let roll: f64 = rng.gen();
                    if roll < rule.density_in(biome) {
                        *cell |= 1 << i;
                    }
                }
            }
        }
    }

    let candidates: Vec<u32> = match config.spawn_biome {
        Some(b) => (0..config.width).filter(|&x| band_biomes[x as usize] == b).collect(),
        None => vec![],
    };
    let x = if candidates.is_empty() {
        rng.gen_range(0..config.width)
    } else {
        candidates[rng.gen_range(0..candidates.len())]
    };
    let y = rng.gen_range(0..config.height);

    Ok(WorldState {
        grid: Arc::new(Grid { width: config.width, height: config.height, max_depth: config.max_depth, band_biomes, deposits }),
        rules,
        agent_pos: (x, y),
        agent_depth: 0,
        inventory: BTreeMap::new(),
        step_count: 0,
        rng_seed: seed,
        placed: BTreeMap::new(),
    })
}

fn pick_biome(rng: &mut ChaCha8Rng, mix: &BiomeMix, exclude: &[Biome]) -> Option<Biome> {
    let allowed: Vec<(Biome, f64)> =
        Biome::ALL.into_iter().filter(|b| !exclude.contains(b)).map(|b| (b, mix.weight(b))).filter(|(_, w)| *w > 0.0).collect();
    let total: f64 = allowed.iter().map(|(_, w)| w).sum();
    if total <= 0.0 {
        return None;
    }
    let mut roll = rng.gen::<f64>() * total;
    for (b, w) in &allowed {
        if roll < *w {
            return Some(*b);
        }
        roll -= w;
    }
    allowed.last().map(|(b, _)| *b)
}

fn generate_bands(rng: &mut ChaCha8Rng, config: &WorldConfig) -> Vec<Biome> {
    let mix = config.biome_mix;
    let mixed = mix.desert > 0.0 && mix.desert < 1.0;
    let mut last = Vec::new();
    for _attempt in 0..256 {
        let mut bands = Vec::with_capacity(config.width as usize);
        let mut prev: Option<Biome> = None;
        while bands.len() < config.width as usize {
            let exclude: &[Biome] = if mixed && prev == Some(Biome::Desert) { &[Biome::Desert] } else { &[] };
            let biome = pick_biome(rng, &mix, exclude).unwrap_or(Biome::Plains);
            let width = if biome == Biome::Desert {
                rng.gen_range(4..=MAX_DESERT_BAND)
            } else {
                rng.gen_range(MIN_OPEN_BAND..=16)
            };
            for _ in 0..width {
                if bands.len() < config.width as usize {
                    bands.push(biome);
                }
            }
            prev = Some(biome);
        }
        if !mixed || bands_are_escapable(&bands) {
            return bands;
        }
        last = bands;
    }
    last
}

/// Cyclic run lengths: desert runs at most `MAX_DESERT_BAND`, others at least `MIN_OPEN_BAND`.
pub fn bands_are_escapable(bands: &[Biome]) -> bool {
    let n = bands.len();
    let Some(start) = (0..n).find(|&i| bands[i] != bands[(i + n - 1) % n]) else {
        return true;
    };
    let mut i = 0;
    while i < n {
        let b = bands[(start + i) % n];
        let mut len = 0;
        while i < n && bands[(start + i) % n] == b {
            len += 1;
            i += 1;
        }
        let ok = if b == Biome::Desert { len <= MAX_DESERT_BAND } else { len >= MIN_OPEN_BAND };
        if !ok {
            return false;
        }
    }
    true
}

impl WorldState {
    pub fn biome_here(&self) -> Biome {
        self.grid.biome(self.agent_pos.0, self.agent_pos.1)
    }

    pub fn count(&self, item: &ItemId) -> u32 {
        self.inventory.get(item).copied().unwrap_or(0)
    }

    pub fn has(&self, item: &ItemId) -> bool {
        self.count(item) > 0
    }

    pub fn tool_tier(&self) -> u8 {
        self.inventory.iter().filter(|(_, n)| **n > 0).map(|(i, _)| self.rules.tool_tier(i)).max().unwrap_or(0)
    }

    /// Mining rules with a deposit at the given column and depth.
    pub fn resources_at(&self, x: u32, y: u32, depth: u32) -> Vec<&MiningRule> {
        let biome = self.grid.biome(x, y);
        self.rules
            .mining()
            .iter()
            .enumerate()
            .filter(|(i, r)| {
                r.in_band(depth) && r.density_in(biome) > 0.0 && (r.density.is_none() || self.grid.has_deposit(x, y, *i))
            })
            .map(|(_, r)| r)
            .collect()
    }

    /// What the agent can see in its own cell.
    pub fn visible(&self, resource: &ItemId) -> bool {
        let (x, y) = self.agent_pos;
        self.resources_at(x, y, self.agent_depth).iter().any(|r| &r.resource == resource)
    }

    fn add(&mut self, item: &ItemId, n: u32) {
        *self.inventory.entry(item.clone()).or_insert(0) += n;
    }

    fn take(&mut self, item: &ItemId, n: u32) {
        let slot = self.inventory.get_mut(item).expect("checked before take");
        *slot -= n;
        if *slot == 0 {
            self.inventory.remove(item);
        }
    }

    /// Applies one primitive action. Domain errors (unknown items, uncraftable
    /// targets) leave the state untouched; in-world failures cost a step.
    pub fn step(&mut self, action: &Action) -> Result<Outcome, CraftError> {
        match action {
            Action::Mine(i) | Action::Craft(i) | Action::Place(i) => self.rules.check_known(i)?,
            _ => {}
        }
        if let Action::Craft(i) = action {
            if self.rules.recipe_for(i).is_none() {
                return Err(CraftError::NoRecipe(i.clone()));
            }
        }
        self.step_count += 1;
        let outcome = match action {
            Action::Noop => Outcome::Ok,
            Action::Move { dx, dy } => {
                let w = self.grid.width as i64;
                let h = self.grid.height as i64;
                let x = (self.agent_pos.0 as i64 + *dx as i64).rem_euclid(w);
                let y = (self.agent_pos.1 as i64 + *dy as i64).rem_euclid(h);
                self.agent_pos = (x as u32, y as u32);
                Outcome::Ok
            }
            Action::DigDown => {
                if self.agent_depth >= self.grid.max_depth {
                    Outcome::fail(ReasonCode::Blocked, None)
                } else {
                    self.agent_depth += 1;
                    Outcome::Ok
                }
            }
            Action::ClimbUp => {
                if self.agent_depth == 0 {
                    Outcome::fail(ReasonCode::Blocked, None)
                } else {
                    self.agent_depth -= 1;
                    Outcome::Ok
                }
            }
            Action::Mine(r) => {
                let here = self.visible(r);
                match self.rules.mining_rule(r).cloned() {
                    Some(rule) if here => {
                        if self.tool_tier() >= rule.tier {
                            self.add(rule.drop_item(), 1);
                            Outcome::Ok
                        } else {
                            Outcome::fail(ReasonCode::ToolTierInsufficient, Some(r))
                        }
                    }
                    _ => Outcome::fail(ReasonCode::ResourceAbsent, Some(r)),
                }
            }
            Action::Craft(i) => {
                let recipe = self.rules.recipe_for(i).cloned().expect("checked above");
                let station_ok = recipe.station.as_ref().is_none_or(|s| {
                    self.has(s) || self.placed.get(&(self.agent_pos.0, self.agent_pos.1, self.agent_depth)) == Some(s)
                });
                if !station_ok {
                    Outcome::fail(ReasonCode::MissingStation, recipe.station.as_ref())
                } else if let Some((missing, _)) = recipe.inputs.iter().find(|(inp, n)| self.count(inp) < *n) {
                    Outcome::fail(ReasonCode::MissingInputs, Some(missing))
                } else {
                    for (inp, n) in &recipe.inputs {
                        self.take(inp, *n);
                    }
                    self.add(&recipe.output, recipe.count);
                    Outcome::Ok
                }
            }
            Action::Place(i) => {
                if self.has(i) {
                    self.take(i, 1);
                    self.placed.insert((self.agent_pos.0, self.agent_pos.1, self.agent_depth), i.clone());
                    Outcome::Ok
                } else {
                    Outcome::fail(ReasonCode::MissingInputs, Some(i))
                }
            }
        };
        Ok(outcome)
    }

    /// Value-style transition.
    pub fn stepped(&self, action: &Action) -> Result<(WorldState, Outcome), CraftError> {
        let mut next = self.clone();
        let out = next.step(action)?;
        Ok((next, out))
    }
}
