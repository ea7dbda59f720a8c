//! Guidance routing: turns expert or synthesized advice into planner context
//! and performer escape maneuvers.
//!
//! # Grammar
//!
//! Text is lowercased, underscores read as spaces, and split into clauses at
//! `, ; . ! ?`, newlines, and the words `then` / `and`. Item names are matched
//! longest-first on word boundaries (a trailing plural `s` is accepted); a
//! mentioned drop such as `cobblestone` stands for the resource that yields it.
//!
//! Per clause:
//!
//! * a tool (an item with a tool tier) and a mineable resource → tool-gating rule;
//!   a tool alone carries over and pairs with the first resource of the next clause;
//! * a macro trigger phrase from the library → that macro. `descend_to_depth`
//!   takes the first number in the clause as its argument and adds a dig-down
//!   heuristic for each mentioned resource; `escape_biome` requires a biome name
//!   and adds a leave-biome heuristic for each mentioned resource;
//! * anything else is unparsed remainder.

mod macros;

use std::collections::VecDeque;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::craftworld::{Action, Biome, ItemId, RuleSet};
use crate::planner::{ContextInjection, Knowledge};

pub use macros::{MacroAction, MacroCall, MacroDef, MacroLibrary, MacroStep, Repeat};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QemError {
    #[error("empty guidance")]
    Empty,
    #[error("no actionable content in `{0}`")]
    Unparseable(String),
    #[error("unknown macro `{0}`")]
    UnknownMacro(String),
    #[error("macro library: {0}")]
    Library(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceSource {
    HfmSynthesized,
    RawLogReply,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Guidance {
    pub text: String,
    pub source: GuidanceSource,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedGuidance {
    pub rules: Vec<Knowledge>,
    pub heuristics: Vec<Knowledge>,
    pub macros: Vec<MacroCall>,
    pub unparsed: Vec<String>,
}

impl ParsedGuidance {
    pub fn is_actionable(&self) -> bool {
        !(self.rules.is_empty() && self.heuristics.is_empty() && self.macros.is_empty())
    }

    pub fn knowledge(&self) -> Vec<Knowledge> {
        self.rules.iter().chain(&self.heuristics).cloned().collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub injections: Vec<ContextInjection>,
    pub macros: Vec<MacroAction>,
    pub unparsed_remainder: String,
}

pub struct Grammar {
    rules: RuleSet,
    /// (words, item), longest phrases first.
    phrases: Vec<(Vec<String>, ItemId)>,
    pub library: MacroLibrary,
}

fn words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_owned())
        .filter(|w| !w.is_empty())
        .collect()
}

fn split_clauses(text: &str) -> Vec<Vec<String>> {
    let norm = text.to_lowercase().replace('_', " ");
    let mut out = vec![];
    for piece in norm.split([',', ';', '.', '!', '?', '\n']) {
        let mut cur = vec![];
        for w in words(piece) {
            if w == "then" || w == "and" {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
            } else {
                cur.push(w);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

fn contains_phrase(clause: &[String], phrase: &str) -> bool {
    let p = words(phrase);
    !p.is_empty() && clause.windows(p.len()).any(|w| w == p.as_slice())
}

impl Grammar {
    pub fn new(rules: RuleSet, library: MacroLibrary) -> Self {
        let mut phrases: Vec<(Vec<String>, ItemId)> =
            rules.items().map(|i| (words(&i.as_str().replace('_', " ")), i.clone())).collect();
        phrases.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.1.cmp(&b.1)));
        Self { rules, phrases, library }
    }

    pub fn standard() -> &'static Grammar {
        static G: OnceLock<Grammar> = OnceLock::new();
        G.get_or_init(|| Grammar::new(RuleSet::standard(), MacroLibrary::standard()))
    }

    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }

    /// Items mentioned in a clause, in order.
    pub fn mentions(&self, clause: &[String]) -> Vec<ItemId> {
        let mut out = vec![];
        let mut i = 0;
        'outer: while i < clause.len() {
            for (p, item) in &self.phrases {
                let n = p.len();
                if i + n > clause.len() {
                    continue;
                }
                let matches = (0..n).all(|k| {
                    let w = &clause[i + k];
                    w == &p[k] || (k == n - 1 && w.strip_suffix('s') == Some(p[k].as_str()))
                });
                if matches {
                    out.push(item.clone());
                    i += n;
                    continue 'outer;
                }
            }
            i += 1;
        }
        out
    }

    /// Mineable resource a mention refers to (a drop maps to its source).
    fn resource_of(&self, item: &ItemId) -> Option<ItemId> {
        self.rules
            .mining_rule(item)
            .or_else(|| self.rules.source_of(item))
            .map(|m| m.resource.clone())
    }

    pub fn parse(&self, text: &str) -> ParsedGuidance {
        let mut g = ParsedGuidance::default();
        let mut pending: Option<(ItemId, String)> = None;
        for clause in split_clauses(text) {
            let joined = clause.join(" ");
            let items = self.mentions(&clause);
            let tools: Vec<&ItemId> = items.iter().filter(|i| self.rules.tool_tier(i) > 0).collect();
            let mut resources: Vec<ItemId> = vec![];
            for r in items.iter().filter(|i| self.rules.tool_tier(i) == 0).filter_map(|i| self.resource_of(i)) {
                if !resources.contains(&r) {
                    resources.push(r);
                }
            }
            let mut used = false;

            if let Some(tool) = tools.first() {
                if resources.is_empty() {
                    if let Some((_, prev)) = pending.replace(((*tool).clone(), joined.clone())) {
                        g.unparsed.push(prev);
                    }
                    continue;
                }
                for r in &resources {
                    push_unique(&mut g.rules, Knowledge::ToolGate { resource: r.clone(), tool: (*tool).clone() });
                }
                used = true;
            } else if let Some((tool, _)) = pending.take_if(|_| !resources.is_empty()) {
                push_unique(&mut g.rules, Knowledge::ToolGate { resource: resources[0].clone(), tool });
                used = true;
            }
            if let Some((_, prev)) = pending.take() {
                g.unparsed.push(prev);
            }

            for def in &self.library.macros {
                if !def.triggers.iter().any(|t| contains_phrase(&clause, t)) {
                    continue;
                }
                let arg = match def.name.as_str() {
                    "escape_biome" => {
                        let Some(biome) = clause.iter().find_map(|w| Biome::parse(w.trim_end_matches('s'))) else {
                            continue;
                        };
                        for r in &resources {
                            push_unique(&mut g.heuristics, Knowledge::LeaveBiome { resource: r.clone(), biome });
                        }
                        None
                    }
                    "descend_to_depth" => {
                        for r in &resources {
                            push_unique(&mut g.heuristics, Knowledge::DigDown { resource: r.clone() });
                        }
                        clause.iter().find_map(|w| w.parse::<u32>().ok())
                    }
                    _ => None,
                };
                let call = MacroCall { name: def.name.clone(), arg };
                if !g.macros.contains(&call) {
                    g.macros.push(call);
                }
                used = true;
            }
            if !used {
                g.unparsed.push(joined);
            }
        }
        if let Some((_, prev)) = pending {
            g.unparsed.push(prev);
        }
        g
    }

    pub fn route(&self, guidance: &Guidance) -> Result<RoutingDecision, QemError> {
        let text = guidance.text.trim();
        if text.is_empty() {
            return Err(QemError::Empty);
        }
        let parsed = self.parse(text);
        if !parsed.is_actionable() && guidance.source == GuidanceSource::HfmSynthesized {
            return Err(QemError::Unparseable(text.to_owned()));
        }
        let mut injections = vec![];
        let knowledge = parsed.knowledge();
        if !knowledge.is_empty() {
            injections.push(ContextInjection::new(text, knowledge));
        }
        let remainder = parsed.unparsed.join("; ");
        if guidance.source == GuidanceSource::RawLogReply && !remainder.is_empty() {
            injections.push(ContextInjection::new(remainder.clone(), vec![]));
        }
        let macros = parsed.macros.iter().map(|c| self.library.expand(c)).collect::<Result<_, _>>()?;
        Ok(RoutingDecision { injections, macros, unparsed_remainder: remainder })
    }
}

fn push_unique(v: &mut Vec<Knowledge>, k: Knowledge) {
    if !v.contains(&k) {
        v.push(k);
    }
}

pub fn parse_guidance(text: &str) -> ParsedGuidance {
    Grammar::standard().parse(text)
}

/// Routes with the standard rule vocabulary and macro library.
pub fn route(guidance: &Guidance) -> Result<RoutingDecision, QemError> {
    Grammar::standard().route(guidance)
}

/// Appends injections and puts macro expansions, in guidance order, at the
/// front of the performer's queue.
pub fn apply(decision: &RoutingDecision, injections: &mut Vec<ContextInjection>, queue: &mut VecDeque<Action>) {
    injections.extend(decision.injections.iter().cloned());
    for a in decision.macros.iter().rev().flat_map(|m| m.expansion.iter().rev()) {
        queue.push_front(a.clone());
    }
}
