//! Scripted stand-in for the human expert.

use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::craftworld::{Biome, ItemId, RuleSet};
use crate::hfm::{parse_query, ExpertBackend, ExpertResponse, ExpertTimeout, ImpasseContext, Query, UNKNOWN};

/// Full-knowledge oracle with templated answers and a simulated review cost.
///
/// Structured `<relation> of <subject>` queries are answered exactly. Anything
/// else is treated as a raw failure log and gets one free-text reply naming the
/// fix for the latest failure; with probability `reply_noise` that reply is
/// vague and omits the fix.
#[derive(Clone, Debug)]
pub struct ScriptedExpert {
    rules: Arc<RuleSet>,
    review_ms: u64,
    clock_ms: u64,
    reply_noise: f64,
    rng: ChaCha8Rng,
    ctx: ImpasseContext,
}

impl ScriptedExpert {
    pub fn new(rules: Arc<RuleSet>, review_cost: Duration, reply_noise: f64, seed: u64) -> Self {
        Self {
            rules,
            review_ms: review_cost.as_millis() as u64,
            clock_ms: 0,
            reply_noise: reply_noise.clamp(0.0, 1.0),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ede4_be27_u64),
            ctx: ImpasseContext::default(),
        }
    }

    fn item(name: &str) -> ItemId {
        ItemId::new(name.trim().replace(' ', "_"))
    }

    fn tool_for(&self, resource: &ItemId) -> Option<ItemId> {
        let rule = self.rules.mining_rule(resource).or_else(|| self.rules.source_of(resource))?;
        if rule.tier == 0 {
            return None;
        }
        self.rules.cheapest_tool(rule.tier).cloned()
    }

    fn location(&self, resource: &ItemId) -> String {
        let Some(rule) = self.rules.mining_rule(resource).or_else(|| self.rules.source_of(resource)) else {
            return UNKNOWN.to_owned();
        };
        let biome = Biome::parse(&self.ctx.biome);
        if rule.is_underground() {
            "underground".to_owned()
        } else if let Some(b) = biome.filter(|b| rule.density_in(*b) == 0.0) {
            format!("outside the {b}")
        } else {
            "nearby".to_owned()
        }
    }

    fn recipe(&self, item: &ItemId) -> String {
        let Some(r) = self.rules.recipe_for(item) else {
            return UNKNOWN.to_owned();
        };
        let inputs = r.inputs.iter().map(|(i, n)| format!("{n} {}", i.as_str().replace('_', " "))).collect::<Vec<_>>();
        match &r.station {
            Some(s) => format!("{} at a {}", inputs.join(" and "), s.as_str().replace('_', " ")),
            None => inputs.join(" and "),
        }
    }

    /// Answer to a structured query.
    pub fn lookup(&self, relation: &str, subject: &str) -> String {
        let subject = Self::item(subject);
        if !self.rules.is_known(&subject) {
            return UNKNOWN.to_owned();
        }
        match relation {
            "required_tool" => self.tool_for(&subject).map_or_else(|| "none".to_owned(), |t| t.to_string()),
            "location" => self.location(&subject),
            "recipe" => self.recipe(&subject),
            _ => UNKNOWN.to_owned(),
        }
    }

    /// The key fix for the most recent failure in the impasse context.
    pub fn key_fix(&self) -> Option<String> {
        let last = self.ctx.failures.last()?;
        let (reason, item) = last.strip_suffix(')')?.split_once('(')?;
        let item = Self::item(item);
        let spaced = item.as_str().replace('_', " ");
        Some(match reason {
            "tool_tier_insufficient" => {
                format!("mine {spaced} with a {}", self.tool_for(&item)?.as_str().replace('_', " "))
            }
            "resource_absent" => match self.location(&item).as_str() {
                "underground" => format!("dig down to find {spaced}"),
                "nearby" => format!("search wider for {spaced}"),
                loc => format!("get out of the {} to find {spaced}", loc.strip_prefix("outside the ")?),
            },
            "missing_station" | "missing_inputs" => format!("make {spaced} first"),
            _ => return None,
        })
    }

    fn raw_reply(&mut self) -> String {
        let subject = self
            .ctx
            .failures
            .last()
            .and_then(|f| f.split_once('(').map(|(_, i)| i.trim_end_matches(')').replace('_', " ")))
            .unwrap_or_else(|| "it".to_owned());
        // Always draw, so the noise stream does not depend on which branch ran.
        let noisy = self.rng.gen::<f64>() < self.reply_noise;
        match self.key_fix() {
            Some(fix) if !noisy => fix,
            _ => format!("{subject} should be around here somewhere, look around"),
        }
    }

    pub fn answer(&mut self, text: &str) -> String {
        match parse_query(text) {
            Some((rel, subj)) => self.lookup(&rel, &subj),
            None => self.raw_reply(),
        }
    }

    pub fn clock_ms(&self) -> u64 {
        self.clock_ms
    }
}

impl ExpertBackend for ScriptedExpert {
    fn ask(&mut self, query: &Query, _timeout: Duration) -> Result<ExpertResponse, ExpertTimeout> {
        let text = self.answer(&query.text);
        let start = self.clock_ms;
        self.clock_ms += self.review_ms;
        Ok(ExpertResponse { query_id: query.id.clone(), text, t_review_start: start, t_submit: self.clock_ms })
    }

    fn begin_impasse(&mut self, ctx: &ImpasseContext) {
        self.ctx = ctx.clone();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn expert(noise: f64) -> ScriptedExpert {
        ScriptedExpert::new(Arc::new(RuleSet::standard()), Duration::from_secs(15), noise, 7)
    }

    fn ctx(biome: &str, failure: &str) -> ImpasseContext {
        ImpasseContext { biome: biome.into(), failures: vec![failure.into()], ..ImpasseContext::default() }
    }

    #[test]
    fn structured_answers() {
        let mut e = expert(0.0);
        e.begin_impasse(&ctx("desert", "resource_absent(log)"));
        assert_eq!(e.answer("required_tool of stone"), "wooden_pickaxe");
        assert_eq!(e.answer("required_tool of iron ore"), "stone_pickaxe");
        assert_eq!(e.answer("required_tool of log"), "none");
        assert_eq!(e.answer("location of stone"), "underground");
        assert_eq!(e.answer("location of log"), "outside the desert");
        assert_eq!(e.answer("location of cobblestone"), "underground");
        assert_eq!(e.answer("recipe of stick"), "2 plank");
        assert_eq!(e.answer("colour of stone"), UNKNOWN);
        assert_eq!(e.answer("location of unobtainium"), UNKNOWN);
    }

    #[test]
    fn raw_log_replies_name_the_fix() {
        let mut e = expert(0.0);
        e.begin_impasse(&ctx("forest", "tool_tier_insufficient(stone)"));
        assert_eq!(e.answer("stuck: tool_tier_insufficient(stone) x4"), "mine stone with a wooden pickaxe");
        e.begin_impasse(&ctx("plains", "resource_absent(stone)"));
        assert_eq!(e.answer("stuck"), "dig down to find stone");
        e.begin_impasse(&ctx("desert", "resource_absent(log)"));
        assert_eq!(e.answer("stuck"), "get out of the desert to find log");
        e.begin_impasse(&ctx("forest", "resource_absent(log)"));
        assert_eq!(e.answer("stuck"), "search wider for log");
    }

    #[test]
    fn full_noise_always_omits_the_fix() {
        let mut e = expert(1.0);
        e.begin_impasse(&ctx("forest", "tool_tier_insufficient(stone)"));
        assert_eq!(e.answer("stuck"), "stone should be around here somewhere, look around");
        // Structured queries are never noisy.
        assert_eq!(e.answer("required_tool of stone"), "wooden_pickaxe");
    }

    #[test]
    fn review_clock_advances_per_query() {
        let mut e = expert(0.0);
        let q = Query { id: "a-q0".into(), text: "location of stone".into(), context_snapshot: String::new() };
        let r0 = e.ask(&q, Duration::from_secs(1)).unwrap();
        let r1 = e.ask(&q, Duration::from_secs(1)).unwrap();
        assert_eq!((r0.t_review_start, r0.t_submit), (0, 15_000));
        assert_eq!((r1.t_review_start, r1.review_ms()), (15_000, 15_000));
        assert_eq!(r0.query_id, "a-q0");
    }

    #[test]
    fn noise_is_seeded() {
        let run = |seed| {
            let mut e = ScriptedExpert::new(Arc::new(RuleSet::standard()), Duration::ZERO, 0.5, seed);
            e.begin_impasse(&ctx("forest", "resource_absent(stone)"));
            (0..32).map(|_| e.answer("stuck")).collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }
}
