//! The think → search → result loop against an expert backend.

use std::collections::BTreeMap;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::policy::{is_non_answer, Decode, DialogueAction, DialogueLimits, DialoguePolicy, DialogueState, Slot, StepRecord, NO_RESPONSE, UNKNOWN};
use super::transcript::{sanitize, serialize_segments, DialogueTranscript, Segment, SegmentKind};
use crate::qem::{parse_guidance, ParsedGuidance};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    pub context_snapshot: String,
}

/// Timestamps are milliseconds on the expert's clock.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertResponse {
    pub query_id: String,
    pub text: String,
    pub t_review_start: u64,
    pub t_submit: u64,
}

impl ExpertResponse {
    pub fn review_ms(&self) -> u64 {
        self.t_submit.saturating_sub(self.t_review_start)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("no response to query {query_id}")]
pub struct ExpertTimeout {
    pub query_id: String,
}

/// Structured description of an impasse: what the expert gets to see.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImpasseContext {
    pub task: String,
    pub target: String,
    /// Recent failures, oldest first, as `reason(item)`.
    pub failures: Vec<String>,
    pub inventory: BTreeMap<String, u32>,
    pub biome: String,
    pub depth: u32,
}

impl ImpasseContext {
    pub fn inventory_digest(&self) -> String {
        if self.inventory.is_empty() {
            return "empty".to_owned();
        }
        self.inventory.iter().map(|(k, v)| format!("{k} x{v}")).collect::<Vec<_>>().join(", ")
    }

    pub fn prompt(&self) -> String {
        format!(
            "task: {} (target {})\nfailures: {}\ninventory: {}\nlocation: {} at depth {}",
            self.task,
            self.target,
            if self.failures.is_empty() { "none".to_owned() } else { self.failures.join("; ") },
            self.inventory_digest(),
            self.biome,
            self.depth
        )
    }
}

/// Where queries go. Implementations block until a reply or the timeout.
pub trait ExpertBackend {
    fn ask(&mut self, query: &Query, timeout: Duration) -> Result<ExpertResponse, ExpertTimeout>;

    /// Called once per help request before any query is sent.
    fn begin_impasse(&mut self, _ctx: &ImpasseContext) {}

    /// Progress snapshot for observers; ignored by offline backends.
    fn episode_update(&mut self, _snapshot: &serde_json::Value) {}
}

/// Query grammar: `<relation> of <subject>`, split at the first ` of `.
pub fn parse_query(text: &str) -> Option<(String, String)> {
    let (rel, subj) = text.trim().split_once(" of ")?;
    let (rel, subj) = (rel.trim(), subj.trim());
    (!rel.is_empty() && !subj.is_empty() && subj != "?").then(|| (rel.to_owned(), subj.to_owned()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerStyle {
    /// The last slot's value is the answer.
    Terminal,
    /// Each resolved slot becomes one clause of corrective guidance.
    Guidance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueInput {
    pub prompt: String,
    pub slots: Vec<Slot>,
    pub chained: bool,
    pub style: AnswerStyle,
    /// Query ids are `<id_prefix>-q<n>`.
    pub id_prefix: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesizedPlan {
    pub text: String,
    pub parsed: ParsedGuidance,
    pub budget_forced: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueOutcome {
    pub transcript: DialogueTranscript,
    pub plan: SynthesizedPlan,
    pub steps: Vec<StepRecord>,
    pub queries: Vec<Query>,
    pub responses: Vec<ExpertResponse>,
}

impl DialogueOutcome {
    pub fn searches(&self) -> usize {
        self.transcript.count(SegmentKind::Search)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DialogueError {
    #[error("query budget must be at least 1")]
    ZeroBudget,
    #[error("policy produced an invalid action distribution {0:?}")]
    InvalidPolicy(Vec<f64>),
}

fn spaced(s: &str) -> String {
    s.replace('_', " ")
}

fn single_token(s: &str) -> bool {
    !s.trim().contains(char::is_whitespace)
}

/// One guidance clause per resolved slot. Values that are bare identifiers are
/// templated; free text from a human is passed through verbatim.
fn guidance_clause(slot: &Slot) -> Option<String> {
    let v = slot.value.as_deref()?.trim();
    let subject = spaced(slot.subject.as_deref().unwrap_or("it"));
    Some(match slot.relation.as_str() {
        "required_tool" if single_token(v) => format!("use a {} for {subject}", spaced(v)),
        "location" if v == "underground" => format!("dig down to find {subject}"),
        "location" if v == "nearby" => format!("search wider for {subject}"),
        "location" => match v.strip_prefix("outside the ") {
            Some(biome) if single_token(biome) => format!("get out of the {biome} to find {subject}"),
            _ => v.to_owned(),
        },
        _ => v.to_owned(),
    })
}

pub fn compose_answer(state: &DialogueState, style: AnswerStyle) -> String {
    match style {
        AnswerStyle::Terminal => state.slots.last().and_then(|s| s.value.clone()).unwrap_or_else(|| UNKNOWN.to_owned()),
        AnswerStyle::Guidance => state.slots.iter().filter_map(guidance_clause).collect::<Vec<_>>().join(", then "),
    }
}

pub fn run_dialogue<R: Rng>(
    policy: &DialoguePolicy,
    expert: &mut dyn ExpertBackend,
    input: &DialogueInput,
    limits: DialogueLimits,
    timeout: Duration,
    decode: &mut Decode<'_, R>,
) -> Result<DialogueOutcome, DialogueError> {
    if limits.budget == 0 {
        return Err(DialogueError::ZeroBudget);
    }
    let mut st = DialogueState::new(input.slots.clone(), input.chained, limits);
    let mut segments: Vec<Segment> = vec![];
    let mut steps = vec![];
    let mut queries = vec![];
    let mut responses = vec![];
    let budget_forced = loop {
        if st.forced() {
            break true;
        }
        let (actions, mut rec, p) = policy.step(&st);
        if p.iter().any(|x| !x.is_finite()) {
            return Err(DialogueError::InvalidPolicy(p));
        }
        rec.chosen = decode.pick(&p);
        let action = actions[rec.chosen];
        steps.push(rec);
        st.record(action);
        match action {
            DialogueAction::Think => segments.push(Segment::new(SegmentKind::Think, sanitize(&st.think_text()))),
            DialogueAction::Search(k) => {
                let text = sanitize(&st.query_text(k));
                segments.push(Segment::new(SegmentKind::Search, text.clone()));
                let query = Query {
                    id: format!("{}-q{}", input.id_prefix, queries.len()),
                    text,
                    context_snapshot: format!("{}\n{}", input.prompt, serialize_segments(&segments)),
                };
                let reply = match expert.ask(&query, timeout) {
                    Ok(r) if r.query_id == query.id && r.t_submit >= r.t_review_start => {
                        let text = r.text.clone();
                        responses.push(r);
                        text
                    }
                    _ => NO_RESPONSE.to_owned(),
                };
                let reply = if reply.trim().is_empty() { NO_RESPONSE.to_owned() } else { reply };
                segments.push(Segment::new(SegmentKind::Result, sanitize(&reply)));
                st.resolve(k, &reply);
                queries.push(query);
            }
            DialogueAction::Answer => break false,
        }
    };
    let text = compose_answer(&st, input.style);
    segments.push(Segment::new(SegmentKind::Answer, sanitize(&text)));
    let parsed = match input.style {
        AnswerStyle::Guidance => parse_guidance(&text),
        AnswerStyle::Terminal => ParsedGuidance::default(),
    };
    Ok(DialogueOutcome {
        transcript: DialogueTranscript { prompt: input.prompt.clone(), segments },
        plan: SynthesizedPlan { text, parsed, budget_forced },
        steps,
        queries,
        responses,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationGap {
    NoActionableContent,
    Unparseable,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub reason: Option<ValidationGap>,
    pub rules: usize,
    pub heuristics: usize,
    pub macros: usize,
    pub unparsed: Vec<String>,
}

/// Checks the Answer against the routing grammar.
pub fn validate_answer(plan: &SynthesizedPlan) -> ValidationReport {
    let parsed = parse_guidance(&plan.text);
    let reason = if is_non_answer(&plan.text) {
        Some(ValidationGap::NoActionableContent)
    } else if !parsed.is_actionable() {
        Some(ValidationGap::Unparseable)
    } else {
        None
    };
    ValidationReport {
        valid: reason.is_none(),
        reason,
        rules: parsed.rules.len(),
        heuristics: parsed.heuristics.len(),
        macros: parsed.macros.len(),
        unparsed: parsed.unparsed,
    }
}
