//! One seeded episode: plan, perform, self-correct, and ask for help when the
//! autonomy threshold is crossed.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::craftworld::{spawn_world_with_rules, Action, Goal, ItemId, Outcome, RuleSet, SubTask, WorldState};
use crate::hfm::{
    run_dialogue, sanitize, serialize_segments, AnswerStyle, Decode, DialogueInput, DialogueLimits, DialoguePolicy,
    ExpertBackend, ExpertResponse, ImpasseContext, Query, Segment, SegmentKind, Slot, NO_RESPONSE,
};
use crate::pim::{FailureTracker, NMax, DEFAULT_N_MAX, DEFAULT_S_MAX};
use crate::planner::{decompose, self_correct, ContextInjection, GapProfile, KnowledgeBase, Plan, PlanningContext};
use crate::qem::{apply, route, Guidance, GuidanceSource};

use super::tasks::TaskSpec;
use super::HarnessError;

pub const RECORD_SCHEMA_VERSION: u32 = 1;
/// Simulated wall-clock cost of one primitive action.
pub const SECONDS_PER_STEP: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plan and self-correct only; never asks.
    Baseline,
    /// One raw failure log out, one raw reply back, injected verbatim.
    Log,
    /// Structured dialogue, synthesized guidance, typed routing.
    Full,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Log => "log",
            Variant::Full => "full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "baseline" => Ok(Variant::Baseline),
            "log" => Ok(Variant::Log),
            "full" => Ok(Variant::Full),
            other => Err(format!("unknown variant `{other}` (baseline, log, full)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameworkConfig {
    pub variant: Variant,
    pub n_max: NMax,
    pub s_max: u32,
    /// Simulated review time charged per scripted reply.
    pub review_cost: Duration,
    /// Probability that a raw-log reply omits the key fix.
    pub reply_noise: f64,
    pub dialogue: DialogueLimits,
    pub expert_timeout: Duration,
    /// Consecutive failures after which the performer's search stops keeping
    /// to the current biome.
    pub cross_after: u32,
}

impl Default for FrameworkConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            n_max: NMax::Finite(DEFAULT_N_MAX),
            s_max: DEFAULT_S_MAX,
            review_cost: Duration::from_secs(15),
            reply_noise: 0.2,
            dialogue: DialogueLimits { budget: 3, max_actions: 6 },
            expert_timeout: Duration::from_secs(120),
            cross_after: 2,
        }
    }
}

impl FrameworkConfig {
    pub fn variant(variant: Variant) -> Self {
        let n_max = if variant == Variant::Baseline { NMax::Infinite } else { NMax::Finite(DEFAULT_N_MAX) };
        Self { variant, n_max, ..Self::default() }
    }

    /// Baseline never asks, whatever the configured threshold.
    pub fn effective_n_max(&self) -> NMax {
        match self.variant {
            Variant::Baseline => NMax::Infinite,
            _ => self.n_max,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerEvent {
    pub step: u64,
    pub n_fail: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseTiming {
    pub query_id: String,
    pub t_review_start: u64,
    pub t_submit: u64,
}

/// Everything an episode leaves behind. Deliberately carries no variant tag so
/// a run that never asks is indistinguishable from the baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub schema_version: u32,
    pub task_id: String,
    pub seed: u64,
    pub success: bool,
    pub steps: u64,
    pub t_agent_s: f64,
    pub t_human_s: f64,
    pub t_total_s: f64,
    pub queries: u32,
    /// Serialized transcripts, one per help request.
    pub transcripts: Vec<String>,
    pub trigger_events: Vec<TriggerEvent>,
    pub responses: Vec<ResponseTiming>,
    pub final_inventory: BTreeMap<String, u32>,
}

impl EpisodeRecord {
    pub fn human_ms(&self) -> u64 {
        self.responses.iter().map(|r| r.t_submit - r.t_review_start).sum()
    }
}

/// The autonomous performer: turns the current sub-task into one action.
struct Performer {
    rng: ChaCha8Rng,
    heading: (i32, i32),
    run: u32,
}

const HEADINGS: [(i32, i32); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

impl Performer {
    fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15), heading: (1, 0), run: 0 }
    }

    fn wander(&mut self, state: &WorldState, keep_biome: bool) -> Action {
        let here = state.biome_here();
        let stays = |h: (i32, i32)| {
            let w = state.grid.width as i64;
            let x = (state.agent_pos.0 as i64 + h.0 as i64).rem_euclid(w) as u32;
            state.grid.biome(x, state.agent_pos.1) == here
        };
        if self.run == 0 || (keep_biome && !stays(self.heading)) {
            let options: Vec<(i32, i32)> =
                HEADINGS.iter().copied().filter(|h| !keep_biome || stays(*h)).collect();
            self.heading = options[self.rng.gen_range(0..options.len())];
            self.run = self.rng.gen_range(1..=6);
        }
        self.run -= 1;
        Action::Move { dx: self.heading.0, dy: self.heading.1 }
    }

    fn act(&mut self, state: &WorldState, task: Option<&SubTask>, n_fail: u32, cross_after: u32) -> Action {
        let Some(task) = task else { return Action::Noop };
        match &task.goal {
            Goal::Gather { resource, .. } => {
                if state.visible(resource) {
                    Action::Mine(resource.clone())
                } else {
                    self.wander(state, state.agent_depth == 0 && n_fail < cross_after)
                }
            }
            Goal::Craft { item, .. } => Action::Craft(item.clone()),
            Goal::Descend { .. } => Action::DigDown,
            Goal::Ascend => Action::ClimbUp,
            Goal::LeaveBiome { .. } => Action::Move { dx: 1, dy: 0 },
        }
    }
}

fn failure_string(reason: &str, item: &ItemId) -> String {
    format!("{reason}({item})")
}

/// What went wrong on the sub-task that just timed out.
fn timeout_evidence(task: Option<&SubTask>, last: Option<&String>, target: &ItemId) -> String {
    match task.map(|t| &t.goal) {
        Some(Goal::Gather { resource, .. }) => match last {
            Some(f) if f.ends_with(&format!("({resource})")) => f.clone(),
            _ => failure_string("resource_absent", resource),
        },
        Some(Goal::Descend { until_visible }) => failure_string("resource_absent", until_visible),
        Some(Goal::Craft { item, .. }) => last.cloned().unwrap_or_else(|| failure_string("missing_inputs", item)),
        _ => last.cloned().unwrap_or_else(|| failure_string("resource_absent", target)),
    }
}

/// The dialogue's open slots, derived from the evidence string.
fn evidence_slots(evidence: &str) -> Vec<Slot> {
    let Some((reason, item)) = evidence.strip_suffix(')').and_then(|e| e.split_once('(')) else {
        return vec![];
    };
    let relation = match reason {
        "tool_tier_insufficient" => "required_tool",
        "resource_absent" => "location",
        _ => "recipe",
    };
    vec![Slot { subject: Some(item.replace('_', " ")), relation: relation.to_owned(), value: None }]
}

pub fn bundled_policy() -> &'static DialoguePolicy {
    static P: OnceLock<DialoguePolicy> = OnceLock::new();
    P.get_or_init(DialoguePolicy::bundled)
}

struct HelpResult {
    transcript: String,
    queries: u32,
    responses: Vec<ExpertResponse>,
    guidance: Option<Guidance>,
}

fn raw_log(ctx: &ImpasseContext, task: Option<&SubTask>) -> String {
    let sub = task.map_or_else(|| "none".to_owned(), |t| t.to_string());
    format!("stuck on `{sub}` | {}", ctx.prompt().replace('\n', " | "))
}

fn ask_log(expert: &mut dyn ExpertBackend, ctx: &ImpasseContext, task: Option<&SubTask>, id: String, timeout: Duration) -> HelpResult {
    let text = sanitize(&raw_log(ctx, task));
    let query = Query { id: id.clone(), text: text.clone(), context_snapshot: ctx.prompt() };
    let mut responses = vec![];
    let reply = match expert.ask(&query, timeout) {
        Ok(r) if r.query_id == id && r.t_submit >= r.t_review_start && !r.text.trim().is_empty() => {
            let t = r.text.clone();
            responses.push(r);
            t
        }
        _ => NO_RESPONSE.to_owned(),
    };
    let segments = [Segment::new(SegmentKind::Search, text), Segment::new(SegmentKind::Result, sanitize(&reply))];
    let guidance = (reply != NO_RESPONSE).then_some(Guidance { text: reply, source: GuidanceSource::RawLogReply });
    HelpResult { transcript: serialize_segments(&segments), queries: 1, responses, guidance }
}

fn progress(task: &TaskSpec, seed: u64, state: &WorldState, queries: u32, responses: &[ExpertResponse], finished: bool) -> serde_json::Value {
    let human_ms: u64 = responses.iter().map(ExpertResponse::review_ms).sum();
    serde_json::json!({
        "episode": format!("{}-{seed}", task.id),
        "task": task.id,
        "seed": seed,
        "step": state.step_count,
        "queries": queries,
        "t_agent_s": state.step_count as f64 * SECONDS_PER_STEP,
        "t_human_s": human_ms as f64 / 1000.0,
        "finished": finished,
        "success": state.has(&task.target),
    })
}

pub fn run_episode(
    task: &TaskSpec,
    cfg: &FrameworkConfig,
    expert: &mut dyn ExpertBackend,
    seed: u64,
) -> Result<EpisodeRecord, HarnessError> {
    run_episode_with(task, cfg, bundled_policy(), expert, seed)
}

pub fn run_episode_with(
    task: &TaskSpec,
    cfg: &FrameworkConfig,
    policy: &DialoguePolicy,
    expert: &mut dyn ExpertBackend,
    seed: u64,
) -> Result<EpisodeRecord, HarnessError> {
    let rules = Arc::new(RuleSet::standard());
    let mut state = spawn_world_with_rules(seed, &task.world_config, rules.clone())?;
    let profile = GapProfile::by_name(&task.gap_profile).ok_or_else(|| HarnessError::UnknownGapProfile(task.gap_profile.clone()))?;
    let kb = KnowledgeBase::with_profile(&rules, profile);
    let target = &task.target;
    let mut injections: Vec<ContextInjection> = vec![];
    let replan = |prev: Option<&Plan>, state: &WorldState, inj: &[ContextInjection]| -> Plan {
        let ctx = PlanningContext::observe(state);
        match prev {
            Some(p) => self_correct(p, target, &kb, inj, &ctx),
            None => decompose(target, &kb, inj, &ctx).unwrap_or(Plan { subtasks: vec![], provenance: vec![] }),
        }
    };
    let mut plan = replan(None, &state, &injections);
    let mut cursor = 0usize;
    let mut tracker = FailureTracker::new(cfg.s_max, cfg.effective_n_max());
    let mut performer = Performer::new(seed);
    let mut queue: VecDeque<Action> = VecDeque::new();
    let mut failures: Vec<String> = vec![];
    let mut transcripts = vec![];
    let mut triggers = vec![];
    let mut responses: Vec<ExpertResponse> = vec![];
    let mut queries = 0u32;
    let mut helps = 0u32;

    while !state.has(target) && state.step_count < u64::from(task.episode_step_budget) {
        while plan.subtasks.get(cursor).is_some_and(|t| t.is_satisfied(&state)) {
            cursor += 1;
            tracker.restart_subtask();
        }
        let current = plan.subtasks.get(cursor);
        let action = match queue.pop_front() {
            Some(a) => a,
            None => performer.act(&state, current, tracker.n_fail(), cfg.cross_after),
        };
        if let Outcome::Failed(f) = state.step(&action)? {
            if let Some(item) = &f.item {
                failures.push(failure_string(f.reason.as_str(), item));
            }
        }
        let done = current.is_some_and(|t| t.is_satisfied(&state));
        if !tracker.observe_step(done) {
            if done {
                cursor += 1;
            }
            continue;
        }
        if state.has(target) {
            break;
        }

        let evidence = timeout_evidence(current, failures.last(), target);
        failures.push(evidence.clone());
        if cfg.variant != Variant::Baseline && tracker.should_seek_help() {
            triggers.push(TriggerEvent { step: state.step_count, n_fail: tracker.n_fail() });
            let ctx = ImpasseContext {
                task: task.id.clone(),
                target: target.to_string(),
                failures: failures.iter().rev().take(8).rev().cloned().collect(),
                inventory: state.inventory.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
                biome: state.biome_here().to_string(),
                depth: state.agent_depth,
            };
            expert.begin_impasse(&ctx);
            let prefix = format!("{}-{seed}-h{helps}", task.id);
            helps += 1;
            let help = match cfg.variant {
                Variant::Log => ask_log(expert, &ctx, current, format!("{prefix}-q0"), cfg.expert_timeout),
                _ => {
                    let input = DialogueInput {
                        prompt: ctx.prompt(),
                        slots: evidence_slots(&evidence),
                        chained: false,
                        style: AnswerStyle::Guidance,
                        id_prefix: prefix,
                    };
                    let out = run_dialogue(policy, expert, &input, cfg.dialogue, cfg.expert_timeout, &mut Decode::<ChaCha8Rng>::Greedy)?;
                    HelpResult {
                        transcript: out.transcript.serialize(),
                        queries: out.queries.len() as u32,
                        guidance: Some(Guidance { text: out.plan.text.clone(), source: GuidanceSource::HfmSynthesized }),
                        responses: out.responses,
                    }
                }
            };
            transcripts.push(help.transcript);
            queries += help.queries;
            responses.extend(help.responses);
            if let Some(g) = help.guidance {
                let decision = route(&g).or_else(|_| route(&Guidance { source: GuidanceSource::RawLogReply, ..g }));
                if let Ok(d) = decision {
                    apply(&d, &mut injections, &mut queue);
                }
            }
            plan = replan(None, &state, &injections);
            expert.episode_update(&progress(task, seed, &state, queries, &responses, false));
        } else {
            plan = replan(Some(&plan), &state, &injections);
        }
        cursor = 0;
    }

    if helps > 0 {
        expert.episode_update(&progress(task, seed, &state, queries, &responses, true));
    }
    let steps = state.step_count;
    let t_agent_s = steps as f64 * SECONDS_PER_STEP;
    let human_ms: u64 = responses.iter().map(ExpertResponse::review_ms).sum();
    let t_human_s = human_ms as f64 / 1000.0;
    Ok(EpisodeRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        task_id: task.id.clone(),
        seed,
        success: state.has(target),
        steps,
        t_agent_s,
        t_human_s,
        t_total_s: t_agent_s + t_human_s,
        queries,
        transcripts,
        trigger_events: triggers,
        responses: responses
            .iter()
            .map(|r| ResponseTiming { query_id: r.query_id.clone(), t_review_start: r.t_review_start, t_submit: r.t_submit })
            .collect(),
        final_inventory: state.inventory.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    })
}
