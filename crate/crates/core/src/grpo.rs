//! Group-relative policy optimization for the dialogue policy.
//!
//! Each update samples a group of rollouts for one hop-QA instance from the
//! current policy, normalizes their rewards within the group, and takes one
//! plain gradient-ascent step on the clipped surrogate minus a KL penalty to
//! the initial policy.

use std::io::Write;
use std::sync::Arc;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::hfm::{
    log_probs, run_dialogue, trajectory_grad_log_prob, trajectory_log_prob, Decode, DialogueLimits, DialoguePolicy,
    DialogueTranscript, StepRecord,
};
use crate::hopqa::{self, HopInstance, HopOracle};

pub const SEARCH_COST: f64 = 0.05;
pub const FORCED_PENALTY: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GrpoError {
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error("advantages need at least 2 rewards, got {0}")]
    TooFewRewards(usize),
    #[error("non-finite value: {0}")]
    Numerical(String),
    #[error("training diverged at update {update}")]
    Diverged { update: u32, last_good: DialoguePolicy },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub group_size: usize,
    pub epsilon: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub updates: u32,
    pub seed: u64,
    /// Hop counts of training instances, cycled.
    pub hops: Vec<usize>,
    pub limits: DialogueLimits,
    pub heldout_size: usize,
    /// Held-out evaluation cadence in updates; 0 evaluates only at the end.
    pub eval_every: u32,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            epsilon: 0.2,
            beta: 0.01,
            learning_rate: 0.05,
            updates: 10_000,
            seed: 0,
            hops: vec![2, 3],
            limits: DialogueLimits::default(),
            heldout_size: 200,
            eval_every: 500,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::Config(m.to_owned()));
        if self.group_size < 2 {
            return bad("group size must be at least 2");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)");
        }
        if self.beta.is_nan() || self.beta < 0.0 || !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return bad("beta must be >= 0 and the learning rate positive");
        }
        if self.hops.is_empty() || self.hops.iter().any(|h| !(hopqa::MIN_HOPS..=hopqa::MAX_HOPS).contains(h)) {
            return bad("hop counts must lie in [2, 4]");
        }
        if self.limits.budget == 0 {
            return bad("query budget must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotRole {
    Old,
    Reference,
}

/// Frozen parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySnapshot {
    theta: Arc<[f64]>,
    role: SnapshotRole,
}

impl PolicySnapshot {
    pub fn new(policy: &DialoguePolicy, role: SnapshotRole) -> Self {
        Self { theta: policy.theta.clone().into(), role }
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn role(&self) -> SnapshotRole {
        self.role
    }

    pub fn policy(&self) -> DialoguePolicy {
        DialoguePolicy { theta: self.theta.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub steps: Vec<StepRecord>,
    pub transcript: DialogueTranscript,
    pub answer: String,
    pub log_prob_old: f64,
    pub reward: f64,
    pub correct: bool,
    pub searches: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub input: HopInstance,
    pub rollouts: Vec<Rollout>,
}

impl RolloutGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }
}

/// Exact-match score minus the per-search cost and the forced-answer penalty.
pub fn reward(score: f64, searches: usize, budget_forced: bool) -> f64 {
    score - SEARCH_COST * searches as f64 - if budget_forced { FORCED_PENALTY } else { 0.0 }
}

fn mix(seed: u64, i: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(i.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The oracle must be able to walk the whole chain.
fn check_answerable(task: &HopInstance) -> Result<(), GrpoError> {
    let mut entity = task.chain.start().to_owned();
    for h in &task.chain.hops {
        entity = task
            .kb
            .lookup(&entity, &h.relation)
            .ok_or_else(|| GrpoError::Config(format!("oracle cannot answer `{} of {entity}`", h.relation)))?
            .to_owned();
    }
    if entity != task.chain.answer() {
        return Err(GrpoError::Config("oracle walk does not reach the gold answer".into()));
    }
    Ok(())
}

pub fn rollout(policy: &DialoguePolicy, task: &HopInstance, limits: DialogueLimits, rng: Option<&mut ChaCha8Rng>) -> Rollout {
    let input = task.chain.dialogue_input(&format!("hop{}", task.seed));
    let mut oracle = HopOracle { kb: task.kb.clone() };
    let out = match rng {
        Some(r) => run_dialogue(policy, &mut oracle, &input, limits, Duration::ZERO, &mut Decode::Sample(r)),
        None => run_dialogue(policy, &mut oracle, &input, limits, Duration::ZERO, &mut Decode::<ChaCha8Rng>::Greedy),
    }
    .expect("finite policy and positive budget");
    let score = hopqa::score(&out.plan.text, &task.chain);
    let searches = out.searches();
    Rollout {
        log_prob_old: trajectory_log_prob(&policy.theta, &out.steps),
        reward: reward(score, searches, out.plan.budget_forced),
        correct: score == 1.0,
        searches,
        answer: out.plan.text,
        transcript: out.transcript,
        steps: out.steps,
    }
}

/// `g` rollouts sampled from the old policy, ordered by rollout index.
pub fn collect_group(
    old: &PolicySnapshot,
    task: &HopInstance,
    g: usize,
    seed: u64,
    limits: DialogueLimits,
) -> Result<RolloutGroup, GrpoError> {
    if g < 2 {
        return Err(GrpoError::Config("group size must be at least 2".into()));
    }
    check_answerable(task)?;
    let policy = old.policy();
    let rollouts = (0..g)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i as u64));
            rollout(&policy, task, limits, Some(&mut rng))
        })
        .collect();
    Ok(RolloutGroup { input: task.clone(), rollouts })
}

/// `(r - mean) / std` with the population std; all zeros when std < 1e-8.
pub fn normalize_advantages(rewards: &[f64]) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::TooFewRewards(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !std.is_finite() {
        return Err(GrpoError::Numerical(format!("reward std {std}")));
    }
    if std < 1e-8 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Exact KL(π_θ ∥ π_ref) summed over the trajectory's decision points, and its gradient.
pub fn trajectory_kl(theta: &[f64], reference: &[f64], steps: &[StepRecord]) -> (f64, Vec<f64>) {
    let mut kl = 0.0;
    let mut g = vec![0.0; theta.len()];
    for s in steps {
        let lp = log_probs(theta, &s.features);
        let lq = log_probs(reference, &s.features);
        let p: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
        let d: Vec<f64> = lp.iter().zip(&lq).map(|(a, b)| a - b).collect();
        let step_kl: f64 = p.iter().zip(&d).map(|(pa, da)| pa * da).sum();
        kl += step_kl;
        // ∂KL/∂θ = Σ_a p_a (d_a − KL_step) φ_a
        for (a, f) in s.features.iter().enumerate() {
            let w = p[a] * (d[a] - step_kl);
            for (gi, fi) in g.iter_mut().zip(f) {
                *gi += w * fi;
            }
        }
    }
    (kl, g)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Mean per-trajectory KL to the reference.
    pub kl: f64,
    /// Fraction of rollouts whose ratio lies outside [1−ε, 1+ε].
    pub clip_fraction: f64,
}

pub fn objective_and_gradient(
    theta: &[f64],
    group: &RolloutGroup,
    reference: &PolicySnapshot,
    cfg: &TrainerConfig,
) -> Result<Objective, GrpoError> {
    let adv = normalize_advantages(&group.rewards())?;
    let g = group.rollouts.len() as f64;
    let (lo, hi) = (1.0 - cfg.epsilon, 1.0 + cfg.epsilon);
    let mut value = 0.0;
    let mut kl_sum = 0.0;
    let mut grad = vec![0.0; theta.len()];
    let mut clipped = 0usize;
    for (r, a) in group.rollouts.iter().zip(&adv) {
        let lp = trajectory_log_prob(theta, &r.steps);
        let ratio = (lp - r.log_prob_old).exp();
        if !ratio.is_finite() {
            return Err(GrpoError::Numerical(format!("ratio {ratio} (log π {lp}, log π_old {})", r.log_prob_old)));
        }
        if ratio < lo || ratio > hi {
            clipped += 1;
        }
        let unclipped = ratio * a;
        let clip_term = ratio.clamp(lo, hi) * a;
        if unclipped <= clip_term {
            value += unclipped;
            let gl = trajectory_grad_log_prob(theta, &r.steps);
            for (gi, x) in grad.iter_mut().zip(gl) {
                *gi += a * ratio * x / g;
            }
        } else {
            value += clip_term;
        }
        let (kl, gk) = trajectory_kl(theta, reference.theta(), &r.steps);
        kl_sum += kl;
        for (gi, x) in grad.iter_mut().zip(gk) {
            *gi -= cfg.beta * x / g;
        }
    }
    let kl = kl_sum / g;
    let value = value / g - cfg.beta * kl;
    if !value.is_finite() || grad.iter().any(|x| !x.is_finite()) {
        return Err(GrpoError::Numerical(format!("objective {value}, kl {kl}")));
    }
    Ok(Objective { value, grad, kl, clip_fraction: clipped as f64 / g })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub update: u32,
    pub mean_reward: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub heldout_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_queries: f64,
    pub mean_hops: f64,
    pub forced_rate: f64,
}

/// Held-out tasks come from a seed range disjoint from training.
pub fn heldout_tasks(n: usize, hops: &[usize]) -> Vec<HopInstance> {
    (0..n)
        .map(|i| hopqa::instance(1 << 40 | i as u64, hops[i % hops.len()]).expect("valid hop count"))
        .collect()
}

fn train_task(cfg: &TrainerConfig, update: u32) -> HopInstance {
    let seed = mix(cfg.seed, u64::from(update)) & ((1 << 40) - 1);
    hopqa::instance(seed, cfg.hops[update as usize % cfg.hops.len()]).expect("validated hop count")
}

/// Greedy-decoding accuracy and query usage.
pub fn evaluate(policy: &DialoguePolicy, tasks: &[HopInstance], limits: DialogueLimits) -> Evaluation {
    let rs: Vec<(bool, usize, usize, bool)> = tasks
        .par_iter()
        .map(|t| {
            let r = rollout(policy, t, limits, None);
            let forced = r.reward < reward(f64::from(u8::from(r.correct)), r.searches, false);
            (r.correct, r.searches, t.chain.hops.len(), forced)
        })
        .collect();
    let n = rs.len().max(1) as f64;
    Evaluation {
        accuracy: rs.iter().filter(|r| r.0).count() as f64 / n,
        mean_queries: rs.iter().map(|r| r.1 as f64).sum::<f64>() / n,
        mean_hops: rs.iter().map(|r| r.2 as f64).sum::<f64>() / n,
        forced_rate: rs.iter().filter(|r| r.3).count() as f64 / n,
    }
}

/// Mean exact KL to `reference` along greedy held-out trajectories.
pub fn heldout_kl(policy: &DialoguePolicy, reference: &[f64], tasks: &[HopInstance], limits: DialogueLimits) -> f64 {
    let total: f64 = tasks
        .iter()
        .map(|t| trajectory_kl(&policy.theta, reference, &rollout(policy, t, limits, None).steps).0)
        .sum();
    total / tasks.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub policy: DialoguePolicy,
    pub curve: Vec<CurveRow>,
}

pub fn train(cfg: &TrainerConfig) -> Result<TrainOutcome, GrpoError> {
    train_from(cfg, DialoguePolicy::zeros(), |_| {})
}

/// Runs `cfg.updates` on-policy updates starting from `init`, which also
/// serves as the fixed reference. `on_row` sees each curve row as it is made.
pub fn train_from(cfg: &TrainerConfig, init: DialoguePolicy, mut on_row: impl FnMut(&CurveRow)) -> Result<TrainOutcome, GrpoError> {
    cfg.validate()?;
    let reference = PolicySnapshot::new(&init, SnapshotRole::Reference);
    let heldout = heldout_tasks(cfg.heldout_size, &cfg.hops);
    let mut policy = init;
    let mut curve = vec![];
    for u in 0..cfg.updates {
        let old = PolicySnapshot::new(&policy, SnapshotRole::Old);
        let task = train_task(cfg, u);
        let group = collect_group(&old, &task, cfg.group_size, mix(cfg.seed ^ 0xa5a5, u64::from(u)), cfg.limits)?;
        let obj = objective_and_gradient(&policy.theta, &group, &reference, cfg)
            .map_err(|_| GrpoError::Diverged { update: u, last_good: policy.clone() })?;
        let next: Vec<f64> = policy.theta.iter().zip(&obj.grad).map(|(t, g)| t + cfg.learning_rate * g).collect();
        if next.iter().any(|x| !x.is_finite()) {
            return Err(GrpoError::Diverged { update: u, last_good: policy });
        }
        policy.theta = next;
        let last = u + 1 == cfg.updates;
        let eval = (last || (cfg.eval_every > 0 && (u + 1) % cfg.eval_every == 0)) && !heldout.is_empty();
        let row = CurveRow {
            update: u + 1,
            mean_reward: group.rewards().iter().sum::<f64>() / group.rollouts.len() as f64,
            kl: obj.kl,
            clip_fraction: obj.clip_fraction,
            heldout_accuracy: eval.then(|| evaluate(&policy, &heldout, cfg.limits).accuracy),
        };
        on_row(&row);
        curve.push(row);
    }
    Ok(TrainOutcome { policy, curve })
}

pub fn write_curve<W: Write>(out: W, curve: &[CurveRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for row in curve {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Probability that decoding with `policy` ends in the gold answer, computed
/// exactly over every reachable dialogue state.
pub fn success_probability(policy: &DialoguePolicy, task: &HopInstance, limits: DialogueLimits) -> f64 {
    use crate::hfm::{compose_answer, AnswerStyle, DialogueAction, DialogueState};
    use std::collections::HashMap;

    fn value(
        st: &DialogueState,
        policy: &DialoguePolicy,
        task: &HopInstance,
        memo: &mut HashMap<DialogueState, f64>,
    ) -> f64 {
        let correct = |s: &DialogueState| f64::from(u8::from(compose_answer(s, AnswerStyle::Terminal) == task.chain.answer()));
        if st.forced() {
            return correct(st);
        }
        if let Some(v) = memo.get(st) {
            return *v;
        }
        let (actions, _, p) = policy.step(st);
        let mut v = 0.0;
        for (a, pa) in actions.iter().zip(&p) {
            let mut next = st.clone();
            next.record(*a);
            v += pa * match a {
                DialogueAction::Answer => correct(&next),
                DialogueAction::Think => value(&next, policy, task, memo),
                DialogueAction::Search(k) => {
                    let q = crate::hfm::Query { id: String::new(), text: next.query_text(*k), context_snapshot: String::new() };
                    let reply = hopqa::oracle_answer(&task.kb, &q).text;
                    next.resolve(*k, &reply);
                    value(&next, policy, task, memo)
                }
            };
        }
        memo.insert(st.clone(), v);
        v
    }

    let input = task.chain.dialogue_input("dp");
    let st = DialogueState::new(input.slots, input.chained, limits);
    value(&st, policy, task, &mut HashMap::new())
}

/// Success rate of a policy choosing uniformly among available actions.
pub fn chance_rate(task: &HopInstance, limits: DialogueLimits) -> f64 {
    success_probability(&DialoguePolicy::zeros(), task, limits)
}
