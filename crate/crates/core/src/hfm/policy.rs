//! Belief state over knowledge slots and the log-linear dialogue policy.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub const UNKNOWN: &str = "unknown";
pub const NO_RESPONSE: &str = "[no response]";

/// Features per action kind; the full vector is three such blocks.
const BLOCK: usize = 10;
pub const FEATURE_DIM: usize = 3 * BLOCK;

const CHECKPOINT_FORMAT: &str = "ahce-dialogue-policy";
const CHECKPOINT_VERSION: u32 = 1;

/// One piece of knowledge the dialogue tries to obtain: the `relation` of `subject`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub subject: Option<String>,
    pub relation: String,
    pub value: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "slot", rename_all = "snake_case")]
pub enum DialogueAction {
    Think,
    Search(usize),
    Answer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DialogueLimits {
    /// Maximum Search actions.
    pub budget: u32,
    /// Maximum policy actions including the final Answer.
    pub max_actions: u32,
}

impl Default for DialogueLimits {
    fn default() -> Self {
        Self { budget: 6, max_actions: 12 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DialogueState {
    pub slots: Vec<Slot>,
    /// A resolved slot's value becomes the next slot's subject.
    pub chained: bool,
    pub queries_used: u32,
    pub actions_taken: u32,
    pub prev_think: bool,
    pub last_unknown: bool,
    pub limits: DialogueLimits,
}

pub fn is_non_answer(text: &str) -> bool {
    let t = text.trim();
    t.is_empty() || t.eq_ignore_ascii_case(UNKNOWN) || t == NO_RESPONSE
}

impl DialogueState {
    pub fn new(slots: Vec<Slot>, chained: bool, limits: DialogueLimits) -> Self {
        Self { slots, chained, queries_used: 0, actions_taken: 0, prev_think: false, last_unknown: false, limits }
    }

    pub fn unresolved(&self) -> usize {
        self.slots.iter().filter(|s| s.value.is_none()).count()
    }

    /// No further choice: the next segment is a forced Answer.
    pub fn forced(&self) -> bool {
        self.queries_used >= self.limits.budget || self.actions_taken + 1 >= self.limits.max_actions
    }

    pub fn actions(&self) -> Vec<DialogueAction> {
        let mut out = vec![DialogueAction::Think];
        out.extend((0..self.slots.len()).filter(|k| self.slots[*k].value.is_none()).map(DialogueAction::Search));
        out.push(DialogueAction::Answer);
        out
    }

    pub fn query_text(&self, k: usize) -> String {
        let s = &self.slots[k];
        format!("{} of {}", s.relation, s.subject.as_deref().unwrap_or("?"))
    }

    pub fn think_text(&self) -> String {
        match self.slots.iter().find(|s| s.value.is_none()) {
            Some(s) => match &s.subject {
                Some(subj) => format!("I still need the {} of {}.", s.relation, subj),
                None => format!("I still need the {} of an entity I have not found yet.", s.relation),
            },
            None => "I have everything I need.".to_owned(),
        }
    }

    pub fn record(&mut self, action: DialogueAction) {
        self.actions_taken += 1;
        self.prev_think = action == DialogueAction::Think;
        if let DialogueAction::Search(_) = action {
            self.queries_used += 1;
        }
    }

    pub fn resolve(&mut self, k: usize, reply: &str) {
        if is_non_answer(reply) {
            self.last_unknown = true;
            return;
        }
        self.last_unknown = false;
        let v = reply.trim().to_owned();
        if self.chained && k + 1 < self.slots.len() {
            self.slots[k + 1].subject = Some(v.clone());
        }
        self.slots[k].value = Some(v);
    }

    pub fn features(&self, action: DialogueAction) -> Vec<f64> {
        let mut phi = vec![0.0; FEATURE_DIM];
        let (block, subject_known) = match action {
            DialogueAction::Think => (0, false),
            DialogueAction::Search(k) => (1, self.slots[k].subject.is_some()),
            DialogueAction::Answer => (2, false),
        };
        let f = &mut phi[block * BLOCK..(block + 1) * BLOCK];
        f[0] = 1.0;
        f[1 + self.unresolved().min(4)] = 1.0;
        f[6] = f64::from(u8::from(self.last_unknown));
        f[7] = f64::from(u8::from(self.prev_think));
        f[8] = f64::from(u8::from(subject_known));
        f[9] = f64::from(self.queries_used) / f64::from(self.limits.budget.max(1));
        phi
    }
}

/// Features of every available action at one decision point and the index chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub features: Vec<Vec<f64>>,
    pub chosen: usize,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Log-softmax of θ·φ over the step's actions.
pub fn log_probs(theta: &[f64], features: &[Vec<f64>]) -> Vec<f64> {
    let logits: Vec<f64> = features.iter().map(|f| dot(theta, f)).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn probs(theta: &[f64], features: &[Vec<f64>]) -> Vec<f64> {
    log_probs(theta, features).into_iter().map(f64::exp).collect()
}

/// Log-probability of a whole trajectory.
pub fn trajectory_log_prob(theta: &[f64], steps: &[StepRecord]) -> f64 {
    steps.iter().map(|s| log_probs(theta, &s.features)[s.chosen]).sum()
}

/// ∇θ of the trajectory log-probability: Σ φ(chosen) − E_p[φ].
pub fn trajectory_grad_log_prob(theta: &[f64], steps: &[StepRecord]) -> Vec<f64> {
    let mut g = vec![0.0; theta.len()];
    for s in steps {
        let p = probs(theta, &s.features);
        for (a, f) in s.features.iter().enumerate() {
            let w = f64::from(u8::from(a == s.chosen)) - p[a];
            for (gi, fi) in g.iter_mut().zip(f) {
                *gi += w * fi;
            }
        }
    }
    g
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
    #[error("checkpoint {0}")]
    Incompatible(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialoguePolicy {
    pub theta: Vec<f64>,
}

impl Default for DialoguePolicy {
    fn default() -> Self {
        Self::zeros()
    }
}

/// Versioned on-disk form: header plus flat parameter array.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    feature_dim: usize,
    #[serde(default)]
    config: serde_json::Value,
    theta: Vec<f64>,
}

impl DialoguePolicy {
    /// The untrained policy: uniform over available actions.
    pub fn zeros() -> Self {
        Self { theta: vec![0.0; FEATURE_DIM] }
    }

    /// Checkpoint trained by `ahce train-hfm`, shipped with the crate.
    pub fn bundled() -> Self {
        Self::from_json(include_str!("../../data/hfm_policy.json")).expect("bundled checkpoint is valid")
    }

    pub fn step(&self, state: &DialogueState) -> (Vec<DialogueAction>, StepRecord, Vec<f64>) {
        let actions = state.actions();
        let features: Vec<Vec<f64>> = actions.iter().map(|a| state.features(*a)).collect();
        let p = probs(&self.theta, &features);
        (actions, StepRecord { features, chosen: 0 }, p)
    }

    pub fn to_json(&self, config: serde_json::Value) -> String {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            feature_dim: FEATURE_DIM,
            config,
            theta: self.theta.clone(),
        };
        serde_json::to_string_pretty(&ck).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(PolicyError::Incompatible(format!("{} v{}", ck.format, ck.version)));
        }
        if ck.feature_dim != FEATURE_DIM || ck.theta.len() != FEATURE_DIM {
            return Err(PolicyError::Incompatible(format!("dimension {} != {FEATURE_DIM}", ck.theta.len())));
        }
        if ck.theta.iter().any(|t| !t.is_finite()) {
            return Err(PolicyError::Incompatible("non-finite parameter".into()));
        }
        Ok(Self { theta: ck.theta })
    }

    pub fn save(&self, path: &Path, config: serde_json::Value) -> Result<(), PolicyError> {
        std::fs::write(path, self.to_json(config))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Sampling or argmax action selection.
pub enum Decode<'a, R: Rng> {
    Greedy,
    Sample(&'a mut R),
}

impl<R: Rng> Decode<'_, R> {
    pub fn pick(&mut self, p: &[f64]) -> usize {
        match self {
            // Ties go to the lowest index.
            Decode::Greedy => p.iter().enumerate().fold(0, |best, (i, x)| if *x > p[best] { i } else { best }),
            Decode::Sample(rng) => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (i, x) in p.iter().enumerate() {
                    acc += x;
                    if u < acc {
                        return i;
                    }
                }
                p.len() - 1
            }
        }
    }
}
