//! Problem identification: per-sub-task timeouts, consecutive failure
//! counting, and the help trigger `n_fail > n_max`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const DEFAULT_N_MAX: u32 = 3;
pub const DEFAULT_S_MAX: u32 = 200;

/// Autonomy threshold. `Infinite` never asks for help.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NMax {
    Finite(u32),
    Infinite,
}

impl fmt::Display for NMax {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NMax::Finite(n) => write!(f, "{n}"),
            NMax::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for NMax {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "inf" | "infinity" | "∞" => Ok(NMax::Infinite),
            other => other.parse().map(NMax::Finite).map_err(|_| format!("invalid n_max `{s}` (integer or \"inf\")")),
        }
    }
}

impl Serialize for NMax {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            NMax::Finite(n) => s.serialize_u32(*n),
            NMax::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for NMax {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u32),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(n) => Ok(NMax::Finite(n)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Help is due once consecutive failures strictly exceed the threshold.
pub fn should_seek_help(n_fail: u32, n_max: NMax) -> bool {
    match n_max {
        NMax::Finite(m) => n_fail > m,
        NMax::Infinite => false,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureTracker {
    s_sub: u32,
    s_max: u32,
    n_fail: u32,
    n_max: NMax,
}

impl FailureTracker {
    pub fn new(s_max: u32, n_max: NMax) -> Self {
        Self { s_sub: 0, s_max, n_fail: 0, n_max }
    }

    pub fn s_sub(&self) -> u32 {
        self.s_sub
    }

    pub fn s_max(&self) -> u32 {
        self.s_max
    }

    pub fn n_fail(&self) -> u32 {
        self.n_fail
    }

    pub fn n_max(&self) -> NMax {
        self.n_max
    }

    /// Counts one execution step. Returns `true` when the current sub-task
    /// just timed out; the step counter restarts for the retry.
    pub fn observe_step(&mut self, subtask_done: bool) -> bool {
        self.s_sub += 1;
        if subtask_done {
            self.subtask_succeeded();
            return false;
        }
        if self.s_sub > self.s_max {
            self.n_fail += 1;
            self.s_sub = 0;
            return true;
        }
        false
    }

    /// A sub-task completed without consuming a step (e.g. already satisfied).
    pub fn subtask_succeeded(&mut self) {
        self.s_sub = 0;
        self.n_fail = 0;
    }

    /// Starts the step count over for a new or re-planned sub-task.
    pub fn restart_subtask(&mut self) {
        self.s_sub = 0;
    }

    pub fn should_seek_help(&self) -> bool {
        should_seek_help(self.n_fail, self.n_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strict_inequality() {
        assert!(should_seek_help(4, NMax::Finite(3)));
        assert!(!should_seek_help(3, NMax::Finite(3)));
        assert!(!should_seek_help(0, NMax::Finite(0)));
        assert!(!should_seek_help(u32::MAX, NMax::Infinite));
    }

    #[test]
    fn timeout_at_budget_plus_one() {
        let mut t = FailureTracker::new(5, NMax::Finite(3));
        for _ in 0..5 {
            assert!(!t.observe_step(false));
        }
        assert_eq!(t.s_sub(), 5);
        assert!(t.observe_step(false));
        assert_eq!(t.n_fail(), 1);
        assert_eq!(t.s_sub(), 0);
    }

    #[test]
    fn success_resets_failures() {
        let mut t = FailureTracker::new(1, NMax::Finite(3));
        t.observe_step(false);
        t.observe_step(false);
        t.observe_step(false);
        t.observe_step(false);
        assert_eq!(t.n_fail(), 2);
        t.observe_step(true);
        assert_eq!(t.n_fail(), 0);
        assert_eq!(t.s_sub(), 0);
    }

    #[test]
    fn fourth_timeout_triggers_at_default_threshold() {
        let s_max = 3;
        let mut t = FailureTracker::new(s_max, NMax::Finite(DEFAULT_N_MAX));
        let mut triggers = vec![];
        for _ in 0..4 {
            for _ in 0..s_max {
                assert!(!t.observe_step(false));
            }
            assert!(t.observe_step(false));
            triggers.push(t.should_seek_help());
        }
        assert_eq!(triggers, vec![false, false, false, true]);
        assert_eq!(t.n_fail(), 4);
    }

    #[test]
    fn n_max_parses_and_serializes() {
        assert_eq!("inf".parse::<NMax>().unwrap(), NMax::Infinite);
        assert_eq!("3".parse::<NMax>().unwrap(), NMax::Finite(3));
        assert!("x".parse::<NMax>().is_err());
        assert_eq!(serde_json::to_string(&NMax::Infinite).unwrap(), "\"inf\"");
        assert_eq!(serde_json::from_str::<NMax>("5").unwrap(), NMax::Finite(5));
    }
}
