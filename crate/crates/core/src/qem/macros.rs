//! Escape maneuvers: named, bounded sequences of relative primitive actions.

use serde::{Deserialize, Serialize};

use crate::craftworld::Action;

use super::QemError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Repeat {
    Fixed(u32),
    /// The literal `"$arg"`: repeat by the call's argument.
    Arg(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacroStep {
    pub action: Action,
    pub repeat: Repeat,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacroDef {
    pub name: String,
    pub triggers: Vec<String>,
    #[serde(default)]
    pub default_arg: Option<u32>,
    pub steps: Vec<MacroStep>,
}

/// A macro invocation extracted from guidance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacroCall {
    pub name: String,
    pub arg: Option<u32>,
}

/// An invocation together with its expansion.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacroAction {
    pub name: String,
    pub arg: Option<u32>,
    pub expansion: Vec<Action>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLibrary")]
pub struct MacroLibrary {
    pub max_steps: u32,
    pub macros: Vec<MacroDef>,
}

#[derive(Deserialize)]
struct RawLibrary {
    max_steps: u32,
    macros: Vec<MacroDef>,
}

/// Actions that only move the agent relative to where it stands.
fn is_relative(a: &Action) -> bool {
    matches!(a, Action::Move { dx, dy } if dx.abs() + dy.abs() == 1)
        || matches!(a, Action::DigDown | Action::ClimbUp | Action::Noop)
}

impl TryFrom<RawLibrary> for MacroLibrary {
    type Error = QemError;

    fn try_from(raw: RawLibrary) -> Result<Self, QemError> {
        let lib = MacroLibrary { max_steps: raw.max_steps, macros: raw.macros };
        for m in &lib.macros {
            for s in &m.steps {
                if !is_relative(&s.action) {
                    return Err(QemError::Library(format!("{}: {:?} is not a relative primitive", m.name, s.action)));
                }
                if let Repeat::Arg(a) = &s.repeat {
                    if a != "$arg" || m.default_arg.is_none() {
                        return Err(QemError::Library(format!("{}: bad repeat `{a}`", m.name)));
                    }
                }
            }
            let len: u32 = m
                .steps
                .iter()
                .map(|s| match s.repeat {
                    Repeat::Fixed(n) => n,
                    Repeat::Arg(_) => m.default_arg.unwrap_or(0),
                })
                .sum();
            if len > lib.max_steps {
                return Err(QemError::Library(format!("{} expands past {} steps", m.name, lib.max_steps)));
            }
        }
        Ok(lib)
    }
}

impl MacroLibrary {
    pub fn standard() -> Self {
        Self::from_json(include_str!("../../data/macros.json")).expect("bundled macro library")
    }

    pub fn from_json(text: &str) -> Result<Self, QemError> {
        serde_json::from_str(text).map_err(|e| QemError::Library(e.to_string()))
    }

    pub fn get(&self, name: &str) -> Option<&MacroDef> {
        self.macros.iter().find(|m| m.name == name)
    }

    /// Expansion with arguments clamped so the result never exceeds `max_steps`.
    pub fn expand(&self, call: &MacroCall) -> Result<MacroAction, QemError> {
        let def = self.get(&call.name).ok_or_else(|| QemError::UnknownMacro(call.name.clone()))?;
        let arg = call.arg.or(def.default_arg);
        let mut expansion = vec![];
        for s in &def.steps {
            let n = match &s.repeat {
                Repeat::Fixed(n) => *n,
                Repeat::Arg(_) => arg.unwrap_or(0),
            };
            for _ in 0..n {
                if expansion.len() as u32 >= self.max_steps {
                    break;
                }
                expansion.push(s.action.clone());
            }
        }
        Ok(MacroAction { name: def.name.clone(), arg, expansion })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_library_is_bounded_and_relative() {
        let lib = MacroLibrary::standard();
        assert_eq!(lib.max_steps, 50);
        for m in &lib.macros {
            for arg in [None, Some(0), Some(3), Some(1000)] {
                let e = lib.expand(&MacroCall { name: m.name.clone(), arg }).unwrap();
                assert!(e.expansion.len() <= 50, "{}", m.name);
                assert!(e.expansion.iter().all(is_relative), "{}", m.name);
            }
        }
    }

    #[test]
    fn descend_uses_argument() {
        let lib = MacroLibrary::standard();
        let e = lib.expand(&MacroCall { name: "descend_to_depth".into(), arg: Some(7) }).unwrap();
        assert_eq!(e.expansion, vec![Action::DigDown; 7]);
        let d = lib.expand(&MacroCall { name: "descend_to_depth".into(), arg: None }).unwrap();
        assert_eq!(d.expansion.len(), 5);
    }

    #[test]
    fn sweep_returns_near_start() {
        let e = MacroLibrary::standard().expand(&MacroCall { name: "sweep_search".into(), arg: None }).unwrap();
        let (mut x, mut y) = (0i32, 0i32);
        let mut far = 0;
        for a in &e.expansion {
            if let Action::Move { dx, dy } = a {
                x += dx;
                y += dy;
                far = far.max(x.abs().max(y.abs()));
            }
        }
        assert_eq!(far, 3);
    }

    #[test]
    fn rejects_absolute_or_oversized_macros() {
        let mine = r#"{"max_steps":50,"macros":[{"name":"m","triggers":[],"steps":[{"action":{"mine":"stone"},"repeat":1}]}]}"#;
        assert!(MacroLibrary::from_json(mine).is_err());
        let jump = r#"{"max_steps":50,"macros":[{"name":"m","triggers":[],"steps":[{"action":{"move":{"dx":9,"dy":0}},"repeat":1}]}]}"#;
        assert!(MacroLibrary::from_json(jump).is_err());
        let long = r#"{"max_steps":5,"macros":[{"name":"m","triggers":[],"steps":[{"action":"noop","repeat":6}]}]}"#;
        assert!(MacroLibrary::from_json(long).is_err());
    }
}
