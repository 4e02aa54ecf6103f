use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Error, Result};

pub const DEFAULT_TEMPLATE: &str = "[T][T][T][T][C]";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Slot {
    Trigger,
    Class,
    Literal(String),
}

/// Prompt layout over trigger slots `[T]`, one class slot `[C]` and literal words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    slots: Vec<Slot>,
}

impl PromptTemplate {
    pub fn new(slots: Vec<Slot>) -> Result<Self> {
        let classes = slots.iter().filter(|s| **s == Slot::Class).count();
        if classes != 1 {
            return Err(invalid(format!("template needs exactly one [C], found {classes}")));
        }
        if !slots.contains(&Slot::Trigger) {
            return Err(invalid("template needs at least one [T]"));
        }
        Ok(Self { slots })
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn num_triggers(&self) -> usize {
        self.slots.iter().filter(|s| **s == Slot::Trigger).count()
    }

    /// Trigger index of template position `position`.
    pub fn trigger_index(&self, position: usize) -> Result<usize> {
        match self.slots.get(position) {
            Some(Slot::Trigger) => Ok(self.slots[..position].iter().filter(|s| **s == Slot::Trigger).count()),
            Some(other) => Err(invalid(format!("template position {position} is {other:?}, not a trigger slot"))),
            None => Err(invalid(format!("template has no position {position}"))),
        }
    }

    /// Template position of trigger `index`.
    pub fn trigger_position(&self, index: usize) -> Result<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == Slot::Trigger)
            .nth(index)
            .map(|(p, _)| p)
            .ok_or_else(|| invalid(format!("template has no trigger {index}")))
    }

    /// Token ids of the filled prompt, and the row of each trigger within it.
    pub fn fill(&self, triggers: &[usize], class: &[usize], literal: impl Fn(&str) -> usize) -> (Vec<usize>, Vec<usize>) {
        let mut ids = Vec::new();
        let mut rows = Vec::with_capacity(triggers.len());
        let mut t = triggers.iter();
        for s in &self.slots {
            match s {
                Slot::Trigger => {
                    rows.push(ids.len());
                    ids.push(*t.next().expect("one token per trigger slot"));
                }
                Slot::Class => ids.extend_from_slice(class),
                Slot::Literal(w) => ids.push(literal(w)),
            }
        }
        (ids, rows)
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        DEFAULT_TEMPLATE.parse().expect("default template is valid")
    }
}

impl FromStr for PromptTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut slots = Vec::new();
        let mut rest = s.trim_start();
        while !rest.is_empty() {
            if let Some(r) = rest.strip_prefix("[T]") {
                slots.push(Slot::Trigger);
                rest = r;
            } else if let Some(r) = rest.strip_prefix("[C]") {
                slots.push(Slot::Class);
                rest = r;
            } else if rest.starts_with('[') {
                return Err(invalid(format!("unknown template marker in {s:?}")));
            } else {
                let end = rest.find(|c: char| c.is_whitespace() || c == '[').unwrap_or(rest.len());
                slots.push(Slot::Literal(rest[..end].to_string()));
                rest = &rest[end..];
            }
            rest = rest.trim_start();
        }
        Self::new(slots)
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut prev_literal = false;
        for s in &self.slots {
            match s {
                Slot::Trigger => f.write_str("[T]")?,
                Slot::Class => f.write_str("[C]")?,
                Slot::Literal(w) => {
                    f.write_str(if prev_literal { " " } else { "" })?;
                    f.write_str(w)?;
                }
            }
            prev_literal = matches!(s, Slot::Literal(_));
        }
        Ok(())
    }
}

impl Serialize for PromptTemplate {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PromptTemplate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}
