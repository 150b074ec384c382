//! The machine-readable report every command emits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// How `value` is compared against `expected`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// `|value - expected| <= tolerance`
    Approx,
    /// `value < expected + tolerance`
    Below,
    /// `value > expected - tolerance`
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub value: f64,
    pub relation: Relation,
    pub expected: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Assertion {
    pub fn new(name: impl Into<String>, value: f64, relation: Relation, expected: f64, tolerance: f64) -> Self {
        let passed = match relation {
            Relation::Approx => (value - expected).abs() <= tolerance,
            Relation::Below => value < expected + tolerance,
            Relation::Above => value > expected - tolerance,
        };
        Self {
            name: name.into(),
            value,
            relation,
            expected,
            tolerance,
            passed,
        }
    }
}

/// Ordered maps and no wall-clock fields keep reports byte-stable for a
/// fixed seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub parameters: BTreeMap<String, Value>,
    pub seed: Option<u64>,
    pub results: BTreeMap<String, Value>,
    pub assertions: Vec<Assertion>,
    pub passed: bool,
}

impl RunReport {
    pub fn new(command: &str, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            parameters: BTreeMap::new(),
            seed,
            results: BTreeMap::new(),
            assertions: Vec::new(),
            passed: true,
        }
    }

    pub fn param(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        self.parameters.insert(key.to_string(), to_value(value));
        self
    }

    pub fn result(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        self.results.insert(key.to_string(), to_value(value));
        self
    }

    pub fn assert(&mut self, a: Assertion) -> &mut Self {
        self.passed &= a.passed;
        self.assertions.push(a);
        self
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }
}

fn to_value(v: impl Serialize) -> Value {
    // Non-finite floats have no JSON form; they become null.
    serde_json::to_value(v).unwrap_or(Value::Null)
}
