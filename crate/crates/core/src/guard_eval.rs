//! Scoring the guards against a labelled set of responses.
//!
//! A fixture file is a JSON array of
//! `{"id", "history": [interviewer texts], "response", "expected": ["R1", ...]}`.
//! `history` ends with the question being answered. `lexicon_exact`
//! (default true) marks violations that contain a lexicon phrase verbatim.

use std::collections::BTreeSet;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::guards::{check_guards, GuardError, GuardLexicon, GuardSettings, Rule};
use crate::session::{ChatTurn, Role};

pub const BUILTIN_FIXTURES: &str = include_str!("../guards/fixtures.json");

#[derive(Debug, Clone, Deserialize)]
struct RawFixture {
    id: String,
    history: Vec<String>,
    response: String,
    expected: Vec<String>,
    #[serde(default = "yes")]
    lexicon_exact: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuardFixture {
    pub id: String,
    pub history: Vec<String>,
    pub response: String,
    pub expected: BTreeSet<Rule>,
    pub lexicon_exact: bool,
}

impl GuardFixture {
    /// The interviewer texts as a transcript, with placeholder interlocutor
    /// turns in between.
    pub fn transcript(&self) -> Vec<ChatTurn> {
        let at = DateTime::<Utc>::UNIX_EPOCH;
        let mut turns = Vec::with_capacity(self.history.len() * 2);
        for (i, q) in self.history.iter().enumerate() {
            if i > 0 {
                turns.push(ChatTurn {
                    role: Role::Interlocutor,
                    ..ChatTurn::interviewer("Okay.", at)
                });
            }
            turns.push(ChatTurn::interviewer(q, at));
        }
        turns
    }
}

pub fn parse_fixtures(text: &str) -> Result<Vec<GuardFixture>, GuardError> {
    let raw: Vec<RawFixture> = serde_json::from_str(text).map_err(|e| GuardError::Malformed(e.to_string()))?;
    raw.into_iter()
        .map(|f| {
            let expected = f
                .expected
                .iter()
                .map(|k| {
                    Rule::from_key(k)
                        .ok_or_else(|| GuardError::Malformed(format!("fixture `{}`: unknown rule `{k}`", f.id)))
                })
                .collect::<Result<_, _>>()?;
            Ok(GuardFixture {
                id: f.id,
                history: f.history,
                response: f.response,
                expected,
                lexicon_exact: f.lexicon_exact,
            })
        })
        .collect()
}

pub fn load_fixtures(path: &Path) -> Result<Vec<GuardFixture>, GuardError> {
    let text = std::fs::read_to_string(path).map_err(|source| GuardError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_fixtures(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mismatch {
    pub id: String,
    pub expected: Vec<Rule>,
    pub detected: Vec<Rule>,
}

/// Counts are over (fixture, rule) pairs, restricted to enabled rules.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub fixtures: usize,
    pub violating: usize,
    pub clean: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub lexicon_exact_recall: f64,
    /// Clean fixtures on which any rule fired.
    pub clean_flagged: usize,
    pub mismatches: Vec<Mismatch>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn evaluate(fixtures: &[GuardFixture], lexicon: &GuardLexicon, settings: &GuardSettings) -> EvalReport {
    let enabled: BTreeSet<Rule> = settings.enabled_rules().collect();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let (mut exact_tp, mut exact_total) = (0, 0);
    let mut clean_flagged = 0;
    let mut mismatches = Vec::new();
    for f in fixtures {
        let detected: BTreeSet<Rule> = check_guards(&f.response, &f.transcript(), lexicon, settings)
            .into_iter()
            .filter(|v| v.triggered)
            .map(|v| v.rule)
            .collect();
        let expected: BTreeSet<Rule> = f.expected.intersection(&enabled).copied().collect();
        let hits = detected.intersection(&expected).count();
        tp += hits;
        fp += detected.difference(&expected).count();
        fn_ += expected.difference(&detected).count();
        if f.lexicon_exact {
            exact_tp += hits;
            exact_total += expected.len();
        }
        if f.expected.is_empty() && !detected.is_empty() {
            clean_flagged += 1;
        }
        if detected != expected {
            mismatches.push(Mismatch {
                id: f.id.clone(),
                expected: expected.into_iter().collect(),
                detected: detected.into_iter().collect(),
            });
        }
    }
    let violating = fixtures.iter().filter(|f| !f.expected.is_empty()).count();
    EvalReport {
        fixtures: fixtures.len(),
        violating,
        clean: fixtures.len() - violating,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        lexicon_exact_recall: ratio(exact_tp, exact_total),
        clean_flagged,
        mismatches,
    }
}
