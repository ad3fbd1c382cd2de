//! Post-generation checks for the four interview rules.
//!
//! - R1 genre: the interlocutor is in an ethnographic interview, not a job
//!   interview.
//! - R2 continuation: it does not wind the conversation down.
//! - R3 no prior meeting: on the first question it does not act as if the
//!   two had met before.
//! - R4 no ascription: it does not attribute statements or experiences to
//!   the interviewer that the interviewer never voiced.
//!
//! Triggers come from an editable lexicon of case-insensitive phrases. In a
//! pattern, `'` matches both straight and typographic apostrophes and `*`
//! matches any run of word characters or apostrophes (so `you*` covers
//! "you", "you've" and "you’ve").

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::ingest::Span;
use crate::session::{ChatTurn, Role};

pub const BUILTIN_LEXICON: &str = include_str!("../guards/lexicon.json");

/// Minimum length (in chars) of a word that counts as shared content for R4.
const CONTENT_WORD_MIN_CHARS: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum GuardError {
    #[error("failed to read lexicon {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed lexicon: {0}")]
    Malformed(String),
    #[error("lexicon has no patterns for enabled rule {0}")]
    EmptyRule(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Rule {
    #[serde(rename = "R1_genre")]
    Genre,
    #[serde(rename = "R2_continuation")]
    Continuation,
    #[serde(rename = "R3_no_prior_meeting")]
    NoPriorMeeting,
    #[serde(rename = "R4_no_ascription")]
    NoAscription,
}

impl Rule {
    pub const ALL: [Rule; 4] = [Rule::Genre, Rule::Continuation, Rule::NoPriorMeeting, Rule::NoAscription];

    /// Key used in the lexicon file.
    pub fn key(self) -> &'static str {
        match self {
            Rule::Genre => "R1",
            Rule::Continuation => "R2",
            Rule::NoPriorMeeting => "R3",
            Rule::NoAscription => "R4",
        }
    }

    pub fn from_key(key: &str) -> Option<Rule> {
        Rule::ALL.into_iter().find(|r| r.key().eq_ignore_ascii_case(key))
    }

    /// Instruction appended to the system text when regenerating after this
    /// rule fired.
    pub fn correction(self) -> &'static str {
        match self {
            Rule::Genre => {
                "This is an ethnographic research interview, not a job interview; do not promote yourself or talk about applications or hiring."
            }
            Rule::Continuation => "Continue the conversation; do not conclude or say farewell.",
            Rule::NoPriorMeeting => {
                "This is your first meeting with the interviewer; do not refer to earlier conversations or assume what the interview is about."
            }
            Rule::NoAscription => {
                "Do not attribute statements, opinions or experiences to the interviewer that the interviewer has not expressed in this conversation."
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardAction {
    #[default]
    None,
    Regenerated,
    Flagged,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub text: String,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardVerdict {
    pub rule: Rule,
    pub triggered: bool,
    pub evidence: Option<Evidence>,
    pub action_taken: GuardAction,
}

impl GuardVerdict {
    fn clear(rule: Rule) -> Self {
        Self {
            rule,
            triggered: false,
            evidence: None,
            action_taken: GuardAction::None,
        }
    }

    fn hit(rule: Rule, m: regex::Match<'_>) -> Self {
        Self {
            rule,
            triggered: true,
            evidence: Some(Evidence {
                text: m.as_str().to_string(),
                span: Span::new(m.start(), m.end()),
            }),
            action_taken: GuardAction::None,
        }
    }
}

/// Per-rule switches plus the regeneration budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuardSettings {
    pub enabled: bool,
    pub r1: bool,
    pub r2: bool,
    pub r3: bool,
    pub r4: bool,
    pub max_regens: u32,
}

impl Default for GuardSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            r1: true,
            r2: true,
            r3: true,
            r4: true,
            max_regens: 2,
        }
    }
}

impl GuardSettings {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn is_enabled(&self, rule: Rule) -> bool {
        self.enabled
            && match rule {
                Rule::Genre => self.r1,
                Rule::Continuation => self.r2,
                Rule::NoPriorMeeting => self.r3,
                Rule::NoAscription => self.r4,
            }
    }

    pub fn enabled_rules(&self) -> impl Iterator<Item = Rule> + '_ {
        Rule::ALL.into_iter().filter(|r| self.is_enabled(*r))
    }
}

/// Compiled trigger phrases per rule.
#[derive(Debug, Clone)]
pub struct GuardLexicon {
    patterns: BTreeMap<Rule, Vec<String>>,
    compiled: BTreeMap<Rule, Vec<Regex>>,
}

fn compile_pattern(pattern: &str) -> Result<Regex, GuardError> {
    let pattern = pattern.trim();
    let is_wordish = |c: char| c.is_alphanumeric() || c == '_' || c == '*';
    let mut re = String::from("(?i)");
    if pattern.chars().next().is_some_and(is_wordish) {
        re.push_str(r"\b");
    }
    let mut in_space = false;
    for c in pattern.chars() {
        if c.is_whitespace() {
            if !in_space {
                re.push_str(r"\s+");
            }
            in_space = true;
            continue;
        }
        in_space = false;
        match c {
            '\'' | '’' => re.push_str("['’]"),
            '*' => re.push_str(r"[\w'’]*"),
            c => re.push_str(&regex::escape(&c.to_string())),
        }
    }
    if pattern.chars().last().is_some_and(is_wordish) {
        re.push_str(r"\b");
    }
    Regex::new(&re).map_err(|e| GuardError::Malformed(format!("pattern `{pattern}`: {e}")))
}

impl GuardLexicon {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_LEXICON).expect("shipped lexicon is valid")
    }

    pub fn load(path: &Path) -> Result<Self, GuardError> {
        let text = std::fs::read_to_string(path).map_err(|source| GuardError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Parses `{"R1": [...], "R2": [...], "R3": [...], "R4": [...]}`.
    pub fn from_json(text: &str) -> Result<Self, GuardError> {
        let raw: BTreeMap<String, Vec<String>> =
            serde_json::from_str(text).map_err(|e| GuardError::Malformed(e.to_string()))?;
        let mut patterns = BTreeMap::new();
        for (key, list) in raw {
            let rule = Rule::from_key(&key).ok_or_else(|| GuardError::Malformed(format!("unknown rule key `{key}`")))?;
            let list: Vec<String> = list.into_iter().filter(|p| !p.trim().is_empty()).collect();
            patterns.insert(rule, list);
        }
        Self::from_patterns(patterns)
    }

    pub fn from_patterns(patterns: BTreeMap<Rule, Vec<String>>) -> Result<Self, GuardError> {
        let compiled = patterns
            .iter()
            .map(|(rule, list)| Ok((*rule, list.iter().map(|p| compile_pattern(p)).collect::<Result<_, _>>()?)))
            .collect::<Result<_, GuardError>>()?;
        Ok(Self { patterns, compiled })
    }

    /// Every enabled rule needs at least one pattern.
    pub fn validate(&self, settings: &GuardSettings) -> Result<(), GuardError> {
        for rule in settings.enabled_rules() {
            if self.patterns.get(&rule).is_none_or(|p| p.is_empty()) {
                return Err(GuardError::EmptyRule(rule.key()));
            }
        }
        Ok(())
    }

    pub fn patterns(&self, rule: Rule) -> &[String] {
        self.patterns.get(&rule).map_or(&[], Vec::as_slice)
    }

    /// All matches of `rule`'s patterns in `text`, ordered by position.
    pub fn find_all<'t>(&self, rule: Rule, text: &'t str) -> Vec<regex::Match<'t>> {
        let mut out: Vec<regex::Match<'t>> = self
            .compiled
            .get(&rule)
            .into_iter()
            .flatten()
            .flat_map(|re| re.find_iter(text))
            .collect();
        out.sort_by_key(|m| (m.start(), std::cmp::Reverse(m.end())));
        out
    }

    fn is_match(&self, rule: Rule, text: &str) -> bool {
        self.compiled.get(&rule).into_iter().flatten().any(|re| re.is_match(text))
    }
}

/// Byte offset where the last sentence of `text` begins.
fn final_sentence_start(text: &str) -> usize {
    let body = text.trim_end();
    let core = body.trim_end_matches(['.', '!', '?', '…', '"', '\'', '”', '’', ')']);
    let mut start = 0;
    let mut chars = core.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let boundary = c == '\n'
            || (matches!(c, '.' | '!' | '?' | '…') && chars.peek().is_some_and(|(_, n)| n.is_whitespace()));
        if boundary {
            start = i + c.len_utf8();
        }
    }
    start + (text[start..].len() - text[start..].trim_start().len())
}

fn content_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.chars().count() >= CONTENT_WORD_MIN_CHARS)
        .map(str::to_lowercase)
}

/// The clause following an ascription phrase, up to the end of its sentence.
fn clause_after(text: &str, from: usize) -> &str {
    let rest = &text[from..];
    let rest = rest.trim_start_matches(|c: char| !c.is_alphanumeric());
    let end = rest.find(['.', '!', '?', ';', '\n']).unwrap_or(rest.len());
    &rest[..end]
}

/// Runs every enabled rule over `response`.
///
/// `history` is the session transcript up to and including the interviewer
/// turn being answered. Verdicts come back in rule order with
/// `action_taken = none`; deciding on actions is up to the caller.
pub fn check_guards(
    response: &str,
    history: &[ChatTurn],
    lexicon: &GuardLexicon,
    settings: &GuardSettings,
) -> Vec<GuardVerdict> {
    let interviewer: Vec<&ChatTurn> = history.iter().filter(|t| t.role == Role::Interviewer).collect();
    settings
        .enabled_rules()
        .map(|rule| {
            let hit = match rule {
                Rule::Genre => lexicon.find_all(rule, response).into_iter().next(),
                Rule::Continuation => {
                    let asked_farewell = interviewer.last().is_some_and(|t| lexicon.is_match(rule, &t.text));
                    let start = final_sentence_start(response);
                    if asked_farewell {
                        None
                    } else {
                        lexicon.find_all(rule, response).into_iter().find(|m| m.start() >= start)
                    }
                }
                Rule::NoPriorMeeting if interviewer.len() == 1 => lexicon.find_all(rule, response).into_iter().next(),
                Rule::NoPriorMeeting => None,
                Rule::NoAscription => {
                    let said: HashSet<String> = interviewer.iter().flat_map(|t| content_words(&t.text)).collect();
                    lexicon.find_all(rule, response).into_iter().find(|m| {
                        !content_words(clause_after(response, m.end())).any(|w| said.contains(&w))
                    })
                }
            };
            match hit {
                Some(m) => GuardVerdict::hit(rule, m),
                None => GuardVerdict::clear(rule),
            }
        })
        .collect()
}
