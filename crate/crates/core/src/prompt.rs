//! Interlocutor prompt template and per-turn rendering.
//!
//! The shipped template (`prompts/si_v1.txt`) is an `[INST]<<SYS>> ... <</SYS>>`
//! block followed by the `{question}` and `{context}` slots. It is rendered
//! either verbatim for raw completion endpoints or split into a system and a
//! user message for chat endpoints, which apply their own chat template.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const GOLDEN_TEMPLATE: &str = include_str!("../prompts/si_v1.txt");
pub const GOLDEN_TEMPLATE_ID: &str = "si_v1";

const SYS_OPEN: &str = "<<SYS>>";
const SYS_CLOSE: &str = "<</SYS>>";
const INST_CLOSE: &str = "[/INST]";
const QUESTION_SLOT: &str = "{question}";
const CONTEXT_SLOT: &str = "{context}";

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("template is missing the {0} slot")]
    MissingSlot(&'static str),
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("question is empty")]
    EmptyQuestion,
    #[error("failed to read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    RawInst,
    #[default]
    ChatMessages,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageRole {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: MessageRole,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderedPrompt {
    Raw(String),
    Messages(Vec<ChatMessage>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub rendered: RenderedPrompt,
    pub question: String,
    pub context: String,
}

impl PromptBundle {
    pub fn rendered_raw(&self) -> Option<&str> {
        match &self.rendered {
            RenderedPrompt::Raw(s) => Some(s),
            RenderedPrompt::Messages(_) => None,
        }
    }

    pub fn rendered_messages(&self) -> Option<&[ChatMessage]> {
        match &self.rendered {
            RenderedPrompt::Messages(m) => Some(m),
            RenderedPrompt::Raw(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    id: String,
    raw: String,
    system: Range<usize>,
    /// Byte offsets of the two slots in `raw`, in order of appearance.
    slots: [(usize, Slot); 2],
    render_mode: RenderMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Question,
    Context,
}

impl Slot {
    fn token(self) -> &'static str {
        match self {
            Slot::Question => QUESTION_SLOT,
            Slot::Context => CONTEXT_SLOT,
        }
    }
}

impl PromptTemplate {
    pub fn golden(render_mode: RenderMode) -> Self {
        Self::parse(GOLDEN_TEMPLATE_ID, GOLDEN_TEMPLATE, render_mode).expect("shipped template is valid")
    }

    /// Loads an operator-supplied template. A single trailing newline is
    /// ignored.
    pub fn from_file(path: &Path, render_mode: RenderMode) -> Result<Self, PromptError> {
        let raw = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let raw = raw.strip_suffix('\n').unwrap_or(&raw);
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        Self::parse(&id, raw, render_mode)
    }

    pub fn parse(id: &str, raw: &str, render_mode: RenderMode) -> Result<Self, PromptError> {
        let open = raw
            .find(SYS_OPEN)
            .ok_or_else(|| PromptError::InvalidTemplate(format!("no {SYS_OPEN} marker")))?;
        let close = raw[open..]
            .find(SYS_CLOSE)
            .map(|i| open + i)
            .ok_or_else(|| PromptError::InvalidTemplate(format!("no {SYS_CLOSE} marker")))?;
        let inner_start = open + SYS_OPEN.len();
        let inner = &raw[inner_start..close];
        let lead = inner.len() - inner.trim_start().len();
        let system = inner_start + lead..inner_start + inner.trim_end().len();

        let tail_start = close + SYS_CLOSE.len();
        let find_once = |slot: Slot| -> Result<(usize, Slot), PromptError> {
            let tail = &raw[tail_start..];
            let pos = tail.find(slot.token()).ok_or(PromptError::MissingSlot(slot.token()))?;
            if tail[pos + slot.token().len()..].contains(slot.token()) {
                return Err(PromptError::InvalidTemplate(format!("{} appears more than once", slot.token())));
            }
            Ok((tail_start + pos, slot))
        };
        let mut slots = [find_once(Slot::Question)?, find_once(Slot::Context)?];
        slots.sort_by_key(|s| s.0);
        Ok(Self {
            id: id.to_string(),
            raw: raw.to_string(),
            system,
            slots,
            render_mode,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn render_mode(&self) -> RenderMode {
        self.render_mode
    }

    pub fn with_render_mode(mut self, mode: RenderMode) -> Self {
        self.render_mode = mode;
        self
    }

    pub fn system_text(&self) -> &str {
        &self.raw[self.system.clone()]
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn render(&self, question: &str, context: &str) -> Result<PromptBundle, PromptError> {
        self.render_with_instructions(question, context, &[])
    }

    /// Renders with `extra` sentences appended to the system text. The
    /// template itself is never modified.
    pub fn render_with_instructions(
        &self,
        question: &str,
        context: &str,
        extra: &[&str],
    ) -> Result<PromptBundle, PromptError> {
        if question.is_empty() {
            return Err(PromptError::EmptyQuestion);
        }
        let rendered = match self.render_mode {
            RenderMode::RawInst => RenderedPrompt::Raw(self.render_raw(question, context, extra)),
            RenderMode::ChatMessages => {
                let mut system = self.system_text().to_string();
                for e in extra {
                    system.push(' ');
                    system.push_str(e);
                }
                RenderedPrompt::Messages(vec![
                    ChatMessage {
                        role: MessageRole::System,
                        content: system,
                    },
                    ChatMessage {
                        role: MessageRole::User,
                        content: format!("Question: {question}\nContext: {context}\nAnswer:"),
                    },
                ])
            }
        };
        Ok(PromptBundle {
            rendered,
            question: question.to_string(),
            context: context.to_string(),
        })
    }

    fn render_raw(&self, question: &str, context: &str, extra: &[&str]) -> String {
        let raw = &self.raw;
        let mut out = String::with_capacity(raw.len() + question.len() + context.len() + 64);
        out.push_str(&raw[..self.system.end]);
        for e in extra {
            out.push(' ');
            out.push_str(e);
        }
        let mut cursor = self.system.end;
        for &(pos, slot) in &self.slots {
            out.push_str(&raw[cursor..pos]);
            out.push_str(match slot {
                Slot::Question => question,
                Slot::Context => context,
            });
            cursor = pos + slot.token().len();
        }
        out.push_str(&raw[cursor..]);
        if !raw.contains(INST_CLOSE) {
            out.push_str(INST_CLOSE);
        }
        out
    }
}
