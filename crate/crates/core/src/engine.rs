//! One interviewer question in, one guarded interlocutor answer out.

use std::collections::BTreeSet;
use std::sync::Arc;

use chrono::Utc;

use crate::corpus::Corpus;
use crate::embed::Embedder;
use crate::guards::{check_guards, GuardAction, GuardLexicon, GuardSettings, GuardVerdict, Rule};
use crate::index::RetrievalHit;
use crate::llm::{Generator, LlmError};
use crate::prompt::{PromptError, PromptTemplate, RenderMode};
use crate::retrieval::{retrieve, RetrievalError};
use crate::session::{ChatTurn, Role, Session, SessionError, SessionStore};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("session is closed")]
    SessionClosed,
    #[error("question is empty")]
    EmptyQuestion,
    #[error("session belongs to corpus `{session}`, engine serves `{engine}`")]
    CorpusMismatch { session: String, engine: String },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Session(#[from] SessionError),
}

/// Progress reported while a turn runs.
#[derive(Debug, Clone, PartialEq)]
pub enum TurnEvent {
    Retrieval(Vec<RetrievalHit>),
    /// A streamed text increment of the current attempt.
    Token(String),
    /// Guard outcome of attempt `attempt` (0 is the first generation). When
    /// `regenerating` is set the tokens streamed so far are discarded and a
    /// new attempt follows.
    Guards {
        attempt: u32,
        verdicts: Vec<GuardVerdict>,
        regenerating: bool,
    },
}

pub type EventSink<'a> = dyn FnMut(TurnEvent) + Send + 'a;

#[derive(Clone)]
pub struct Engine {
    corpus: Arc<Corpus>,
    embedder: Embedder,
    generator: Arc<dyn Generator>,
    template: Arc<PromptTemplate>,
    lexicon: Arc<GuardLexicon>,
    guards: GuardSettings,
}

impl Engine {
    /// Engine with the shipped template (chat rendering), the builtin
    /// lexicon and default guard settings.
    pub fn new(corpus: Arc<Corpus>, embedder: Embedder, generator: Arc<dyn Generator>) -> Self {
        Self {
            corpus,
            embedder,
            generator,
            template: Arc::new(PromptTemplate::golden(RenderMode::ChatMessages)),
            lexicon: Arc::new(GuardLexicon::builtin()),
            guards: GuardSettings::default(),
        }
    }

    pub fn with_template(mut self, template: PromptTemplate) -> Self {
        self.template = Arc::new(template);
        self
    }

    pub fn with_lexicon(mut self, lexicon: GuardLexicon) -> Self {
        self.lexicon = Arc::new(lexicon);
        self
    }

    pub fn with_guards(mut self, settings: GuardSettings) -> Self {
        self.guards = settings;
        self
    }

    pub fn corpus(&self) -> &Arc<Corpus> {
        &self.corpus
    }

    pub fn template(&self) -> &PromptTemplate {
        &self.template
    }

    pub fn guard_settings(&self) -> &GuardSettings {
        &self.guards
    }

    /// Answers `question` within `session`.
    ///
    /// On success the interviewer turn and the answer are appended to the
    /// session (and to `store`, if given) and the answer is returned. On
    /// error the session is left as it was.
    pub async fn run_turn(
        &self,
        session: &mut Session,
        store: Option<&SessionStore>,
        question: &str,
        events: &mut EventSink<'_>,
    ) -> Result<ChatTurn, EngineError> {
        if !session.is_active() {
            return Err(EngineError::SessionClosed);
        }
        if question.trim().is_empty() {
            return Err(EngineError::EmptyQuestion);
        }
        if session.corpus_id != self.corpus.id() {
            return Err(EngineError::CorpusMismatch {
                session: session.corpus_id.clone(),
                engine: self.corpus.id().to_string(),
            });
        }

        let started_at = Utc::now();
        let retrieved = retrieve(
            question,
            &session.turns,
            &self.corpus,
            &self.embedder,
            &session.retrieval_config,
        )
        .await?;
        events(TurnEvent::Retrieval(retrieved.hits.clone()));

        let question_turn = ChatTurn::interviewer(question, started_at);
        let mut history = session.turns.clone();
        history.push(question_turn.clone());

        let mut corrected: BTreeSet<Rule> = BTreeSet::new();
        let mut attempt = 0u32;
        let (result, mut verdicts) = loop {
            let extra: Vec<&str> = corrected.iter().map(|r| r.correction()).collect();
            let bundle = self
                .template
                .render_with_instructions(question, &retrieved.context_text, &extra)?;
            let mut streamed = String::new();
            let mut forward = |t: &str| {
                streamed.push_str(t);
                events(TurnEvent::Token(t.to_string()));
            };
            let result = self
                .generator
                .generate(&bundle, &session.generation_params, &mut forward)
                .await?;
            debug_assert_eq!(streamed, result.text);

            let verdicts = check_guards(&result.text, &history, &self.lexicon, &self.guards);
            let fired: Vec<Rule> = verdicts.iter().filter(|v| v.triggered).map(|v| v.rule).collect();
            if fired.is_empty() || attempt >= self.guards.max_regens {
                break (result, verdicts);
            }
            tracing::debug!(attempt, ?fired, "guard triggered, regenerating");
            events(TurnEvent::Guards {
                attempt,
                verdicts: verdicts
                    .into_iter()
                    .map(|mut v| {
                        if v.triggered {
                            v.action_taken = GuardAction::Regenerated;
                        }
                        v
                    })
                    .collect(),
                regenerating: true,
            });
            corrected.extend(fired);
            attempt += 1;
        };

        for v in &mut verdicts {
            v.action_taken = if v.triggered {
                GuardAction::Flagged
            } else if corrected.contains(&v.rule) {
                GuardAction::Regenerated
            } else {
                GuardAction::None
            };
        }
        events(TurnEvent::Guards {
            attempt,
            verdicts: verdicts.clone(),
            regenerating: false,
        });

        let answer = ChatTurn {
            role: Role::Interlocutor,
            text: result.text.clone(),
            hits: retrieved.hits,
            guard_verdicts: verdicts,
            regen_count: attempt,
            partial: result.is_partial(),
            started_at,
            completed_at: Utc::now(),
        };
        if let Some(store) = store {
            store.append(&session.id, &[question_turn.clone(), answer.clone()])?;
        }
        session.turns.push(question_turn);
        session.turns.push(answer.clone());
        Ok(answer)
    }
}
