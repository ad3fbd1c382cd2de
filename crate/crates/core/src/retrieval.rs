//! Question → query vector → top-k chunks → prompt context.

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::embed::{EmbedError, Embedder};
use crate::index::{IndexError, RetrievalHit};
use crate::session::ChatTurn;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    #[default]
    LastMessageOnly,
    LastMessagePlusHistoryWindow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub k: usize,
    /// Hits scoring below this are dropped; -1 keeps everything.
    pub min_score: f32,
    pub context_separator: String,
    pub query_mode: QueryMode,
    pub history_window_turns: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 1,
            min_score: -1.0,
            context_separator: "\n---\n".into(),
            query_mode: QueryMode::LastMessageOnly,
            history_window_turns: 0,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.k == 0 {
            return Err(RetrievalError::InvalidConfig("k must be >= 1".into()));
        }
        if !self.min_score.is_finite() {
            return Err(RetrievalError::InvalidConfig("min_score must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedContext {
    pub hits: Vec<RetrievalHit>,
    pub context_text: String,
    pub query_text: String,
}

/// The text that gets embedded for `question` given the prior turns.
pub fn build_query_text(question: &str, history: &[ChatTurn], cfg: &RetrievalConfig) -> String {
    match cfg.query_mode {
        QueryMode::LastMessageOnly => question.to_string(),
        QueryMode::LastMessagePlusHistoryWindow => {
            let skip = history.len().saturating_sub(cfg.history_window_turns);
            history[skip..]
                .iter()
                .map(|t| t.text.as_str())
                .chain(std::iter::once(question))
                .collect::<Vec<_>>()
                .join("\n")
        }
    }
}

/// Fetches context for `question`. `history` holds the turns before it.
/// Neither the corpus nor the history is modified.
pub async fn retrieve(
    question: &str,
    history: &[ChatTurn],
    corpus: &Corpus,
    embedder: &Embedder,
    cfg: &RetrievalConfig,
) -> Result<RetrievedContext, RetrievalError> {
    if question.is_empty() {
        return Err(RetrievalError::EmptyQuestion);
    }
    cfg.validate()?;
    let query_text = build_query_text(question, history, cfg);
    if corpus.index().is_empty() {
        return Ok(RetrievedContext {
            hits: Vec::new(),
            context_text: String::new(),
            query_text,
        });
    }
    let q = embedder.embed_one(&query_text).await?;
    let hits: Vec<RetrievalHit> = corpus
        .index()
        .query(q.as_slice(), cfg.k)?
        .into_iter()
        .filter(|h| h.score >= cfg.min_score)
        .collect();
    let context_text = hits
        .iter()
        .filter_map(|h| corpus.chunk(&h.chunk_id).map(|c| c.text.as_str()))
        .collect::<Vec<_>>()
        .join(&cfg.context_separator);
    Ok(RetrievedContext {
        hits,
        context_text,
        query_text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::stub_embed;
    use crate::ingest::{parse_text, ChunkingConfig, DocumentKind};
    use chrono::Utc;

    async fn corpus(texts: &[&str]) -> Corpus {
        let docs = texts
            .iter()
            .enumerate()
            .map(|(i, t)| parse_text(t, &format!("d{i}"), DocumentKind::Other, false, 40).unwrap())
            .collect();
        Corpus::build("test", docs, &ChunkingConfig::default(), &Embedder::stub(32))
            .await
            .unwrap()
    }

    #[tokio::test]
    async fn empty_index_gives_empty_context() {
        let c = corpus(&[]).await;
        let r = retrieve("How are you doing?", &[], &c, &Embedder::stub(32), &RetrievalConfig::default())
            .await
            .unwrap();
        assert!(r.hits.is_empty());
        assert_eq!(r.context_text, "");
        assert_eq!(r.query_text, "How are you doing?");
    }

    #[tokio::test]
    async fn top1_is_brute_force_nearest() {
        let texts = ["I love gardening.", "The server room is cold.", "We never use two-factor."];
        let c = corpus(&texts).await;
        let question = "Tell me about security";
        let q = stub_embed(question, 32);
        let best = texts
            .iter()
            .max_by(|a, b| {
                let s = |t: &str| stub_embed(t, 32).as_slice().iter().zip(q.as_slice()).map(|(x, y)| x * y).sum::<f32>();
                s(a).total_cmp(&s(b))
            })
            .unwrap();
        let r = retrieve(question, &[], &c, &Embedder::stub(32), &RetrievalConfig::default())
            .await
            .unwrap();
        assert_eq!(r.hits.len(), 1);
        assert_eq!(&r.context_text, best);
    }

    #[tokio::test]
    async fn k2_joins_with_separator() {
        let c = corpus(&["alpha text", "beta text", "gamma text"]).await;
        let cfg = RetrievalConfig {
            k: 2,
            ..RetrievalConfig::default()
        };
        let r = retrieve("q", &[], &c, &Embedder::stub(32), &cfg).await.unwrap();
        let t0 = &c.chunk(&r.hits[0].chunk_id).unwrap().text;
        let t1 = &c.chunk(&r.hits[1].chunk_id).unwrap().text;
        assert_eq!(r.context_text, format!("{t0}\n---\n{t1}"));
    }

    #[tokio::test]
    async fn min_score_filters() {
        let c = corpus(&["alpha text", "beta text"]).await;
        let cfg = RetrievalConfig {
            k: 2,
            min_score: 1.5,
            ..RetrievalConfig::default()
        };
        let r = retrieve("q", &[], &c, &Embedder::stub(32), &cfg).await.unwrap();
        assert!(r.hits.is_empty());
        assert_eq!(r.context_text, "");
    }

    #[test]
    fn history_window_query() {
        let now = Utc::now();
        let history = vec![
            ChatTurn::interviewer("first", now),
            ChatTurn::interviewer("second", now),
            ChatTurn::interviewer("third", now),
        ];
        let cfg = RetrievalConfig {
            query_mode: QueryMode::LastMessagePlusHistoryWindow,
            history_window_turns: 2,
            ..RetrievalConfig::default()
        };
        assert_eq!(build_query_text("Q", &history, &cfg), "second\nthird\nQ");
        let none = RetrievalConfig {
            history_window_turns: 0,
            ..cfg.clone()
        };
        assert_eq!(build_query_text("Q", &history, &none), "Q");
        assert_eq!(build_query_text("Q", &history, &RetrievalConfig::default()), "Q");
    }
}
