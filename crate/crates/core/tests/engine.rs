use std::sync::Arc;

use si_core::embed::stub_embed;
use si_core::guards::GuardAction;
use si_core::index::HnswParams;
use si_core::llm::{EchoGenerator, ScriptedGenerator, TokenSink};
use si_core::session::SessionStatus;
use si_core::{
    ingest_corpus, ChunkingConfig, Corpus, Embedder, Engine, EngineError, GenerationParams, GenerationResult,
    Generator, IndexKind, LlmError, PromptBundle, RetrievalConfig, Role, Rule, Session, SessionStore, TurnEvent,
};

struct Down;

#[async_trait::async_trait]
impl Generator for Down {
    async fn generate(
        &self,
        _: &PromptBundle,
        _: &GenerationParams,
        _: &mut TokenSink<'_>,
    ) -> Result<GenerationResult, LlmError> {
        Err(LlmError::Unavailable("connection refused".into()))
    }
}

async fn single_doc_corpus(text: &str) -> (tempfile::TempDir, Arc<Corpus>) {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    std::fs::create_dir(&src).unwrap();
    std::fs::write(src.join("garden.txt"), text).unwrap();
    let out = dir.path().join("corpus");
    ingest_corpus(&src, "garden", &ChunkingConfig::default(), &Embedder::stub(32), &out)
        .await
        .unwrap();
    let corpus = Corpus::open(&out, IndexKind::Flat, &HnswParams::default()).unwrap();
    (dir, Arc::new(corpus))
}

fn new_session() -> Session {
    Session::new("garden", GenerationParams::default(), RetrievalConfig::default(), "si_v1")
}

#[tokio::test]
async fn echo_round_trip_records_provenance() {
    let (dir, corpus) = single_doc_corpus("I love gardening.").await;
    let store = SessionStore::open(dir.path().join("sessions")).unwrap();
    let engine = Engine::new(corpus, Embedder::stub(32), Arc::new(EchoGenerator::new()));
    let mut session = new_session();
    store.create(&session).unwrap();

    for q in ["How are you doing?", "What do you do on weekends?"] {
        let turn = engine.run_turn(&mut session, Some(&store), q, &mut |_| {}).await.unwrap();
        assert!(turn.text.contains("I love gardening."));
        assert_eq!(turn.regen_count, 0);
        assert!(turn.guard_verdicts.iter().all(|v| !v.triggered && v.action_taken == GuardAction::None));
        let want: f32 = stub_embed("I love gardening.", 32)
            .as_slice()
            .iter()
            .zip(stub_embed(q, 32).as_slice())
            .map(|(a, b)| a * b)
            .sum();
        assert_eq!(turn.hits[0].chunk_id, "garden#0");
        assert!((turn.hits[0].score - want).abs() <= 1e-6);
    }

    let loaded = store.load(&session.id).unwrap();
    assert_eq!(loaded.turns.len(), 4);
    assert!(Session::alternates(&loaded.turns));
    for t in &loaded.turns {
        if t.role == Role::Interviewer {
            assert!(t.hits.is_empty() && t.guard_verdicts.is_empty());
        }
    }
}

#[tokio::test]
async fn question_equal_to_chunk_scores_one() {
    let (_dir, corpus) = single_doc_corpus("How are you doing?").await;
    let engine = Engine::new(corpus, Embedder::stub(32), Arc::new(EchoGenerator::new()));
    let mut session = new_session();
    let turn = engine.run_turn(&mut session, None, "How are you doing?", &mut |_| {}).await.unwrap();
    assert!((turn.hits[0].score - 1.0).abs() <= 1e-6);
}

#[tokio::test]
async fn farewell_is_regenerated_once() {
    let (_dir, corpus) = single_doc_corpus("I love gardening.").await;
    let generator = Arc::new(ScriptedGenerator::new([
        "Thank you for your time, goodbye.",
        "Mostly I potter about in the garden.",
    ]));
    let engine = Engine::new(corpus, Embedder::stub(32), generator.clone());
    let mut session = new_session();
    let mut events = Vec::new();
    let turn = engine
        .run_turn(&mut session, None, "What do you do on weekends?", &mut |e| events.push(e))
        .await
        .unwrap();
    assert_eq!(turn.regen_count, 1);
    let r2 = turn.guard_verdicts.iter().find(|v| v.rule == Rule::Continuation).unwrap();
    assert_eq!(r2.action_taken, GuardAction::Regenerated);
    assert!(!r2.triggered);
    assert_eq!(generator.calls(), 2);
    let regen = events
        .iter()
        .filter(|e| matches!(e, TurnEvent::Guards { regenerating: true, .. }))
        .count();
    assert_eq!(regen, 1);
}

#[tokio::test]
async fn persistent_ascription_is_flagged() {
    let (_dir, corpus) = single_doc_corpus("I love gardening.").await;
    let line = "However, as you've mentioned, budgets are tight.";
    let generator = Arc::new(ScriptedGenerator::new(std::iter::repeat_n(line, 10)));
    let engine = Engine::new(corpus, Embedder::stub(32), generator.clone());
    let mut session = new_session();
    let turn = engine
        .run_turn(&mut session, None, "How do you handle software updates?", &mut |_| {})
        .await
        .unwrap();
    assert_eq!(turn.regen_count, 2);
    assert_eq!(generator.calls(), 3);
    let r4 = turn.guard_verdicts.iter().find(|v| v.rule == Rule::NoAscription).unwrap();
    assert!(r4.triggered);
    assert_eq!(r4.action_taken, GuardAction::Flagged);
    let ev = r4.evidence.as_ref().unwrap();
    assert_eq!(&turn.text[ev.span.start..ev.span.end], ev.text);
    assert!(ev.text.eq_ignore_ascii_case("as you've mentioned"));
}

#[tokio::test]
async fn failures_leave_no_trace() {
    let (dir, corpus) = single_doc_corpus("I love gardening.").await;
    let store = SessionStore::open(dir.path().join("sessions")).unwrap();
    let engine = Engine::new(corpus, Embedder::stub(32), Arc::new(Down));
    let mut session = new_session();
    store.create(&session).unwrap();
    let err = engine.run_turn(&mut session, Some(&store), "Hello?", &mut |_| {}).await.unwrap_err();
    assert!(matches!(err, EngineError::Llm(_)));
    assert!(session.turns.is_empty());
    assert!(store.load(&session.id).unwrap().turns.is_empty());

    session.status = SessionStatus::Closed;
    assert!(matches!(
        engine.run_turn(&mut session, None, "Hello?", &mut |_| {}).await,
        Err(EngineError::SessionClosed)
    ));
}

#[tokio::test]
async fn turn_runs_on_a_spawned_task() {
    let (_dir, corpus) = single_doc_corpus("I love gardening.").await;
    let engine = Engine::new(corpus, Embedder::stub(32), Arc::new(EchoGenerator::new()));
    let mut session = new_session();
    let (tx, mut rx) = tokio::sync::mpsc::unbounded_channel();
    let task = tokio::spawn(async move {
        let mut sink = move |e: TurnEvent| {
            let _ = tx.send(e);
        };
        engine.run_turn(&mut session, None, "Weekends?", &mut sink).await.map(|t| t.text)
    });
    let text = task.await.unwrap().unwrap();
    let mut tokens = String::new();
    while let Some(e) = rx.recv().await {
        if let TurnEvent::Token(t) = e {
            tokens.push_str(&t);
        }
    }
    assert_eq!(tokens, text);
}
