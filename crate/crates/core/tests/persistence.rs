use std::path::Path;

use si_core::embed::stub_embed;
use si_core::index::{store, HnswParams};
use si_core::{ingest_corpus, ChunkingConfig, Corpus, Embedder, IndexError, IndexKind};

fn write_corpus(dir: &Path, docs: usize) {
    for i in 0..docs {
        let body: String = (0..300).map(|j| format!("t{}w{} ", i, (i * 31 + j) % 97)).collect();
        std::fs::write(dir.join(format!("doc{i:03}.txt")), body).unwrap();
    }
}

#[tokio::test]
async fn ingest_save_load_round_trip() {
    let src = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    write_corpus(src.path(), 40);
    let embedder = Embedder::stub(32);
    ingest_corpus(src.path(), "rt", &ChunkingConfig::default(), &embedder, out.path())
        .await
        .unwrap();

    let first = Corpus::open(out.path(), IndexKind::Flat, &HnswParams::default()).unwrap();
    for c in first.chunks() {
        let v = first.index().entries().into_iter().find(|e| e.chunk_id == c.id).unwrap();
        assert!((v.vector.norm() - 1.0).abs() <= 1e-5);
    }

    let original = std::fs::read(out.path().join("vectors.bin")).unwrap();
    let copy = tempfile::tempdir().unwrap();
    first.save(copy.path()).unwrap();
    assert_eq!(std::fs::read(copy.path().join("vectors.bin")).unwrap(), original);

    let second = Corpus::open(copy.path(), IndexKind::Flat, &HnswParams::default()).unwrap();
    for i in 0..50 {
        let q = stub_embed(&format!("question {i}"), 32);
        assert_eq!(
            first.index().query(q.as_slice(), 5).unwrap(),
            second.index().query(q.as_slice(), 5).unwrap()
        );
    }
}

#[tokio::test]
async fn damaged_vectors_are_rejected() {
    let src = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    write_corpus(src.path(), 3);
    ingest_corpus(src.path(), "d", &ChunkingConfig::default(), &Embedder::stub(8), out.path())
        .await
        .unwrap();
    let path = out.path().join("vectors.bin");
    let good = std::fs::read(&path).unwrap();

    let mut flipped = good.clone();
    let mid = good.len() - 12;
    flipped[mid] ^= 0x40;
    std::fs::write(&path, &flipped).unwrap();
    assert!(matches!(store::load(&path), Err(IndexError::ChecksumMismatch { .. })));

    std::fs::write(&path, &good[..good.len() - 7]).unwrap();
    assert!(matches!(store::load(&path), Err(IndexError::CorruptFile(_))));

    let mut magic = good.clone();
    magic[0] = b'X';
    std::fs::write(&path, &magic).unwrap();
    assert!(matches!(store::load(&path), Err(IndexError::CorruptFile(_))));
}

#[tokio::test]
async fn ten_transcripts() {
    let src = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    for i in 0..10 {
        std::fs::write(
            src.path().join(format!("interview{i:02}.txt")),
            format!("Interviewer: How do you keep your files?\nP{i}: On a USB stick, mostly. Sometimes email.\n"),
        )
        .unwrap();
    }
    let cfg = ChunkingConfig {
        strategy: si_core::ingest::ChunkStrategy::SpeakerTurn,
        ..ChunkingConfig::default()
    };
    let m = ingest_corpus(src.path(), "add", &cfg, &Embedder::stub(16), out.path()).await.unwrap();
    assert_eq!(m.document_count, 10);
    assert!(m.chunk_count >= 10);
}
