use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use si_core::embed::stub_embed;
use si_core::index::HnswParams;
use si_core::{build_index, EmbeddingVector, IndexEntry, IndexKind};

fn random_entries(n: usize, dim: usize, seed: u64) -> Vec<IndexEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            IndexEntry {
                chunk_id: format!("doc{}#{}", i / 7, i % 7),
                vector: EmbeddingVector::normalized(v).unwrap(),
            }
        })
        .collect()
}

/// Plain O(n·d) scan: score every entry, sort by score descending, then id.
fn brute_force(entries: &[IndexEntry], q: &[f32], k: usize) -> Vec<(String, f32)> {
    let mut scored: Vec<(String, f32)> = entries
        .iter()
        .map(|e| {
            let mut s = 0.0f32;
            for (a, b) in e.vector.as_slice().iter().zip(q) {
                s += a * b;
            }
            (e.chunk_id.clone(), s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

fn exact_f64(entries: &[IndexEntry], id: &str, q: &[f32]) -> f64 {
    let e = entries.iter().find(|e| e.chunk_id == id).unwrap();
    e.vector.as_slice().iter().zip(q).map(|(a, b)| *a as f64 * *b as f64).sum()
}

fn check_flat(n: usize, dim: usize, queries: usize, seed: u64) {
    let entries = random_entries(n, dim, seed);
    let index = build_index(&entries, IndexKind::Flat, &HnswParams::default()).unwrap();
    let qs = random_entries(queries, dim, seed + 1);
    for q in &qs {
        let q = q.vector.as_slice();
        let got = index.query(q, 10).unwrap();
        let want = brute_force(&entries, q, 10);
        assert_eq!(got.len(), want.len());
        for (rank, (h, (id, score))) in got.iter().zip(&want).enumerate() {
            assert_eq!(h.rank, rank);
            assert_eq!(&h.chunk_id, id);
            assert!((h.score - score).abs() <= 1e-6);
            assert!((h.score as f64 - exact_f64(&entries, id, q)).abs() <= 1e-6);
            assert!(h.score.abs() <= 1.0 + 1e-6);
        }
    }
}

#[test]
fn flat_matches_brute_force_d8() {
    check_flat(10_000, 8, 50, 1);
}

#[test]
fn flat_matches_brute_force_d32() {
    check_flat(5_000, 32, 100, 2);
}

#[test]
fn flat_matches_brute_force_d768() {
    check_flat(2_000, 768, 20, 3);
}

#[test]
fn ties_break_by_ascending_id() {
    let v = EmbeddingVector::normalized(vec![0.6, 0.8]).unwrap();
    let entries = vec![
        IndexEntry { chunk_id: "b#0".into(), vector: v.clone() },
        IndexEntry { chunk_id: "a#0".into(), vector: v.clone() },
    ];
    for kind in [IndexKind::Flat, IndexKind::Hnsw] {
        let index = build_index(&entries, kind, &HnswParams::default()).unwrap();
        let hits = index.query(v.as_slice(), 1).unwrap();
        assert_eq!(hits[0].chunk_id, "a#0");
        assert_eq!(brute_force(&entries, v.as_slice(), 1)[0].0, "a#0");
    }
}

#[test]
fn orthogonal_and_identity() {
    let entries = vec![IndexEntry {
        chunk_id: "x#0".into(),
        vector: EmbeddingVector::normalized(vec![1.0, 0.0]).unwrap(),
    }];
    let index = build_index(&entries, IndexKind::Flat, &HnswParams::default()).unwrap();
    assert!(index.query(&[0.0, 1.0], 1).unwrap()[0].score.abs() <= 1e-6);
    assert!((index.query(&[1.0, 0.0], 1).unwrap()[0].score - 1.0).abs() <= 1e-6);
    assert_eq!(index.query(&[1.0, 0.0], 5).unwrap().len(), 1);
}

fn recall(n: usize, dim: usize, queries: usize) -> (f64, f64) {
    let entries: Vec<IndexEntry> = (0..n)
        .map(|i| IndexEntry {
            chunk_id: format!("c#{i}"),
            vector: stub_embed(&format!("chunk {i}"), dim),
        })
        .collect();
    let flat = build_index(&entries, IndexKind::Flat, &HnswParams::default()).unwrap();
    let hnsw = build_index(&entries, IndexKind::Hnsw, &HnswParams::default()).unwrap();
    let (mut r1, mut r10) = (0usize, 0usize);
    for i in 0..queries {
        let q = stub_embed(&format!("query {i}"), dim);
        let exact = flat.query(q.as_slice(), 10).unwrap();
        let approx = hnsw.query(q.as_slice(), 10).unwrap();
        if approx[0].chunk_id == exact[0].chunk_id {
            r1 += 1;
        }
        r10 += approx.iter().filter(|a| exact.iter().any(|e| e.chunk_id == a.chunk_id)).count();
    }
    (r1 as f64 / queries as f64, r10 as f64 / (queries * 10) as f64)
}

#[test]
fn hnsw_recall_on_stub_benchmark() {
    let (r1, r10) = recall(5_000, 32, 100);
    assert!(r1 >= 0.95, "recall@1 {r1}");
    assert!(r10 >= 0.90, "recall@10 {r10}");
}

#[test]
fn hnsw_is_deterministic() {
    let entries = random_entries(1_500, 16, 9);
    let a = build_index(&entries, IndexKind::Hnsw, &HnswParams::default()).unwrap();
    let b = build_index(&entries, IndexKind::Hnsw, &HnswParams::default()).unwrap();
    for q in random_entries(30, 16, 10) {
        assert_eq!(a.query(q.vector.as_slice(), 5).unwrap(), b.query(q.vector.as_slice(), 5).unwrap());
    }
}

#[test]
fn random_scores_stay_in_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let entries = random_entries(300, 8, 11);
    let index = build_index(&entries, IndexKind::Hnsw, &HnswParams::default()).unwrap();
    for _ in 0..50 {
        let q: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let q = EmbeddingVector::normalized(q).unwrap();
        let hits = index.query(q.as_slice(), 10).unwrap();
        assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(hits.iter().all(|h| h.score.abs() <= 1.0 + 1e-6));
    }
}
