use super::{dot, hit_order, VectorStore};

/// Exact top-k by full scan.
pub(super) fn top_k(store: &VectorStore, q: &[f32], k: usize) -> Vec<(f32, usize)> {
    let mut scored: Vec<(f32, usize)> = (0..store.len()).map(|i| (dot(store.vector(i), q), i)).collect();
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, |&a, &b| hit_order(store, a, b));
        scored.truncate(k);
    }
    scored.sort_unstable_by(|&a, &b| hit_order(store, a, b));
    scored
}
