//! Hierarchical navigable small-world graph over the shared vector store.
//!
//! Similarity is the dot product of unit vectors, so "closer" means a higher
//! score throughout. Neighbor lists are chosen with the diversity heuristic
//! (a candidate is kept only if it is more similar to the base node than to
//! every neighbor already kept).

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dot, hit_order, IndexError, VectorStore};

const MAX_LEVEL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HnswParams {
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self {
            m: 16,
            ef_construction: 200,
            ef_search: 64,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand {
    score: f32,
    id: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    /// Higher score is greater; among equal scores the lower node id wins.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Epoch-stamped visited set.
struct Visited {
    marks: Vec<u32>,
    epoch: u32,
}

impl Visited {
    fn new(n: usize) -> Self {
        Self {
            marks: vec![0; n],
            epoch: 1,
        }
    }

    fn grow(&mut self, n: usize) {
        self.marks.resize(n, 0);
    }

    fn reset(&mut self) {
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.marks.fill(0);
            self.epoch = 1;
        }
    }

    /// Returns true if `id` was not yet visited.
    fn insert(&mut self, id: u32) -> bool {
        let slot = &mut self.marks[id as usize];
        if *slot == self.epoch {
            false
        } else {
            *slot = self.epoch;
            true
        }
    }
}

#[derive(Debug, Clone)]
pub(super) struct Graph {
    /// `links[node][layer]` = neighbor ids.
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
    max_level: usize,
    params: HnswParams,
}

impl Graph {
    pub(super) fn build(store: &VectorStore, params: &HnswParams) -> Result<Self, IndexError> {
        if params.m < 2 {
            return Err(IndexError::InvalidParams(format!("m must be >= 2, got {}", params.m)));
        }
        if params.ef_construction == 0 || params.ef_search == 0 {
            return Err(IndexError::InvalidParams("ef values must be >= 1".into()));
        }
        let mut graph = Graph {
            links: Vec::with_capacity(store.len()),
            entry: None,
            max_level: 0,
            params: *params,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let level_mult = 1.0 / (params.m as f64).ln();
        let mut visited = Visited::new(0);
        for i in 0..store.len() {
            let u: f64 = rng.random();
            let level = ((-(1.0 - u).ln() * level_mult).floor() as usize).min(MAX_LEVEL);
            visited.grow(i + 1);
            graph.insert(store, i as u32, level, &mut visited);
        }
        Ok(graph)
    }

    fn max_links(&self, layer: usize) -> usize {
        if layer == 0 {
            self.params.m * 2
        } else {
            self.params.m
        }
    }

    fn insert(&mut self, store: &VectorStore, id: u32, level: usize, visited: &mut Visited) {
        self.links.push(vec![Vec::new(); level + 1]);
        let Some(entry) = self.entry else {
            self.entry = Some(id);
            self.max_level = level;
            return;
        };
        let q = store.vector(id as usize);
        let mut ep = Cand {
            score: dot(q, store.vector(entry as usize)),
            id: entry,
        };
        for layer in (level + 1..=self.max_level).rev() {
            ep = self.greedy(store, q, ep, layer);
        }
        let mut eps = vec![ep];
        for layer in (0..=level.min(self.max_level)).rev() {
            let found = self.search_layer(store, q, &eps, self.params.ef_construction, layer, visited);
            let neighbors = select_diverse(store, &found, self.params.m);
            for &n in &neighbors {
                self.link(store, n, id, layer);
            }
            self.links[id as usize][layer] = neighbors;
            eps = found;
        }
        if level > self.max_level {
            self.entry = Some(id);
            self.max_level = level;
        }
    }

    /// Adds `to` to the neighbor list of `from`, pruning it back to the
    /// layer's capacity when it overflows.
    fn link(&mut self, store: &VectorStore, from: u32, to: u32, layer: usize) {
        let cap = self.max_links(layer);
        let list = &mut self.links[from as usize][layer];
        list.push(to);
        if list.len() <= cap {
            return;
        }
        let base = store.vector(from as usize);
        let mut cands: Vec<Cand> = list
            .iter()
            .map(|&n| Cand {
                score: dot(base, store.vector(n as usize)),
                id: n,
            })
            .collect();
        cands.sort_unstable_by(|a, b| b.cmp(a));
        *list = select_diverse(store, &cands, cap);
    }

    fn greedy(&self, store: &VectorStore, q: &[f32], mut cur: Cand, layer: usize) -> Cand {
        loop {
            let mut improved = false;
            for &n in &self.links[cur.id as usize][layer] {
                let c = Cand {
                    score: dot(q, store.vector(n as usize)),
                    id: n,
                };
                if c > cur {
                    cur = c;
                    improved = true;
                }
            }
            if !improved {
                return cur;
            }
        }
    }

    /// Beam search on one layer; returns up to `ef` candidates, best first.
    fn search_layer(
        &self,
        store: &VectorStore,
        q: &[f32],
        entry_points: &[Cand],
        ef: usize,
        layer: usize,
        visited: &mut Visited,
    ) -> Vec<Cand> {
        visited.reset();
        let mut frontier: BinaryHeap<Cand> = BinaryHeap::new();
        let mut best: BinaryHeap<Reverse<Cand>> = BinaryHeap::new();
        for &ep in entry_points {
            if visited.insert(ep.id) {
                frontier.push(ep);
                best.push(Reverse(ep));
                if best.len() > ef {
                    best.pop();
                }
            }
        }
        while let Some(c) = frontier.pop() {
            let worst = best.peek().map(|r| r.0);
            if best.len() >= ef && worst.is_some_and(|w| c < w) {
                break;
            }
            for &n in &self.links[c.id as usize][layer] {
                if !visited.insert(n) {
                    continue;
                }
                let cand = Cand {
                    score: dot(q, store.vector(n as usize)),
                    id: n,
                };
                let worst = best.peek().map(|r| r.0);
                if best.len() < ef || worst.is_some_and(|w| cand > w) {
                    frontier.push(cand);
                    best.push(Reverse(cand));
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        best.into_sorted_vec().into_iter().map(|r| r.0).collect()
    }

    pub(super) fn search(&self, store: &VectorStore, q: &[f32], k: usize) -> Vec<(f32, usize)> {
        let Some(entry) = self.entry else {
            return Vec::new();
        };
        let mut ep = Cand {
            score: dot(q, store.vector(entry as usize)),
            id: entry,
        };
        for layer in (1..=self.max_level).rev() {
            ep = self.greedy(store, q, ep, layer);
        }
        let mut visited = Visited::new(store.len());
        let ef = self.params.ef_search.max(k);
        let found = self.search_layer(store, q, &[ep], ef, 0, &mut visited);
        let mut scored: Vec<(f32, usize)> = found.into_iter().map(|c| (c.score, c.id as usize)).collect();
        scored.sort_unstable_by(|&a, &b| hit_order(store, a, b));
        scored.truncate(k);
        scored
    }
}

/// Diversity heuristic over `cands` (sorted best first, scored against the
/// base node); keeps at most `m`.
fn select_diverse(store: &VectorStore, cands: &[Cand], m: usize) -> Vec<u32> {
    let mut kept: Vec<u32> = Vec::with_capacity(m);
    for c in cands {
        if kept.len() >= m {
            break;
        }
        let v = store.vector(c.id as usize);
        if kept.iter().all(|&r| dot(v, store.vector(r as usize)) < c.score) {
            kept.push(c.id);
        }
    }
    kept
}
