//! Vector store for precomputed document embeddings.
//!
//! Two query paths share one store: an exact full-scan ranking that serves
//! as the ground-truth oracle, and a layered proximity-graph approximate
//! search for scale. Both apply hard tag filters *during* candidate
//! admission, so selective filters still return `k` results whenever the
//! matching population allows it. The index persists to a versioned binary
//! file (JSON header, raw vector blob, graph adjacency blob) and supports
//! upsert/remove via tombstones: replaced or removed entries stay in the
//! graph as navigation waypoints but are never returned.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Leading bytes of an index file.
pub const INDEX_MAGIC: &[u8; 4] = b"SMIX";
/// Current index file format version.
pub const INDEX_VERSION: u32 = 1;

/// Errors produced while building, mutating, querying, or persisting an index.
#[derive(Debug, Error)]
pub enum IndexError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("header codec error: {0}")]
    Header(#[from] serde_json::Error),
    #[error("an index needs at least one vector")]
    Empty,
    #[error("dimension mismatch: index holds {expected}-dimensional vectors, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("bad index file: {0}")]
    BadFile(String),
    #[error("bad parameter: {0}")]
    BadParameter(String),
}

/// Similarity measure used for ranking.
///
/// Cosine is the serving default; Euclidean is available for towers trained
/// with a distance-based objective.
#[derive(Clone, Copy, Debug, Default, Eq, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

/// Query execution strategy.
#[derive(Clone, Copy, Debug, Default, Eq, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Full scan over every live entry; the ground-truth ordering.
    Exact,
    /// Graph-guided beam search; near-exact at a fraction of the scan cost.
    #[default]
    Approximate,
}

/// One stored embedding with its filterable metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexedVector {
    pub doc_id: String,
    pub vector: Vec<f32>,
    /// Free-form string tags (category, language, ...) matched by filters.
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

/// Build and search parameters. Unknown keys are rejected, both in config
/// files and in persisted index headers, so a typo or an unrecognized
/// parameter cannot be silently dropped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexParams {
    pub metric: Metric,
    /// Graph degree target; levels above zero keep at most `m` neighbors,
    /// level zero keeps at most `2 * m`.
    pub m: usize,
    /// Beam width while inserting.
    pub ef_construction: usize,
    /// Beam width while querying approximately (raised to `k` when smaller).
    pub ef_search: usize,
    /// Seed for the level draws; fixed seed + same insertion order = same graph.
    pub seed: u64,
}

impl Default for IndexParams {
    fn default() -> Self {
        Self { metric: Metric::Cosine, m: 16, ef_construction: 200, ef_search: 128, seed: 0 }
    }
}

impl IndexParams {
    fn validate(&self) -> Result<(), IndexError> {
        if self.m < 2 {
            return Err(IndexError::BadParameter(format!("m must be at least 2, got {}", self.m)));
        }
        if self.ef_construction == 0 || self.ef_search == 0 {
            return Err(IndexError::BadParameter(
                "ef_construction and ef_search must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One conjunct of a [`FilterPredicate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TagCondition {
    /// Tag must equal this value.
    Equals(String),
    /// Tag must equal one of these values.
    AnyOf(BTreeSet<String>),
}

/// Conjunction of per-tag conditions. The empty predicate admits everything;
/// an entry missing a constrained tag is rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FilterPredicate(pub BTreeMap<String, TagCondition>);

impl FilterPredicate {
    /// The always-true predicate.
    pub fn all() -> Self {
        Self::default()
    }

    /// Adds an equality clause.
    pub fn equals(mut self, tag: &str, value: &str) -> Self {
        self.0.insert(tag.to_string(), TagCondition::Equals(value.to_string()));
        self
    }

    /// Adds a membership clause.
    pub fn any_of<I: IntoIterator<Item = S>, S: Into<String>>(mut self, tag: &str, values: I) -> Self {
        self.0.insert(
            tag.to_string(),
            TagCondition::AnyOf(values.into_iter().map(Into::into).collect()),
        );
        self
    }

    /// True when every clause is satisfied by `tags`.
    pub fn matches(&self, tags: &BTreeMap<String, String>) -> bool {
        self.0.iter().all(|(tag, cond)| match (tags.get(tag), cond) {
            (Some(v), TagCondition::Equals(want)) => v == want,
            (Some(v), TagCondition::AnyOf(set)) => set.contains(v),
            (None, _) => false,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One ranked query result. `score` is the raw measure under the index
/// metric: cosine similarity (higher is better) or Euclidean distance
/// (lower is better); lists are always returned best-first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub doc_id: String,
    pub score: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Node {
    doc_id: String,
    tags: BTreeMap<String, String>,
    level: usize,
    deleted: bool,
    #[serde(skip)]
    vector: Vec<f32>,
    #[serde(skip)]
    norm: f64,
    #[serde(skip)]
    neighbors: Vec<Vec<u32>>,
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    params: IndexParams,
    dim: usize,
    inserts: u64,
    entry_point: Option<u32>,
    nodes: Vec<Node>,
}

/// The vector store. Queries take `&self` and mutations take `&mut self`,
/// so the borrow checker enforces the many-readers-or-one-writer contract;
/// a rebuilt index is swapped in by replacing the value atomically behind
/// whatever cell the caller shares it through.
#[derive(Clone, Debug)]
pub struct VectorIndex {
    params: IndexParams,
    dim: usize,
    inserts: u64,
    entry_point: Option<u32>,
    nodes: Vec<Node>,
    id_to_slot: BTreeMap<String, u32>,
}

/// Goodness: a monotone "higher is better" view of the raw measure, so the
/// two metrics share one ranking machinery.
fn goodness(metric: Metric, raw: f64) -> f64 {
    match metric {
        Metric::Cosine => raw,
        Metric::Euclidean => -raw,
    }
}

fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Raw measure between a query (with precomputed norm) and a node.
fn measure(metric: Metric, q: &[f32], q_norm: f64, node: &Node) -> f64 {
    match metric {
        Metric::Cosine => {
            let denom = q_norm * node.norm;
            if denom > 0.0 {
                dot(q, &node.vector) / denom
            } else {
                0.0 // zero vectors have no direction: score 0 by convention
            }
        }
        Metric::Euclidean => q
            .iter()
            .zip(&node.vector)
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt(),
    }
}

/// Max-heap key ordered by goodness then slot (for deterministic pops).
#[derive(PartialEq)]
struct ByGoodness(f64, u32);

impl Eq for ByGoodness {}

impl Ord for ByGoodness {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for ByGoodness {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl VectorIndex {
    /// Builds an index over `vectors` by inserting them in order; a repeated
    /// `doc_id` replaces the earlier entry (upsert semantics).
    pub fn build(vectors: Vec<IndexedVector>, params: IndexParams) -> Result<Self, IndexError> {
        params.validate()?;
        let first = vectors.first().ok_or(IndexError::Empty)?;
        let mut index = Self {
            params,
            dim: first.vector.len(),
            inserts: 0,
            entry_point: None,
            nodes: Vec::with_capacity(vectors.len()),
            id_to_slot: BTreeMap::new(),
        };
        for v in vectors {
            index.upsert(v)?;
        }
        Ok(index)
    }

    /// Embedding width of the stored vectors.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Build/search parameters.
    pub fn params(&self) -> &IndexParams {
        &self.params
    }

    /// Number of live (non-replaced, non-removed) entries.
    pub fn len(&self) -> usize {
        self.id_to_slot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_slot.is_empty()
    }

    /// The live entry for `doc_id`, if present.
    pub fn get(&self, doc_id: &str) -> Option<IndexedVector> {
        let &slot = self.id_to_slot.get(doc_id)?;
        let node = &self.nodes[slot as usize];
        Some(IndexedVector { doc_id: node.doc_id.clone(), vector: node.vector.clone(), tags: node.tags.clone() })
    }

    /// Iterates over live entries in `doc_id` order.
    pub fn entries(&self) -> impl Iterator<Item = IndexedVector> + '_ {
        self.id_to_slot.values().map(|&slot| {
            let node = &self.nodes[slot as usize];
            IndexedVector { doc_id: node.doc_id.clone(), vector: node.vector.clone(), tags: node.tags.clone() }
        })
    }

    /// Inserts a vector, replacing any live entry with the same `doc_id`.
    /// The replaced entry becomes a tombstone: still a graph waypoint,
    /// never a result.
    pub fn upsert(&mut self, v: IndexedVector) -> Result<(), IndexError> {
        if self.nodes.is_empty() {
            self.dim = v.vector.len();
        }
        if v.vector.len() != self.dim {
            return Err(IndexError::DimensionMismatch { expected: self.dim, got: v.vector.len() });
        }
        if let Some(&old) = self.id_to_slot.get(&v.doc_id) {
            self.nodes[old as usize].deleted = true;
        }
        let slot = self.nodes.len() as u32;
        let level = self.draw_level();
        let norm = l2_norm(&v.vector);
        self.nodes.push(Node {
            doc_id: v.doc_id.clone(),
            tags: v.tags,
            level,
            deleted: false,
            vector: v.vector,
            norm,
            neighbors: vec![Vec::new(); level + 1],
        });
        self.id_to_slot.insert(v.doc_id, slot);
        self.link(slot);
        self.inserts += 1;
        Ok(())
    }

    /// Removes a live entry. Returns false (and logs a warning) when the id
    /// is unknown.
    pub fn remove(&mut self, doc_id: &str) -> bool {
        match self.id_to_slot.remove(doc_id) {
            Some(slot) => {
                self.nodes[slot as usize].deleted = true;
                true
            }
            None => {
                log::warn!("remove: no entry for doc_id {doc_id:?}; ignoring");
                false
            }
        }
    }

    /// Top-`k` live entries passing `filter`, best-first, ties broken by
    /// `doc_id`. Returns fewer than `k` when the matching population is
    /// smaller.
    pub fn knn(
        &self,
        query: &[f32],
        k: usize,
        filter: &FilterPredicate,
        mode: QueryMode,
    ) -> Result<Vec<Neighbor>, IndexError> {
        if k == 0 {
            return Err(IndexError::BadParameter("k must be at least 1".into()));
        }
        if query.len() != self.dim {
            return Err(IndexError::DimensionMismatch { expected: self.dim, got: query.len() });
        }
        let q_norm = l2_norm(query);
        let mut hits: Vec<(f64, u32)> = match mode {
            QueryMode::Exact => self
                .id_to_slot
                .values()
                .filter(|&&slot| filter.matches(&self.nodes[slot as usize].tags))
                .map(|&slot| {
                    let raw = measure(self.params.metric, query, q_norm, &self.nodes[slot as usize]);
                    (goodness(self.params.metric, raw), slot)
                })
                .collect(),
            QueryMode::Approximate => {
                let ef = self.params.ef_search.max(k);
                self.search_graph(query, q_norm, ef, Some(filter))
            }
        };
        hits.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| self.nodes[a.1 as usize].doc_id.cmp(&self.nodes[b.1 as usize].doc_id))
        });
        hits.truncate(k);
        Ok(hits
            .into_iter()
            .map(|(g, slot)| {
                let raw = match self.params.metric {
                    Metric::Cosine => g,
                    Metric::Euclidean => -g,
                };
                Neighbor { doc_id: self.nodes[slot as usize].doc_id.clone(), score: raw as f32 }
            })
            .collect())
    }

    /// Writes the index to a versioned binary file: magic + version +
    /// JSON header, then the vector blob (f32 LE, slot order), then the
    /// adjacency blob (u32 LE, count-prefixed per node per level).
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let header = IndexHeader {
            params: self.params.clone(),
            dim: self.dim,
            inserts: self.inserts,
            entry_point: self.entry_point,
            nodes: self.nodes.clone(),
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&(header_json.len() as u64).to_le_bytes())?;
        w.write_all(&header_json)?;
        for node in &self.nodes {
            for &x in &node.vector {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        for node in &self.nodes {
            for level in &node.neighbors {
                w.write_all(&(level.len() as u32).to_le_bytes())?;
                for &n in level {
                    w.write_all(&n.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads an index written by [`VectorIndex::save`].
    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(IndexError::BadFile("not an index file (bad magic)".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != INDEX_VERSION {
            return Err(IndexError::BadFile(format!(
                "unsupported index version {version} (this build reads {INDEX_VERSION})"
            )));
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let header_len = u64::from_le_bytes(u64buf) as usize;
        let mut header_json = vec![0u8; header_len];
        r.read_exact(&mut header_json)?;
        let header: IndexHeader = serde_json::from_slice(&header_json)?;
        header.params.validate()?;
        let mut nodes = header.nodes;
        for node in nodes.iter_mut() {
            let mut vector = vec![0.0f32; header.dim];
            for x in vector.iter_mut() {
                r.read_exact(&mut u32buf)?;
                *x = f32::from_le_bytes(u32buf);
            }
            node.norm = l2_norm(&vector);
            node.vector = vector;
        }
        let n_nodes = nodes.len() as u32;
        for node in nodes.iter_mut() {
            let mut levels = Vec::with_capacity(node.level + 1);
            for _ in 0..=node.level {
                r.read_exact(&mut u32buf)?;
                let count = u32::from_le_bytes(u32buf) as usize;
                let mut list = Vec::with_capacity(count);
                for _ in 0..count {
                    r.read_exact(&mut u32buf)?;
                    let slot = u32::from_le_bytes(u32buf);
                    if slot >= n_nodes {
                        return Err(IndexError::BadFile(format!(
                            "neighbor slot {slot} out of range ({n_nodes} nodes)"
                        )));
                    }
                    list.push(slot);
                }
                levels.push(list);
            }
            node.neighbors = levels;
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(IndexError::BadFile("trailing bytes after adjacency blob".into()));
        }
        if let Some(ep) = header.entry_point {
            if ep >= n_nodes {
                return Err(IndexError::BadFile(format!("entry point {ep} out of range")));
            }
        }
        let mut id_to_slot = BTreeMap::new();
        for (slot, node) in nodes.iter().enumerate() {
            if !node.deleted && id_to_slot.insert(node.doc_id.clone(), slot as u32).is_some() {
                return Err(IndexError::BadFile(format!("duplicate live doc_id {:?}", node.doc_id)));
            }
        }
        Ok(Self {
            params: header.params,
            dim: header.dim,
            inserts: header.inserts,
            entry_point: header.entry_point,
            nodes,
            id_to_slot,
        })
    }

    /// Level for the next inserted node; seeded by (params.seed, inserts) so
    /// the draw sequence survives save/load.
    fn draw_level(&self) -> usize {
        let mix = self.params.seed ^ self.inserts.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(mix);
        let u: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
        let ml = 1.0 / (self.params.m as f64).ln();
        ((-u.ln() * ml) as usize).min(30)
    }

    fn max_degree(&self, level: usize) -> usize {
        if level == 0 {
            self.params.m * 2
        } else {
            self.params.m
        }
    }

    /// Wires a freshly pushed node into the graph.
    fn link(&mut self, slot: u32) {
        let Some(mut ep) = self.entry_point else {
            self.entry_point = Some(slot);
            return;
        };
        let node_level = self.nodes[slot as usize].level;
        let top_level = self.nodes[ep as usize].level;
        let query = self.nodes[slot as usize].vector.clone();
        let q_norm = self.nodes[slot as usize].norm;

        for level in ((node_level + 1)..=top_level).rev() {
            ep = self.greedy_closest(&query, q_norm, ep, level);
        }
        let mut entries = vec![ep];
        for level in (0..=node_level.min(top_level)).rev() {
            let candidates = self.search_layer(&query, q_norm, &entries, self.params.ef_construction, level);
            let chosen = self.select_neighbors(&candidates, self.params.m);
            for &c in &chosen {
                self.nodes[slot as usize].neighbors[level].push(c);
                self.nodes[c as usize].neighbors[level].push(slot);
                self.shrink_neighbors(c, level);
            }
            entries = candidates.iter().map(|&(_, s)| s).collect();
            if entries.is_empty() {
                entries = vec![ep];
            }
        }
        if node_level > top_level {
            self.entry_point = Some(slot);
        }
    }

    /// Greedy descent step: the closest node to `query` reachable from `ep`
    /// on `level` by always moving to a better neighbor.
    fn greedy_closest(&self, query: &[f32], q_norm: f64, mut ep: u32, level: usize) -> u32 {
        let metric = self.params.metric;
        let mut best = goodness(metric, measure(metric, query, q_norm, &self.nodes[ep as usize]));
        loop {
            let mut improved = false;
            for &n in &self.nodes[ep as usize].neighbors[level] {
                let g = goodness(metric, measure(metric, query, q_norm, &self.nodes[n as usize]));
                if g > best {
                    best = g;
                    ep = n;
                    improved = true;
                }
            }
            if !improved {
                return ep;
            }
        }
    }

    /// Beam search on one level. Returns up to `ef` nodes as (goodness, slot),
    /// unsorted. Tombstones participate (navigation) and are returned; the
    /// caller filters where it matters.
    fn search_layer(
        &self,
        query: &[f32],
        q_norm: f64,
        entries: &[u32],
        ef: usize,
        level: usize,
    ) -> Vec<(f64, u32)> {
        let metric = self.params.metric;
        let mut visited = vec![false; self.nodes.len()];
        let mut candidates = BinaryHeap::new(); // best-first expansion
        let mut results: BinaryHeap<std::cmp::Reverse<ByGoodness>> = BinaryHeap::new(); // worst on top
        for &e in entries {
            if visited[e as usize] {
                continue;
            }
            visited[e as usize] = true;
            let g = goodness(metric, measure(metric, query, q_norm, &self.nodes[e as usize]));
            candidates.push(ByGoodness(g, e));
            results.push(std::cmp::Reverse(ByGoodness(g, e)));
        }
        while let Some(ByGoodness(g, slot)) = candidates.pop() {
            let worst = results.peek().map(|r| r.0 .0).unwrap_or(f64::NEG_INFINITY);
            if results.len() >= ef && g < worst {
                break;
            }
            for &n in &self.nodes[slot as usize].neighbors[level] {
                if visited[n as usize] {
                    continue;
                }
                visited[n as usize] = true;
                let gn = goodness(metric, measure(metric, query, q_norm, &self.nodes[n as usize]));
                let worst = results.peek().map(|r| r.0 .0).unwrap_or(f64::NEG_INFINITY);
                if results.len() < ef || gn > worst {
                    candidates.push(ByGoodness(gn, n));
                    results.push(std::cmp::Reverse(ByGoodness(gn, n)));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        results.into_iter().map(|r| (r.0 .0, r.0 .1)).collect()
    }

    /// Level-0 search used by approximate queries: expands through every
    /// node (tombstones included) but admits only live, filter-passing nodes
    /// into the result set, growing the beam until `ef` such results exist
    /// or the reachable region is exhausted — so selective filters still
    /// fill `k`.
    fn search_graph(
        &self,
        query: &[f32],
        q_norm: f64,
        ef: usize,
        filter: Option<&FilterPredicate>,
    ) -> Vec<(f64, u32)> {
        let Some(mut ep) = self.entry_point else {
            return Vec::new();
        };
        let metric = self.params.metric;
        for level in (1..=self.nodes[ep as usize].level).rev() {
            ep = self.greedy_closest(query, q_norm, ep, level);
        }
        let admits = |slot: u32| {
            let node = &self.nodes[slot as usize];
            !node.deleted && filter.is_none_or(|f| f.matches(&node.tags))
        };
        let mut visited = vec![false; self.nodes.len()];
        let mut candidates = BinaryHeap::new();
        let mut results: BinaryHeap<std::cmp::Reverse<ByGoodness>> = BinaryHeap::new();
        visited[ep as usize] = true;
        let g = goodness(metric, measure(metric, query, q_norm, &self.nodes[ep as usize]));
        candidates.push(ByGoodness(g, ep));
        if admits(ep) {
            results.push(std::cmp::Reverse(ByGoodness(g, ep)));
        }
        while let Some(ByGoodness(g, slot)) = candidates.pop() {
            let worst = results.peek().map(|r| r.0 .0).unwrap_or(f64::NEG_INFINITY);
            if results.len() >= ef && g < worst {
                break;
            }
            for &n in &self.nodes[slot as usize].neighbors[0] {
                if visited[n as usize] {
                    continue;
                }
                visited[n as usize] = true;
                let gn = goodness(metric, measure(metric, query, q_norm, &self.nodes[n as usize]));
                let worst = results.peek().map(|r| r.0 .0).unwrap_or(f64::NEG_INFINITY);
                // Expansion is gated only when the result beam is full, so
                // sparse filter matches keep the frontier moving.
                if results.len() < ef || gn > worst {
                    candidates.push(ByGoodness(gn, n));
                    if admits(n) {
                        results.push(std::cmp::Reverse(ByGoodness(gn, n)));
                        if results.len() > ef {
                            results.pop();
                        }
                    }
                }
            }
        }
        results.into_iter().map(|r| (r.0 .0, r.0 .1)).collect()
    }

    /// Diversity-aware neighbor selection over (goodness-to-query, slot)
    /// pairs: walk candidates best-first and keep those closer to the query
    /// than to any already-kept neighbor; remaining slots are filled from
    /// the skipped candidates in order.
    fn select_neighbors(&self, candidates: &[(f64, u32)], m: usize) -> Vec<u32> {
        let metric = self.params.metric;
        let mut by_goodness: Vec<(f64, u32)> = candidates.to_vec();
        by_goodness.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let mut chosen: Vec<u32> = Vec::with_capacity(m);
        let mut skipped: Vec<u32> = Vec::new();
        for &(g, c) in &by_goodness {
            if chosen.len() >= m {
                break;
            }
            let cv = &self.nodes[c as usize];
            let diverse = chosen.iter().all(|&r| {
                let g_cr = goodness(metric, measure(metric, &cv.vector, cv.norm, &self.nodes[r as usize]));
                g > g_cr // closer to the query than to the kept neighbor
            });
            if diverse {
                chosen.push(c);
            } else {
                skipped.push(c);
            }
        }
        for c in skipped {
            if chosen.len() >= m {
                break;
            }
            chosen.push(c);
        }
        chosen
    }

    /// Re-selects `slot`'s neighbor list on `level` when it overflows the
    /// degree bound.
    fn shrink_neighbors(&mut self, slot: u32, level: usize) {
        let cap = self.max_degree(level);
        if self.nodes[slot as usize].neighbors[level].len() <= cap {
            return;
        }
        let metric = self.params.metric;
        let node_vec = self.nodes[slot as usize].vector.clone();
        let node_norm = self.nodes[slot as usize].norm;
        let mut unique: Vec<u32> = self.nodes[slot as usize].neighbors[level].clone();
        unique.sort_unstable();
        unique.dedup();
        let scored: Vec<(f64, u32)> = unique
            .into_iter()
            .map(|n| (goodness(metric, measure(metric, &node_vec, node_norm, &self.nodes[n as usize])), n))
            .collect();
        let kept = self.select_neighbors(&scored, cap);
        self.nodes[slot as usize].neighbors[level] = kept;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn entry(id: &str, vector: Vec<f32>, tags: &[(&str, &str)]) -> IndexedVector {
        IndexedVector {
            doc_id: id.to_string(),
            vector,
            tags: tags.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    fn random_vectors(n: usize, dim: usize, n_tags: usize, seed: u64) -> Vec<IndexedVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let v: Vec<f32> = (0..dim).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
                let tag = format!("t{}", rng.gen_range(0..n_tags));
                entry(&format!("doc{i:05}"), v, &[("group", &tag)])
            })
            .collect()
    }

    /// Independent full-scan ranking used as the ground-truth oracle.
    fn naive_knn(
        entries: &[IndexedVector],
        metric: Metric,
        query: &[f32],
        k: usize,
        filter: &FilterPredicate,
    ) -> Vec<(String, f32)> {
        let qn = query.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let mut scored: Vec<(f64, String, f64)> = entries
            .iter()
            .filter(|e| filter.matches(&e.tags))
            .map(|e| {
                let raw = match metric {
                    Metric::Cosine => {
                        let en = e.vector.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                        let mut dot = 0.0f64;
                        for (a, b) in query.iter().zip(&e.vector) {
                            dot += *a as f64 * *b as f64;
                        }
                        if qn * en > 0.0 {
                            dot / (qn * en)
                        } else {
                            0.0
                        }
                    }
                    Metric::Euclidean => query
                        .iter()
                        .zip(&e.vector)
                        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                        .sum::<f64>()
                        .sqrt(),
                };
                let good = match metric {
                    Metric::Cosine => raw,
                    Metric::Euclidean => -raw,
                };
                (good, e.doc_id.clone(), raw)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        scored.truncate(k);
        scored.into_iter().map(|(_, id, raw)| (id, raw as f32)).collect()
    }

    #[test]
    fn single_vector_index_returns_it_with_unit_score() {
        let index =
            VectorIndex::build(vec![entry("only", vec![0.3, -0.4, 1.2], &[])], IndexParams::default())
                .unwrap();
        for mode in [QueryMode::Exact, QueryMode::Approximate] {
            let hits = index.knn(&[0.3, -0.4, 1.2], 5, &FilterPredicate::all(), mode).unwrap();
            assert_eq!(hits.len(), 1);
            assert_eq!(hits[0].doc_id, "only");
            assert_eq!(hits[0].score, 1.0);
        }
    }

    #[test]
    fn duplicate_doc_id_on_build_keeps_the_last_vector() {
        let index = VectorIndex::build(
            vec![
                entry("a", vec![1.0, 0.0], &[("v", "old")]),
                entry("b", vec![0.0, 1.0], &[]),
                entry("a", vec![0.0, -1.0], &[("v", "new")]),
            ],
            IndexParams::default(),
        )
        .unwrap();
        assert_eq!(index.len(), 2);
        let got = index.get("a").unwrap();
        assert_eq!(got.vector, vec![0.0, -1.0]);
        assert_eq!(got.tags.get("v").map(String::as_str), Some("new"));
        let hits = index.knn(&[0.0, -1.0], 1, &FilterPredicate::all(), QueryMode::Exact).unwrap();
        assert_eq!(hits[0].doc_id, "a");
    }

    #[test]
    fn exact_mode_matches_a_naive_scan() {
        for metric in [Metric::Cosine, Metric::Euclidean] {
            let vectors = random_vectors(300, 9, 4, 100);
            let params = IndexParams { metric, ..IndexParams::default() };
            let index = VectorIndex::build(vectors.clone(), params).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(101);
            for q in 0..100 {
                let query: Vec<f32> = (0..9).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
                let filter = if q % 3 == 0 {
                    FilterPredicate::all().equals("group", &format!("t{}", q % 4))
                } else {
                    FilterPredicate::all()
                };
                let k = 1 + q % 17;
                let hits = index.knn(&query, k, &filter, QueryMode::Exact).unwrap();
                let oracle = naive_knn(&vectors, metric, &query, k, &filter);
                assert_eq!(hits.len(), oracle.len());
                for (h, (id, score)) in hits.iter().zip(&oracle) {
                    assert_eq!(&h.doc_id, id);
                    assert!((h.score - score).abs() <= 1e-6, "{} vs {}", h.score, score);
                }
            }
        }
    }

    #[test]
    fn approximate_recall_beats_the_bar_on_random_data() {
        let vectors = random_vectors(1500, 24, 3, 7);
        let index = VectorIndex::build(vectors, IndexParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut hit = 0usize;
        let mut total = 0usize;
        for _ in 0..50 {
            let query: Vec<f32> = (0..24).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
            let exact = index.knn(&query, 20, &FilterPredicate::all(), QueryMode::Exact).unwrap();
            let approx = index.knn(&query, 20, &FilterPredicate::all(), QueryMode::Approximate).unwrap();
            let truth: BTreeSet<&str> = exact.iter().map(|n| n.doc_id.as_str()).collect();
            hit += approx.iter().filter(|n| truth.contains(n.doc_id.as_str())).count();
            total += truth.len();
        }
        let recall = hit as f64 / total as f64;
        assert!(recall >= 0.95, "recall@20 = {recall}");
    }

    #[test]
    fn filtered_queries_return_only_matching_tags_and_fill_k() {
        let vectors = random_vectors(2000, 16, 10, 21); // ~200 per group
        let index = VectorIndex::build(vectors, IndexParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let query: Vec<f32> = (0..16).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
        let filter = FilterPredicate::all().equals("group", "t3");
        for mode in [QueryMode::Exact, QueryMode::Approximate] {
            let hits = index.knn(&query, 25, &filter, mode).unwrap();
            assert_eq!(hits.len(), 25, "selective filter must still fill k in {mode:?}");
            for h in &hits {
                let tags = index.get(&h.doc_id).unwrap().tags;
                assert_eq!(tags.get("group").map(String::as_str), Some("t3"));
            }
        }
        // Membership clause admits the union of groups.
        let either = FilterPredicate::all().any_of("group", ["t1", "t4"]);
        let hits = index.knn(&query, 40, &either, QueryMode::Approximate).unwrap();
        assert_eq!(hits.len(), 40);
        for h in &hits {
            let tags = index.get(&h.doc_id).unwrap().tags;
            assert!(matches!(tags.get("group").map(String::as_str), Some("t1") | Some("t4")));
        }
    }

    #[test]
    fn filter_excluding_everything_returns_empty() {
        let vectors = random_vectors(50, 4, 2, 31);
        let index = VectorIndex::build(vectors, IndexParams::default()).unwrap();
        let filter = FilterPredicate::all().equals("group", "no-such-group");
        for mode in [QueryMode::Exact, QueryMode::Approximate] {
            assert!(index.knn(&[0.1, 0.2, 0.3, 0.4], 5, &filter, mode).unwrap().is_empty());
        }
    }

    #[test]
    fn ties_break_lexicographically_by_doc_id() {
        let v = vec![0.6, 0.8];
        let index = VectorIndex::build(
            vec![
                entry("zeta", v.clone(), &[]),
                entry("alpha", v.clone(), &[]),
                entry("mid", v.clone(), &[]),
            ],
            IndexParams::default(),
        )
        .unwrap();
        let hits = index.knn(&v, 3, &FilterPredicate::all(), QueryMode::Exact).unwrap();
        let ids: Vec<&str> = hits.iter().map(|n| n.doc_id.as_str()).collect();
        assert_eq!(ids, ["alpha", "mid", "zeta"]);
    }

    #[test]
    fn k_beyond_population_returns_all_matches() {
        let vectors = random_vectors(7, 3, 1, 41);
        let index = VectorIndex::build(vectors, IndexParams::default()).unwrap();
        for mode in [QueryMode::Exact, QueryMode::Approximate] {
            let hits = index.knn(&[1.0, 0.0, 0.0], 100, &FilterPredicate::all(), mode).unwrap();
            assert_eq!(hits.len(), 7);
        }
    }

    #[test]
    fn upsert_replaces_and_remove_deletes() {
        let mut index = VectorIndex::build(
            vec![entry("a", vec![1.0, 0.0], &[]), entry("b", vec![0.0, 1.0], &[])],
            IndexParams::default(),
        )
        .unwrap();
        index.upsert(entry("a", vec![-1.0, 0.0], &[])).unwrap();
        assert_eq!(index.len(), 2);
        let hits = index.knn(&[-1.0, 0.0], 1, &FilterPredicate::all(), QueryMode::Exact).unwrap();
        assert_eq!(hits[0].doc_id, "a");
        assert_eq!(hits[0].score, 1.0);

        assert!(index.remove("a"));
        assert!(!index.remove("a"), "second remove of the same id is a no-op");
        assert!(!index.remove("never-existed"));
        assert_eq!(index.len(), 1);
        for mode in [QueryMode::Exact, QueryMode::Approximate] {
            let hits = index.knn(&[-1.0, 0.0], 5, &FilterPredicate::all(), mode).unwrap();
            assert!(hits.iter().all(|n| n.doc_id != "a"), "removed id must never surface");
        }
        assert!(index.get("a").is_none());
    }

    #[test]
    fn save_load_round_trip_preserves_results_in_both_modes() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("vectors.idx");
        let vectors = random_vectors(400, 12, 5, 51);
        let mut index = VectorIndex::build(vectors, IndexParams::default()).unwrap();
        index.remove("doc00007"); // tombstones must survive the round trip
        index.save(&path).unwrap();
        let loaded = VectorIndex::load(&path).unwrap();
        assert_eq!(loaded.len(), index.len());
        assert_eq!(loaded.dim(), index.dim());
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        for _ in 0..100 {
            let query: Vec<f32> = (0..12).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
            for mode in [QueryMode::Exact, QueryMode::Approximate] {
                let a = index.knn(&query, 10, &FilterPredicate::all(), mode).unwrap();
                let b = loaded.knn(&query, 10, &FilterPredicate::all(), mode).unwrap();
                assert_eq!(a, b);
            }
        }
        // Mutating after load continues deterministically: the level-draw
        // counter is part of the file.
        let mut m1 = index.clone();
        let mut m2 = loaded;
        m1.upsert(entry("fresh", vec![0.5; 12], &[])).unwrap();
        m2.upsert(entry("fresh", vec![0.5; 12], &[])).unwrap();
        let q = vec![0.5; 12];
        assert_eq!(
            m1.knn(&q, 5, &FilterPredicate::all(), QueryMode::Approximate).unwrap(),
            m2.knn(&q, 5, &FilterPredicate::all(), QueryMode::Approximate).unwrap()
        );
    }

    #[test]
    fn euclidean_metric_ranks_by_ascending_distance() {
        let params = IndexParams { metric: Metric::Euclidean, ..IndexParams::default() };
        let index = VectorIndex::build(
            vec![
                entry("far", vec![10.0, 0.0], &[]),
                entry("near", vec![1.0, 0.0], &[]),
                entry("self", vec![0.0, 0.0], &[]),
            ],
            params,
        )
        .unwrap();
        let hits = index.knn(&[0.0, 0.0], 3, &FilterPredicate::all(), QueryMode::Exact).unwrap();
        let ids: Vec<&str> = hits.iter().map(|n| n.doc_id.as_str()).collect();
        assert_eq!(ids, ["self", "near", "far"]);
        assert_eq!(hits[0].score, 0.0);
        assert_eq!(hits[1].score, 1.0);
        assert!(hits[2].score > hits[1].score);
    }

    #[test]
    fn zero_vectors_get_cosine_score_zero() {
        let index = VectorIndex::build(
            vec![entry("zero", vec![0.0, 0.0], &[]), entry("unit", vec![1.0, 0.0], &[])],
            IndexParams::default(),
        )
        .unwrap();
        let hits = index.knn(&[1.0, 0.0], 2, &FilterPredicate::all(), QueryMode::Exact).unwrap();
        assert_eq!(hits[0].doc_id, "unit");
        assert_eq!(hits[1].doc_id, "zero");
        assert_eq!(hits[1].score, 0.0);
    }

    #[test]
    fn dimension_and_parameter_errors() {
        assert!(matches!(
            VectorIndex::build(Vec::new(), IndexParams::default()),
            Err(IndexError::Empty)
        ));
        assert!(matches!(
            VectorIndex::build(
                vec![entry("a", vec![1.0, 2.0], &[]), entry("b", vec![1.0], &[])],
                IndexParams::default()
            ),
            Err(IndexError::DimensionMismatch { expected: 2, got: 1 })
        ));
        let bad = IndexParams { m: 1, ..IndexParams::default() };
        assert!(matches!(
            VectorIndex::build(vec![entry("a", vec![1.0], &[])], bad),
            Err(IndexError::BadParameter(_))
        ));
        let index =
            VectorIndex::build(vec![entry("a", vec![1.0, 2.0], &[])], IndexParams::default()).unwrap();
        assert!(matches!(
            index.knn(&[1.0], 1, &FilterPredicate::all(), QueryMode::Exact),
            Err(IndexError::DimensionMismatch { expected: 2, got: 1 })
        ));
        assert!(matches!(
            index.knn(&[1.0, 2.0], 0, &FilterPredicate::all(), QueryMode::Exact),
            Err(IndexError::BadParameter(_))
        ));
    }

    #[test]
    fn corrupt_index_files_are_rejected() {
        let dir = tempdir().unwrap();
        let bad_magic = dir.path().join("bad_magic.idx");
        std::fs::write(&bad_magic, b"XXXX\x01\x00\x00\x00").unwrap();
        assert!(matches!(VectorIndex::load(&bad_magic), Err(IndexError::BadFile(_))));

        let bad_version = dir.path().join("bad_version.idx");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(INDEX_MAGIC);
        bytes.extend_from_slice(&99u32.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        std::fs::write(&bad_version, bytes).unwrap();
        assert!(matches!(VectorIndex::load(&bad_version), Err(IndexError::BadFile(_))));

        let good = dir.path().join("good.idx");
        let index =
            VectorIndex::build(vec![entry("a", vec![1.0, 2.0], &[])], IndexParams::default()).unwrap();
        index.save(&good).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes.push(0);
        let trailing = dir.path().join("trailing.idx");
        std::fs::write(&trailing, &bytes).unwrap();
        assert!(matches!(VectorIndex::load(&trailing), Err(IndexError::BadFile(_))));

        let truncated = dir.path().join("truncated.idx");
        std::fs::write(&truncated, &bytes[..bytes.len() - 10]).unwrap();
        assert!(VectorIndex::load(&truncated).is_err());
    }

    #[test]
    fn filter_predicate_json_shape() {
        let filter = FilterPredicate::all().equals("category", "cats").any_of("language", ["en", "fr"]);
        let json = serde_json::to_string(&filter).unwrap();
        assert_eq!(json, r#"{"category":"cats","language":["en","fr"]}"#);
        let back: FilterPredicate = serde_json::from_str(&json).unwrap();
        assert_eq!(back, filter);
        let mut tags = BTreeMap::new();
        tags.insert("category".to_string(), "cats".to_string());
        tags.insert("language".to_string(), "fr".to_string());
        assert!(filter.matches(&tags));
        tags.insert("language".to_string(), "de".to_string());
        assert!(!filter.matches(&tags));
        tags.remove("category");
        assert!(!FilterPredicate::all().equals("category", "cats").matches(&tags));
        assert!(FilterPredicate::all().matches(&BTreeMap::new()));
    }
}
