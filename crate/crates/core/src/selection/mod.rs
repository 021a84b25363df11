//! Few-shot demonstration selection over an embedded pool of training
//! examples: similarity ranking, five difficulty levels, four diversity
//! tiers over k-means clusters, and the difficulty-diversity balanced (DDD)
//! selector that samples evenly spaced ranks inside the query's cluster.
//!
//! Similarity is cosine everywhere. Clustering runs on L2-normalised
//! embeddings, and every selection depends only on vector directions.

mod kmeans;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use kmeans::{kmeans, Clustering, MAX_ITERATIONS};

use crate::graph::{KnowledgeGraph, Triplet};

/// Cluster count used when none is configured.
pub const DEFAULT_K: usize = 10;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("cannot compare a zero vector")]
    ZeroVector,
    #[error("vector dimensions differ")]
    DimensionMismatch,
    #[error("k-means needs 1 <= k <= points (k={k}, points={points})")]
    TooFewPoints { k: usize, points: usize },
    #[error("pool has no {0} embeddings")]
    MissingEmbeddingKind(EmbeddingKind),
    #[error("pool of {pool} examples cannot supply {wanted}")]
    PoolTooSmall { pool: usize, wanted: usize },
    #[error("no {kind} clustering with k={k} in the pool")]
    ClusteringUnavailable { kind: EmbeddingKind, k: usize },
    #[error("query cluster has {members} members, {wanted} requested")]
    ClusterTooSmall { members: usize, wanted: usize },
    #[error("{clusters} clusters cannot supply {wanted} distinct centers")]
    TooFewClusters { clusters: usize, wanted: usize },
    #[error("difficulty level {0} out of range 0..=4")]
    BadDifficultyLevel(u8),
    #[error("diversity level {0} out of range 0..=3")]
    BadDiversityLevel(u8),
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
    #[error("{0} vectors given for {1} examples")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("pool line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    #[default]
    Graph,
    Text,
    StandardizedGraph,
}

impl EmbeddingKind {
    pub const ALL: [EmbeddingKind; 3] = [Self::Graph, Self::Text, Self::StandardizedGraph];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Graph => "graph",
            Self::Text => "text",
            Self::StandardizedGraph => "standardized_graph",
        }
    }
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EmbeddingKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s.replace('-', "_"))
            .ok_or_else(|| format!("unknown embedding kind {s:?}"))
    }
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64, SelectionError> {
    if a.len() != b.len() {
        return Err(SelectionError::DimensionMismatch);
    }
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (f64::from(*x), f64::from(*y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(SelectionError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

fn normalized(v: &[f32]) -> Vec<f32> {
    let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| (f64::from(*x) / norm) as f32).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoExample {
    pub id: String,
    pub graph: KnowledgeGraph,
    pub reference_text: String,
}

/// Training examples plus per-kind embeddings and clusterings.
#[derive(Debug, Clone, Default)]
pub struct DemoPool {
    examples: Vec<DemoExample>,
    by_id: HashMap<String, usize>,
    embeddings: BTreeMap<EmbeddingKind, Vec<Vec<f32>>>,
    clusterings: BTreeMap<EmbeddingKind, Clustering>,
}

#[derive(Serialize, Deserialize)]
struct PoolLine {
    id: String,
    triplets: Vec<Triplet>,
    text: String,
    #[serde(default)]
    embeddings: BTreeMap<EmbeddingKind, Vec<f32>>,
}

impl DemoPool {
    pub fn new(examples: Vec<DemoExample>) -> Result<Self, SelectionError> {
        let mut by_id = HashMap::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            if by_id.insert(ex.id.clone(), i).is_some() {
                return Err(SelectionError::DuplicateId(ex.id.clone()));
            }
        }
        Ok(Self {
            examples,
            by_id,
            ..Default::default()
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[DemoExample] {
        &self.examples
    }

    pub fn get(&self, id: &str) -> Option<&DemoExample> {
        self.by_id.get(id).map(|&i| &self.examples[i])
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    /// Attaches one vector per example (same order as [`Self::examples`]).
    /// Any clustering of this kind is dropped.
    pub fn set_embeddings(&mut self, kind: EmbeddingKind, vectors: Vec<Vec<f32>>) -> Result<(), SelectionError> {
        if vectors.len() != self.examples.len() {
            return Err(SelectionError::LengthMismatch(vectors.len(), self.examples.len()));
        }
        if let Some(first) = vectors.first() {
            if vectors.iter().any(|v| v.len() != first.len()) {
                return Err(SelectionError::DimensionMismatch);
            }
        }
        self.embeddings.insert(kind, vectors);
        self.clusterings.remove(&kind);
        Ok(())
    }

    pub fn embeddings(&self, kind: EmbeddingKind) -> Result<&[Vec<f32>], SelectionError> {
        self.embeddings
            .get(&kind)
            .map(Vec::as_slice)
            .ok_or(SelectionError::MissingEmbeddingKind(kind))
    }

    pub fn kinds(&self) -> impl Iterator<Item = EmbeddingKind> + '_ {
        self.embeddings.keys().copied()
    }

    pub fn clustering(&self, kind: EmbeddingKind) -> Option<&Clustering> {
        self.clusterings.get(&kind)
    }

    /// Runs k-means on the normalised `kind` embeddings and stores the result.
    pub fn cluster(&mut self, kind: EmbeddingKind, k: usize, seed: u64) -> Result<&Clustering, SelectionError> {
        let vectors: Vec<Vec<f32>> = self.embeddings(kind)?.iter().map(|v| normalized(v)).collect();
        let clustering = kmeans(&vectors, k, seed)?;
        self.clusterings.insert(kind, clustering);
        Ok(&self.clusterings[&kind])
    }

    /// Reuses a stored clustering when its k matches, otherwise computes one.
    pub fn ensure_clustering(&mut self, kind: EmbeddingKind, k: usize, seed: u64) -> Result<&Clustering, SelectionError> {
        if self.clusterings.get(&kind).is_some_and(|c| c.k == k) {
            return Ok(&self.clusterings[&kind]);
        }
        self.cluster(kind, k, seed)
    }

    pub fn set_clustering(&mut self, kind: EmbeddingKind, clustering: Clustering) -> Result<(), SelectionError> {
        if clustering.assignments.len() != self.examples.len() {
            return Err(SelectionError::LengthMismatch(clustering.assignments.len(), self.examples.len()));
        }
        self.clusterings.insert(kind, clustering);
        Ok(())
    }

    fn clustering_for(&self, kind: EmbeddingKind, k: usize) -> Result<&Clustering, SelectionError> {
        self.clusterings
            .get(&kind)
            .filter(|c| c.k == k)
            .ok_or(SelectionError::ClusteringUnavailable { kind, k })
    }

    /// A copy whose storage order is `order` (positions into the current
    /// order). Embeddings and cluster assignments move with their examples.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let examples = order.iter().map(|&i| self.examples[i].clone()).collect();
        let mut out = Self::new(examples).expect("ids stay unique");
        for (kind, vs) in &self.embeddings {
            out.embeddings.insert(*kind, order.iter().map(|&i| vs[i].clone()).collect());
        }
        for (kind, c) in &self.clusterings {
            let mut c = c.clone();
            c.assignments = order.iter().map(|&i| c.assignments[i]).collect();
            out.clusterings.insert(*kind, c);
        }
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), SelectionError> {
        for (i, ex) in self.examples.iter().enumerate() {
            let line = PoolLine {
                id: ex.id.clone(),
                triplets: ex.graph.triplets().to_vec(),
                text: ex.reference_text.clone(),
                embeddings: self.embeddings.iter().map(|(k, vs)| (*k, vs[i].clone())).collect(),
            };
            serde_json::to_writer(&mut w, &line).map_err(|source| SelectionError::Json { line: i + 1, source })?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, SelectionError> {
        let mut examples = Vec::new();
        let mut vectors: BTreeMap<EmbeddingKind, Vec<Vec<f32>>> = BTreeMap::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PoolLine = serde_json::from_str(&line).map_err(|source| SelectionError::Json { line: i + 1, source })?;
            let graph = KnowledgeGraph::new(rec.triplets).map_err(|e| SelectionError::Json {
                line: i + 1,
                source: serde::de::Error::custom(e),
            })?;
            for (kind, v) in rec.embeddings {
                vectors.entry(kind).or_default().push(v);
            }
            examples.push(DemoExample {
                id: rec.id,
                graph,
                reference_text: rec.text,
            });
        }
        let mut pool = Self::new(examples)?;
        for (kind, vs) in vectors {
            pool.set_embeddings(kind, vs)?;
        }
        Ok(pool)
    }

    /// Sidecar JSON object `{kind: clustering}`.
    pub fn write_clusterings<W: Write>(&self, w: W) -> Result<(), SelectionError> {
        serde_json::to_writer_pretty(w, &self.clusterings).map_err(|source| SelectionError::Json { line: 0, source })
    }

    pub fn read_clusterings<R: std::io::Read>(&mut self, r: R) -> Result<(), SelectionError> {
        let map: BTreeMap<EmbeddingKind, Clustering> =
            serde_json::from_reader(r).map_err(|source| SelectionError::Json { line: 0, source })?;
        for (kind, c) in map {
            self.set_clustering(kind, c)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SelectionError> {
        let mut pool = Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))?;
        let sidecar = clustering_sidecar(path);
        if sidecar.exists() {
            pool.read_clusterings(std::fs::File::open(sidecar)?)?;
        }
        Ok(pool)
    }

    pub fn save(&self, path: &Path) -> Result<(), SelectionError> {
        self.write_jsonl(std::io::BufWriter::new(std::fs::File::create(path)?))?;
        if !self.clusterings.is_empty() {
            self.write_clusterings(std::fs::File::create(clustering_sidecar(path))?)?;
        }
        Ok(())
    }
}

/// `pool.jsonl` -> `pool.clusters.json`.
pub fn clustering_sidecar(pool_path: &Path) -> std::path::PathBuf {
    pool_path.with_extension("clusters.json")
}

/// Pool positions sorted by descending cosine similarity to `query`, ties by id.
fn ranked_positions(query: &[f32], pool: &DemoPool, kind: EmbeddingKind) -> Result<Vec<usize>, SelectionError> {
    let vectors = pool.embeddings(kind)?;
    let scores = vectors
        .iter()
        .map(|v| cosine_similarity(query, v))
        .collect::<Result<Vec<_>, _>>()?;
    let mut order: Vec<usize> = (0..vectors.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| pool.examples[a].id.cmp(&pool.examples[b].id))
    });
    Ok(order)
}

fn ids(pool: &DemoPool, positions: impl IntoIterator<Item = usize>) -> Vec<String> {
    positions.into_iter().map(|i| pool.examples[i].id.clone()).collect()
}

/// Example ids by descending similarity; ties broken by id ascending.
pub fn rank_by_similarity(query: &[f32], pool: &DemoPool, kind: EmbeddingKind) -> Result<Vec<String>, SelectionError> {
    Ok(ids(pool, ranked_positions(query, pool, kind)?))
}

/// 1-based rank at which a difficulty level's window starts.
pub fn difficulty_anchor(level: u8, pool_size: usize) -> usize {
    1 + (level as usize * (pool_size - 1)) / 4
}

/// Level 0 is the most similar example, level 4 the least. Returns the `n`
/// consecutive ranks starting at the level's anchor, shifted back when the
/// window would run past the end of the ranking.
pub fn select_difficulty(
    query: &[f32],
    pool: &DemoPool,
    level: u8,
    n: usize,
    kind: EmbeddingKind,
) -> Result<Vec<String>, SelectionError> {
    if level > 4 {
        return Err(SelectionError::BadDifficultyLevel(level));
    }
    let m = pool.len();
    if n == 0 || m < n {
        return Err(SelectionError::PoolTooSmall { pool: m, wanted: n });
    }
    let ranked = ranked_positions(query, pool, kind)?;
    let start = difficulty_anchor(level, m).min(m - n + 1);
    Ok(ids(pool, ranked[start - 1..start - 1 + n].iter().copied()))
}

/// 1-based center ranks for diversity level 3: `n` ranks spread evenly over
/// `1..=k`, rounding half to even.
pub fn spread_ranks(n: usize, k: usize) -> Vec<usize> {
    if n == 1 {
        return vec![1];
    }
    (0..n)
        .map(|j| 1 + ((j * (k - 1)) as f64 / (n - 1) as f64).round_ties_even() as usize)
        .collect()
}

/// Cluster ids sorted by descending cosine similarity of their center to the query.
fn ranked_centers(query: &[f32], clustering: &Clustering) -> Result<Vec<usize>, SelectionError> {
    let scores = clustering
        .centers
        .iter()
        .map(|c| cosine_similarity(query, c).or(Ok::<f64, SelectionError>(-2.0)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order)
}

/// Member of `cluster` most similar to the cluster's center.
fn representative(pool: &DemoPool, kind: EmbeddingKind, clustering: &Clustering, cluster: usize) -> Result<usize, SelectionError> {
    let vectors = pool.embeddings(kind)?;
    let center = &clustering.centers[cluster];
    let mut best: Option<(usize, f64)> = None;
    for i in clustering.members(cluster) {
        let s = cosine_similarity(center, &vectors[i]).unwrap_or(-2.0);
        let better = match best {
            None => true,
            Some((j, bs)) => s > bs || (s == bs && pool.examples[i].id < pool.examples[j].id),
        };
        if better {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i).ok_or(SelectionError::ClusterTooSmall { members: 0, wanted: 1 })
}

fn query_cluster_members(
    query: &[f32],
    pool: &DemoPool,
    kind: EmbeddingKind,
    clustering: &Clustering,
) -> Result<Vec<usize>, SelectionError> {
    let cluster = clustering.nearest_center(&normalized(query));
    let ranked = ranked_positions(query, pool, kind)?;
    Ok(ranked.into_iter().filter(|&i| clustering.assignments[i] == cluster).collect())
}

/// Diversity tiers:
/// 0. the `n` nearest examples;
/// 1. `n` examples sampled (seeded) from the query's cluster;
/// 2. the representative of each of the `n` nearest clusters;
/// 3. representatives of clusters spread evenly over the center ranking.
#[allow(clippy::too_many_arguments)]
pub fn select_diversity(
    query: &[f32],
    pool: &DemoPool,
    level: u8,
    n: usize,
    k: usize,
    seed: u64,
    kind: EmbeddingKind,
) -> Result<Vec<String>, SelectionError> {
    if level > 3 {
        return Err(SelectionError::BadDiversityLevel(level));
    }
    if n == 0 || pool.len() < n {
        return Err(SelectionError::PoolTooSmall { pool: pool.len(), wanted: n });
    }
    if level == 0 {
        return select_difficulty(query, pool, 0, n, kind);
    }
    let clustering = pool.clustering_for(kind, k)?;
    match level {
        1 => {
            let mut members = query_cluster_members(query, pool, kind, clustering)?;
            if members.len() < n {
                return Err(SelectionError::ClusterTooSmall { members: members.len(), wanted: n });
            }
            members.sort_by(|&a, &b| pool.examples[a].id.cmp(&pool.examples[b].id));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(ids(pool, members.choose_multiple(&mut rng, n).copied()))
        }
        _ => {
            let centers = ranked_centers(query, clustering)?;
            if centers.len() < n {
                return Err(SelectionError::TooFewClusters { clusters: centers.len(), wanted: n });
            }
            let picks: Vec<usize> = if level == 2 {
                centers[..n].to_vec()
            } else {
                spread_ranks(n, centers.len()).into_iter().map(|r| centers[r - 1]).collect()
            };
            let reps = picks
                .into_iter()
                .map(|c| representative(pool, kind, clustering, c))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(ids(pool, reps))
        }
    }
}

/// 1-based ranks `ceil(i*m/(n+1))` for `i = 1..=n`; a rank already taken is
/// advanced to the next unused one.
pub fn ddd_ranks(m: usize, n: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(n);
    for i in 1..=n {
        let mut r = (i * m).div_ceil(n + 1).max(1);
        while out.contains(&r) {
            r += 1;
        }
        out.push(r);
    }
    out
}

/// Recalls the query's cluster, orders it by similarity to the query and
/// takes evenly spaced percentile ranks (25/50/75% for three shots).
pub fn select_ddd(
    query: &[f32],
    pool: &DemoPool,
    n: usize,
    k: usize,
    kind: EmbeddingKind,
) -> Result<Vec<String>, SelectionError> {
    let clustering = pool.clustering_for(kind, k)?;
    let members = query_cluster_members(query, pool, kind, clustering)?;
    let m = members.len();
    if n == 0 || m < n {
        return Err(SelectionError::ClusterTooSmall { members: m, wanted: n });
    }
    Ok(ids(pool, ddd_ranks(m, n).into_iter().map(|r| members[r - 1])))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method", content = "level")]
pub enum SelectionMethod {
    Difficulty(u8),
    Diversity(u8),
    Ddd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSpec {
    pub n_shots: usize,
    pub embedding_kind: EmbeddingKind,
    pub method: SelectionMethod,
    pub k: usize,
    pub seed: u64,
}

impl SelectionSpec {
    pub fn new(n_shots: usize, method: SelectionMethod) -> Self {
        Self {
            n_shots,
            embedding_kind: EmbeddingKind::Graph,
            method,
            k: DEFAULT_K,
            seed: 0,
        }
    }
}

pub fn select(query: &[f32], pool: &DemoPool, spec: &SelectionSpec) -> Result<Vec<String>, SelectionError> {
    let (n, kind) = (spec.n_shots, spec.embedding_kind);
    match spec.method {
        SelectionMethod::Difficulty(level) => select_difficulty(query, pool, level, n, kind),
        SelectionMethod::Diversity(level) => select_diversity(query, pool, level, n, spec.k, spec.seed, kind),
        SelectionMethod::Ddd => select_ddd(query, pool, n, spec.k, kind),
    }
}
