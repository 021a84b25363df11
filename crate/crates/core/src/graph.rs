//! Triplet graphs: parsing and rendering of the supported surface formats,
//! linearization orders, and complexity statistics (size, diameter,
//! connected components).

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Token substituted for every entity by [`standardize`].
pub const ANON_ENTITY: &str = "<ent>";

const PIPE: &str = " | ";
const RESERVED_TAGS: [&str; 6] = [
    "<head>",
    "</head>",
    "<relation>",
    "</relation>",
    "<tail>",
    "</tail>",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("line {0}: malformed triplet")]
    MalformedLine(usize),
    #[error("line {0}: duplicate triplet")]
    DuplicateTriplet(usize),
    #[error("graph has no triplets")]
    EmptyGraph,
    #[error("invalid triplet field {field:?}: {reason}")]
    InvalidField { field: String, reason: &'static str },
}

/// One `<head, relation, tail>` fact.
///
/// Fields are whitespace-trimmed and never contain the pipe separator or
/// any of the tag tokens used by [`TripletFormat`], so every format renders
/// injectively.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    head: String,
    relation: String,
    tail: String,
}

fn check_field(raw: &str) -> Result<String, GraphError> {
    let field = raw.trim();
    let bad = |reason| {
        Err(GraphError::InvalidField {
            field: raw.to_string(),
            reason,
        })
    };
    if field.is_empty() {
        return bad("empty");
    }
    if field.contains('\n') || field.contains('\r') {
        return bad("contains a line break");
    }
    if field.contains(PIPE) || field.starts_with('|') || field.ends_with('|') {
        return bad("contains the pipe separator");
    }
    if RESERVED_TAGS.iter().any(|t| field.contains(t)) {
        return bad("contains a reserved tag");
    }
    Ok(field.to_string())
}

impl Triplet {
    pub fn new(head: &str, relation: &str, tail: &str) -> Result<Self, GraphError> {
        Ok(Self {
            head: check_field(head)?,
            relation: check_field(relation)?,
            tail: check_field(tail)?,
        })
    }

    /// Builds a triplet from arbitrary dataset strings, repairing anything
    /// [`Triplet::new`] would reject: whitespace runs collapse to one space,
    /// reserved separators are neutralised and empty fields become `[EMPTY]`.
    pub fn sanitized(head: &str, relation: &str, tail: &str) -> Self {
        fn fix(raw: &str) -> String {
            let mut s = raw.split_whitespace().collect::<Vec<_>>().join(" ");
            for tag in RESERVED_TAGS {
                s = s.replace(tag, &tag.replace('<', "[").replace('>', "]"));
            }
            s = s.replace(PIPE, " / ");
            let s = s.trim_matches(|c: char| c == '|' || c.is_whitespace());
            if s.is_empty() {
                "[EMPTY]".to_string()
            } else {
                s.to_string()
            }
        }
        Self {
            head: fix(head),
            relation: fix(relation),
            tail: fix(tail),
        }
    }

    pub fn head(&self) -> &str {
        &self.head
    }

    pub fn relation(&self) -> &str {
        &self.relation
    }

    pub fn tail(&self) -> &str {
        &self.tail
    }

    /// Parses a single `head | relation | tail` string.
    pub fn parse_pipe(line: &str) -> Option<Self> {
        let parts: Vec<&str> = line.trim().split(PIPE).collect();
        match parts.as_slice() {
            [h, r, t] => Triplet::new(h, r, t).ok(),
            _ => None,
        }
    }

    fn parse_angle(line: &str) -> Option<Self> {
        let rest = line.trim().strip_prefix("<head>")?;
        let (h, rest) = rest.split_once("<relation>")?;
        let (r, t) = rest.split_once("<tail>")?;
        if !h.ends_with(' ') || !r.ends_with(' ') || !r.starts_with(' ') || !t.starts_with(' ') {
            return None;
        }
        Triplet::new(h, r, t).ok()
    }

    fn parse_open_close(line: &str) -> Option<Self> {
        let rest = line.trim().strip_prefix("<head>")?;
        let (h, rest) = rest.split_once("</head>")?;
        let rest = rest.trim_start().strip_prefix("<relation>")?;
        let (r, rest) = rest.split_once("</relation>")?;
        let rest = rest.trim_start().strip_prefix("<tail>")?;
        let t = rest.strip_suffix("</tail>")?;
        Triplet::new(h, r, t).ok()
    }

    pub fn render(&self, format: TripletFormat) -> String {
        render_triplet(self, format)
    }
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} | {} | {}", self.head, self.relation, self.tail)
    }
}

impl Serialize for Triplet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [&self.head, &self.relation, &self.tail].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Triplet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [h, r, t] = <[String; 3]>::deserialize(d)?;
        Triplet::new(&h, &r, &t).map_err(D::Error::custom)
    }
}

/// Surface forms a triplet can take inside a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TripletFormat {
    /// `head | relation | tail`
    #[default]
    Pipe,
    /// `<head> h <relation> r <tail> t`
    AngleTags,
    /// `<head>h</head><relation>r</relation><tail>t</tail>`
    OpenCloseTags,
}

impl std::str::FromStr for TripletFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pipe" => Ok(Self::Pipe),
            "angle" | "angle-tags" => Ok(Self::AngleTags),
            "open-close" | "open-close-tags" | "tags" => Ok(Self::OpenCloseTags),
            other => Err(format!("unknown triplet format {other:?}")),
        }
    }
}

pub fn render_triplet(t: &Triplet, format: TripletFormat) -> String {
    match format {
        TripletFormat::Pipe => format!("{} | {} | {}", t.head, t.relation, t.tail),
        TripletFormat::AngleTags => {
            format!("<head> {} <relation> {} <tail> {}", t.head, t.relation, t.tail)
        }
        TripletFormat::OpenCloseTags => format!(
            "<head>{}</head><relation>{}</relation><tail>{}</tail>",
            t.head, t.relation, t.tail
        ),
    }
}

/// An ordered set of triplets. The stored order is the original (ORI) order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeGraph {
    triplets: Vec<Triplet>,
    entity_index: BTreeMap<String, Vec<usize>>,
}

fn build_index(triplets: &[Triplet]) -> BTreeMap<String, Vec<usize>> {
    let mut index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (pos, t) in triplets.iter().enumerate() {
        index.entry(t.head.clone()).or_default().push(pos);
        if t.tail != t.head {
            index.entry(t.tail.clone()).or_default().push(pos);
        }
    }
    index
}

impl KnowledgeGraph {
    /// Errors with `DuplicateTriplet(line)` (1-based) on a repeated triplet.
    pub fn new(triplets: Vec<Triplet>) -> Result<Self, GraphError> {
        if triplets.is_empty() {
            return Err(GraphError::EmptyGraph);
        }
        let mut seen = HashSet::new();
        for (i, t) in triplets.iter().enumerate() {
            if !seen.insert(t) {
                return Err(GraphError::DuplicateTriplet(i + 1));
            }
        }
        Ok(Self::from_unchecked(triplets))
    }

    /// Drops repeated triplets (keeping first occurrences) instead of failing.
    pub fn dedup(triplets: Vec<Triplet>) -> Result<Self, GraphError> {
        let before = triplets.len();
        let mut seen = HashSet::new();
        let kept: Vec<Triplet> = triplets
            .into_iter()
            .filter(|t| seen.insert(t.clone()))
            .collect();
        if kept.len() != before {
            tracing::warn!(dropped = before - kept.len(), "duplicate triplets removed");
        }
        Self::new(kept)
    }

    fn from_unchecked(triplets: Vec<Triplet>) -> Self {
        let entity_index = build_index(&triplets);
        Self {
            triplets,
            entity_index,
        }
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Entity -> positions of the triplets it occurs in, ascending.
    pub fn entity_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.entity_index
    }

    /// Distinct entities in order of first appearance.
    pub fn entities(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for t in &self.triplets {
            for e in [t.head.as_str(), t.tail.as_str()] {
                if seen.insert(e) {
                    out.push(e);
                }
            }
        }
        out
    }

    pub fn contains(&self, t: &Triplet) -> bool {
        self.triplets.contains(t)
    }

    pub fn shares_entity(&self, t: &Triplet) -> bool {
        self.entity_index.contains_key(&t.head) || self.entity_index.contains_key(&t.tail)
    }

    /// Returns a copy with `t` appended.
    pub fn with_triplet(&self, t: Triplet) -> Result<Self, GraphError> {
        if self.contains(&t) {
            return Err(GraphError::DuplicateTriplet(self.len() + 1));
        }
        let mut triplets = self.triplets.clone();
        triplets.push(t);
        Ok(Self::from_unchecked(triplets))
    }

    /// Reorders triplets by `order` (positions into the current list).
    pub fn reordered(&self, order: &[usize]) -> Self {
        Self::from_unchecked(order.iter().map(|&i| self.triplets[i].clone()).collect())
    }

    pub fn render(&self, format: TripletFormat) -> String {
        self.triplets
            .iter()
            .map(|t| render_triplet(t, format))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

impl Serialize for KnowledgeGraph {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr<'a> {
            triplets: &'a [Triplet],
        }
        Repr {
            triplets: &self.triplets,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for KnowledgeGraph {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            triplets: Vec<Triplet>,
        }
        let repr = Repr::deserialize(d)?;
        KnowledgeGraph::new(repr.triplets).map_err(D::Error::custom)
    }
}

/// Parses one triplet per nonblank line. Blank lines are skipped but still
/// count towards reported line numbers.
pub fn parse_triplets(text: &str, format: TripletFormat) -> Result<KnowledgeGraph, GraphError> {
    let mut triplets = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let t = match format {
            TripletFormat::Pipe => Triplet::parse_pipe(line),
            TripletFormat::AngleTags => Triplet::parse_angle(line),
            TripletFormat::OpenCloseTags => Triplet::parse_open_close(line),
        }
        .ok_or(GraphError::MalformedLine(line_no))?;
        if !seen.insert(t.clone()) {
            return Err(GraphError::DuplicateTriplet(line_no));
        }
        triplets.push(t);
    }
    KnowledgeGraph::new(triplets)
}

/// Triplet ordering used when serialising a graph into a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "kind", content = "seed")]
pub enum LinearizationStrategy {
    /// Dataset order.
    #[default]
    Ori,
    /// Seeded random shuffle.
    Random(u64),
    Bfs,
    Dfs,
}

impl std::str::FromStr for LinearizationStrategy {
    type Err = String;

    /// Accepts `ori`, `bfs`, `dfs`, `rs:<seed>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "ori" => Ok(Self::Ori),
            "bfs" => Ok(Self::Bfs),
            "dfs" => Ok(Self::Dfs),
            _ => lower
                .strip_prefix("rs:")
                .and_then(|seed| seed.parse().ok())
                .map(Self::Random)
                .ok_or_else(|| format!("unknown linearization {s:?} (ori|bfs|dfs|rs:<seed>)")),
        }
    }
}

fn other_end<'a>(t: &'a Triplet, from: &str) -> &'a str {
    if t.head == from {
        &t.tail
    } else {
        &t.head
    }
}

/// Returns a permutation of triplet positions.
///
/// BFS and DFS walk the undirected entity graph from the head of the first
/// triplet, scanning each entity's incident triplets in original order and
/// emitting a triplet the first time its edge is scanned. Components are
/// started in original order of their first triplet.
pub fn linearize(g: &KnowledgeGraph, strategy: LinearizationStrategy) -> Result<Vec<usize>, GraphError> {
    let n = g.len();
    if n == 0 {
        return Err(GraphError::EmptyGraph);
    }
    match strategy {
        LinearizationStrategy::Ori => Ok((0..n).collect()),
        LinearizationStrategy::Random(seed) => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            Ok(order)
        }
        LinearizationStrategy::Bfs | LinearizationStrategy::Dfs => {
            let dfs = strategy == LinearizationStrategy::Dfs;
            let mut emitted = vec![false; n];
            let mut visited: HashSet<&str> = HashSet::new();
            let mut order = Vec::with_capacity(n);
            while let Some(start) = emitted.iter().position(|e| !e) {
                let root = g.triplets[start].head.as_str();
                visited.insert(root);
                if dfs {
                    dfs_visit(g, root, &mut visited, &mut emitted, &mut order);
                } else {
                    let mut queue = VecDeque::from([root]);
                    while let Some(u) = queue.pop_front() {
                        for &p in &g.entity_index[u] {
                            if emitted[p] {
                                continue;
                            }
                            emitted[p] = true;
                            order.push(p);
                            let v = other_end(&g.triplets[p], u);
                            if visited.insert(v) {
                                queue.push_back(v);
                            }
                        }
                    }
                }
            }
            Ok(order)
        }
    }
}

fn dfs_visit<'a>(
    g: &'a KnowledgeGraph,
    u: &'a str,
    visited: &mut HashSet<&'a str>,
    emitted: &mut [bool],
    order: &mut Vec<usize>,
) {
    // explicit stack of (entity, next incident slot) keeps deep chains off the call stack
    let mut stack: Vec<(&str, usize)> = vec![(u, 0)];
    while let Some((node, slot)) = stack.pop() {
        let incident = &g.entity_index[node];
        if slot >= incident.len() {
            continue;
        }
        stack.push((node, slot + 1));
        let p = incident[slot];
        if emitted[p] {
            continue;
        }
        emitted[p] = true;
        order.push(p);
        let v = other_end(&g.triplets[p], node);
        if visited.insert(v) {
            stack.push((v, 0));
        }
    }
}

/// Graph diameter under unit-weight undirected shortest paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Diameter {
    Connected(usize),
    Disconnected,
}

impl Diameter {
    pub fn value(self) -> Option<usize> {
        match self {
            Diameter::Connected(d) => Some(d),
            Diameter::Disconnected => None,
        }
    }

    /// Report bucket key: the integer, or `disconnected`.
    pub fn bucket(self) -> String {
        match self {
            Diameter::Connected(d) => d.to_string(),
            Diameter::Disconnected => "disconnected".to_string(),
        }
    }
}

impl Serialize for Diameter {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Diameter::Connected(d) => s.serialize_u64(*d as u64),
            Diameter::Disconnected => s.serialize_str("disconnected"),
        }
    }
}

impl<'de> Deserialize<'de> for Diameter {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::Number(n) => n
                .as_u64()
                .map(|v| Diameter::Connected(v as usize))
                .ok_or_else(|| D::Error::custom("diameter must be a nonnegative integer")),
            serde_json::Value::String(s) if s == "disconnected" => Ok(Diameter::Disconnected),
            other => Err(D::Error::custom(format!("bad diameter {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub n_triplets: usize,
    pub diameter: Diameter,
    pub n_components: usize,
    /// One entry per connected component, ordered by the component's first triplet.
    pub component_diameters: Vec<usize>,
}

impl GraphStats {
    /// `1`..`4`, then `5+`.
    pub fn triplet_bucket(&self) -> &'static str {
        triplet_bucket(self.n_triplets)
    }

    pub fn diameter_bucket(&self) -> String {
        self.diameter.bucket()
    }
}

pub fn triplet_bucket(n: usize) -> &'static str {
    match n {
        0 | 1 => "1",
        2 => "2",
        3 => "3",
        4 => "4",
        _ => "5+",
    }
}

/// Entity adjacency as vertex ids, vertices numbered by first appearance.
fn adjacency(g: &KnowledgeGraph) -> (Vec<Vec<usize>>, HashMap<&str, usize>) {
    let mut ids: HashMap<&str, usize> = HashMap::new();
    for e in g.entities() {
        let next = ids.len();
        ids.entry(e).or_insert(next);
    }
    let mut adj = vec![Vec::new(); ids.len()];
    for t in g.triplets() {
        let (a, b) = (ids[t.head.as_str()], ids[t.tail.as_str()]);
        if a != b {
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    (adj, ids)
}

fn bfs_distances(adj: &[Vec<usize>], src: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; adj.len()];
    dist[src] = Some(0);
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        let du = dist[u].unwrap_or(0);
        for &v in &adj[u] {
            if dist[v].is_none() {
                dist[v] = Some(du + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

pub fn diameter(g: &KnowledgeGraph) -> Diameter {
    graph_stats(g).diameter
}

pub fn graph_stats(g: &KnowledgeGraph) -> GraphStats {
    let (adj, ids) = adjacency(g);
    let mut component = vec![usize::MAX; adj.len()];
    let mut component_diameters = Vec::new();
    // walking triplets in order starts components in order of their first triplet
    for t in g.triplets() {
        let start = ids[t.head.as_str()];
        if component[start] != usize::MAX {
            continue;
        }
        let reach = bfs_distances(&adj, start);
        let members: Vec<usize> = (0..adj.len()).filter(|&v| reach[v].is_some()).collect();
        let c = component_diameters.len();
        for &v in &members {
            component[v] = c;
        }
        let diam = members
            .iter()
            .map(|&v| bfs_distances(&adj, v).into_iter().flatten().max().unwrap_or(0))
            .max()
            .unwrap_or(0);
        component_diameters.push(diam);
    }
    let n_components = component_diameters.len();
    GraphStats {
        n_triplets: g.len(),
        diameter: if n_components == 1 {
            Diameter::Connected(component_diameters[0])
        } else {
            Diameter::Disconnected
        },
        n_components,
        component_diameters,
    }
}

/// Replaces every entity with [`ANON_ENTITY`]. Relations and order are kept;
/// the result may contain repeated triplets.
pub fn standardize(g: &KnowledgeGraph) -> KnowledgeGraph {
    let anon = |t: &Triplet| Triplet {
        head: ANON_ENTITY.to_string(),
        relation: t.relation.clone(),
        tail: ANON_ENTITY.to_string(),
    };
    KnowledgeGraph::from_unchecked(g.triplets.iter().map(anon).collect())
}

/// Like [`standardize`] but keeps entities distinct as `<ent_i>` (numbered by
/// first appearance) so topology is preserved. For structural checks only.
pub fn standardize_indexed(g: &KnowledgeGraph) -> KnowledgeGraph {
    let mut ids: HashMap<&str, usize> = HashMap::new();
    for e in g.entities() {
        let next = ids.len();
        ids.entry(e).or_insert(next);
    }
    let name = |e: &str| format!("<ent_{}>", ids[e]);
    KnowledgeGraph::from_unchecked(
        g.triplets
            .iter()
            .map(|t| Triplet {
                head: name(&t.head),
                relation: t.relation.clone(),
                tail: name(&t.tail),
            })
            .collect(),
    )
}
