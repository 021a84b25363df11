//! Builds reorder-and-attribute training data by growing one-triplet seeds.
//!
//! Each seed pair is rewritten into a single marked sentence, then grown one
//! connected triplet at a time. Every growth step is one backend call that
//! proposes the triplet and rewrites the text; a second call inserts the
//! `(i)` markers. Each grown stage is kept as its own training record.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attribution::{strip_marker_text, validate_text, AttributedText};
use crate::gateway::{BackendConfig, Gateway};
use crate::graph::{graph_stats, KnowledgeGraph, Triplet};
use crate::prompting::{assemble_messages, build_system_prompt, ChatMessage, ChatRequest, Role, SystemKind};

/// Prompt texts and the line labels the replies are parsed by.
pub mod prompts {
    pub const REWRITE: &str = include_str!("../assets/forge/rewrite.txt");
    pub const GROW: &str = include_str!("../assets/forge/grow.txt");
    pub const ANNOTATE: &str = include_str!("../assets/forge/annotate.txt");

    pub const REWRITE_CUE: &str = "Rewritten sentence:";
    pub const GROW_CUE: &str = "Add one new triplet";
    pub const ANNOTATE_CUE: &str = "Annotated text:";

    pub const TRIPLET_LINE: &str = "Triplet: ";
    pub const TRIPLETS_BLOCK: &str = "Triplets:\n";
    pub const ENTITIES_LINE: &str = "Entities: ";
    pub const TEXT_LINE: &str = "Text: ";
    pub const NEW_TRIPLET_PREFIX: &str = "New triplet: ";
    pub const NEW_TEXT_PREFIX: &str = "Text: ";
}

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("no source pairs to sample from")]
    EmptySource,
    #[error("invalid forge config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterPolicy {
    /// Minimum share of entities that must appear in the text.
    #[serde(default)]
    pub min_entity_coverage: f64,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self { min_entity_coverage: 0.0 }
    }
}

fn default_max_triplets() -> usize {
    10
}
fn default_retries() -> u32 {
    3
}
fn default_dev_fraction() -> f64 {
    0.033
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeConfig {
    pub n_per_relation: usize,
    #[serde(default = "default_max_triplets")]
    pub max_triplets: usize,
    #[serde(default)]
    pub seed: u64,
    /// Extra attempts after a reply fails validation.
    #[serde(default = "default_retries")]
    pub validation_retries: u32,
    #[serde(default = "default_dev_fraction")]
    pub dev_fraction: f64,
    #[serde(default)]
    pub filter: FilterPolicy,
    pub growth_backend: BackendConfig,
    /// Defaults to the growth backend.
    #[serde(default)]
    pub annotation_backend: Option<BackendConfig>,
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<(), ForgeError> {
        let bad = |m: &str| Err(ForgeError::InvalidConfig(m.into()));
        if self.max_triplets < 2 {
            return bad("max_triplets must be at least 2");
        }
        if self.n_per_relation == 0 {
            return bad("n_per_relation must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return bad("dev_fraction must be in [0, 1)");
        }
        Ok(())
    }

    /// Hex sha256 of the config's JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourcePair {
    pub id: String,
    pub triplet: Triplet,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Active,
    Finalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeRecord {
    pub id: String,
    /// Id of the seed pair the record grew from.
    pub lineage: String,
    pub stage: usize,
    pub graph: KnowledgeGraph,
    /// Text with `(i)` markers once annotated.
    pub text: String,
    /// Triplet numbers in the order the text realises them.
    pub order: Vec<usize>,
    /// Backend call ids.
    pub provenance: Vec<String>,
    pub status: RecordStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    MissingMarker,
    MissingIndex,
    HallucinatedIndex,
    DuplicateIndex,
    OrderMismatch,
    DisconnectedTriplet,
    DuplicateTriplet,
    DisconnectedGraph,
    StageMismatch,
    UnparsableReply,
    LowCoverage,
    Backend,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::MissingMarker => "missing_marker",
            Self::MissingIndex => "missing_index",
            Self::HallucinatedIndex => "hallucinated_index",
            Self::DuplicateIndex => "duplicate_index",
            Self::OrderMismatch => "order_mismatch",
            Self::DisconnectedTriplet => "disconnected_triplet",
            Self::DuplicateTriplet => "duplicate_triplet",
            Self::DisconnectedGraph => "disconnected_graph",
            Self::StageMismatch => "stage_mismatch",
            Self::UnparsableReply => "unparsable_reply",
            Self::LowCoverage => "low_coverage",
            Self::Backend => "backend",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub id: String,
    pub lineage: String,
    pub stage: usize,
    pub reason: RejectReason,
    pub detail: String,
}

/// Up to `n` seeded picks per relation label; smaller relations give all
/// their pairs. Output is grouped by relation in label order.
pub fn sample_seeds(pairs: &[SourcePair], n: usize, seed: u64) -> Result<Vec<SourcePair>, ForgeError> {
    if pairs.is_empty() {
        return Err(ForgeError::EmptySource);
    }
    let mut by_rel: BTreeMap<&str, Vec<&SourcePair>> = BTreeMap::new();
    for p in pairs {
        by_rel.entry(p.triplet.relation()).or_default().push(p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (rel, mut group) in by_rel {
        group.sort_by(|a, b| a.id.cmp(&b.id));
        if group.len() < n {
            tracing::warn!(relation = rel, available = group.len(), wanted = n, "relation has too few pairs; taking all");
        }
        out.extend(group.choose_multiple(&mut rng, n.min(group.len())).map(|p| (*p).clone()));
    }
    Ok(out)
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

type Check<T> = Result<T, (RejectReason, String)>;

/// Runs a prompt and re-asks with feedback until `check` accepts the reply.
fn converse<T>(
    gw: &Gateway,
    prompt: String,
    retries: u32,
    provenance: &mut Vec<String>,
    check: impl Fn(&str) -> Check<T>,
    feedback: impl Fn(RejectReason, &str) -> String,
) -> Check<T> {
    let mut messages = assemble_messages(&build_system_prompt(SystemKind::Detailed), &[], &prompt).messages;
    let mut attempt = 0;
    loop {
        let reply = gw
            .chat_complete(&ChatRequest { messages: messages.clone() })
            .map_err(|e| (RejectReason::Backend, e.to_string()))?;
        provenance.push(reply.call_id.clone());
        match check(&reply.text) {
            Ok(v) => return Ok(v),
            Err((reason, detail)) if attempt < retries => {
                tracing::debug!(?reason, %detail, attempt, "reply rejected; asking again");
                messages.push(ChatMessage::new(Role::Assistant, reply.text));
                messages.push(ChatMessage::new(Role::User, feedback(reason, &detail)));
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

fn marker_check(text: &str, n: usize) -> Check<Vec<usize>> {
    let t = AttributedText::new(text, n);
    let g_indices = t.indices();
    if g_indices.is_empty() {
        return Err((RejectReason::MissingMarker, "no markers".into()));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &i in &g_indices {
        *counts.entry(i).or_default() += 1;
    }
    if let Some(&bad) = counts.keys().find(|&&i| i == 0 || i > n) {
        return Err((RejectReason::HallucinatedIndex, format!("marker ({bad}) with {n} triplets")));
    }
    if let Some((&dup, _)) = counts.iter().find(|(_, &c)| c > 1) {
        return Err((RejectReason::DuplicateIndex, format!("marker ({dup}) repeated")));
    }
    if counts.len() < n {
        let missing: Vec<usize> = (1..=n).filter(|i| !counts.contains_key(i)).collect();
        return Err((RejectReason::MissingIndex, format!("missing {missing:?}")));
    }
    Ok(g_indices)
}

fn marker_feedback(n: usize) -> impl Fn(RejectReason, &str) -> String {
    move |_, detail| {
        format!(
            "That answer was not accepted ({detail}). Every number from 1 to {n} must appear exactly once as (i), with no other numbers. Please answer again."
        )
    }
}

/// Stage-1 record: the source text reduced to one sentence marked `(1)`.
pub fn rewrite_seed(pair: &SourcePair, gw: &Gateway, retries: u32) -> Result<ForgeRecord, Rejection> {
    let graph = KnowledgeGraph::new(vec![pair.triplet.clone()]).expect("one triplet");
    let prompt = prompts::REWRITE
        .replace("{triplet}", &pair.triplet.to_string())
        .replace("{text}", &one_line(&pair.text));
    let mut provenance = Vec::new();
    let reject = |(reason, detail): (RejectReason, String)| Rejection {
        id: format!("{}-s1", pair.id),
        lineage: pair.id.clone(),
        stage: 1,
        reason,
        detail,
    };
    let text = converse(
        gw,
        prompt,
        retries,
        &mut provenance,
        |reply| {
            let text = one_line(reply);
            marker_check(&text, 1)?;
            Ok(text)
        },
        marker_feedback(1),
    )
    .map_err(reject)?;
    Ok(ForgeRecord {
        id: format!("{}-s1", pair.id),
        lineage: pair.id.clone(),
        stage: 1,
        graph,
        text,
        order: vec![1],
        provenance,
        status: RecordStatus::Active,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum GrowOutcome {
    /// One more triplet; text not yet annotated.
    Grown(ForgeRecord),
    /// Already at the size limit.
    Finalized(ForgeRecord),
}

fn parse_growth(reply: &str, g: &KnowledgeGraph) -> Check<(Triplet, String)> {
    let mut triplet = None;
    let mut text = None;
    for line in reply.lines() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix(prompts::NEW_TRIPLET_PREFIX) {
            triplet = Some(rest.trim().to_string());
        } else if let Some(rest) = line.strip_prefix(prompts::NEW_TEXT_PREFIX) {
            text = Some(rest.trim().to_string());
        }
    }
    let (Some(t), Some(text)) = (triplet, text) else {
        return Err((RejectReason::UnparsableReply, "expected 'New triplet:' and 'Text:' lines".into()));
    };
    let t = Triplet::parse_pipe(&t).ok_or((RejectReason::UnparsableReply, format!("bad triplet {t:?}")))?;
    if g.triplets().iter().any(|x| normalized(x) == normalized(&t)) {
        return Err((RejectReason::DuplicateTriplet, format!("{t} already in the graph")));
    }
    if !g.shares_entity(&t) {
        return Err((RejectReason::DisconnectedTriplet, format!("{t} shares no entity")));
    }
    let text = strip_marker_text(&one_line(&text), g.len() + 1);
    if text.is_empty() {
        return Err((RejectReason::UnparsableReply, "empty text".into()));
    }
    Ok((t, text))
}

/// Proposes and verbalises one connected triplet in a single backend call.
pub fn grow_step(record: &ForgeRecord, gw: &Gateway, cfg: &ForgeConfig) -> Result<GrowOutcome, Rejection> {
    if record.stage >= cfg.max_triplets {
        let mut done = record.clone();
        done.status = RecordStatus::Finalized;
        return Ok(GrowOutcome::Finalized(done));
    }
    let g = &record.graph;
    let entities = g.entities().join("; ");
    let prompt = prompts::GROW
        .replace("{triplets}", &g.render(crate::graph::TripletFormat::Pipe))
        .replace("{entities}", &entities)
        .replace("{text}", &strip_marker_text(&record.text, g.len()));
    let stage = record.stage + 1;
    let mut provenance = record.provenance.clone();
    let (t, text) = converse(
        gw,
        prompt,
        cfg.validation_retries,
        &mut provenance,
        |reply| parse_growth(reply, g),
        |reason, detail| match reason {
            RejectReason::DisconnectedTriplet | RejectReason::DuplicateTriplet => format!(
                "The triplet was rejected: {detail}. Propose a different new triplet whose subject or object is one of: {entities}. Use the same two-line format."
            ),
            _ => format!("The reply could not be read: {detail}. Use exactly the two-line format."),
        },
    )
    .map_err(|(reason, detail)| Rejection {
        id: format!("{}-s{stage}", record.lineage),
        lineage: record.lineage.clone(),
        stage,
        reason,
        detail,
    })?;
    Ok(GrowOutcome::Grown(ForgeRecord {
        id: format!("{}-s{stage}", record.lineage),
        lineage: record.lineage.clone(),
        stage,
        graph: g.with_triplet(t).expect("checked for duplicates"),
        text,
        order: Vec::new(),
        provenance,
        status: RecordStatus::Active,
    }))
}

pub fn numbered(g: &KnowledgeGraph) -> String {
    crate::prompting::numbered_lines(g)
}

/// Separate call that inserts `(i)` markers; the marker order becomes the
/// record's realisation order.
pub fn annotate_attribution(record: &ForgeRecord, gw: &Gateway, retries: u32) -> Result<ForgeRecord, Rejection> {
    let n = record.graph.len();
    let prompt = prompts::ANNOTATE
        .replace("{triplets}", &numbered(&record.graph))
        .replace("{text}", &strip_marker_text(&record.text, n))
        .replace("{n}", &n.to_string());
    let mut provenance = record.provenance.clone();
    let (text, order) = converse(
        gw,
        prompt,
        retries,
        &mut provenance,
        |reply| {
            let text = one_line(reply);
            let order = marker_check(&text, n)?;
            Ok((text, order))
        },
        marker_feedback(n),
    )
    .map_err(|(reason, detail)| Rejection {
        id: record.id.clone(),
        lineage: record.lineage.clone(),
        stage: record.stage,
        reason,
        detail,
    })?;
    Ok(ForgeRecord {
        text,
        order,
        provenance,
        ..record.clone()
    })
}

fn normalized(t: &Triplet) -> [String; 3] {
    let f = |s: &str| one_line(&s.to_lowercase());
    [f(t.head()), f(t.relation()), f(t.tail())]
}

fn check_record(r: &ForgeRecord, policy: &FilterPolicy) -> Check<()> {
    let n = r.graph.len();
    if r.stage != n {
        return Err((RejectReason::StageMismatch, format!("stage {} with {n} triplets", r.stage)));
    }
    let markers = marker_check(&r.text, n)?;
    if markers != r.order {
        return Err((RejectReason::OrderMismatch, format!("order {:?}, markers {markers:?}", r.order)));
    }
    let distinct: BTreeSet<[String; 3]> = r.graph.triplets().iter().map(normalized).collect();
    if distinct.len() != n {
        return Err((RejectReason::DuplicateTriplet, "normalised duplicate".into()));
    }
    if graph_stats(&r.graph).n_components != 1 {
        return Err((RejectReason::DisconnectedGraph, "graph has several components".into()));
    }
    let report = validate_text(&AttributedText::new(r.text.clone(), n), &r.graph);
    if report.entity_coverage < policy.min_entity_coverage {
        return Err((RejectReason::LowCoverage, format!("entity coverage {:.3}", report.entity_coverage)));
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<ForgeRecord>,
    pub rejected: Vec<Rejection>,
    pub counts: BTreeMap<RejectReason, usize>,
}

/// Splits records into well-formed ones and rejections with reasons.
pub fn filter_malformed(records: Vec<ForgeRecord>, policy: &FilterPolicy) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for r in records {
        match check_record(&r, policy) {
            Ok(()) => out.kept.push(r),
            Err((reason, detail)) => {
                *out.counts.entry(reason).or_default() += 1;
                out.rejected.push(Rejection {
                    id: r.id,
                    lineage: r.lineage,
                    stage: r.stage,
                    reason,
                    detail,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub test_set: String,
    pub dataset_triplets: usize,
    pub overlapping_triplets: usize,
    pub percentage: f64,
    pub overlapping_graphs: usize,
}

/// Share of dataset triplets (case-folded, whitespace-collapsed) that also
/// occur in each test set, and the number of identical graphs.
pub fn overlap_check(dataset: &[KnowledgeGraph], test_sets: &[(String, Vec<KnowledgeGraph>)]) -> Vec<OverlapReport> {
    let graph_key = |g: &KnowledgeGraph| g.triplets().iter().map(normalized).collect::<BTreeSet<_>>();
    let total: usize = dataset.iter().map(KnowledgeGraph::len).sum();
    test_sets
        .iter()
        .map(|(name, test)| {
            let triplets: std::collections::HashSet<[String; 3]> =
                test.iter().flat_map(|g| g.triplets().iter().map(normalized)).collect();
            let graphs: std::collections::HashSet<BTreeSet<[String; 3]>> = test.iter().map(graph_key).collect();
            let overlapping = dataset
                .iter()
                .flat_map(|g| g.triplets())
                .filter(|t| triplets.contains(&normalized(t)))
                .count();
            OverlapReport {
                test_set: name.clone(),
                dataset_triplets: total,
                overlapping_triplets: overlapping,
                percentage: if total == 0 { 0.0 } else { 100.0 * overlapping as f64 / total as f64 },
                overlapping_graphs: dataset.iter().filter(|g| graphs.contains(&graph_key(g))).count(),
            }
        })
        .collect()
}

/// Output line: triplets in input numbering, realisation order, marked text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeLine {
    pub id: String,
    pub triplets: Vec<Triplet>,
    pub order: Vec<usize>,
    pub text: String,
    pub markers: Vec<usize>,
    pub stage: usize,
}

impl From<&ForgeRecord> for ForgeLine {
    fn from(r: &ForgeRecord) -> Self {
        Self {
            id: r.id.clone(),
            triplets: r.graph.triplets().to_vec(),
            order: r.order.clone(),
            text: r.text.clone(),
            markers: AttributedText::new(r.text.clone(), r.graph.len()).indices(),
            stage: r.stage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeManifest {
    pub config_hash: String,
    pub seeds: usize,
    pub processed: usize,
    pub kept: usize,
    pub rejected: usize,
    pub rejection_counts: BTreeMap<RejectReason, usize>,
    pub stage_counts: BTreeMap<usize, usize>,
    pub train: usize,
    pub dev: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgeOutput {
    pub train: Vec<ForgeRecord>,
    pub dev: Vec<ForgeRecord>,
    pub rejected: Vec<Rejection>,
    pub manifest: ForgeManifest,
}

struct Lineage {
    snapshots: Vec<ForgeRecord>,
    rejection: Option<Rejection>,
}

fn grow_lineage(pair: &SourcePair, cfg: &ForgeConfig, growth: &Gateway, annotation: &Gateway) -> Lineage {
    let mut snapshots = Vec::new();
    let mut rec = match rewrite_seed(pair, annotation, cfg.validation_retries) {
        Ok(r) => r,
        Err(rej) => return Lineage { snapshots, rejection: Some(rej) },
    };
    loop {
        let grown = match grow_step(&rec, growth, cfg) {
            Ok(GrowOutcome::Grown(g)) => g,
            Ok(GrowOutcome::Finalized(_)) => {
                if let Some(last) = snapshots.last_mut() {
                    last.status = RecordStatus::Finalized;
                }
                return Lineage { snapshots, rejection: None };
            }
            Err(rej) => return Lineage { snapshots, rejection: Some(rej) },
        };
        match annotate_attribution(&grown, annotation, cfg.validation_retries) {
            Ok(a) => {
                snapshots.push(a.clone());
                rec = a;
            }
            Err(rej) => return Lineage { snapshots, rejection: Some(rej) },
        }
    }
}

/// Lineage-level split: every stage of a seed lands on the same side.
pub fn split_by_lineage(records: Vec<ForgeRecord>, dev_fraction: f64, seed: u64) -> (Vec<ForgeRecord>, Vec<ForgeRecord>) {
    let mut lineages: Vec<String> = records.iter().map(|r| r.lineage.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    lineages.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_de50));
    let n_dev = (lineages.len() as f64 * dev_fraction).round() as usize;
    let dev: BTreeSet<String> = lineages.into_iter().take(n_dev).collect();
    records.into_iter().partition(|r| !dev.contains(&r.lineage))
}

/// Full pipeline over already-sampled seeds. Lineages run concurrently up
/// to the growth backend's in-flight limit; output order follows `seeds`.
pub fn run_forge(seeds: &[SourcePair], cfg: &ForgeConfig, growth: &Gateway, annotation: &Gateway) -> Result<ForgeOutput, ForgeError> {
    cfg.validate()?;
    let workers = growth.config().max_in_flight.min(seeds.len()).max(1);
    let results: Mutex<Vec<Option<Lineage>>> = Mutex::new((0..seeds.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= seeds.len() {
                    break;
                }
                let l = grow_lineage(&seeds[i], cfg, growth, annotation);
                results.lock().unwrap()[i] = Some(l);
            });
        }
    });
    let mut snapshots = Vec::new();
    let mut rejected = Vec::new();
    for l in results.into_inner().unwrap().into_iter().map(|l| l.expect("every lineage ran")) {
        snapshots.extend(l.snapshots);
        rejected.extend(l.rejection);
    }
    let processed = snapshots.len() + rejected.len();
    let filtered = filter_malformed(snapshots, &cfg.filter);
    rejected.extend(filtered.rejected);
    let mut rejection_counts = BTreeMap::new();
    for r in &rejected {
        *rejection_counts.entry(r.reason).or_default() += 1;
    }
    let mut stage_counts = BTreeMap::new();
    for r in &filtered.kept {
        *stage_counts.entry(r.stage).or_default() += 1;
    }
    let kept = filtered.kept.len();
    let (train, dev) = split_by_lineage(filtered.kept, cfg.dev_fraction, cfg.seed);
    let manifest = ForgeManifest {
        config_hash: cfg.hash(),
        seeds: seeds.len(),
        processed,
        kept,
        rejected: rejected.len(),
        rejection_counts,
        stage_counts,
        train: train.len(),
        dev: dev.len(),
    };
    Ok(ForgeOutput { train, dev, rejected, manifest })
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), ForgeError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, &it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

impl ForgeOutput {
    /// Writes `train.jsonl`, `dev.jsonl`, `rejected.jsonl` and `manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<(), ForgeError> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("train.jsonl"), self.train.iter().map(ForgeLine::from))?;
        write_jsonl(&dir.join("dev.jsonl"), self.dev.iter().map(ForgeLine::from))?;
        write_jsonl(&dir.join("rejected.jsonl"), &self.rejected)?;
        let mut f = std::fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(&mut f, &self.manifest)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn kept(&self) -> impl Iterator<Item = &ForgeRecord> {
        self.train.iter().chain(&self.dev)
    }
}

/// Builds the gateways a config asks for, sharing one cache directory.
pub fn gateways(cfg: &ForgeConfig, cache: Option<&Path>) -> Result<(Gateway, Gateway), crate::gateway::GatewayError> {
    let make = |b: &BackendConfig| -> Result<Gateway, crate::gateway::GatewayError> {
        let g = Gateway::new(b.clone())?;
        Ok(match cache {
            Some(dir) => g.with_cache(crate::gateway::ResponseCache::new(dir)),
            None => g,
        })
    };
    let growth = make(&cfg.growth_backend)?;
    let annotation = make(cfg.annotation_backend.as_ref().unwrap_or(&cfg.growth_backend))?;
    Ok((growth, annotation))
}

/// Id-keyed index of records, for joining outputs back to their inputs.
pub fn by_id(records: &[ForgeRecord]) -> HashMap<&str, &ForgeRecord> {
    records.iter().map(|r| (r.id.as_str(), r)).collect()
}
