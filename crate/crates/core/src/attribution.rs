//! Reorder-and-attribute output format.
//!
//! A model answer has two sections:
//!
//! ```text
//! The correct triplet order is:
//! Twitter | users | 330 million (1)
//! Twitter | founding year | 2006 (2) Then The generated text is: Twitter has 330 million users (1) ...
//! ```
//!
//! The plan lists input triplets with their 1-based input numbers in the
//! order they are realised; the text carries `(i)` markers citing them.
//! Anything from `$$$` on is ignored.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{KnowledgeGraph, Triplet};

pub const ORDER_HEADER: &str = "The correct triplet order is:";
pub const TEXT_HEADER: &str = "Then The generated text is:";
pub const STOP: &str = "$$$";

static ORDER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)the\s+correct\s+triplet\s+order\s+is\**\s*:").unwrap());
static TEXT_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\**\s*(?:then\s+)?(?:the\s+)?generated\s+text\s+is\**\s*:").unwrap());
static PLAN_ENTRY_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)\s*(.+?)\s*\((\d+)\)").unwrap());
static MARKER_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\((\d+)\)").unwrap());
static SPACES_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[ \t]{2,}").unwrap());

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AttributionError {
    #[error("output has no triplet order section")]
    MissingOrderSection,
    #[error("output has no generated text section")]
    MissingTextSection,
    #[error("plan entry {0} is not a numbered pipe triplet")]
    UnparsableTriplet(usize),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub triplet: Triplet,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReorderPlan {
    pub entries: Vec<PlanEntry>,
}

impl ReorderPlan {
    /// Plan visiting `g`'s triplets in `order` (0-based positions).
    pub fn from_order(g: &KnowledgeGraph, order: &[usize]) -> Self {
        Self {
            entries: order
                .iter()
                .map(|&i| PlanEntry {
                    triplet: g.triplets()[i].clone(),
                    index: i + 1,
                })
                .collect(),
        }
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.index).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Whether the indices are exactly `1..=n`.
    pub fn is_permutation_of(&self, n: usize) -> bool {
        let mut idx = self.indices();
        idx.sort_unstable();
        idx.len() == n && idx.iter().enumerate().all(|(i, &x)| x == i + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Marker {
    pub index: usize,
    /// Byte span of `(i)` in the raw text.
    pub start: usize,
    pub end: usize,
}

/// Text with inline `(i)` markers. Only `i <= bound` counts as a marker;
/// larger numbers in parentheses are left as literal text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributedText {
    raw: String,
    markers: Vec<Marker>,
}

impl AttributedText {
    /// Markers are recognised up to `2 * n`.
    pub fn new(raw: impl Into<String>, n: usize) -> Self {
        let raw = raw.into();
        let bound = 2 * n;
        let markers = MARKER_RE
            .captures_iter(&raw)
            .filter_map(|c| {
                let m = c.get(0).unwrap();
                let index: usize = c[1].parse().ok()?;
                (index <= bound).then_some(Marker {
                    index,
                    start: m.start(),
                    end: m.end(),
                })
            })
            .collect();
        Self { raw, markers }
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn markers(&self) -> &[Marker] {
        &self.markers
    }

    pub fn indices(&self) -> Vec<usize> {
        self.markers.iter().map(|m| m.index).collect()
    }

    pub fn rebound(&self, n: usize) -> Self {
        Self::new(self.raw.clone(), n)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedOutput {
    pub plan: ReorderPlan,
    pub text: AttributedText,
}

fn parse_plan(section: &str) -> Result<ReorderPlan, AttributionError> {
    let mut entries = Vec::new();
    let mut pos = 0;
    for c in PLAN_ENTRY_RE.captures_iter(section) {
        let m = c.get(0).unwrap();
        if !section[pos..m.start()].trim().is_empty() {
            return Err(AttributionError::UnparsableTriplet(entries.len() + 1));
        }
        pos = m.end();
        let triplet =
            Triplet::parse_pipe(c[1].trim()).ok_or(AttributionError::UnparsableTriplet(entries.len() + 1))?;
        let index = c[2]
            .parse()
            .map_err(|_| AttributionError::UnparsableTriplet(entries.len() + 1))?;
        entries.push(PlanEntry { triplet, index });
    }
    if !section[pos..].trim().is_empty() {
        return Err(AttributionError::UnparsableTriplet(entries.len() + 1));
    }
    Ok(ReorderPlan { entries })
}

pub fn parse_output(raw: &str) -> Result<ParsedOutput, AttributionError> {
    let raw = raw.find(STOP).map_or(raw, |i| &raw[..i]);
    let order = ORDER_RE.find(raw).ok_or(AttributionError::MissingOrderSection)?;
    let rest = &raw[order.end()..];
    let text = TEXT_RE.find(rest).ok_or(AttributionError::MissingTextSection)?;
    let plan = parse_plan(&rest[..text.start()])?;
    let body = rest[text.end()..].trim();
    let n = plan.len();
    Ok(ParsedOutput {
        plan,
        text: AttributedText::new(body, n),
    })
}

/// Removes markers with the whitespace before them; `(2), (3)` groups go
/// as one unit. Runs of spaces collapse and the ends are trimmed.
pub fn strip_markers(t: &AttributedText) -> String {
    let raw = t.raw();
    let mut out = String::with_capacity(raw.len());
    let markers = t.markers();
    let mut pos = 0;
    let mut i = 0;
    while i < markers.len() {
        let start = markers[i].start;
        let mut end = markers[i].end;
        let mut j = i + 1;
        while j < markers.len() {
            let gap = &raw[end..markers[j].start];
            if gap.trim() == "," {
                end = markers[j].end;
                j += 1;
            } else {
                break;
            }
        }
        out.push_str(raw[pos..start].trim_end());
        pos = end;
        i = j;
    }
    out.push_str(&raw[pos..]);
    SPACES_RE.replace_all(out.trim(), " ").into_owned()
}

pub fn strip_marker_text(raw: &str, n: usize) -> String {
    strip_markers(&AttributedText::new(raw, n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub n: usize,
    pub permutation_valid: bool,
    pub plan_indices: Vec<usize>,
    /// Marker indices in text order.
    pub marker_indices: Vec<usize>,
    pub covered_indices: BTreeSet<usize>,
    pub missing_indices: BTreeSet<usize>,
    pub hallucinated_indices: BTreeSet<usize>,
    pub duplicate_indices: BTreeSet<usize>,
    pub marker_count: usize,
    pub order_agreement: bool,
    /// Share of graph entities found (case-insensitively) in the stripped
    /// text. A weak lexical proxy, not a faithfulness judgement.
    pub entity_coverage: f64,
    /// Plan positions whose triplet differs from the input triplet it cites.
    pub plan_triplet_mismatches: Vec<usize>,
}

impl AlignmentReport {
    /// Every index cited once, nothing invented, plan and text agree.
    pub fn is_clean(&self) -> bool {
        self.permutation_valid
            && self.missing_indices.is_empty()
            && self.hallucinated_indices.is_empty()
            && self.duplicate_indices.is_empty()
            && self.order_agreement
    }

    /// First failure in a fixed precedence, for rejection bookkeeping.
    pub fn failure(&self) -> Option<AlignmentFailure> {
        if !self.hallucinated_indices.is_empty() {
            Some(AlignmentFailure::HallucinatedIndex)
        } else if !self.missing_indices.is_empty() {
            Some(AlignmentFailure::MissingIndex)
        } else if !self.duplicate_indices.is_empty() {
            Some(AlignmentFailure::DuplicateIndex)
        } else if !self.permutation_valid {
            Some(AlignmentFailure::InvalidPlan)
        } else if !self.order_agreement {
            Some(AlignmentFailure::OrderDisagreement)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AlignmentFailure {
    HallucinatedIndex,
    MissingIndex,
    DuplicateIndex,
    InvalidPlan,
    OrderDisagreement,
}

pub fn entity_coverage(g: &KnowledgeGraph, text: &str) -> f64 {
    let entities = g.entities();
    if entities.is_empty() {
        return 0.0;
    }
    let lower = text.to_lowercase();
    let hits = entities.iter().filter(|e| lower.contains(&e.to_lowercase())).count();
    hits as f64 / entities.len() as f64
}

/// Checks `parsed` against the graph it was generated from, whose triplets
/// are numbered `1..=n` in storage order. Never fails.
pub fn validate(parsed: &ParsedOutput, g: &KnowledgeGraph) -> AlignmentReport {
    validate_parts(Some(&parsed.plan), &parsed.text, g)
}

/// Like [`validate`] for text without a plan; order agreement then means
/// markers appear as `1, 2, ..., n`.
pub fn validate_text(text: &AttributedText, g: &KnowledgeGraph) -> AlignmentReport {
    validate_parts(None, text, g)
}

fn validate_parts(plan: Option<&ReorderPlan>, text: &AttributedText, g: &KnowledgeGraph) -> AlignmentReport {
    let n = g.len();
    let text = text.rebound(n);
    let marker_indices = text.indices();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &i in &marker_indices {
        *counts.entry(i).or_default() += 1;
    }
    let in_range = |i: usize| (1..=n).contains(&i);
    let covered: BTreeSet<usize> = counts.keys().copied().filter(|&i| in_range(i)).collect();
    let missing = (1..=n).filter(|i| !covered.contains(i)).collect();
    let hallucinated = counts.keys().copied().filter(|&i| !in_range(i)).collect();
    let duplicate = counts.iter().filter(|(_, &c)| c > 1).map(|(&i, _)| i).collect();
    let (plan_indices, permutation_valid, mismatches) = match plan {
        Some(p) => {
            let mismatches = p
                .entries
                .iter()
                .enumerate()
                .filter(|(_, e)| !in_range(e.index) || g.triplets()[e.index - 1] != e.triplet)
                .map(|(pos, _)| pos)
                .collect();
            (p.indices(), p.is_permutation_of(n), mismatches)
        }
        None => ((1..=n).collect(), true, Vec::new()),
    };
    let order_agreement = marker_indices == plan_indices;
    AlignmentReport {
        n,
        permutation_valid,
        plan_indices,
        marker_count: marker_indices.len(),
        marker_indices,
        covered_indices: covered,
        missing_indices: missing,
        hallucinated_indices: hallucinated,
        duplicate_indices: duplicate,
        order_agreement,
        entity_coverage: entity_coverage(g, &strip_markers(&text)),
        plan_triplet_mismatches: mismatches,
    }
}

/// Gold answer string for a plan and its attributed text.
pub fn render_target(plan: &ReorderPlan, text: &AttributedText) -> Result<String, AttributionError> {
    let n = plan.len();
    if n == 0 || !plan.is_permutation_of(n) {
        return Err(AttributionError::InvalidPlan(format!("indices {:?} are not a permutation", plan.indices())));
    }
    let text = text.rebound(n);
    let mut cited = text.indices();
    cited.sort_unstable();
    let mut wanted = plan.indices();
    wanted.sort_unstable();
    if cited != wanted {
        return Err(AttributionError::InvalidPlan(format!(
            "text cites {:?}, plan has {:?}",
            text.indices(),
            plan.indices()
        )));
    }
    let lines: Vec<String> = plan.entries.iter().map(|e| format!("{} ({})", e.triplet, e.index)).collect();
    Ok(format!("{ORDER_HEADER}\n{} {TEXT_HEADER} {}", lines.join("\n"), text.raw().trim()))
}
