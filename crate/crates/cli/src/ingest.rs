//! Dataset adapters: WebNLG XML, DART JSON and the internal JSONL schema.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gtt_core::graph::{graph_stats, triplet_bucket, KnowledgeGraph, Triplet};
use gtt_core::metrics::EvalRecord;
use gtt_core::selection::DemoExample;
use quick_xml::events::Event;
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: parse error at {location}: {reason}")]
    Parse { path: PathBuf, location: String, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Seen,
    Unseen,
}

/// One graph with its references, in the internal schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub triplets: Vec<Triplet>,
    #[serde(default)]
    pub references: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<Partition>,
}

impl DatasetRecord {
    /// Graph with repeated triplets dropped.
    pub fn graph(&self) -> Option<KnowledgeGraph> {
        KnowledgeGraph::dedup(self.triplets.clone()).ok()
    }

    pub fn eval_record(&self, hypothesis: impl Into<String>) -> EvalRecord {
        EvalRecord {
            id: self.id.clone(),
            hypothesis: hypothesis.into(),
            references: self.references.clone(),
            triplets: self.triplets.clone(),
        }
    }

    /// Demo-pool entry using the first reference.
    pub fn demo_example(&self) -> Option<DemoExample> {
        Some(DemoExample {
            id: self.id.clone(),
            graph: self.graph()?,
            reference_text: self.references.first()?.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Adapter {
    WebnlgXml,
    DartJson,
    Jsonl,
}

impl FromStr for Adapter {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "webnlg-xml" | "webnlg" => Ok(Self::WebnlgXml),
            "dart-json" | "dart" => Ok(Self::DartJson),
            "jsonl" => Ok(Self::Jsonl),
            _ => Err(format!("unknown adapter {s:?} (webnlg-xml|dart-json|jsonl)")),
        }
    }
}

/// Which WebNLG release's training categories count as seen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum WebnlgRelease {
    #[default]
    #[serde(rename = "2017")]
    V2017,
    #[serde(rename = "2020")]
    V2020,
}

impl FromStr for WebnlgRelease {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "2017" => Ok(Self::V2017),
            "2020" => Ok(Self::V2020),
            _ => Err(format!("unknown WebNLG release {s:?} (2017|2020)")),
        }
    }
}

impl WebnlgRelease {
    pub fn seen_categories(self) -> &'static [&'static str] {
        const V2017: &[&str] = &[
            "Airport", "Astronaut", "Building", "City", "ComicsCharacter", "Food", "Monument", "SportsTeam",
            "University", "WrittenWork",
        ];
        const V2020: &[&str] = &[
            "Airport", "Artist", "Astronaut", "Athlete", "Building", "CelestialBody", "City", "ComicsCharacter",
            "Company", "Food", "MeanOfTransportation", "Monument", "Politician", "SportsTeam", "University",
            "WrittenWork",
        ];
        match self {
            Self::V2017 => V2017,
            Self::V2020 => V2020,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io { path: path.to_path_buf(), source }
}

pub fn ingest(path: &Path, adapter: Adapter, release: WebnlgRelease) -> Result<Vec<DatasetRecord>, IngestError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    match adapter {
        Adapter::WebnlgXml => parse_webnlg(&text, path, release),
        Adapter::DartJson => parse_dart(&text, path),
        Adapter::Jsonl => parse_jsonl(&text, path),
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into())
}

/// WebNLG entity surface: underscores to spaces, surrounding quotes removed.
fn webnlg_field(s: &str) -> String {
    s.trim().trim_matches('"').replace('_', " ")
}

fn webnlg_triplet(raw: &str) -> Option<Triplet> {
    let parts: Vec<&str> = raw.split(" | ").collect();
    let [h, r, t] = parts.as_slice() else { return None };
    Some(Triplet::sanitized(&webnlg_field(h), r.trim(), &webnlg_field(t)))
}

#[derive(Default)]
struct Entry {
    eid: String,
    category: Option<String>,
    triplets: Vec<Triplet>,
    lexes: Vec<String>,
}

pub fn parse_webnlg(xml: &str, path: &Path, release: WebnlgRelease) -> Result<Vec<DatasetRecord>, IngestError> {
    let mut reader = Reader::from_str(xml);
    let err = |pos: u64, reason: String| IngestError::Parse {
        path: path.to_path_buf(),
        location: format!("byte {pos}"),
        reason,
    };
    let seen: HashSet<&str> = release.seen_categories().iter().copied().collect();
    let prefix = stem(path);
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    let mut stack: Vec<String> = Vec::new();
    let mut entry: Option<Entry> = None;
    let mut buf = String::new();
    // lex text: direct children of <lex>, or a nested <text> when present
    let mut lex_direct = String::new();
    let mut lex_nested: Option<String> = None;
    loop {
        let pos = reader.buffer_position();
        let ev = reader.read_event().map_err(|e| err(reader.error_position(), e.to_string()))?;
        match ev {
            Event::Start(e) => {
                let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
                if name == "entry" {
                    let mut en = Entry::default();
                    for a in e.attributes().flatten() {
                        let v = a.unescape_value().map_err(|x| err(pos, x.to_string()))?.into_owned();
                        match a.key.as_ref() {
                            b"eid" => en.eid = v,
                            b"category" => en.category = Some(v),
                            _ => {}
                        }
                    }
                    entry = Some(en);
                } else if name == "lex" {
                    lex_direct.clear();
                    lex_nested = None;
                } else if name == "text" && stack.last().is_some_and(|p| p == "lex") {
                    lex_nested = Some(String::new());
                }
                buf.clear();
                stack.push(name);
            }
            Event::Text(t) => {
                let s = t.unescape().map_err(|x| err(pos, x.to_string()))?;
                append_text(&stack, &s, &mut buf, &mut lex_direct, &mut lex_nested);
            }
            Event::CData(t) => {
                let s = String::from_utf8_lossy(&t).into_owned();
                append_text(&stack, &s, &mut buf, &mut lex_direct, &mut lex_nested);
            }
            Event::End(e) => {
                let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
                stack.pop();
                let in_entry = entry.as_mut();
                match (name.as_str(), in_entry) {
                    ("mtriple", Some(en)) => {
                        let t = webnlg_triplet(&buf).ok_or_else(|| err(pos, format!("bad triple {:?}", buf.trim())))?;
                        en.triplets.push(t);
                    }
                    ("lex", Some(en)) => {
                        let text = lex_nested.take().unwrap_or_else(|| lex_direct.clone());
                        let text = text.split_whitespace().collect::<Vec<_>>().join(" ");
                        if !text.is_empty() {
                            en.lexes.push(text);
                        }
                    }
                    ("entry", Some(_)) => {
                        let en = entry.take().expect("inside entry");
                        if en.triplets.is_empty() {
                            return Err(err(pos, format!("entry {:?} has no modified triples", en.eid)));
                        }
                        let mut id = format!("{prefix}-{}", en.eid);
                        if !ids.insert(id.clone()) {
                            id = format!("{prefix}-{}-{}", en.eid, out.len());
                            ids.insert(id.clone());
                        }
                        let partition = en.category.as_deref().map(|c| {
                            if seen.contains(c) {
                                Partition::Seen
                            } else {
                                Partition::Unseen
                            }
                        });
                        out.push(DatasetRecord {
                            id,
                            triplets: en.triplets,
                            references: en.lexes,
                            category: en.category,
                            partition,
                        });
                    }
                    _ => {}
                }
                buf.clear();
            }
            Event::Eof => {
                if let Some(open) = stack.last() {
                    return Err(err(reader.buffer_position(), format!("unexpected end of file inside <{open}>")));
                }
                break;
            }
            _ => {}
        }
    }
    if out.is_empty() {
        return Err(err(0, "no <entry> elements".into()));
    }
    Ok(out)
}

fn append_text(stack: &[String], s: &str, buf: &mut String, lex_direct: &mut String, lex_nested: &mut Option<String>) {
    buf.push_str(s);
    match stack.last().map(String::as_str) {
        Some("lex") => lex_direct.push_str(s),
        Some("text") if stack.len() >= 2 && stack[stack.len() - 2] == "lex" => {
            if let Some(n) = lex_nested.as_mut() {
                n.push_str(s);
            }
        }
        _ => {}
    }
}

#[derive(Deserialize)]
struct DartEntry {
    tripleset: Vec<Vec<String>>,
    #[serde(default)]
    annotations: Vec<DartAnnotation>,
}

#[derive(Deserialize)]
struct DartAnnotation {
    #[serde(default)]
    text: String,
}

pub fn parse_dart(json: &str, path: &Path) -> Result<Vec<DatasetRecord>, IngestError> {
    let entries: Vec<DartEntry> = serde_json::from_str(json).map_err(|e| IngestError::Parse {
        path: path.to_path_buf(),
        location: format!("line {} column {}", e.line(), e.column()),
        reason: e.to_string(),
    })?;
    let prefix = stem(path);
    entries
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let triplets = e
                .tripleset
                .iter()
                .map(|t| match t.as_slice() {
                    [h, r, t] => Ok(Triplet::sanitized(h, r, t)),
                    _ => Err(IngestError::Parse {
                        path: path.to_path_buf(),
                        location: format!("entry {i}"),
                        reason: format!("triple with {} fields", t.len()),
                    }),
                })
                .collect::<Result<Vec<_>, _>>()?;
            if triplets.is_empty() {
                return Err(IngestError::Parse {
                    path: path.to_path_buf(),
                    location: format!("entry {i}"),
                    reason: "empty tripleset".into(),
                });
            }
            let references = e
                .annotations
                .into_iter()
                .map(|a| a.text.split_whitespace().collect::<Vec<_>>().join(" "))
                .filter(|t| !t.is_empty())
                .collect();
            Ok(DatasetRecord {
                id: format!("{prefix}-{i}"),
                triplets,
                references,
                category: None,
                partition: None,
            })
        })
        .collect()
}

pub fn parse_jsonl(text: &str, path: &Path) -> Result<Vec<DatasetRecord>, IngestError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| IngestError::Parse {
                path: path.to_path_buf(),
                location: format!("line {} column {}", i + 1, e.column()),
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, IngestError> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| IngestError::Parse {
            path: path.to_path_buf(),
            location: format!("line {} column {}", i + 1, e.column()),
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), IngestError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(path))?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    for it in items {
        serde_json::to_writer(&mut w, it).map_err(|e| io_err(path)(e.into()))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub records: usize,
    pub triplets: usize,
    pub mean_triplets: f64,
    pub references: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seen: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unseen: Option<usize>,
    /// Counts keyed "1", "2", "3", "4", "5+".
    pub triplet_buckets: BTreeMap<String, usize>,
    pub diameter_buckets: BTreeMap<String, usize>,
}

/// Triplet counts are raw (repeats included); diameters use the deduplicated graph.
pub fn dataset_stats(records: &[DatasetRecord]) -> DatasetStats {
    let triplets: usize = records.iter().map(|r| r.triplets.len()).sum();
    let count = |p| records.iter().filter(|r| r.partition == Some(p)).count();
    let labelled = records.iter().any(|r| r.partition.is_some());
    let mut triplet_buckets = BTreeMap::new();
    let mut diameter_buckets = BTreeMap::new();
    for r in records {
        *triplet_buckets.entry(triplet_bucket(r.triplets.len()).to_string()).or_default() += 1;
        if let Some(g) = r.graph() {
            *diameter_buckets.entry(graph_stats(&g).diameter_bucket()).or_default() += 1;
        }
    }
    DatasetStats {
        records: records.len(),
        triplets,
        mean_triplets: if records.is_empty() { 0.0 } else { triplets as f64 / records.len() as f64 },
        references: records.iter().map(|r| r.references.len()).sum(),
        seen: labelled.then(|| count(Partition::Seen)),
        unseen: labelled.then(|| count(Partition::Unseen)),
        triplet_buckets,
        diameter_buckets,
    }
}
