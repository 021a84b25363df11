//! Experiment configuration, runs and evaluation reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use gtt_core::attribution::{parse_output, strip_markers, STOP};
use gtt_core::gateway::{BackendConfig, Gateway, GatewayError, ResponseCache, MOCK_URL};
use gtt_core::graph::{standardize, KnowledgeGraph, LinearizationStrategy, TripletFormat};
use gtt_core::metrics::{bleu4, bucket_report, chrfpp, BucketKey, BucketReport, EvalRecord};
use gtt_core::prompting::{Demo, PromptAssets, PromptRequest, SystemKind, Template};
use gtt_core::selection::{select, DemoPool, EmbeddingKind, SelectionError, SelectionMethod, SelectionSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingest::{ingest, read_jsonl, write_jsonl, Adapter, DatasetRecord, IngestError, WebnlgRelease};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("demo pool: {0}")]
    Pool(#[from] SelectionError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("metrics: {0}")]
    Metrics(#[from] gtt_core::metrics::MetricsError),
}

fn d_adapter() -> Adapter {
    Adapter::Jsonl
}
fn d_system() -> SystemKind {
    SystemKind::Detailed
}
fn d_template() -> Template {
    Template::D
}
fn d_lin() -> String {
    "ori".into()
}
fn d_selection() -> String {
    "ddd".into()
}
fn d_kind() -> EmbeddingKind {
    EmbeddingKind::Graph
}
fn d_k() -> usize {
    10
}
fn d_base_url() -> String {
    MOCK_URL.into()
}
fn d_model() -> String {
    "mock".into()
}
fn d_timeout() -> f64 {
    60.0
}
fn d_retries() -> u32 {
    3
}
fn d_in_flight() -> usize {
    4
}

/// Flat experiment settings, one key per CLI flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    #[serde(default = "d_adapter")]
    pub adapter: Adapter,
    #[serde(default)]
    pub webnlg_release: WebnlgRelease,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,

    #[serde(default = "d_system")]
    pub system: SystemKind,
    #[serde(default = "d_template")]
    pub template: Template,
    #[serde(default)]
    pub triplet_format: TripletFormat,
    /// `ori`, `bfs`, `dfs` or `rs:<seed>`.
    #[serde(default = "d_lin")]
    pub linearization: String,

    #[serde(default)]
    pub n_shots: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<PathBuf>,
    /// `difficulty`, `diversity` or `ddd`.
    #[serde(default = "d_selection")]
    pub selection: String,
    #[serde(default)]
    pub level: u8,
    #[serde(default = "d_kind")]
    pub embedding_kind: EmbeddingKind,
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default)]
    pub selection_seed: u64,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_id: Option<String>,
    #[serde(default = "d_base_url")]
    pub base_url: String,
    #[serde(default = "d_model")]
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub backend_seed: u64,
    #[serde(default = "d_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "d_retries")]
    pub max_retries: u32,
    #[serde(default = "d_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub offline: bool,
}

impl ExperimentConfig {
    pub fn minimal(dataset: impl Into<PathBuf>) -> Self {
        toml::from_str(&format!("dataset = {:?}", dataset.into().to_string_lossy())).expect("defaults parse")
    }

    /// Parses TOML, then lets `overrides` (same keys) win.
    pub fn from_toml_with(text: &str, overrides: toml::Table) -> Result<Self, ExperimentError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        table.extend(overrides);
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ExperimentError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn linearization(&self) -> Result<LinearizationStrategy, ExperimentError> {
        self.linearization.parse().map_err(ExperimentError::Config)
    }

    pub fn method(&self) -> Result<SelectionMethod, ExperimentError> {
        match self.selection.as_str() {
            "difficulty" => Ok(SelectionMethod::Difficulty(self.level)),
            "diversity" => Ok(SelectionMethod::Diversity(self.level)),
            "ddd" => Ok(SelectionMethod::Ddd),
            s => Err(ExperimentError::Config(format!("unknown selection {s:?} (difficulty|diversity|ddd)"))),
        }
    }

    pub fn selection_spec(&self) -> Result<SelectionSpec, ExperimentError> {
        Ok(SelectionSpec {
            n_shots: self.n_shots,
            embedding_kind: self.embedding_kind,
            method: self.method()?,
            k: self.k,
            seed: self.selection_seed,
        })
    }

    pub fn backend(&self) -> BackendConfig {
        let mut b = BackendConfig::mock(self.backend_seed);
        b.base_url = self.base_url.clone();
        b.model = self.model.clone();
        if let Some(id) = &self.backend_id {
            b.id = id.clone();
        } else if !b.is_mock() {
            b.id = self.model.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect();
        }
        b.embedding_model = self.embedding_model.clone();
        b.api_key_env = self.api_key_env.clone();
        b.timeout_secs = self.timeout_secs;
        b.max_retries = self.max_retries;
        b.max_in_flight = self.max_in_flight;
        b.temperature = self.temperature;
        b.max_tokens = self.max_tokens;
        b
    }

    pub fn gateway(&self) -> Result<Gateway, ExperimentError> {
        let mut g = Gateway::new(self.backend())?.offline(self.offline);
        if let Some(dir) = &self.cache_dir {
            g = g.with_cache(ResponseCache::new(dir));
        }
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if !self.dataset.exists() {
            return Err(ExperimentError::Config(format!("dataset {} does not exist", self.dataset.display())));
        }
        self.linearization()?;
        self.method()?;
        if self.n_shots > 0 {
            match &self.pool {
                None => return Err(ExperimentError::Config("n_shots > 0 needs a pool".into())),
                Some(p) if !p.exists() => {
                    return Err(ExperimentError::Config(format!("pool {} does not exist", p.display())))
                }
                _ => {}
            }
        }
        self.backend().validate()?;
        Ok(())
    }

    /// Hash of the settings that shape results; paths for outputs and
    /// caches and the offline switch are left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        c.cache_dir = None;
        c.offline = false;
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    pub fn prompt_request(&self) -> Result<PromptRequest, ExperimentError> {
        Ok(PromptRequest {
            system_kind: self.system,
            template: self.template,
            triplet_format: self.triplet_format,
            linearization: self.linearization()?,
            demos: Vec::new(),
        })
    }
}

/// What gets embedded for a graph under each embedding kind.
pub fn embedding_input(kind: EmbeddingKind, g: &KnowledgeGraph, text: &str) -> String {
    match kind {
        EmbeddingKind::Graph => g.render(TripletFormat::Pipe),
        EmbeddingKind::StandardizedGraph => standardize(g).render(TripletFormat::Pipe),
        EmbeddingKind::Text => text.to_string(),
    }
}

/// Builds a demo pool from dataset records and embeds it under `kinds`,
/// clustering each kind with `k` clusters.
pub fn embed_pool(
    records: &[DatasetRecord],
    kinds: &[EmbeddingKind],
    k: usize,
    seed: u64,
    gw: &Gateway,
) -> Result<DemoPool, ExperimentError> {
    let examples: Vec<_> = records.iter().filter_map(DatasetRecord::demo_example).collect();
    let mut pool = DemoPool::new(examples)?;
    for &kind in kinds {
        let inputs: Vec<String> = pool
            .examples()
            .iter()
            .map(|e| embedding_input(kind, &e.graph, &e.reference_text))
            .collect();
        pool.set_embeddings(kind, gw.embed_texts(&inputs)?)?;
        pool.cluster(kind, k.min(pool.len()), seed)?;
    }
    Ok(pool)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultLine {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothesis: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_output: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub demo_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub selection_fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub call_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub references: Vec<String>,
    pub triplets: Vec<gtt_core::graph::Triplet>,
}

/// Text before the stop sequence, trimmed.
pub fn cut_at_stop(text: &str) -> &str {
    text.find(STOP).map_or(text, |i| &text[..i]).trim()
}

/// Demo ids for one query. DDD falls back to difficulty level 2 when the
/// query's cluster is too small.
pub fn select_demos(query: &[f32], pool: &DemoPool, spec: &SelectionSpec) -> Result<(Vec<String>, bool), SelectionError> {
    match select(query, pool, spec) {
        Err(SelectionError::ClusterTooSmall { .. }) if spec.method == SelectionMethod::Ddd => {
            let fallback = SelectionSpec { method: SelectionMethod::Difficulty(2), ..spec.clone() };
            Ok((select(query, pool, &fallback)?, true))
        }
        other => other.map(|ids| (ids, false)),
    }
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    gw: &'a Gateway,
    assets: PromptAssets,
    base: PromptRequest,
    pool: Option<DemoPool>,
    spec: SelectionSpec,
}

impl Context<'_> {
    fn zero_shot_text(&self, g: &KnowledgeGraph) -> Result<String, String> {
        let req = PromptRequest { demos: Vec::new(), ..self.base.clone() };
        let chat = req.build(&self.assets, g).map_err(|e| e.to_string())?;
        let out = self.gw.chat_complete(&chat).map_err(|e| e.to_string())?;
        Ok(self.postprocess(&out.text, g.len()).0)
    }

    fn postprocess(&self, raw: &str, n: usize) -> (String, Option<Vec<usize>>, Option<String>) {
        if self.cfg.template != Template::PlanGtg {
            return (cut_at_stop(raw).to_string(), None, None);
        }
        match parse_output(raw) {
            Ok(p) => (strip_markers(&p.text.rebound(n)), Some(p.plan.indices()), None),
            Err(e) => (String::new(), None, Some(format!("unparsable output: {e}"))),
        }
    }

    fn run_one(&self, rec: &DatasetRecord, query: Option<&[f32]>) -> ResultLine {
        let mut line = ResultLine {
            id: rec.id.clone(),
            hypothesis: None,
            raw_output: None,
            demo_ids: Vec::new(),
            selection_fallback: false,
            plan: None,
            call_id: None,
            error: None,
            references: rec.references.clone(),
            triplets: rec.triplets.clone(),
        };
        if let Err(e) = self.fill(rec, query, &mut line) {
            line.error = Some(e);
        }
        line
    }

    fn fill(&self, rec: &DatasetRecord, query: Option<&[f32]>, line: &mut ResultLine) -> Result<(), String> {
        let g = rec.graph().ok_or("record has no triplets")?;
        let mut req = self.base.clone();
        if let (Some(pool), Some(q)) = (&self.pool, query) {
            let (ids, fallback) = select_demos(q, pool, &self.spec).map_err(|e| format!("selection: {e}"))?;
            req.demos = ids
                .iter()
                .map(|id| {
                    let ex = pool.get(id).expect("selected from pool");
                    Demo { graph: ex.graph.clone(), reference_output: ex.reference_text.clone() }
                })
                .collect();
            line.demo_ids = ids;
            line.selection_fallback = fallback;
        }
        let chat = req.build(&self.assets, &g).map_err(|e| format!("prompt: {e}"))?;
        let out = self.gw.chat_complete(&chat).map_err(|e| format!("backend: {e}"))?;
        line.call_id = Some(out.call_id);
        let (hyp, plan, err) = self.postprocess(&out.text, g.len());
        line.raw_output = Some(out.text);
        line.plan = plan;
        if let Some(e) = err {
            return Err(e);
        }
        line.hypothesis = Some(hyp);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub records: usize,
    pub scored: usize,
    pub errors: usize,
    pub bleu: f64,
    pub chrfpp: f64,
    pub by_triplets: BucketReport,
    pub by_diameter: BucketReport,
}

impl EvalReport {
    /// Hex sha256 of the report's JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("report serializes")))
    }
}

/// Scores every line that has a hypothesis and at least one reference.
pub fn evaluate(lines: &[ResultLine], config_hash: &str) -> Result<EvalReport, ExperimentError> {
    let records: Vec<EvalRecord> = lines
        .iter()
        .filter(|l| l.error.is_none() && !l.references.is_empty())
        .filter_map(|l| {
            Some(EvalRecord {
                id: l.id.clone(),
                hypothesis: l.hypothesis.clone()?,
                references: l.references.clone(),
                triplets: l.triplets.clone(),
            })
        })
        .collect();
    Ok(EvalReport {
        config_hash: config_hash.to_string(),
        records: lines.len(),
        scored: records.len(),
        errors: lines.iter().filter(|l| l.error.is_some()).count(),
        bleu: bleu4(&records)?,
        chrfpp: chrfpp(&records)?,
        by_triplets: bucket_report(&records, BucketKey::Triplets, &[])?,
        by_diameter: bucket_report(&records, BucketKey::Diameter, &[])?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub lines: Vec<ResultLine>,
    pub report: EvalReport,
}

impl RunOutcome {
    pub fn errors(&self) -> usize {
        self.lines.iter().filter(|l| l.error.is_some()).count()
    }
}

/// Runs every record through selection, prompting and the backend. Only
/// config, ingestion and pool problems are fatal; per-record failures are
/// written with an `error` field.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome, ExperimentError> {
    cfg.validate()?;
    let mut records = ingest(&cfg.dataset, cfg.adapter, cfg.webnlg_release)?;
    if let Some(n) = cfg.limit {
        records.truncate(n);
    }
    let gw = cfg.gateway()?;
    run_records(cfg, &records, &gw)
}

pub fn run_records(cfg: &ExperimentConfig, records: &[DatasetRecord], gw: &Gateway) -> Result<RunOutcome, ExperimentError> {
    let spec = cfg.selection_spec()?;
    let pool = match (&cfg.pool, cfg.n_shots) {
        (Some(p), n) if n > 0 => {
            let mut pool = DemoPool::load(p)?;
            pool.ensure_clustering(spec.embedding_kind, spec.k, spec.seed)?;
            Some(pool)
        }
        _ => None,
    };
    let mut ctx = Context {
        cfg,
        gw,
        assets: PromptAssets::default(),
        base: cfg.prompt_request()?,
        pool: None,
        spec,
    };
    let queries: Vec<Option<Vec<f32>>> = match &pool {
        None => vec![None; records.len()],
        Some(_) => query_embeddings(&ctx, records)?,
    };
    ctx.pool = pool;
    let slots: Mutex<Vec<Option<ResultLine>>> = Mutex::new(vec![None; records.len()]);
    let next = AtomicUsize::new(0);
    let workers = cfg.max_in_flight.clamp(1, records.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= records.len() {
                    break;
                }
                let line = ctx.run_one(&records[i], queries[i].as_deref());
                slots.lock().unwrap()[i] = Some(line);
            });
        }
    });
    let lines: Vec<ResultLine> = slots.into_inner().unwrap().into_iter().map(|l| l.expect("all ran")).collect();
    for l in lines.iter().filter(|l| l.error.is_some()) {
        tracing::warn!(id = %l.id, error = l.error.as_deref().unwrap_or(""), "record failed");
    }
    let report = evaluate(&lines, &cfg.hash())?;
    Ok(RunOutcome { lines, report })
}

/// Query vectors per record; `None` marks records whose embedding failed.
fn query_embeddings(ctx: &Context, records: &[DatasetRecord]) -> Result<Vec<Option<Vec<f32>>>, ExperimentError> {
    let kind = ctx.spec.embedding_kind;
    let mut inputs = Vec::with_capacity(records.len());
    let mut ok = Vec::with_capacity(records.len());
    for r in records {
        let Some(g) = r.graph() else {
            ok.push(false);
            continue;
        };
        // text similarity needs the query's own zero-shot output
        let text = if kind == EmbeddingKind::Text {
            match ctx.zero_shot_text(&g) {
                Ok(t) if !t.is_empty() => t,
                _ => {
                    ok.push(false);
                    continue;
                }
            }
        } else {
            String::new()
        };
        inputs.push(embedding_input(kind, &g, &text));
        ok.push(true);
    }
    let mut vecs = ctx.gw.embed_texts(&inputs)?.into_iter();
    Ok(ok.into_iter().map(|b| if b { vecs.next() } else { None }).collect())
}

/// Writes `results.jsonl`, `report.json` and the resolved `config.toml`.
pub fn write_outcome(dir: &Path, cfg: &ExperimentConfig, out: &RunOutcome) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("results.jsonl"), &out.lines)?;
    let mut report = serde_json::to_value(&out.report).expect("report serializes");
    report["report_hash"] = out.report.hash().into();
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report).expect("json") + "\n")?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultLine>, ExperimentError> {
    Ok(read_jsonl(path)?)
}

/// Per-record error messages grouped by their prefix, for summaries.
pub fn error_counts(lines: &[ResultLine]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for e in lines.iter().filter_map(|l| l.error.as_deref()) {
        let key = e.split(':').next().unwrap_or(e).to_string();
        *out.entry(key).or_default() += 1;
    }
    out
}
