//! Command-line interface.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gtt_core::attribution::{parse_output, strip_markers, validate};
use gtt_core::curriculum::{build_schedule, ExampleSize, ScheduleKind};
use gtt_core::forge::{self, overlap_check, sample_seeds, ForgeConfig, SourcePair};
use gtt_core::graph::{parse_triplets, TripletFormat};
use gtt_core::metrics::{bucket_report, BucketKey, EvalRecord, ExternalScores};
use gtt_core::prompting::PromptAssets;
use gtt_core::selection::{DemoPool, EmbeddingKind};
use serde::{Deserialize, Serialize};

use crate::experiment::{
    embed_pool, embedding_input, error_counts, evaluate, read_results, run_experiment, select_demos, write_outcome,
    ExperimentConfig,
};
use crate::ingest::{dataset_stats, ingest, write_jsonl, Adapter, WebnlgRelease};

/// Graph-to-text experiments: ingest data, select demonstrations, query
/// backends, score outputs, grow training data and schedule curricula.
#[derive(Debug, Parser)]
#[command(name = "gtt", version)]
pub struct Cli {
    /// Log filter, e.g. `info` or `gtt_core=debug`.
    #[arg(long, global = true, default_value = "warn")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalise a dataset file to JSONL.
    Ingest(IngestArgs),
    /// Embed and cluster a demonstration pool.
    EmbedPool(EmbedPoolArgs),
    /// Print selected demonstration ids per record.
    Select(ExpArgs),
    /// Print the chat request for one record.
    Prompt(PromptArgs),
    /// Run an experiment and write results plus a report.
    Run(ExpArgs),
    /// Parse a reorder-and-attribute output.
    Parse(ParseArgs),
    /// Score a results file.
    Eval(EvalArgs),
    /// Scores per complexity bucket as a table.
    BucketReport(BucketArgs),
    /// Grow attributed training data from one-triplet seeds.
    Forge(ForgeArgs),
    /// Emit a training schedule.
    Curriculum(CurriculumArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    pub path: PathBuf,
    #[arg(long)]
    pub adapter: String,
    #[arg(long, default_value = "2017")]
    pub webnlg_release: String,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print dataset statistics instead of records.
    #[arg(long)]
    pub stats: bool,
}

/// Experiment settings: a TOML file plus flags that override its keys.
#[derive(Debug, Args, Serialize, Default)]
pub struct ExpArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapter: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub webnlg_release: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<i64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub triplet_format: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub linearization: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_shots: Option<i64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level: Option<i64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding_kind: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<i64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection_seed: Option<i64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend_id: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding_model: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend_seed: Option<i64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_retries: Option<i64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_in_flight: Option<i64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<i64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<String>,
    /// Serve only from the cache.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub offline: bool,
}

impl ExpArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        let overrides = toml::Table::try_from(self).context("flags")?;
        let mut cfg = ExperimentConfig::from_toml_with(&text, overrides)?;
        // relative paths in a config file are relative to that file
        if let Some(base) = self.config.as_deref().and_then(Path::parent) {
            let fix = |p: &mut PathBuf, from_flag: bool| {
                if p.is_relative() && !from_flag {
                    *p = base.join(&*p);
                }
            };
            fix(&mut cfg.dataset, self.dataset.is_some());
            if let Some(p) = cfg.pool.as_mut() {
                fix(p, self.pool.is_some());
            }
            if let Some(p) = cfg.output_dir.as_mut() {
                fix(p, self.output_dir.is_some());
            }
            if let Some(p) = cfg.cache_dir.as_mut() {
                fix(p, self.cache_dir.is_some());
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct EmbedPoolArgs {
    #[command(flatten)]
    pub exp: ExpArgs,
    /// Pool source records; defaults to the experiment dataset.
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated embedding kinds.
    #[arg(long, default_value = "graph")]
    pub kinds: String,
}

#[derive(Debug, Args)]
pub struct PromptArgs {
    #[command(flatten)]
    pub exp: ExpArgs,
    /// Record id; the first record when absent.
    #[arg(long)]
    pub id: Option<String>,
}

#[derive(Debug, Args)]
pub struct ParseArgs {
    /// File holding one raw model output.
    pub path: PathBuf,
    /// Input graph as pipe lines, to validate the output against.
    #[arg(long)]
    pub graph: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub results: PathBuf,
    /// Experiment config whose hash is stamped on the report; defaults to
    /// `config.toml` next to the results.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KeyArg {
    Triplets,
    Diameter,
}

#[derive(Debug, Args)]
pub struct BucketArgs {
    pub results: PathBuf,
    #[arg(long, value_enum, default_value = "triplets")]
    pub key: KeyArg,
    /// `name=path` files with one score per scored record.
    #[arg(long)]
    pub external: Vec<String>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ForgeArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CurriculumArgs {
    /// JSONL with `id` and `triplets` per line.
    pub data: PathBuf,
    #[arg(long)]
    pub kind: String,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// One line per phase instead of a single document.
    #[arg(long)]
    pub jsonl: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestSet {
    pub path: PathBuf,
    #[serde(default = "jsonl")]
    pub adapter: Adapter,
}

fn jsonl() -> Adapter {
    Adapter::Jsonl
}

/// Forge job file: pipeline settings plus where data comes from and goes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForgeJob {
    pub source: PathBuf,
    #[serde(default = "jsonl")]
    pub source_adapter: Adapter,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub test_sets: Vec<TestSet>,
    #[serde(flatten)]
    pub forge: ForgeConfig,
}

/// One-triplet records with a reference become seed pairs.
pub fn source_pairs(records: &[crate::ingest::DatasetRecord]) -> Vec<SourcePair> {
    records
        .iter()
        .filter(|r| r.triplets.len() == 1)
        .filter_map(|r| {
            Some(SourcePair {
                id: r.id.clone(),
                triplet: r.triplets[0].clone(),
                text: r.references.first()?.clone(),
            })
        })
        .collect()
}

pub fn run_forge_job(job: &ForgeJob) -> Result<forge::ForgeOutput> {
    let records = ingest(&job.source, job.source_adapter, WebnlgRelease::default())?;
    let seeds = sample_seeds(&source_pairs(&records), job.forge.n_per_relation, job.forge.seed)?;
    let (growth, annotation) = forge::gateways(&job.forge, job.cache_dir.as_deref())?;
    let out = forge::run_forge(&seeds, &job.forge, &growth, &annotation)?;
    out.write(&job.out_dir)?;
    if !job.test_sets.is_empty() {
        let dataset: Vec<_> = out.kept().map(|r| r.graph.clone()).collect();
        let tests = job
            .test_sets
            .iter()
            .map(|t| {
                let recs = ingest(&t.path, t.adapter, WebnlgRelease::default())?;
                let name = t.path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                Ok((name, recs.iter().filter_map(|r| r.graph()).collect()))
            })
            .collect::<Result<Vec<_>>>()?;
        let report = overlap_check(&dataset, &tests);
        std::fs::write(job.out_dir.join("overlap.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(out)
}

fn stdout_line(s: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(s.as_bytes())?;
    if !s.ends_with('\n') {
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Exit code 2 signals validation failures in otherwise completed work.
pub fn execute(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Ingest(a) => {
            let adapter: Adapter = a.adapter.parse().map_err(anyhow::Error::msg)?;
            let release: WebnlgRelease = a.webnlg_release.parse().map_err(anyhow::Error::msg)?;
            let recs = ingest(&a.path, adapter, release)?;
            if a.stats {
                stdout_line(&serde_json::to_string_pretty(&dataset_stats(&recs))?)?;
            } else if let Some(out) = a.out {
                write_jsonl(&out, &recs)?;
            } else {
                for r in &recs {
                    stdout_line(&serde_json::to_string(r)?)?;
                }
            }
            Ok(0)
        }
        Command::EmbedPool(a) => {
            let cfg = a.exp.resolve()?;
            let kinds = a
                .kinds
                .split(',')
                .map(|s| s.trim().parse::<EmbeddingKind>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(anyhow::Error::msg)?;
            if kinds.contains(&EmbeddingKind::Text) {
                tracing::info!("text embeddings use the pool's reference texts");
            }
            let source = a.source.unwrap_or_else(|| cfg.dataset.clone());
            let recs = ingest(&source, cfg.adapter, cfg.webnlg_release)?;
            let pool = embed_pool(&recs, &kinds, cfg.k, cfg.selection_seed, &cfg.gateway()?)?;
            pool.save(&a.out)?;
            eprintln!("pool: {} examples, kinds {:?}", pool.len(), kinds);
            Ok(0)
        }
        Command::Select(a) => {
            let cfg = a.resolve()?;
            cfg.validate()?;
            let Some(pool_path) = &cfg.pool else { bail!("select needs a pool") };
            let spec = cfg.selection_spec()?;
            let mut pool = DemoPool::load(pool_path)?;
            pool.ensure_clustering(spec.embedding_kind, spec.k, spec.seed)?;
            let mut recs = ingest(&cfg.dataset, cfg.adapter, cfg.webnlg_release)?;
            if let Some(n) = cfg.limit {
                recs.truncate(n);
            }
            if spec.embedding_kind == EmbeddingKind::Text {
                bail!("select with text embeddings needs generated query texts; use `run`");
            }
            let gw = cfg.gateway()?;
            let graphs: Vec<_> = recs.iter().filter_map(|r| r.graph().map(|g| (r, g))).collect();
            let inputs: Vec<String> = graphs.iter().map(|(_, g)| embedding_input(spec.embedding_kind, g, "")).collect();
            let vecs = gw.embed_texts(&inputs)?;
            for ((r, _), q) in graphs.iter().zip(vecs) {
                let (ids, fallback) = select_demos(&q, &pool, &spec)?;
                stdout_line(&serde_json::json!({"id": r.id, "demo_ids": ids, "fallback": fallback}).to_string())?;
            }
            Ok(0)
        }
        Command::Prompt(a) => {
            let cfg = a.exp.resolve()?;
            let recs = ingest(&cfg.dataset, cfg.adapter, cfg.webnlg_release)?;
            let rec = match &a.id {
                Some(id) => recs.iter().find(|r| &r.id == id).with_context(|| format!("no record {id}"))?,
                None => recs.first().context("empty dataset")?,
            };
            let g = rec.graph().context("record has no triplets")?;
            let req = cfg.prompt_request()?.build(&PromptAssets::default(), &g)?;
            stdout_line(&serde_json::to_string_pretty(&req)?)?;
            Ok(0)
        }
        Command::Run(a) => {
            let cfg = a.resolve()?;
            let out = run_experiment(&cfg)?;
            let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("results"));
            write_outcome(&dir, &cfg, &out)?;
            eprintln!(
                "{} records, {} scored, {} errors; BLEU {:.2} chrF++ {:.2}; report {}",
                out.report.records,
                out.report.scored,
                out.errors(),
                out.report.bleu,
                out.report.chrfpp,
                out.report.hash()
            );
            for (k, n) in error_counts(&out.lines) {
                eprintln!("  {k}: {n}");
            }
            Ok(if out.errors() > 0 { 2 } else { 0 })
        }
        Command::Parse(a) => {
            let raw = std::fs::read_to_string(&a.path)?;
            let parsed = parse_output(&raw)?;
            let stripped = strip_markers(&parsed.text);
            let mut doc = serde_json::json!({
                "plan": parsed.plan.indices(),
                "text": parsed.text.raw(),
                "markers": parsed.text.indices(),
                "stripped": stripped,
            });
            let mut clean = true;
            if let Some(gp) = a.graph {
                let g = parse_triplets(&std::fs::read_to_string(gp)?, TripletFormat::Pipe)?;
                let report = validate(&parsed, &g);
                clean = report.is_clean();
                doc["alignment"] = serde_json::to_value(&report)?;
            }
            stdout_line(&serde_json::to_string_pretty(&doc)?)?;
            Ok(if clean { 0 } else { 2 })
        }
        Command::Eval(a) => {
            let lines = read_results(&a.results)?;
            let cfg_path = a.config.or_else(|| a.results.parent().map(|d| d.join("config.toml")).filter(|p| p.exists()));
            let hash = match cfg_path {
                Some(p) => ExperimentConfig::from_toml_with(&std::fs::read_to_string(&p)?, toml::Table::new())?.hash(),
                None => String::new(),
            };
            let report = evaluate(&lines, &hash)?;
            let mut doc = serde_json::to_value(&report)?;
            doc["report_hash"] = report.hash().into();
            stdout_line(&serde_json::to_string_pretty(&doc)?)?;
            Ok(if report.errors > 0 { 2 } else { 0 })
        }
        Command::BucketReport(a) => {
            let lines = read_results(&a.results)?;
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
            let external = a
                .external
                .iter()
                .map(|spec| {
                    let (name, path) = spec.split_once('=').context("--external expects name=path")?;
                    let per_record = std::fs::read_to_string(path)?
                        .lines()
                        .filter(|l| !l.trim().is_empty())
                        .map(|l| l.trim().parse::<f64>().with_context(|| format!("{path}: bad score {l:?}")))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(ExternalScores { name: name.into(), per_record })
                })
                .collect::<Result<Vec<_>>>()?;
            let key = match a.key {
                KeyArg::Triplets => BucketKey::Triplets,
                KeyArg::Diameter => BucketKey::Diameter,
            };
            let report = bucket_report(&records, key, &external)?;
            if a.json {
                stdout_line(&serde_json::to_string_pretty(&report)?)?;
            } else {
                stdout_line(&report.to_table())?;
            }
            Ok(0)
        }
        Command::Forge(a) => {
            let text = std::fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
            let mut job: ForgeJob = toml::from_str(&text)?;
            let base = a.config.parent().unwrap_or(Path::new(""));
            for p in [&mut job.source, &mut job.out_dir] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            if let Some(p) = job.cache_dir.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
            for t in &mut job.test_sets {
                if t.path.is_relative() {
                    t.path = base.join(&t.path);
                }
            }
            if let Some(o) = a.out_dir {
                job.out_dir = o;
            }
            let out = run_forge_job(&job)?;
            let m = &out.manifest;
            eprintln!(
                "{} seeds, {} processed, {} kept ({} train / {} dev), {} rejected",
                m.seeds, m.processed, m.kept, m.train, m.dev, m.rejected
            );
            Ok(0)
        }
        Command::Curriculum(a) => {
            let kind: ScheduleKind = a.kind.parse()?;
            let values: Vec<serde_json::Value> = crate::ingest::read_jsonl(&a.data)?;
            let data = values
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let id = v["id"].as_str().with_context(|| format!("line {}: missing id", i + 1))?;
                    let n = v["triplets"].as_array().with_context(|| format!("line {}: missing triplets", i + 1))?.len();
                    Ok(ExampleSize { id: id.into(), n_triplets: n })
                })
                .collect::<Result<Vec<_>>>()?;
            let schedule = build_schedule(&data, kind, a.k, a.seed)?;
            if a.jsonl {
                stdout_line(&schedule.to_jsonl())?;
            } else {
                stdout_line(&serde_json::to_string_pretty(&schedule)?)?;
            }
            Ok(0)
        }
    }
}

pub fn main_with(args: impl IntoIterator<Item = std::ffi::OsString>) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let _ = tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_new(&cli.log).unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .try_init();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Counts per rejection reason in a forge manifest, by name.
pub fn reason_names(m: &forge::ForgeManifest) -> BTreeMap<&'static str, usize> {
    m.rejection_counts.iter().map(|(r, n)| (r.as_str(), *n)).collect()
}
