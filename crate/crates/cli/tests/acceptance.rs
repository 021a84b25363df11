//! Acceptance criteria, one test each. Every test prints a single
//! `criterion N ... PASS|FAIL` line before asserting.
//!
//! Criteria 1 and 2 need the released datasets under `GTT_DATA_DIR`:
//! `dart/test.json`, `webnlg17/test.xml`, `webnlg20/test.xml`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use gtt::experiment::{embed_pool, run_records, ExperimentConfig};
use gtt::ingest::{dataset_stats, ingest, write_jsonl, Adapter, DatasetStats, Partition, WebnlgRelease};
use gtt::synthetic;
use gtt_core::attribution::{parse_output, render_target, validate, AttributedText, ReorderPlan};
use gtt_core::curriculum::{bucketize, difficulty_sort, make_schedule, ExampleSize, ScheduleKind};
use gtt_core::forge::{self, sample_seeds, FilterPolicy, ForgeConfig};
use gtt_core::gateway::{mock::verbalize, BackendConfig, Gateway, ResponseCache};
use gtt_core::graph::{graph_stats, KnowledgeGraph, Triplet};
use gtt_core::metrics::{bleu4, chrfpp, EvalRecord};
use gtt_core::selection::{rank_by_similarity, select_ddd, DemoExample, DemoPool, EmbeddingKind};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u8, name: &str, pass: bool, detail: &str) {
    println!("criterion {n} {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
}

/// Prints the verdict line and then fails the test with the first problem.
fn conclude(n: u8, name: &str, problems: &[String], detail: &str) {
    report(n, name, problems.is_empty(), if problems.is_empty() { detail } else { &problems[0] });
    assert!(problems.is_empty(), "{}", problems.join("\n"));
}

fn data_dir() -> Option<PathBuf> {
    std::env::var_os("GTT_DATA_DIR").map(PathBuf::from)
}

fn load(rel: &str, adapter: Adapter, release: WebnlgRelease) -> Result<DatasetStats, String> {
    let dir = data_dir().ok_or("GTT_DATA_DIR is not set; released datasets unavailable")?;
    let path = dir.join(rel);
    let recs = ingest(&path, adapter, release).map_err(|e| e.to_string())?;
    Ok(dataset_stats(&recs))
}

fn mean_of(recs: &[gtt::ingest::DatasetRecord], p: Partition) -> f64 {
    let sel: Vec<_> = recs.iter().filter(|r| r.partition == Some(p)).collect();
    sel.iter().map(|r| r.triplets.len()).sum::<usize>() as f64 / sel.len().max(1) as f64
}

#[test]
fn criterion_1_dataset_statistics() {
    let start = Instant::now();
    let mut problems = Vec::new();
    match load("dart/test.json", Adapter::DartJson, WebnlgRelease::V2017) {
        Ok(s) => {
            if s.records != 5097 {
                problems.push(format!("DART test has {} records, expected 5097", s.records));
            }
            if (s.mean_triplets - 3.62).abs() > 0.01 {
                problems.push(format!("DART mean triplets {:.4}, expected 3.62 ± 0.01", s.mean_triplets));
            }
        }
        Err(e) => problems.push(e),
    }
    let expect = [
        ("webnlg17/test.xml", WebnlgRelease::V2017, 971, 891, 3.02, 2.75),
        ("webnlg20/test.xml", WebnlgRelease::V2020, 883, 896, 3.63, 2.71),
    ];
    for (rel, release, seen, unseen, m_seen, m_unseen) in expect {
        let Some(dir) = data_dir() else { break };
        match ingest(&dir.join(rel), Adapter::WebnlgXml, release) {
            Ok(recs) => {
                let s = dataset_stats(&recs);
                if (s.seen, s.unseen) != (Some(seen), Some(unseen)) {
                    problems.push(format!("{rel}: seen/unseen {:?}/{:?}, expected {seen}/{unseen}", s.seen, s.unseen));
                }
                for (p, want) in [(Partition::Seen, m_seen), (Partition::Unseen, m_unseen)] {
                    let got = mean_of(&recs, p);
                    if (got - want).abs() > 0.01 {
                        problems.push(format!("{rel}: {p:?} mean triplets {got:.4}, expected {want}"));
                    }
                }
            }
            Err(e) => problems.push(e.to_string()),
        }
    }
    let took = start.elapsed();
    if took > Duration::from_secs(30) {
        problems.push(format!("took {took:?}, limit 30 s"));
    }
    conclude(1, "dataset statistics", &problems, &format!("{took:?}"));
}

#[test]
fn criterion_2_complexity_buckets() {
    let start = Instant::now();
    let mut problems = Vec::new();
    match load("dart/test.json", Adapter::DartJson, WebnlgRelease::V2017) {
        Ok(s) => {
            let want: BTreeMap<String, usize> =
                [("1", 848), ("2", 797), ("3", 821), ("4", 869), ("5+", 1762)].into_iter().map(|(k, v)| (k.to_string(), v)).collect();
            if s.triplet_buckets != want {
                problems.push(format!("triplet buckets {:?}, expected {want:?}", s.triplet_buckets));
            }
            println!("  diameter buckets (not asserted): {:?}", s.diameter_buckets);
        }
        Err(e) => problems.push(e),
    }
    let took = start.elapsed();
    if took > Duration::from_secs(10) {
        problems.push(format!("took {took:?}, limit 10 s"));
    }
    conclude(2, "complexity bucketing", &problems, &format!("{took:?}"));
}

const REFERENCE_BLEU: f64 = 66.35807659905059;
const REFERENCE_CHRFPP: f64 = 77.09225979322713;

#[test]
fn criterion_3_metrics_oracle() {
    let corpus: Vec<EvalRecord> = include_str!("../../core/tests/fixtures/metrics_corpus.jsonl")
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let mut problems = Vec::new();
    if corpus.len() != 200 {
        problems.push(format!("fixture has {} records", corpus.len()));
    }
    let (b, c) = (bleu4(&corpus).unwrap(), chrfpp(&corpus).unwrap());
    if (b - REFERENCE_BLEU).abs() > 0.1 {
        problems.push(format!("BLEU {b} vs reference {REFERENCE_BLEU}"));
    }
    if (c - REFERENCE_CHRFPP).abs() > 0.1 {
        problems.push(format!("chrF++ {c} vs reference {REFERENCE_CHRFPP}"));
    }
    let identity: Vec<EvalRecord> = corpus
        .iter()
        .map(|r| EvalRecord { hypothesis: r.references[0].clone(), ..r.clone() })
        .collect();
    let (bi, ci) = (bleu4(&identity).unwrap(), chrfpp(&identity).unwrap());
    if bi != 100.0 || ci != 100.0 {
        problems.push(format!("identity corpus scored BLEU {bi} chrF++ {ci}"));
    }
    conclude(
        3,
        "metrics oracle equivalence",
        &problems,
        &format!("BLEU Δ {:.2e}, chrF++ Δ {:.2e}", (b - REFERENCE_BLEU).abs(), (c - REFERENCE_CHRFPP).abs()),
    );
}

fn random_pool(rng: &mut ChaCha8Rng, m: usize, dim: usize) -> (DemoPool, Vec<f32>) {
    let examples = (0..m)
        .map(|i| DemoExample {
            id: format!("ex{i:04}"),
            graph: KnowledgeGraph::new(vec![Triplet::new(&format!("e{i}"), "r", "x").unwrap()]).unwrap(),
            reference_text: format!("text {i}"),
        })
        .collect();
    let mut pool = DemoPool::new(examples).unwrap();
    let vecs: Vec<Vec<f32>> = (0..m).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    pool.set_embeddings(EmbeddingKind::Graph, vecs).unwrap();
    let q = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    (pool, q)
}

fn scaled(pool: &DemoPool, c: f32) -> DemoPool {
    let mut p = pool.clone();
    let v: Vec<Vec<f32>> = pool.embeddings(EmbeddingKind::Graph).unwrap().iter().map(|v| v.iter().map(|x| x * c).collect()).collect();
    p.set_embeddings(EmbeddingKind::Graph, v).unwrap();
    p
}

#[test]
fn criterion_4_ddd_contract() {
    let kind = EmbeddingKind::Graph;
    let mut problems = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(44);

    // one cluster of 100: picks must be similarity ranks 25, 50, 75
    let (mut pool, q) = random_pool(&mut rng, 100, 16);
    pool.cluster(kind, 1, 0).unwrap();
    let ranked = rank_by_similarity(&q, &pool, kind).unwrap();
    let picked = select_ddd(&q, &pool, 3, 1, kind).unwrap();
    let want: Vec<String> = [25, 50, 75].iter().map(|r| ranked[r - 1].clone()).collect();
    if picked != want {
        problems.push(format!("m=100 n=3 picked {picked:?}, expected ranks 25/50/75 {want:?}"));
    }

    let start = Instant::now();
    for case in 0..1000 {
        let m = rng.random_range(12..80);
        let k = rng.random_range(1..=4);
        let (mut pool, q) = random_pool(&mut rng, m, 8);
        pool.cluster(kind, k, case).unwrap();
        let base = select_ddd(&q, &pool, 3, k, kind);

        let c: f32 = [0.001, 0.5, 3.0, 1000.0][case as usize % 4];
        let mut s = scaled(&pool, c);
        s.cluster(kind, k, case).unwrap();
        let q_scaled: Vec<f32> = q.iter().map(|x| x * c).collect();
        let after_scale = select_ddd(&q_scaled, &s, 3, k, kind);

        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        let shuffled = pool.permuted(&order);
        let after_shuffle = select_ddd(&q, &shuffled, 3, k, kind);

        let show = |r: &Result<Vec<String>, _>| format!("{r:?}");
        if show(&base) != show(&after_scale) {
            problems.push(format!("case {case}: scaling by {c} changed {} to {}", show(&base), show(&after_scale)));
        }
        if show(&base) != show(&after_shuffle) {
            problems.push(format!("case {case}: reordering changed {} to {}", show(&base), show(&after_shuffle)));
        }
        if let Ok(ids) = &base {
            if ids.len() != 3 || ids.iter().collect::<HashSet<_>>().len() != 3 {
                problems.push(format!("case {case}: not 3 distinct ids {ids:?}"));
            }
        }
        if problems.len() > 5 {
            break;
        }
    }
    let took = start.elapsed();
    if took > Duration::from_secs(5) {
        problems.push(format!("1000 cases took {took:?}, limit 5 s"));
    }
    conclude(4, "DDD contract", &problems, &format!("ranks 25/50/75, 1000 cases in {took:?}"));
}

const TWITTER_GOLD: &str = "The correct triplet order is: \n\
Twitter | users | 330 million (1)\n\
Internet forum | communication platform | online discussion platform (4)\n\
Twitter | category | Internet forum (3)\n\
Twitter | founding year | 2006 (2) Then The generated text is: Twitter has 330 million users (1), serving as an online communication platform for discussions (4), is categorized as an internet forum (3), and was founded in 2006 (2).";

const FOUNTAIN_BASELINE: &str = "The correct triplet order is:\n\
Albert Jennings Fountain | DeathPlace | New Mexico Territory (0)\n\
Albert Jennings Fountain | BirthPlace | New York City (1)\n\
Albert Jennings Fountain | BirthPlace | Staten Island (2)\n\
Then the generated text is: Albert Jennings Fountain was born in New York City (1), and later moved to New Mexico Territory (0) where he passed away. According to the knowledge triplets, he was born on Staten Island (2) $$$";

fn graph(ts: &[(&str, &str, &str)]) -> KnowledgeGraph {
    KnowledgeGraph::new(ts.iter().map(|(h, r, t)| Triplet::new(h, r, t).unwrap()).collect()).unwrap()
}

#[test]
fn criterion_5_attribution_grammar() {
    let mut problems = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..500 {
        let n = rng.random_range(1..=10);
        let g = synthetic::connected_graph(n, &mut rng);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let plan = ReorderPlan::from_order(&g, &order);
        let text: Vec<String> = order
            .iter()
            .map(|&i| {
                let s = verbalize(&g.triplets()[i], case);
                format!("{} ({}).", s.trim_end_matches('.'), i + 1)
            })
            .collect();
        let text = AttributedText::new(text.join(" "), n);
        let rendered = render_target(&plan, &text).unwrap();
        match parse_output(&rendered) {
            Ok(p) if p.plan == plan && p.text == text => {}
            other => problems.push(format!("case {case}: round trip gave {other:?}")),
        }
    }

    let twitter = graph(&[
        ("Twitter", "users", "330 million"),
        ("Twitter", "founding year", "2006"),
        ("Twitter", "category", "Internet forum"),
        ("Internet forum", "communication platform", "online discussion platform"),
    ]);
    let p = parse_output(TWITTER_GOLD).unwrap();
    let r = validate(&p, &twitter);
    if p.plan.indices() != [1, 4, 3, 2] || !r.is_clean() {
        problems.push(format!("Twitter transcript: plan {:?}, clean {}", p.plan.indices(), r.is_clean()));
    }

    let fountain = graph(&[
        ("Albert Jennings Fountain", "DeathPlace", "New Mexico Territory"),
        ("Albert Jennings Fountain", "BirthPlace", "New York City"),
        ("Albert Jennings Fountain", "BirthPlace", "Staten Island"),
    ]);
    let p = parse_output(FOUNTAIN_BASELINE).unwrap();
    let r = validate(&p, &fountain);
    if r.hallucinated_indices != BTreeSet::from([0]) || r.missing_indices != BTreeSet::from([3]) {
        problems.push(format!(
            "Fountain baseline: hallucinated {:?}, missing {:?}",
            r.hallucinated_indices, r.missing_indices
        ));
    }
    conclude(5, "attribution grammar", &problems, "500 round trips, both transcripts");
}

#[test]
fn criterion_6_curriculum_laws() {
    let mut problems = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let start = Instant::now();
    for case in 0..10_000u64 {
        let len = rng.random_range(10..120);
        let data: Vec<ExampleSize> = (0..len)
            .map(|i| ExampleSize { id: format!("{case}-{i:03}"), n_triplets: rng.random_range(1..=12) })
            .collect();
        let k = (case % 10 + 1) as usize;
        let sorted = difficulty_sort(&data);
        let b = bucketize(&sorted, k).unwrap();
        let all: HashSet<&String> = sorted.iter().collect();

        let one = make_schedule(ScheduleKind::OnePass, &b, case);
        let flat: Vec<&String> = one.phases.iter().flatten().collect();
        if flat.len() != len || flat.iter().copied().collect::<HashSet<_>>() != all {
            problems.push(format!("case {case}: OnePass phases not a disjoint cover"));
        }

        let baby = make_schedule(ScheduleKind::BabySteps, &b, case);
        let monotone = baby.phases.windows(2).all(|w| {
            let next: HashSet<&String> = w[1].iter().collect();
            w[0].iter().all(|id| next.contains(id))
        });
        let full = |p: &Vec<String>| p.len() == len && p.iter().collect::<HashSet<_>>() == all;
        if baby.phases.len() != k + 1 || !monotone || !full(&baby.phases[k]) || baby.phases[k] != baby.phases[k - 1] {
            problems.push(format!("case {case}: BabySteps laws broken"));
        }

        let ann = make_schedule(ScheduleKind::Annealing, &b, case);
        let mut seen = 0;
        for (j, phase) in ann.phases.iter().enumerate() {
            let extra = &phase[b[j].len()..];
            let prior: HashSet<&String> = b[..j].iter().flatten().collect();
            if phase[..b[j].len()] != b[j][..]
                || extra.len() != seen / k
                || !extra.iter().all(|id| prior.contains(id))
                || extra.iter().collect::<HashSet<_>>().len() != extra.len()
            {
                problems.push(format!("case {case}: Annealing phase {} breaks the floor rule", j + 1));
                break;
            }
            seen += b[j].len();
        }
        if problems.len() > 5 {
            break;
        }
    }
    conclude(6, "curriculum laws", &problems, &format!("10k datasets, k in 1..=10, {:?}", start.elapsed()));
}

fn forge_config() -> ForgeConfig {
    ForgeConfig {
        n_per_relation: 50,
        max_triplets: 6,
        seed: 7,
        validation_retries: 3,
        dev_fraction: 0.033,
        filter: FilterPolicy::default(),
        growth_backend: BackendConfig::mock(17),
        annotation_backend: None,
    }
}

fn dir_bytes(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect()
}

#[test]
fn criterion_7_forge_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = forge_config();
    let pairs = synthetic::seed_pairs(50, 70);
    let mut problems = Vec::new();
    // n_per_relation exceeds every relation group, so all 50 pairs are used
    let seeds = sample_seeds(&pairs, cfg.n_per_relation, cfg.seed).unwrap();
    if seeds.len() != 50 {
        problems.push(format!("{} seeds sampled, expected 50", seeds.len()));
    }
    let cache = tmp.path().join("cache");
    let run = |out: &str| {
        let (g, a) = forge::gateways(&cfg, Some(&cache)).unwrap();
        let o = forge::run_forge(&seeds, &cfg, &g, &a).unwrap();
        o.write(&tmp.path().join(out)).unwrap();
        (o, g.network_calls() + a.network_calls())
    };
    let (cold, cold_calls) = run("cold");
    let (_, warm_calls) = run("warm");
    let m = &cold.manifest;
    let bad: Vec<&str> = cold
        .kept()
        .filter(|r| {
            let n = r.graph.len();
            let markers: BTreeSet<usize> = AttributedText::new(r.text.clone(), n).indices().into_iter().collect();
            graph_stats(&r.graph).n_components != 1 || markers != (1..=n).collect() || r.stage != n || n > 6
        })
        .map(|r| r.id.as_str())
        .collect();
    if !bad.is_empty() {
        problems.push(format!("{} kept records fail connectivity or coverage, e.g. {}", bad.len(), bad[0]));
    }
    if m.kept == 0 {
        problems.push("no records kept".into());
    }
    if m.kept + m.rejected != m.processed {
        problems.push(format!("kept {} + rejected {} != processed {}", m.kept, m.rejected, m.processed));
    }
    if dir_bytes(&tmp.path().join("cold")) != dir_bytes(&tmp.path().join("warm")) {
        problems.push("warm-cache rerun differs from the first run".into());
    }
    if warm_calls != 0 {
        problems.push(format!("warm rerun made {warm_calls} backend calls"));
    }
    conclude(
        7,
        "forge pipeline",
        &problems,
        &format!(
            "{} processed, {} kept, {} rejected, {} cold calls, byte-identical warm rerun",
            m.processed, m.kept, m.rejected, cold_calls
        ),
    );
}

#[test]
fn criterion_8_end_to_end_offline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let test = synthetic::dataset(100, 7, 80);
    let train = synthetic::dataset(400, 7, 81);
    write_jsonl(&d.join("test.jsonl"), &test).unwrap();
    let mut problems = Vec::new();

    let mut cfg = ExperimentConfig::minimal(d.join("test.jsonl"));
    cfg.backend_seed = 3;
    let gw = Gateway::new(cfg.backend()).unwrap().with_cache(ResponseCache::new(d.join("cache")));
    let pool = embed_pool(&train, &[EmbeddingKind::Graph], cfg.k, 0, &gw).unwrap();
    pool.save(&d.join("pool.jsonl")).unwrap();

    let mut ddd = cfg.clone();
    ddd.n_shots = 3;
    ddd.pool = Some(d.join("pool.jsonl"));
    let mut hashes = Vec::new();
    for (name, c) in [("zero-shot", &cfg), ("DDD 3-shot", &ddd)] {
        let mut runs = Vec::new();
        for _ in 0..2 {
            let gw = Gateway::new(c.backend()).unwrap();
            runs.push(run_records(c, &test, &gw).unwrap());
        }
        let (a, b) = (&runs[0], &runs[1]);
        if a.report.hash() != b.report.hash() || a.lines != b.lines {
            problems.push(format!("{name}: runs differ"));
        }
        if a.report.scored != 100 || a.errors() != 0 {
            problems.push(format!("{name}: {} scored, {} errors", a.report.scored, a.errors()));
        }
        if c.n_shots == 3 && a.lines.iter().any(|l| l.demo_ids.len() != 3) {
            problems.push(format!("{name}: some records lack 3 demos"));
        }
        hashes.push(format!("{name} BLEU {:.2} hash {}", a.report.bleu, &a.report.hash()[..12]));
    }
    conclude(8, "end-to-end offline run", &problems, &hashes.join(", "));
}
