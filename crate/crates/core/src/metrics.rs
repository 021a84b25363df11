//! Corpus BLEU-4 and chrF++ with multiple references, plus per-bucket
//! reports keyed by triplet count or graph diameter.
//!
//! Both scorers follow sacrebleu's defaults: BLEU uses the international
//! tokenizer without smoothing and chrF++ uses character order 6, word
//! order 2 and beta 2.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::process::{Command, Stdio};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{graph_stats, Diameter, GraphStats, KnowledgeGraph, Triplet};

pub const BLEU_ORDER: usize = 4;
pub const CHAR_ORDER: usize = 6;
pub const WORD_ORDER: usize = 2;
pub const BETA: f64 = 2.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no records to score")]
    EmptyCorpus,
    #[error("record {0} has no references")]
    NoReferences(String),
    #[error("external scorer {name}: {reason}")]
    External { name: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub hypothesis: String,
    pub references: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub triplets: Vec<Triplet>,
}

impl EvalRecord {
    /// Structure of the deduplicated graph; `n_triplets` keeps the raw count.
    pub fn graph_stats(&self) -> Option<GraphStats> {
        KnowledgeGraph::dedup(self.triplets.clone()).ok().map(|g| GraphStats {
            n_triplets: self.triplets.len(),
            ..graph_stats(&g)
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub lowercase: bool,
}

fn check(records: &[EvalRecord]) -> Result<(), MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    if let Some(r) = records.iter().find(|r| r.references.is_empty()) {
        return Err(MetricsError::NoReferences(r.id.clone()));
    }
    Ok(())
}

static INTL_RULES: LazyLock<[(Regex, &'static str); 3]> = LazyLock::new(|| {
    [
        (Regex::new(r"(\P{N})(\p{P})").unwrap(), "${1} ${2} "),
        (Regex::new(r"(\p{P})(\P{N})").unwrap(), " ${1} ${2}"),
        (Regex::new(r"(\p{S})").unwrap(), " ${1} "),
    ]
});

/// International BLEU tokenization: punctuation is split off unless it sits
/// between digits; symbols are always split.
pub fn tokenize_intl(line: &str) -> Vec<String> {
    let mut s = line.trim_end().to_string();
    for (re, rep) in INTL_RULES.iter() {
        s = re.replace_all(&s, *rep).into_owned();
    }
    s.split_whitespace().map(str::to_string).collect()
}

fn ngram_counts<T: Eq + std::hash::Hash + Clone>(tokens: &[T], n: usize) -> HashMap<Vec<T>, u64> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub sys_len: u64,
    pub ref_len: u64,
    pub correct: [u64; BLEU_ORDER],
    pub total: [u64; BLEU_ORDER],
}

impl std::ops::AddAssign for BleuStats {
    fn add_assign(&mut self, o: Self) {
        self.sys_len += o.sys_len;
        self.ref_len += o.ref_len;
        for i in 0..BLEU_ORDER {
            self.correct[i] += o.correct[i];
            self.total[i] += o.total[i];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub score: f64,
    pub precisions: [f64; BLEU_ORDER],
    pub brevity_penalty: f64,
    pub sys_len: u64,
    pub ref_len: u64,
}

fn closest_ref_len(hyp_len: usize, ref_lens: &[usize]) -> usize {
    let mut best: Option<(usize, usize)> = None;
    for &r in ref_lens {
        let d = hyp_len.abs_diff(r);
        best = match best {
            None => Some((d, r)),
            Some((bd, br)) if d < bd || (d == bd && r < br) => Some((d, r)),
            keep => keep,
        };
    }
    best.map_or(0, |(_, r)| r)
}

fn prepare(s: &str, opts: MetricOptions) -> String {
    if opts.lowercase {
        s.to_lowercase()
    } else {
        s.to_string()
    }
}

pub fn bleu_segment_stats(hypothesis: &str, references: &[String], opts: MetricOptions) -> BleuStats {
    let hyp = tokenize_intl(&prepare(hypothesis, opts));
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize_intl(&prepare(r, opts))).collect();
    let mut stats = BleuStats {
        sys_len: hyp.len() as u64,
        ref_len: closest_ref_len(hyp.len(), &refs.iter().map(Vec::len).collect::<Vec<_>>()) as u64,
        ..Default::default()
    };
    for n in 1..=BLEU_ORDER {
        let mut max_ref: HashMap<Vec<String>, u64> = HashMap::new();
        for r in &refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        for (g, c) in ngram_counts(&hyp, n) {
            stats.total[n - 1] += c;
            if let Some(rc) = max_ref.get(&g) {
                stats.correct[n - 1] += c.min(*rc);
            }
        }
    }
    stats
}

/// Floor used in place of log(0), as in sacrebleu.
const LOG_ZERO: f64 = -9_999_999_999.0;

pub fn bleu_from_stats(s: &BleuStats) -> BleuScore {
    let mut out = BleuScore {
        score: 0.0,
        precisions: [0.0; BLEU_ORDER],
        brevity_penalty: 1.0,
        sys_len: s.sys_len,
        ref_len: s.ref_len,
    };
    if s.sys_len < s.ref_len {
        out.brevity_penalty = if s.sys_len > 0 {
            (1.0 - s.ref_len as f64 / s.sys_len as f64).exp()
        } else {
            0.0
        };
    }
    if s.correct.iter().all(|&c| c == 0) {
        return out;
    }
    for n in 0..BLEU_ORDER {
        if s.total[n] == 0 {
            break;
        }
        if s.correct[n] > 0 {
            out.precisions[n] = 100.0 * s.correct[n] as f64 / s.total[n] as f64;
        }
    }
    let log_sum: f64 = out
        .precisions
        .iter()
        .map(|&p| if p == 0.0 { LOG_ZERO } else { p.ln() })
        .sum();
    // exp(ln 100) overshoots 100 by one ulp
    out.score = (out.brevity_penalty * (log_sum / BLEU_ORDER as f64).exp()).min(100.0);
    out
}

pub fn bleu4_detailed(records: &[EvalRecord], opts: MetricOptions) -> Result<BleuScore, MetricsError> {
    check(records)?;
    let mut total = BleuStats::default();
    for r in records {
        total += bleu_segment_stats(&r.hypothesis, &r.references, opts);
    }
    Ok(bleu_from_stats(&total))
}

/// Corpus BLEU-4 in `[0, 100]`.
pub fn bleu4(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    bleu4_detailed(records, MetricOptions::default()).map(|s| s.score)
}

const CHRF_PUNCTS: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";

/// Words with one leading or trailing ASCII punctuation mark split off.
fn chrf_words(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    for w in s.split_whitespace() {
        let chars: Vec<char> = w.chars().collect();
        if chars.len() == 1 {
            out.push(w.to_string());
        } else if CHRF_PUNCTS.contains(chars[chars.len() - 1]) {
            out.push(chars[..chars.len() - 1].iter().collect());
            out.push(chars[chars.len() - 1].to_string());
        } else if CHRF_PUNCTS.contains(chars[0]) {
            out.push(chars[0].to_string());
            out.push(chars[1..].iter().collect());
        } else {
            out.push(w.to_string());
        }
    }
    out
}

type Counts = Vec<HashMap<Vec<String>, u64>>;

fn chrf_ngrams(s: &str) -> Counts {
    let chars: Vec<String> = s.split_whitespace().flat_map(|w| w.chars()).map(String::from).collect();
    let words = chrf_words(s);
    let mut out: Counts = (1..=CHAR_ORDER).map(|n| ngram_counts(&chars, n)).collect();
    out.extend((1..=WORD_ORDER).map(|n| ngram_counts(&words, n)));
    out
}

/// `[hyp, ref, match]` counts per order: six character orders then two word orders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChrfStats(pub Vec<[u64; 3]>);

impl Default for ChrfStats {
    fn default() -> Self {
        Self(vec![[0; 3]; CHAR_ORDER + WORD_ORDER])
    }
}

impl std::ops::AddAssign<&ChrfStats> for ChrfStats {
    fn add_assign(&mut self, o: &ChrfStats) {
        for (a, b) in self.0.iter_mut().zip(&o.0) {
            for k in 0..3 {
                a[k] += b[k];
            }
        }
    }
}

fn match_stats(hyp: &Counts, r: &Counts) -> ChrfStats {
    ChrfStats(
        hyp.iter()
            .zip(r)
            .map(|(h, r)| {
                let mut hyp_count = 0;
                let mut matched = 0;
                for (g, c) in h {
                    hyp_count += c;
                    if let Some(rc) = r.get(g) {
                        matched += c.min(rc);
                    }
                }
                let ref_count: u64 = r.values().sum();
                [if r.is_empty() { 0 } else { hyp_count }, ref_count, matched]
            })
            .collect(),
    )
}

/// F-beta over precision and recall averaged across the orders where both
/// sides have n-grams.
pub fn chrf_from_stats(s: &ChrfStats) -> f64 {
    let factor = BETA * BETA;
    let (mut avg_p, mut avg_r, mut eff) = (0.0, 0.0, 0usize);
    for &[h, r, m] in &s.0 {
        if h > 0 && r > 0 {
            avg_p += m as f64 / h as f64;
            avg_r += m as f64 / r as f64;
            eff += 1;
        }
    }
    if eff == 0 {
        return 0.0;
    }
    avg_p /= eff as f64;
    avg_r /= eff as f64;
    if avg_p + avg_r == 0.0 {
        return 0.0;
    }
    (100.0 * (1.0 + factor) * avg_p * avg_r / (factor * avg_p + avg_r)).min(100.0)
}

/// Statistics against the single reference with the best sentence score;
/// the first reference wins ties.
pub fn chrf_segment_stats(hypothesis: &str, references: &[String], opts: MetricOptions) -> ChrfStats {
    let hyp = chrf_ngrams(&prepare(hypothesis, opts));
    let mut best: Option<(f64, ChrfStats)> = None;
    for r in references {
        let stats = match_stats(&hyp, &chrf_ngrams(&prepare(r, opts)));
        let f = chrf_from_stats(&stats);
        if best.as_ref().is_none_or(|(bf, _)| f > *bf) {
            best = Some((f, stats));
        }
    }
    best.map(|(_, s)| s).unwrap_or_default()
}

pub fn chrfpp_with(records: &[EvalRecord], opts: MetricOptions) -> Result<f64, MetricsError> {
    check(records)?;
    let mut total = ChrfStats::default();
    for r in records {
        total += &chrf_segment_stats(&r.hypothesis, &r.references, opts);
    }
    Ok(chrf_from_stats(&total))
}

/// Corpus chrF++ in `[0, 100]`.
pub fn chrfpp(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    chrfpp_with(records, MetricOptions::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BucketKey {
    Triplets,
    Diameter,
}

impl std::str::FromStr for BucketKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "triplets" => Ok(Self::Triplets),
            "diameter" => Ok(Self::Diameter),
            _ => Err(format!("unknown bucket key {s:?}")),
        }
    }
}

/// Per-record scores from a scorer outside this crate, averaged per bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalScores {
    pub name: String,
    pub per_record: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket: String,
    pub count: usize,
    pub bleu: f64,
    pub chrfpp: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub external: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub key: BucketKey,
    pub rows: Vec<BucketRow>,
    pub total: BucketRow,
}

fn bucket_label(key: BucketKey, stats: &GraphStats) -> String {
    match key {
        BucketKey::Triplets => stats.triplet_bucket().to_string(),
        BucketKey::Diameter => stats.diameter_bucket(),
    }
}

fn bucket_rank(key: BucketKey, label: &str) -> (u8, usize) {
    match key {
        BucketKey::Triplets => (0, label.trim_end_matches('+').parse().unwrap_or(usize::MAX)),
        BucketKey::Diameter => match label.parse() {
            Ok(d) => (0, d),
            Err(_) => (1, 0),
        },
    }
}

fn row(label: String, records: &[&EvalRecord], idx: &[usize], external: &[ExternalScores]) -> Result<BucketRow, MetricsError> {
    let owned: Vec<EvalRecord> = records.iter().map(|r| (*r).clone()).collect();
    Ok(BucketRow {
        bucket: label,
        count: owned.len(),
        bleu: bleu4(&owned)?,
        chrfpp: chrfpp(&owned)?,
        external: external
            .iter()
            .map(|e| (e.name.clone(), idx.iter().map(|&i| e.per_record[i]).sum::<f64>() / idx.len() as f64))
            .collect(),
    })
}

/// Corpus metrics per complexity bucket. Records without a valid graph
/// are skipped.
pub fn bucket_report(
    records: &[EvalRecord],
    key: BucketKey,
    external: &[ExternalScores],
) -> Result<BucketReport, MetricsError> {
    check(records)?;
    if let Some(e) = external.iter().find(|e| e.per_record.len() != records.len()) {
        return Err(MetricsError::External {
            name: e.name.clone(),
            reason: format!("{} scores for {} records", e.per_record.len(), records.len()),
        });
    }
    let mut groups: BTreeMap<(u8, usize, String), Vec<usize>> = BTreeMap::new();
    let mut scored = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let Some(stats) = r.graph_stats() else { continue };
        let label = bucket_label(key, &stats);
        let (a, b) = bucket_rank(key, &label);
        groups.entry((a, b, label)).or_default().push(i);
        scored.push(i);
    }
    if scored.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let rows = groups
        .into_iter()
        .map(|((_, _, label), idx)| {
            let rs: Vec<&EvalRecord> = idx.iter().map(|&i| &records[i]).collect();
            row(label, &rs, &idx, external)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let all: Vec<&EvalRecord> = scored.iter().map(|&i| &records[i]).collect();
    Ok(BucketReport {
        key,
        rows,
        total: row("all".into(), &all, &scored, external)?,
    })
}

impl BucketReport {
    /// Fixed-width text table.
    pub fn to_table(&self) -> String {
        let names: Vec<&String> = self.total.external.keys().collect();
        let mut out = format!("{:<14}{:>8}{:>9}{:>9}", format!("{:?}", self.key).to_lowercase(), "count", "BLEU", "chrF++");
        for n in &names {
            out.push_str(&format!("{:>12}", n));
        }
        out.push('\n');
        for r in self.rows.iter().chain(std::iter::once(&self.total)) {
            out.push_str(&format!("{:<14}{:>8}{:>9.2}{:>9.2}", r.bucket, r.count, r.bleu, r.chrfpp));
            for n in &names {
                out.push_str(&format!("{:>12.4}", r.external.get(*n).copied().unwrap_or(f64::NAN)));
            }
            out.push('\n');
        }
        out
    }
}

/// Label of a diameter as used in reports.
pub fn diameter_label(d: Diameter) -> String {
    d.bucket()
}

/// A scorer implemented elsewhere, such as METEOR or BARTScore.
pub trait ExternalScorer {
    fn name(&self) -> &str;
    fn score(&self, records: &[EvalRecord]) -> Result<Vec<f64>, MetricsError>;
}

/// Runs a program that reads `EvalRecord` JSONL on stdin and prints one
/// score per line.
#[derive(Debug, Clone)]
pub struct SubprocessScorer {
    pub name: String,
    pub program: String,
    pub args: Vec<String>,
}

impl ExternalScorer for SubprocessScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, records: &[EvalRecord]) -> Result<Vec<f64>, MetricsError> {
        let fail = |reason: String| MetricsError::External {
            name: self.name.clone(),
            reason,
        };
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| fail(e.to_string()))?;
        let mut input = Vec::new();
        for r in records {
            serde_json::to_writer(&mut input, r).map_err(|e| fail(e.to_string()))?;
            input.push(b'\n');
        }
        let mut stdin = child.stdin.take().expect("piped stdin");
        let writer = std::thread::spawn(move || stdin.write_all(&input));
        let out = child.wait_with_output().map_err(|e| fail(e.to_string()))?;
        writer
            .join()
            .map_err(|_| fail("stdin writer panicked".into()))?
            .map_err(|e| fail(e.to_string()))?;
        if !out.status.success() {
            return Err(fail(format!("exited with {}", out.status)));
        }
        let scores = String::from_utf8_lossy(&out.stdout)
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>().map_err(|e| fail(format!("bad score {l:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if scores.len() != records.len() {
            return Err(fail(format!("{} scores for {} records", scores.len(), records.len())));
        }
        Ok(scores)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(h: &str, refs: &[&str]) -> EvalRecord {
        EvalRecord {
            id: h.chars().take(8).collect(),
            hypothesis: h.into(),
            references: refs.iter().map(|s| s.to_string()).collect(),
            triplets: Vec::new(),
        }
    }

    /// Same five records as the fixture script.
    fn toy5() -> Vec<EvalRecord> {
        vec![
            rec("Houston is the largest city in Texas.", &["Houston is the largest city in Texas."]),
            rec(
                "Twitter has 330 million users and was founded in 2006.",
                &["Twitter, founded in 2006, has 330 million users.", "Twitter has 330 million users."],
            ),
            rec("C.S. Wright works at Toronto University.", &["C.S. Wright is affiliated with Toronto University."]),
            rec(
                "Albert Jennings Fountain was born in New York City and died in New Mexico.",
                &["Albert Jennings Fountain was born in Staten Island, New York City and died in the New Mexico Territory."],
            ),
            rec(
                "Austin is the capital of Texas!",
                &["The capital of Texas is Austin.", "Austin is Texas's capital city."],
            ),
        ]
    }

    #[test]
    fn intl_tokenizer() {
        assert_eq!(tokenize_intl("Hello, world!"), ["Hello", ",", "world", "!"]);
        assert_eq!(tokenize_intl("It costs 1,234.5 $ now."), ["It", "costs", "1,234.5", "$", "now", "."]);
        // a number keeps a sentence-final dot
        assert_eq!(tokenize_intl("founded in 2006."), ["founded", "in", "2006."]);
        assert_eq!(tokenize_intl("Texas's"), ["Texas", "'", "s"]);
        assert_eq!(tokenize_intl("C.S. Wright"), ["C", ".", "S", ".", "Wright"]);
        assert_eq!(tokenize_intl("50€"), ["50", "€"]);
    }

    #[test]
    fn chrf_word_split() {
        assert_eq!(chrf_words("Hello, (world) x."), ["Hello", ",", "(world", ")", "x", "."]);
        assert_eq!(chrf_words("(world"), ["(", "world"]);
        assert_eq!(chrf_words(", a"), [",", "a"]);
    }

    #[test]
    fn toy_corpus_matches_reference_scorer() {
        let recs = toy5();
        assert!((bleu4(&recs).unwrap() - 53.5678514378797).abs() < 1e-6);
        assert!((chrfpp(&recs).unwrap() - 72.86117747614034).abs() < 1e-6);
    }

    #[test]
    fn identity_is_100() {
        let recs: Vec<EvalRecord> = toy5().into_iter().map(|r| rec(&r.references[0], &[&r.references[0]])).collect();
        assert_eq!(bleu4(&recs).unwrap(), 100.0);
        assert_eq!(chrfpp(&recs).unwrap(), 100.0);
    }

    #[test]
    fn empty_and_disjoint_are_zero() {
        let recs: Vec<EvalRecord> = toy5().into_iter().map(|r| rec("", &[&r.references[0]])).collect();
        assert_eq!(bleu4(&recs).unwrap(), 0.0);
        assert_eq!(chrfpp(&recs).unwrap(), 0.0);
        let disjoint = [rec("aaa bbb", &["xyz qrs"])];
        assert_eq!(chrfpp(&disjoint).unwrap(), 0.0);
        assert_eq!(bleu4(&disjoint).unwrap(), 0.0);
        assert!(matches!(bleu4(&[]), Err(MetricsError::EmptyCorpus)));
        assert!(matches!(chrfpp(&[rec("a", &[])]), Err(MetricsError::NoReferences(_))));
    }

    #[test]
    fn short_hypothesis_without_4grams_scores_zero() {
        // no 4-grams at all: precision 0 is floored in log space
        let r = [rec("a b c", &["a b c"])];
        assert!(bleu4(&r).unwrap() < 1e-100);
    }

    #[test]
    fn closest_reference_length_prefers_shorter_on_tie() {
        assert_eq!(closest_ref_len(5, &[7, 3]), 3);
        assert_eq!(closest_ref_len(5, &[6, 4, 9]), 4);
        assert_eq!(closest_ref_len(5, &[5, 4]), 5);
    }

    #[test]
    fn lowercase_option() {
        let r = [rec("HOUSTON IS THE LARGEST CITY", &["houston is the largest city"])];
        assert!(bleu4(&r).unwrap() < 100.0);
        let lc = MetricOptions { lowercase: true };
        assert_eq!(bleu4_detailed(&r, lc).unwrap().score, 100.0);
        assert_eq!(chrfpp_with(&r, lc).unwrap(), 100.0);
    }

    fn with_graph(mut r: EvalRecord, n: usize) -> EvalRecord {
        r.triplets = (0..n).map(|i| Triplet::new(&format!("E{i}"), "r", &format!("E{}", i + 1)).unwrap()).collect();
        r
    }

    #[test]
    fn bucket_report_rows() {
        let recs: Vec<EvalRecord> = toy5().into_iter().enumerate().map(|(i, r)| with_graph(r, [1, 1, 2, 6, 7][i])).collect();
        let rep = bucket_report(&recs, BucketKey::Triplets, &[]).unwrap();
        let labels: Vec<&str> = rep.rows.iter().map(|r| r.bucket.as_str()).collect();
        assert_eq!(labels, ["1", "2", "5+"]);
        assert_eq!(rep.rows.iter().map(|r| r.count).sum::<usize>(), 5);
        assert!((rep.total.bleu - bleu4(&recs).unwrap()).abs() < 1e-12);
        let d = bucket_report(&recs, BucketKey::Diameter, &[]).unwrap();
        let labels: Vec<&str> = d.rows.iter().map(|r| r.bucket.as_str()).collect();
        assert_eq!(labels, ["1", "2", "6", "7"]);
        assert!(rep.to_table().lines().count() == 5);
    }

    #[test]
    fn single_bucket_equals_global() {
        let recs: Vec<EvalRecord> = toy5().into_iter().map(|r| with_graph(r, 3)).collect();
        let ext = ExternalScores { name: "len".into(), per_record: vec![1.0, 2.0, 3.0, 4.0, 5.0] };
        let rep = bucket_report(&recs, BucketKey::Triplets, &[ext]).unwrap();
        assert_eq!(rep.rows.len(), 1);
        assert_eq!(rep.rows[0].bleu, rep.total.bleu);
        assert_eq!(rep.rows[0].chrfpp, chrfpp(&recs).unwrap());
        assert_eq!(rep.rows[0].external["len"], 3.0);
    }

    #[test]
    fn subprocess_scorer_reads_one_score_per_line() {
        let s = SubprocessScorer {
            name: "wc".into(),
            program: "sh".into(),
            args: vec!["-c".into(), "while read -r l; do echo 0.5; done".into()],
        };
        assert_eq!(s.score(&toy5()).unwrap(), vec![0.5; 5]);
        let bad = SubprocessScorer { name: "x".into(), program: "sh".into(), args: vec!["-c".into(), "echo 1".into()] };
        assert!(bad.score(&toy5()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn corpus() -> impl Strategy<Value = Vec<EvalRecord>> {
            prop::collection::vec(
                ("[a-e]{1,3}( [a-e]{1,3}[,.]?){0,8}", prop::collection::vec("[a-e]{1,3}( [a-e]{1,3}[,.]?){0,8}", 1..3)),
                1..12,
            )
            .prop_map(|v| {
                v.into_iter()
                    .enumerate()
                    .map(|(i, (h, refs))| EvalRecord { id: i.to_string(), hypothesis: h, references: refs, triplets: vec![] })
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn permutation_invariant(recs in corpus(), seed in any::<u64>()) {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let mut shuffled = recs.clone();
                shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                prop_assert!((bleu4(&recs).unwrap() - bleu4(&shuffled).unwrap()).abs() < 1e-9);
                prop_assert!((chrfpp(&recs).unwrap() - chrfpp(&shuffled).unwrap()).abs() < 1e-9);
            }

            #[test]
            fn scores_in_range(recs in corpus()) {
                let b = bleu4(&recs).unwrap();
                let c = chrfpp(&recs).unwrap();
                prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
                prop_assert!((0.0..=100.0 + 1e-9).contains(&c));
            }

            #[test]
            fn adding_a_perfect_record_never_lowers_chrf(recs in corpus(), pick in any::<prop::sample::Index>()) {
                let r = &recs[pick.index(recs.len())];
                let mut more = recs.clone();
                more.push(EvalRecord { id: "dup".into(), hypothesis: r.references[0].clone(), references: vec![r.references[0].clone()], triplets: vec![] });
                prop_assert!(chrfpp(&more).unwrap() + 1e-9 >= chrfpp(&recs).unwrap());
                prop_assert!(bleu4(&more).unwrap() + 1e-9 >= bleu4(&recs).unwrap());
            }
        }
    }
}
