//! Offline backend. Chat replies are produced by a [`Responder`]; the
//! default [`ToolkitResponder`] recognises every prompt shape this crate
//! sends and answers in the expected format. Embeddings are seeded feature
//! hashes of the text.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::transport::{HttpResponse, Transport, TransportError};
use crate::attribution::{render_target, AttributedText, ReorderPlan, STOP};
use crate::forge::prompts as forge_prompts;
use crate::graph::{linearize, parse_triplets, KnowledgeGraph, LinearizationStrategy, Triplet, TripletFormat};
use crate::prompting::{ChatMessage, Role};

pub const DEFAULT_MOCK_DIM: usize = 256;

pub trait Responder: Send + Sync {
    fn respond(&self, messages: &[ChatMessage], seed: u64) -> String;
}

impl<F> Responder for F
where
    F: Fn(&[ChatMessage], u64) -> String + Send + Sync,
{
    fn respond(&self, messages: &[ChatMessage], seed: u64) -> String {
        self(messages, seed)
    }
}

pub fn stable_hash(seed: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Unit-norm hashed bag of words and character trigrams.
pub fn mock_embedding(text: &str, dim: usize, seed: u64) -> Vec<f32> {
    let mut v = vec![0f64; dim];
    let lower = text.to_lowercase();
    let mut add = |feature: &str, weight: f64| {
        let h = stable_hash(seed, &[feature]);
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[(h % dim as u64) as usize] += sign * weight;
    };
    for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        add(word, 1.0);
        let padded: Vec<char> = format!("#{word}#").chars().collect();
        for w in padded.windows(3) {
            add(&w.iter().collect::<String>(), 0.5);
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        let mut out = vec![0f32; dim];
        out[(stable_hash(seed, &["<empty>"]) % dim as u64) as usize] = 1.0;
        return out;
    }
    v.iter().map(|x| (x / norm) as f32).collect()
}

fn relation_words(r: &str) -> String {
    let mut out = String::new();
    let mut prev_lower = false;
    for c in r.chars() {
        if c == '_' {
            out.push(' ');
            prev_lower = false;
            continue;
        }
        if c.is_uppercase() && prev_lower {
            out.push(' ');
        }
        prev_lower = c.is_lowercase() || c.is_ascii_digit();
        out.extend(c.to_lowercase());
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One sentence for a triplet, ending in a period. Entities appear verbatim.
pub fn verbalize(t: &Triplet, seed: u64) -> String {
    let rel = relation_words(t.relation());
    let s = match stable_hash(seed, &[t.head(), t.relation(), t.tail()]) % 3 {
        0 => format!("{} {} {}", t.head(), rel, t.tail()),
        1 => format!("The {} of {} is {}", rel, t.head(), t.tail()),
        _ => format!("{} has {} as its {}", t.head(), t.tail(), rel),
    };
    format!("{}.", s.trim_end_matches('.'))
}

fn sentence_with_marker(t: &Triplet, i: usize, seed: u64) -> String {
    let s = verbalize(t, seed);
    format!("{} ({i}).", &s[..s.len() - 1])
}

fn section<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = text.find(start)? + start.len();
    let rest = &text[from..];
    Some(rest.find(end).map_or(rest, |j| &rest[..j]).trim())
}

fn strip_numbering(block: &str) -> String {
    block
        .lines()
        .map(|l| {
            let l = l.trim();
            match l.rfind(" (") {
                Some(i) if l.ends_with(')') && l[i + 2..l.len() - 1].chars().all(|c| c.is_ascii_digit()) => &l[..i],
                _ => l,
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn graph_in(block: &str) -> Option<KnowledgeGraph> {
    let block = strip_numbering(block);
    [TripletFormat::Pipe, TripletFormat::AngleTags, TripletFormat::OpenCloseTags]
        .into_iter()
        .find_map(|f| parse_triplets(&block, f).ok())
}

const PLACES: [&str; 8] = [
    "Ardmore", "Belvedere", "Calloway", "Dunmore", "Eastwick", "Fairhaven", "Glenrock", "Harwell",
];
const RELATIONS: [&str; 8] = [
    "located in", "founded by", "member of", "known for", "part of", "partner of", "named after", "operated by",
];

/// Answers the toolkit's prompt shapes in their expected format.
#[derive(Debug, Clone)]
pub struct ToolkitResponder {
    /// Per-mille rate of deliberately bad answers in forge growth and
    /// annotation, so retry and rejection paths get exercised.
    pub fault_rate: u64,
}

impl Default for ToolkitResponder {
    fn default() -> Self {
        Self { fault_rate: 80 }
    }
}

impl ToolkitResponder {
    fn rewrite(&self, prompt: &str, seed: u64) -> Option<String> {
        let t = Triplet::parse_pipe(section(prompt, forge_prompts::TRIPLET_LINE, "\n")?)?;
        let s = verbalize(&t, seed);
        Some(format!("{s} (1)"))
    }

    fn grow(&self, prompt: &str, h: u64, seed: u64) -> Option<String> {
        let g = graph_in(section(prompt, forge_prompts::TRIPLETS_BLOCK, forge_prompts::ENTITIES_LINE)?)?;
        let text = section(prompt, forge_prompts::TEXT_LINE, "\n")?;
        let entities = g.entities();
        let anchor = entities[(h % entities.len() as u64) as usize];
        let place = format!("{} {}", PLACES[((h >> 8) % 8) as usize], (h >> 16) % 997);
        let rel = RELATIONS[((h >> 32) % 8) as usize];
        let new = if (h >> 40) % 1000 < self.fault_rate {
            Triplet::new(&place, rel, &format!("{} {}", PLACES[((h >> 48) % 8) as usize], (h >> 52) % 991)).ok()?
        } else if (h >> 44) % 2 == 0 {
            Triplet::new(anchor, rel, &place).ok()?
        } else {
            Triplet::new(&place, rel, anchor).ok()?
        };
        Some(format!("{}{new}\n{}{} {}", forge_prompts::NEW_TRIPLET_PREFIX, forge_prompts::NEW_TEXT_PREFIX, text, verbalize(&new, seed)))
    }

    fn annotate(&self, prompt: &str, h: u64) -> Option<String> {
        let g = graph_in(section(prompt, forge_prompts::TRIPLETS_BLOCK, forge_prompts::TEXT_LINE)?)?;
        let text = section(prompt, forge_prompts::TEXT_LINE, "\n")?;
        let n = g.len();
        let mut sentences: Vec<String> = text.split(". ").map(|s| s.trim().trim_end_matches('.').to_string()).collect();
        sentences.retain(|s| !s.is_empty());
        let extra = if (h >> 40) % 1000 < self.fault_rate { format!(" ({})", n + 1) } else { String::new() };
        if sentences.len() == n {
            let marked: Vec<String> = sentences.iter().enumerate().map(|(i, s)| format!("{s} ({}).", i + 1)).collect();
            Some(format!("{}{extra}", marked.join(" ")))
        } else {
            let tail: Vec<String> = (1..=n).map(|i| format!("({i})")).collect();
            Some(format!("{} {}{extra}", text.trim_end_matches('.'), tail.join(" ")) + ".")
        }
    }

    fn plangtg(&self, prompt: &str, seed: u64) -> Option<String> {
        let g = graph_in(section(prompt, "```\n", "\n```")?)?;
        let order = linearize(&g, LinearizationStrategy::Bfs).ok()?;
        let plan = ReorderPlan::from_order(&g, &order);
        let text: Vec<String> = order.iter().map(|&i| sentence_with_marker(&g.triplets()[i], i + 1, seed)).collect();
        let attributed = AttributedText::new(text.join(" "), g.len());
        Some(format!("{}\n{STOP}", render_target(&plan, &attributed).ok()?))
    }

    fn describe(&self, prompt: &str, seed: u64) -> Option<String> {
        let block = if prompt.contains("```\n") {
            section(prompt, "```\n", "\n```")?
        } else {
            let cut = prompt.find(" || ")?;
            prompt[..cut].trim_start_matches("Graph: ")
        };
        let g = graph_in(block)?;
        let text: Vec<String> = g.triplets().iter().map(|t| verbalize(t, seed)).collect();
        let mut out = text.join(" ");
        if prompt.contains("dollar signs") {
            out.push_str(" $$$");
        }
        Some(out)
    }
}

impl Responder for ToolkitResponder {
    fn respond(&self, messages: &[ChatMessage], seed: u64) -> String {
        let prompt = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        // the task prompt is the first user turn of a forge dialogue
        let task = messages
            .iter()
            .find(|m| m.role == Role::User && is_forge(&m.content))
            .map_or(prompt, |m| m.content.as_str());
        let transcript: Vec<&str> = messages.iter().map(|m| m.content.as_str()).collect();
        let h = stable_hash(seed, &transcript);
        let answer = if task.contains(forge_prompts::REWRITE_CUE) {
            self.rewrite(task, seed)
        } else if task.contains(forge_prompts::GROW_CUE) {
            self.grow(task, h, seed)
        } else if task.contains(forge_prompts::ANNOTATE_CUE) {
            self.annotate(task, h)
        } else if prompt.contains("The task involves two steps") {
            self.plangtg(prompt, seed)
        } else {
            self.describe(prompt, seed)
        };
        answer.unwrap_or_else(|| "I could not read the input.".to_string())
    }
}

fn is_forge(s: &str) -> bool {
    s.contains(forge_prompts::REWRITE_CUE) || s.contains(forge_prompts::GROW_CUE) || s.contains(forge_prompts::ANNOTATE_CUE)
}

/// In-process stand-in for an OpenAI-compatible server.
pub struct MockTransport {
    seed: u64,
    dim: usize,
    responder: Arc<dyn Responder>,
    requests: AtomicUsize,
    batch_sizes: Mutex<Vec<usize>>,
}

impl MockTransport {
    pub fn new(seed: u64) -> Self {
        Self::with_responder(seed, DEFAULT_MOCK_DIM, Arc::new(ToolkitResponder::default()))
    }

    pub fn with_responder(seed: u64, dim: usize, responder: Arc<dyn Responder>) -> Self {
        Self {
            seed,
            dim,
            responder,
            requests: AtomicUsize::new(0),
            batch_sizes: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    /// Input counts of the embedding requests seen so far.
    pub fn embedding_batches(&self) -> Vec<usize> {
        self.batch_sizes.lock().unwrap().clone()
    }

    fn chat(&self, body: &Value) -> Result<Value, String> {
        let messages: Vec<ChatMessage> =
            serde_json::from_value(body.get("messages").cloned().ok_or("missing messages")?).map_err(|e| e.to_string())?;
        let text = self.responder.respond(&messages, self.seed);
        let prompt_tokens: usize = messages.iter().map(|m| m.content.split_whitespace().count()).sum();
        let id = hex::encode(&stable_hash(self.seed, &[&body.to_string()]).to_le_bytes());
        Ok(json!({
            "id": format!("mock-{id}"),
            "object": "chat.completion",
            "model": body.get("model").cloned().unwrap_or(Value::Null),
            "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
            "usage": {"prompt_tokens": prompt_tokens, "completion_tokens": text.split_whitespace().count()},
        }))
    }

    fn embed(&self, body: &Value) -> Result<Value, String> {
        let inputs: Vec<String> = match body.get("input") {
            Some(Value::String(s)) => vec![s.clone()],
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| e.to_string())?,
            None => return Err("missing input".into()),
        };
        self.batch_sizes.lock().unwrap().push(inputs.len());
        let data: Vec<Value> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| json!({"object": "embedding", "index": i, "embedding": mock_embedding(t, self.dim, self.seed)}))
            .collect();
        Ok(json!({"object": "list", "data": data}))
    }
}

impl Transport for MockTransport {
    fn post_json(
        &self,
        url: &str,
        _headers: &[(String, String)],
        body: &str,
        _timeout: Duration,
    ) -> Result<HttpResponse, TransportError> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let parsed: Value = match serde_json::from_str(body) {
            Ok(v) => v,
            Err(e) => return Ok(HttpResponse { status: 400, body: json!({"error": e.to_string()}).to_string() }),
        };
        let result = if url.ends_with("/chat/completions") {
            self.chat(&parsed)
        } else if url.ends_with("/embeddings") {
            self.embed(&parsed)
        } else {
            return Ok(HttpResponse { status: 404, body: "{}".into() });
        };
        Ok(match result {
            Ok(v) => HttpResponse { status: 200, body: v.to_string() },
            Err(e) => HttpResponse { status: 400, body: json!({"error": e}).to_string() },
        })
    }
}
