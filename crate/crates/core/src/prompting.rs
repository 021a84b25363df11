//! System prompts, user templates and chat message assembly.
//!
//! Template texts live in `assets/prompts/` and are compiled in. A
//! [`PromptAssets`] value can replace any of them from a directory holding
//! files with the same names, which is how per-backend adaptations are
//! supplied.

use std::borrow::Cow;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{linearize, render_triplet, GraphError, KnowledgeGraph, LinearizationStrategy, TripletFormat};

pub const TRIPLETS_SLOT: &str = "{triplets}";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("graph has no triplets")]
    EmptyGraph,
    #[error("template {template} requires pipe-formatted triplets, got {format:?}")]
    UnsupportedFormat { template: Template, format: TripletFormat },
    #[error("template asset {name} lacks the {{triplets}} slot")]
    MissingSlot { name: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("reading prompt asset {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Simple,
    #[default]
    Detailed,
}

impl FromStr for SystemKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "simple" => Ok(Self::Simple),
            "detailed" => Ok(Self::Detailed),
            _ => Err(format!("unknown system prompt kind {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Template {
    A,
    B,
    C,
    #[default]
    D,
    #[serde(rename = "DStar")]
    DStar,
    #[serde(rename = "PlanGTG")]
    PlanGtg,
}

impl Template {
    pub const ALL: [Template; 6] = [Self::A, Self::B, Self::C, Self::D, Self::DStar, Self::PlanGtg];

    pub fn name(self) -> &'static str {
        match self {
            Self::A => "A",
            Self::B => "B",
            Self::C => "C",
            Self::D => "D",
            Self::DStar => "DStar",
            Self::PlanGtg => "PlanGTG",
        }
    }

    fn asset(self) -> &'static str {
        match self {
            Self::A => "user_a.txt",
            Self::B => "user_b.txt",
            Self::C => "user_c.txt",
            Self::D => "user_d.txt",
            Self::DStar => "user_dstar.txt",
            Self::PlanGtg => "plangtg.txt",
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Template {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|x| x.name().to_ascii_lowercase() == t || (t == "d*" && *x == Self::DStar))
            .ok_or_else(|| format!("unknown template {s:?}"))
    }
}

/// Template texts, defaulting to the compiled-in assets.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptAssets {
    simple: Cow<'static, str>,
    detailed: Cow<'static, str>,
    user: [Cow<'static, str>; 6],
}

impl Default for PromptAssets {
    fn default() -> Self {
        Self {
            simple: Cow::Borrowed(include_str!("../assets/prompts/system_simple.txt")),
            detailed: Cow::Borrowed(include_str!("../assets/prompts/system_detailed.txt")),
            user: [
                Cow::Borrowed(include_str!("../assets/prompts/user_a.txt")),
                Cow::Borrowed(include_str!("../assets/prompts/user_b.txt")),
                Cow::Borrowed(include_str!("../assets/prompts/user_c.txt")),
                Cow::Borrowed(include_str!("../assets/prompts/user_d.txt")),
                Cow::Borrowed(include_str!("../assets/prompts/user_dstar.txt")),
                Cow::Borrowed(include_str!("../assets/prompts/plangtg.txt")),
            ],
        }
    }
}

impl PromptAssets {
    /// Built-in texts with any same-named files in `dir` taking precedence.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut assets = Self::default();
        let read = |name: &str| -> Result<Option<String>, PromptError> {
            let path = dir.join(name);
            match std::fs::read_to_string(&path) {
                Ok(s) => Ok(Some(s)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(source) => Err(PromptError::Io {
                    path: path.display().to_string(),
                    source,
                }),
            }
        };
        if let Some(s) = read("system_simple.txt")? {
            assets.simple = Cow::Owned(s);
        }
        if let Some(s) = read("system_detailed.txt")? {
            assets.detailed = Cow::Owned(s);
        }
        for (i, t) in Template::ALL.into_iter().enumerate() {
            if let Some(s) = read(t.asset())? {
                if !s.contains(TRIPLETS_SLOT) {
                    return Err(PromptError::MissingSlot { name: t.asset().into() });
                }
                assets.user[i] = Cow::Owned(s);
            }
        }
        Ok(assets)
    }

    pub fn system(&self, kind: SystemKind) -> &str {
        match kind {
            SystemKind::Simple => &self.simple,
            SystemKind::Detailed => &self.detailed,
        }
    }

    pub fn template(&self, t: Template) -> &str {
        &self.user[Template::ALL.iter().position(|x| *x == t).unwrap()]
    }

    pub fn user_prompt(
        &self,
        template: Template,
        g: &KnowledgeGraph,
        linearization: LinearizationStrategy,
        format: TripletFormat,
    ) -> Result<String, PromptError> {
        if g.is_empty() {
            return Err(PromptError::EmptyGraph);
        }
        let order = linearize(g, linearization)?;
        if template == Template::PlanGtg {
            if format != TripletFormat::Pipe {
                return Err(PromptError::UnsupportedFormat { template, format });
            }
            return Ok(self.plangtg_prompt(&g.reordered(&order)));
        }
        let lines: Vec<String> = order.iter().map(|&i| render_triplet(&g.triplets()[i], format)).collect();
        Ok(self.template(template).replace(TRIPLETS_SLOT, &lines.join("\n")))
    }

    pub fn plangtg_prompt(&self, g: &KnowledgeGraph) -> String {
        self.template(Template::PlanGtg).replace(TRIPLETS_SLOT, &numbered_lines(g))
    }
}

/// `h | r | t (i)` lines numbered from 1 in storage order.
pub fn numbered_lines(g: &KnowledgeGraph) -> String {
    g.triplets()
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{t} ({})", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn build_system_prompt(kind: SystemKind) -> String {
    PromptAssets::default().system(kind).to_string()
}

pub fn build_user_prompt(
    template: Template,
    g: &KnowledgeGraph,
    linearization: LinearizationStrategy,
    format: TripletFormat,
) -> Result<String, PromptError> {
    PromptAssets::default().user_prompt(template, g, linearization, format)
}

pub fn build_plangtg_prompt(g: &KnowledgeGraph) -> Result<String, PromptError> {
    if g.is_empty() {
        return Err(PromptError::EmptyGraph);
    }
    Ok(PromptAssets::default().plangtg_prompt(g))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
}

impl ChatRequest {
    /// Final user turn.
    pub fn input(&self) -> Option<&str> {
        self.messages.last().filter(|m| m.role == Role::User).map(|m| m.content.as_str())
    }
}

/// A demonstration already rendered into a user turn and its reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoTurn {
    pub user: String,
    pub assistant: String,
}

pub fn assemble_messages(system: &str, demos: &[DemoTurn], input_prompt: &str) -> ChatRequest {
    let mut messages = Vec::with_capacity(2 + 2 * demos.len());
    messages.push(ChatMessage::new(Role::System, system));
    for d in demos {
        messages.push(ChatMessage::new(Role::User, d.user.clone()));
        messages.push(ChatMessage::new(Role::Assistant, d.assistant.clone()));
    }
    messages.push(ChatMessage::new(Role::User, input_prompt));
    ChatRequest { messages }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demo {
    pub graph: KnowledgeGraph,
    pub reference_output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub system_kind: SystemKind,
    pub template: Template,
    pub triplet_format: TripletFormat,
    pub linearization: LinearizationStrategy,
    #[serde(default)]
    pub demos: Vec<Demo>,
}

impl PromptRequest {
    pub fn zero_shot(system_kind: SystemKind, template: Template) -> Self {
        Self {
            system_kind,
            template,
            triplet_format: TripletFormat::Pipe,
            linearization: LinearizationStrategy::Ori,
            demos: Vec::new(),
        }
    }

    /// Chat request for `input`; demos are rendered with the same settings.
    pub fn build(&self, assets: &PromptAssets, input: &KnowledgeGraph) -> Result<ChatRequest, PromptError> {
        let render = |g: &KnowledgeGraph| assets.user_prompt(self.template, g, self.linearization, self.triplet_format);
        let demos = self
            .demos
            .iter()
            .map(|d| {
                Ok(DemoTurn {
                    user: render(&d.graph)?,
                    assistant: d.reference_output.clone(),
                })
            })
            .collect::<Result<Vec<_>, PromptError>>()?;
        Ok(assemble_messages(assets.system(self.system_kind), &demos, &render(input)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{parse_triplets, Triplet};

    fn twitter() -> KnowledgeGraph {
        KnowledgeGraph::new(vec![
            Triplet::new("Twitter", "users", "330 million").unwrap(),
            Triplet::new("Twitter", "founding year", "2006").unwrap(),
            Triplet::new("Twitter", "category", "Internet forum").unwrap(),
            Triplet::new("Internet forum", "communication platform", "online discussion platform").unwrap(),
        ])
        .unwrap()
    }

    fn texas() -> KnowledgeGraph {
        KnowledgeGraph::new(vec![Triplet::new("Texas", "LargestCity", "Houston").unwrap()]).unwrap()
    }

    #[test]
    fn system_prompts() {
        assert_eq!(
            build_system_prompt(SystemKind::Simple),
            "Following the questions and give directly the answers. Do not include any additional information or outputs."
        );
        let d = build_system_prompt(SystemKind::Detailed);
        assert!(d.starts_with("You are skilled in interpreting knowledge graphs."));
        assert!(d.contains("'subject | predicate | object'"));
        assert!(d.ends_with("Do not include any additional information or outputs."));
        assert_eq!(d, build_system_prompt(SystemKind::Detailed));
    }

    #[test]
    fn short_templates() {
        let lin = LinearizationStrategy::Ori;
        let f = TripletFormat::Pipe;
        assert_eq!(build_user_prompt(Template::A, &texas(), lin, f).unwrap(), "Texas | LargestCity | Houston || Text: ");
        assert_eq!(
            build_user_prompt(Template::B, &texas(), lin, f).unwrap(),
            "Graph: Texas | LargestCity | Houston || Text: "
        );
        assert_eq!(
            build_user_prompt(Template::C, &texas(), lin, f).unwrap(),
            "Graph: Texas | LargestCity | Houston || Convert the graph into text: "
        );
    }

    #[test]
    fn fenced_templates() {
        let d = build_user_prompt(Template::D, &twitter(), LinearizationStrategy::Ori, TripletFormat::Pipe).unwrap();
        assert!(d.contains("Only use information from the provided triplets"));
        assert!(d.contains("```\nTwitter | users | 330 million\nTwitter | founding year | 2006\n"));
        assert!(d.ends_with("convert the graph into a coherent piece of text:"));
        let ds = build_user_prompt(Template::DStar, &twitter(), LinearizationStrategy::Ori, TripletFormat::Pipe).unwrap();
        assert!(ds.ends_with("write triplet dollar signs (i.e.: $$$)."));
        let tagged = build_user_prompt(Template::D, &texas(), LinearizationStrategy::Ori, TripletFormat::AngleTags).unwrap();
        assert!(tagged.contains("\n<head> Texas <relation> LargestCity <tail> Houston\n"));
    }

    #[test]
    fn linearization_is_applied() {
        let g = KnowledgeGraph::new(vec![
            Triplet::new("C", "r", "D").unwrap(),
            Triplet::new("A", "r", "B").unwrap(),
            Triplet::new("B", "r", "C").unwrap(),
        ])
        .unwrap();
        let p = build_user_prompt(Template::A, &g, LinearizationStrategy::Bfs, TripletFormat::Pipe).unwrap();
        assert_eq!(p, "C | r | D\nB | r | C\nA | r | B || Text: ");
    }

    #[test]
    fn plangtg_numbering_matches_example() {
        let p = build_plangtg_prompt(&twitter()).unwrap();
        let block = "```\nTwitter | users | 330 million (1)\nTwitter | founding year | 2006 (2)\nTwitter | category | Internet forum (3)\nInternet forum | communication platform | online discussion platform (4)\n```";
        assert!(p.contains(block), "{p}");
        assert!(p.starts_with("The following is a set of knowledge graph triplets"));
        assert!(p.contains("The task involves two steps"));
        let one = build_plangtg_prompt(&texas()).unwrap();
        assert!(one.contains("Texas | LargestCity | Houston (1)\n"));
        assert!(!one.contains("(2)"));
        assert!(matches!(
            build_user_prompt(Template::PlanGtg, &texas(), LinearizationStrategy::Ori, TripletFormat::AngleTags),
            Err(PromptError::UnsupportedFormat { .. })
        ));
    }

    #[test]
    fn message_assembly() {
        let zero = assemble_messages("sys", &[], "go");
        assert_eq!(zero.messages.len(), 2);
        assert_eq!(zero.input(), Some("go"));
        let demos: Vec<DemoTurn> = (0..3)
            .map(|i| DemoTurn {
                user: format!("u{i}"),
                assistant: format!("a{i}"),
            })
            .collect();
        let req = assemble_messages("sys", &demos, "go");
        assert_eq!(req.messages.len(), 8);
        let roles: Vec<Role> = req.messages.iter().map(|m| m.role).collect();
        use Role::*;
        assert_eq!(roles, [System, User, Assistant, User, Assistant, User, Assistant, User]);
        let json = serde_json::to_string(&req).unwrap();
        assert!(json.starts_with(r#"{"messages":[{"role":"system","content":"sys"}"#));
        let back: ChatRequest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, req);
    }

    #[test]
    fn prompt_request_renders_demos_with_same_settings() {
        let mut req = PromptRequest::zero_shot(SystemKind::Simple, Template::B);
        req.demos.push(Demo {
            graph: twitter(),
            reference_output: "Twitter has 330 million users.".into(),
        });
        let chat = req.build(&PromptAssets::default(), &texas()).unwrap();
        assert_eq!(chat.messages.len(), 4);
        assert!(chat.messages[1].content.starts_with("Graph: Twitter | users | 330 million\n"));
        assert_eq!(chat.messages[2].content, "Twitter has 330 million users.");
        assert_eq!(chat.input(), Some("Graph: Texas | LargestCity | Houston || Text: "));
    }

    #[test]
    fn overrides_replace_only_present_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("user_a.txt"), "T: {triplets} =>").unwrap();
        let assets = PromptAssets::with_overrides(dir.path()).unwrap();
        assert_eq!(
            assets.user_prompt(Template::A, &texas(), LinearizationStrategy::Ori, TripletFormat::Pipe).unwrap(),
            "T: Texas | LargestCity | Houston =>"
        );
        assert_eq!(assets.template(Template::B), PromptAssets::default().template(Template::B));
        std::fs::write(dir.path().join("user_b.txt"), "no slot").unwrap();
        assert!(matches!(PromptAssets::with_overrides(dir.path()), Err(PromptError::MissingSlot { .. })));
    }

    #[test]
    fn template_names_parse() {
        for t in Template::ALL {
            assert_eq!(t.name().parse::<Template>().unwrap(), t);
        }
        assert_eq!("d*".parse::<Template>().unwrap(), Template::DStar);
        assert_eq!(serde_json::to_string(&Template::PlanGtg).unwrap(), "\"PlanGTG\"");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn graph() -> impl Strategy<Value = KnowledgeGraph> {
            prop::collection::vec(("[A-E]", "[a-c]{1,3}", "[A-E]"), 1..8).prop_filter_map("dups", |ts| {
                let ts: Vec<Triplet> = ts.iter().map(|(h, r, t)| Triplet::new(h, r, t).unwrap()).collect();
                KnowledgeGraph::new(ts).ok()
            })
        }

        proptest! {
            #[test]
            fn fenced_block_parses_back(g in graph(), fmt_i in 0usize..3) {
                let format = [TripletFormat::Pipe, TripletFormat::AngleTags, TripletFormat::OpenCloseTags][fmt_i];
                let p = build_user_prompt(Template::D, &g, LinearizationStrategy::Ori, format).unwrap();
                let block = p.split("```\n").nth(1).unwrap().split("\n```").next().unwrap();
                prop_assert_eq!(parse_triplets(block, format).unwrap(), g);
            }

            #[test]
            fn plangtg_has_one_marker_per_triplet(g in graph()) {
                let p = build_plangtg_prompt(&g).unwrap();
                for i in 1..=g.len() {
                    let marker = format!(" ({i})\n");
                    prop_assert_eq!(p.matches(&marker).count(), 1);
                }
                let absent = format!("({})", g.len() + 1);
                prop_assert!(!p.contains(&absent));
            }
        }
    }
}
