//! Multi-agent benchmark synthesis and reasoning-trace generation.
//!
//! Task synthesis runs three stages over chat agents: a generator proposes a
//! candidate taxonomy from sample texts, a refiner tightens it and writes a
//! neutral instruction, and two independent labelers assign every text. Only
//! texts both labelers put in the same category are kept.
//!
//! Trace generation asks an agent for a step-by-step clustering rationale
//! given the gold answer, then a reviewer agent accepts or rejects it. A
//! local filter rejects traces that betray knowledge of the answer or are too
//! short, whatever the reviewer says.

use std::collections::HashSet;

use futures::stream::{self, StreamExt};
use ifclust_core::parser::{parse_response, render_answer};
use ifclust_core::task::{ClusterSpec, Dataset, Example, Task, TaskCluster};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::ChatAgent;
use crate::error::LlmError;
use crate::prompt::enumerate_items;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("agent call failed: {0}")]
    Agent(#[from] LlmError),

    #[error("could not parse a category table from agent output")]
    UnparseableTable { raw: String },

    #[error("taxonomy has {found} categories, need at least 2")]
    TooFewCategories { found: usize, raw: String },

    #[error("category {name:?}: {reason}")]
    CategoryRule { name: String, reason: String },

    #[error("instruction mentions category {0:?}")]
    InstructionLeak(String),

    #[error("refined taxonomy has no clustering instruction")]
    MissingInstruction { raw: String },

    #[error("trace output has no \"Think process:\" marker")]
    MissingMarker { raw: String },

    #[error("trace body is empty")]
    EmptyTrace,

    #[error("gold answer text does not encode the example's gold partition")]
    GoldMismatch,

    #[error("only {0} categories received consensus texts, need at least 2")]
    TooFewPopulated(usize),

    #[error("{0}")]
    Input(String),

    #[error(transparent)]
    Core(#[from] ifclust_core::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateTaxonomy {
    pub instruction: String,
    pub categories: Vec<ClusterSpec>,
    /// Raw agent output the taxonomy was parsed from.
    #[serde(default)]
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub name_word_limit: usize,
    pub desc_word_limit: usize,
    /// Texts shown to the generator.
    pub sample_size: usize,
    pub max_in_flight: usize,
    /// Traces shorter than this many characters are rejected.
    pub trace_min_chars: usize,
    pub banned_phrases: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            name_word_limit: 5,
            desc_word_limit: 40,
            sample_size: 10,
            max_in_flight: 8,
            trace_min_chars: 200,
            banned_phrases: vec![
                "looking at the correct answer".into(),
                "we must match".into(),
                "the real clusters are".into(),
            ],
        }
    }
}

/// One raw agent output, kept for auditing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub stage: String,
    pub agent: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item: Option<usize>,
    pub raw: String,
}

// ---------------------------------------------------------------------------
// Prompts

const GENERATION_PROMPT: &str = "\
You are an expert in taxonomy design.
Given (i) a description of a dataset and (ii) example text entries from it, your task is to propose meaningful clustering dimensions that capture distinct reasoning-based perspectives.

For each clustering dimension:
1. Provide a concise description of what the dimension represents.
2. List the possible cluster labels under this dimension.
3. Justify why each cluster is distinct, highlighting reasoning factors such as cause, intent, context, or outcome.

(i) {description}
(ii) {examples}

Your output must follow this structured table format:

| id | name | description |
| 1 | Category A | what it is + why it's distinct |
| 2 | Category B | what it is + why it's distinct |
| 3 | Category C | what it is + why it's distinct |

Before the table, state the clustering dimension on one line as:
Clustering instruction: <instruction>";

const REFINEMENT_PROMPT: &str = "\
You are a taxonomy refinement expert. Your goal is to revise the given taxonomy so that it is clear, consistent, and practically usable. Follow the requirements below:

Requirements
- Category name: <= {name_length} words; concise, specific, and informative.
- Description: <= {desc_length} words; clearly explain what distinguishes this category.
- Mutual exclusivity: Categories must not overlap or contradict each other.
- Collective exhaustiveness: Categories together should cover all possible intents in the given context.
- Granularity: All categories must be defined at the same level of specificity.
- No vague labels: Avoid terms like \"Other,\" \"General,\" or \"Miscellaneous.\"

Tasks
1. Review the existing taxonomy and suggest improvements (e.g., renaming, merging, splitting, or adding new categories).
2. Ensure each category has a clear reasoning justification and aligns with the data context.
3. If categories are missing, add enough to make the taxonomy collectively exhaustive.

Clustering Instruction
Based on the refined taxonomy, check the instruction and provide a neutral clustering instruction that accurately reflects the categorization principle without revealing category labels. Do not include or hint at the actual category names in the instruction.

Current instruction: {instruction}

Current taxonomy:
{taxonomy}

Output the refined taxonomy as a table with columns | id | name | description |, followed by one line:
Clustering instruction: <neutral instruction>";

const LABELING_PROMPT: &str = "\
You are an expert classification agent. Your task is to analyze the given data item and assign it to the most appropriate category from the provided taxonomy.

Taxonomy
{taxonomy}

Data to Classify
{data_item}

Classification Instructions
1. Carefully read the data item.
2. Compare it against the taxonomy categories and their descriptions.
3. Identify the single best-fitting category that captures the primary characteristic of the item.
4. If the item clearly does not fit any category, or if it is ambiguous, respond with no_match.

Key Guidelines
- Focus only on the essential content of the data item.
- Use the category descriptions (especially \"distinct because\") to guide differentiation.
- Do not guess—if uncertain, use no_match.
- Always select one and only one category (or no_match).

Required Output Format
Your response must strictly follow this format:

CATEGORY: [category number OR \"no_match\"]
REASON: [1–2 sentences explaining why this category is the best fit]";

const TRACE_PROMPT: &str = "\
Tasks
You are a clustering assistant to do text clustering.
Given a clustering goal and a list of indexed corpus (|1|. text, |2|. text, |3|. text...), cluster them following the think process below.
The clustering results should be in square brackets and use 1-based indexing for both total cluster and items (1, 2, 3, ...).

Think process of the task
First, read through all texts and think how can they be clustered based on the goal, determine the total number of clusters and each cluster's central meaning.
Then think about how to assign all texts into these clusters, ensure each text match the cluster's central meaning.
Finally, assign each text to a cluster based on the reasoning above.
Check the answer format before giving the final answer: every item must be assigned to exactly one cluster, and no item should appear in multiple clusters or be missing.

Goal: {instruction}
Text:
{enumerated_text}

The correct final clustering results are:
<answer>
{correct_answer}
</answer>

Now for the above tasks, please focus on producing a high-quality think process following the above guidance and naturally leads to the correct clusters.
IMPORTANT!!!
1. Simulate the think process guidance above as if you are clustering for the very first time, without knowing the final answer.
2. Avoid any phrasing that implies prior knowledge of the final answer (e.g., \"looking at the correct answer,\" \"we must match,\" \"the real clusters are\").
3. Do not perform sanity checks against the correct answer. The reasoning should unfold independently.
4. The correct results should only emerge after exploration, backtracking, and self-verification without over thinking.
5. Only return the high-quality think process start with \"Think process:\"";

const REVIEW_PROMPT: &str = "\
You are an expert AI judge tasked with evaluating the quality and completeness of reasoning chains.

Please evaluate the following reasoning chain based on these criteria:

1. Completeness: Does the reasoning chain generally provide a complete logical flow?
2. Length Appropriateness: Is the reasoning chain of appropriate length (not unnaturally short or abruptly cut off)?
3. Logical Coherence: Does the reasoning follow a logical sequence without gaps or jumps?

Reasoning Process of Clustering Task:
First, read through all texts and think how can they be clustered based on the goal, determine the total number of clusters and each cluster's central meaning.
Then think about how to assign all texts into these clusters, ensure each text match the cluster's central meaning.
Finally, assign each text to a cluster based on the reasoning above.

Reasoning Chain to Evaluate:
{reasoning_chain}

Response Format:
Provide your assessment in the following format:

ASSESSMENT: [ACCEPT/REJECT]
REASON: [Brief explanation of why you accepted or rejected this reasoning chain]

Examples:
- ACCEPT if the reasoning is complete, logical, appropriately detailed, and reaches a proper conclusion
- REJECT if the reasoning is too short, incomplete, illogical, abruptly cut off, or doesn't properly address the question

Your assessment:";

/// `| id | name | description |` table of categories.
pub fn render_taxonomy_table(categories: &[ClusterSpec]) -> String {
    let mut out = String::from("| id | name | description |\n");
    for (i, c) in categories.iter().enumerate() {
        out.push_str(&format!("| {} | {} | {} |\n", i + 1, c.name, c.description));
    }
    out
}

/// `1. name: description` lines for the labeling prompt.
pub fn render_taxonomy_list(categories: &[ClusterSpec]) -> String {
    categories
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}. {}: {}", i + 1, c.name, c.description))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn generation_prompt(dataset_description: &str, sample_texts: &[String]) -> String {
    let examples = sample_texts
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{}. {}", i + 1, t))
        .collect::<Vec<_>>()
        .join("\n");
    GENERATION_PROMPT
        .replace("{description}", dataset_description)
        .replace("{examples}", &examples)
}

pub fn refinement_prompt(t: &CandidateTaxonomy, name_limit: usize, desc_limit: usize) -> String {
    REFINEMENT_PROMPT
        .replace("{name_length}", &name_limit.to_string())
        .replace("{desc_length}", &desc_limit.to_string())
        .replace("{instruction}", &t.instruction)
        .replace("{taxonomy}", render_taxonomy_table(&t.categories).trim_end())
}

pub fn labeling_prompt(text: &str, categories: &[ClusterSpec]) -> String {
    LABELING_PROMPT
        .replace("{taxonomy}", &render_taxonomy_list(categories))
        .replace("{data_item}", text)
}

pub fn trace_prompt(example: &Example, gold_answer_text: &str) -> String {
    TRACE_PROMPT
        .replace("{instruction}", &example.instruction)
        .replace("{enumerated_text}", &enumerate_items(&example.items))
        .replace("{correct_answer}", gold_answer_text)
}

pub fn review_prompt(trace: &str) -> String {
    REVIEW_PROMPT.replace("{reasoning_chain}", trace)
}

// ---------------------------------------------------------------------------
// Output parsing

fn strip_brackets(s: &str) -> &str {
    let s = s.trim();
    let s = s.strip_prefix('[').unwrap_or(s);
    let s = s.strip_suffix(']').unwrap_or(s);
    s.trim().trim_matches('"').trim()
}

/// Rows of an `id | name | description` table. Accepts markdown pipes or
/// LaTeX `&` separators; rows whose first cell is not an integer id (headers,
/// separators) are skipped.
pub fn parse_category_table(raw: &str) -> Vec<ClusterSpec> {
    let mut out = Vec::new();
    for line in raw.lines() {
        let line = line.trim().trim_end_matches("\\\\").trim();
        let sep = if line.contains('|') { '|' } else if line.contains('&') { '&' } else { continue };
        let cells: Vec<&str> = line
            .split(sep)
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .collect();
        if cells.len() < 3 {
            continue;
        }
        let id = cells[0].trim_end_matches('.');
        if id.parse::<usize>().is_err() {
            continue;
        }
        let name = cells[1].trim_matches('*').trim();
        if name.is_empty() {
            continue;
        }
        out.push(ClusterSpec::new(name, cells[2..].join(&format!(" {sep} "))));
    }
    out
}

/// Value of the first `Clustering instruction:` line, if any.
fn parse_instruction_line(raw: &str) -> Option<String> {
    raw.lines().find_map(|line| {
        let line = line.trim().trim_start_matches(['*', '#', '-', ' ']);
        let lower = line.to_ascii_lowercase();
        let rest = ["clustering instruction:", "instruction:"]
            .iter()
            .find_map(|p| lower.starts_with(p).then(|| &line[p.len()..]))?;
        let v = rest.trim().trim_matches('*').trim().trim_matches('"').trim();
        (!v.is_empty()).then(|| v.to_string())
    })
}

fn taxonomy_from_output(raw: &str) -> Result<CandidateTaxonomy, SynthError> {
    let categories = parse_category_table(raw);
    match categories.len() {
        0 => Err(SynthError::UnparseableTable { raw: raw.to_string() }),
        1 => Err(SynthError::TooFewCategories {
            found: 1,
            raw: raw.to_string(),
        }),
        _ => Ok(CandidateTaxonomy {
            instruction: parse_instruction_line(raw).unwrap_or_default(),
            categories,
            provenance: raw.to_string(),
        }),
    }
}

/// Labeler verdict: `Some(n)` for category n (1-based), `None` for no_match
/// or anything unparseable.
pub fn parse_category_line(raw: &str, n_categories: usize) -> (Option<usize>, String) {
    let mut category = None;
    let mut reason = String::new();
    for line in raw.lines() {
        let t = line.trim();
        let upper = t.to_ascii_uppercase();
        if upper.starts_with("CATEGORY:") && category.is_none() {
            let v = strip_brackets(&t["CATEGORY:".len()..]);
            category = Some(v.parse::<usize>().ok().filter(|&c| c >= 1 && c <= n_categories));
        } else if upper.starts_with("REASON:") && reason.is_empty() {
            reason = strip_brackets(&t["REASON:".len()..]).to_string();
        }
    }
    (category.flatten(), reason)
}

// ---------------------------------------------------------------------------
// Stages

pub async fn generate_candidate_taxonomy<A: ChatAgent>(
    agent: &A,
    dataset_description: &str,
    sample_texts: &[String],
) -> Result<CandidateTaxonomy, SynthError> {
    if sample_texts.is_empty() {
        return Err(SynthError::Input("at least one sample text is required".into()));
    }
    let raw = agent
        .complete(None, &generation_prompt(dataset_description, sample_texts))
        .await?
        .text;
    taxonomy_from_output(&raw)
}

const VAGUE_LABELS: [&str; 5] = ["other", "others", "general", "miscellaneous", "misc"];

/// Mechanical checks on a refined taxonomy: word limits, vague labels,
/// duplicate names and category names leaking into the instruction.
pub fn check_refined(t: &CandidateTaxonomy, name_limit: usize, desc_limit: usize) -> Result<(), SynthError> {
    if t.categories.len() < 2 {
        return Err(SynthError::TooFewCategories {
            found: t.categories.len(),
            raw: t.provenance.clone(),
        });
    }
    let mut names = HashSet::new();
    for c in &t.categories {
        let rule = |reason: String| SynthError::CategoryRule {
            name: c.name.clone(),
            reason,
        };
        c.validate(name_limit).map_err(|e| rule(e.to_string()))?;
        let desc_words = c.description.split_whitespace().count();
        if desc_words > desc_limit {
            return Err(rule(format!("description has {desc_words} words, limit {desc_limit}")));
        }
        let vague = c
            .name
            .split(|ch: char| !ch.is_alphanumeric())
            .any(|w| VAGUE_LABELS.contains(&w.to_ascii_lowercase().as_str()));
        if vague {
            return Err(rule("vague label".into()));
        }
        if !names.insert(c.name.to_lowercase()) {
            return Err(rule("duplicate category name".into()));
        }
    }
    if t.instruction.trim().is_empty() {
        return Err(SynthError::MissingInstruction {
            raw: t.provenance.clone(),
        });
    }
    let instruction = t.instruction.to_lowercase();
    if let Some(c) = t
        .categories
        .iter()
        .find(|c| instruction.contains(&c.name.to_lowercase()))
    {
        return Err(SynthError::InstructionLeak(c.name.clone()));
    }
    Ok(())
}

pub async fn refine_taxonomy<A: ChatAgent>(
    agent: &A,
    t: &CandidateTaxonomy,
    name_limit: usize,
    desc_limit: usize,
) -> Result<CandidateTaxonomy, SynthError> {
    if t.categories.len() < 2 {
        return Err(SynthError::TooFewCategories {
            found: t.categories.len(),
            raw: t.provenance.clone(),
        });
    }
    let raw = agent
        .complete(None, &refinement_prompt(t, name_limit, desc_limit))
        .await?
        .text;
    let refined = taxonomy_from_output(&raw)?;
    check_refined(&refined, name_limit, desc_limit)?;
    Ok(refined)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelerOutput {
    pub category: Option<usize>,
    pub reason: String,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusLabel {
    pub text: String,
    /// 1-based category number.
    pub category: usize,
    pub labelers: [LabelerOutput; 2],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum LabelOutcome {
    Consensus(ConsensusLabel),
    Discarded { text: String, labelers: [LabelerOutput; 2] },
}

impl LabelOutcome {
    pub fn labelers(&self) -> &[LabelerOutput; 2] {
        match self {
            LabelOutcome::Consensus(c) => &c.labelers,
            LabelOutcome::Discarded { labelers, .. } => labelers,
        }
    }
}

async fn label_once<A: ChatAgent>(agent: &A, prompt: &str, n: usize) -> LabelerOutput {
    match agent.complete(None, prompt).await {
        Ok(c) => {
            let (category, reason) = parse_category_line(&c.text, n);
            LabelerOutput {
                category,
                reason,
                raw: c.text,
            }
        }
        // a failed call counts as no_match for that labeler
        Err(e) => LabelerOutput {
            category: None,
            reason: format!("labeler error: {e}"),
            raw: String::new(),
        },
    }
}

/// Two independent, stateless labeler calls; the text is kept only when both
/// name the same category.
pub async fn consensus_label<A: ChatAgent, B: ChatAgent>(
    labeler_a: &A,
    labeler_b: &B,
    text: &str,
    categories: &[ClusterSpec],
) -> LabelOutcome {
    let prompt = labeling_prompt(text, categories);
    let n = categories.len();
    let (a, b) = futures::join!(label_once(labeler_a, &prompt, n), label_once(labeler_b, &prompt, n));
    match (a.category, b.category) {
        (Some(x), Some(y)) if x == y => LabelOutcome::Consensus(ConsensusLabel {
            text: text.to_string(),
            category: x,
            labelers: [a, b],
        }),
        _ => LabelOutcome::Discarded {
            text: text.to_string(),
            labelers: [a, b],
        },
    }
}

/// Input corpus for task synthesis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub task_id: String,
    pub dataset: Dataset,
    pub description: String,
    #[serde(default)]
    pub held_out: bool,
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOutput {
    pub task: Task,
    pub taxonomy: CandidateTaxonomy,
    pub labels: Vec<LabelOutcome>,
    pub audit: Vec<AuditEntry>,
}

/// Builds a task from consensus labels. Categories with no retained texts
/// are dropped; a text labeled more than once keeps its first label.
pub fn assemble_task(corpus: &Corpus, taxonomy: &CandidateTaxonomy, labels: &[LabelOutcome]) -> Result<Task, SynthError> {
    let mut texts: Vec<Vec<String>> = vec![Vec::new(); taxonomy.categories.len()];
    let mut seen = HashSet::new();
    for outcome in labels {
        if let LabelOutcome::Consensus(c) = outcome {
            if seen.insert(c.text.clone()) {
                texts[c.category - 1].push(c.text.clone());
            }
        }
    }
    let clusters: Vec<TaskCluster> = taxonomy
        .categories
        .iter()
        .zip(texts)
        .filter(|(_, t)| !t.is_empty())
        .map(|(spec, texts)| TaskCluster {
            spec: spec.clone(),
            texts,
        })
        .collect();
    if clusters.len() < 2 {
        return Err(SynthError::TooFewPopulated(clusters.len()));
    }
    let task = Task {
        task_id: corpus.task_id.clone(),
        dataset: corpus.dataset,
        instruction: taxonomy.instruction.clone(),
        held_out: corpus.held_out,
        clusters,
    };
    task.validate()?;
    Ok(task)
}

/// Labels every corpus text against a refined taxonomy, with at most
/// `max_in_flight` items in progress.
pub async fn label_corpus<A: ChatAgent, B: ChatAgent>(
    labeler_a: &A,
    labeler_b: &B,
    texts: &[String],
    taxonomy: &CandidateTaxonomy,
    max_in_flight: usize,
) -> Vec<LabelOutcome> {
    stream::iter(texts)
        .map(|t| consensus_label(labeler_a, labeler_b, t, &taxonomy.categories))
        .buffered(max_in_flight.max(1))
        .collect()
        .await
}

/// Where to start the pipeline. Externally edited taxonomies enter through
/// `Refine` (a rewritten candidate) or `Label` (a final refined taxonomy).
#[derive(Debug, Clone)]
pub enum SynthStart {
    Generate,
    Refine(CandidateTaxonomy),
    Label(CandidateTaxonomy),
}

pub struct Agents<'a, G, R, A, B> {
    pub generator: &'a G,
    pub refiner: &'a R,
    pub labeler_a: &'a A,
    pub labeler_b: &'a B,
}

pub async fn synthesize_task<G, R, A, B>(
    agents: Agents<'_, G, R, A, B>,
    corpus: &Corpus,
    start: SynthStart,
    cfg: &SynthConfig,
) -> Result<SynthOutput, SynthError>
where
    G: ChatAgent,
    R: ChatAgent,
    A: ChatAgent,
    B: ChatAgent,
{
    if corpus.texts.is_empty() {
        return Err(SynthError::Input("corpus has no texts".into()));
    }
    let mut audit = Vec::new();
    let candidate = match start {
        SynthStart::Generate => {
            let sample: Vec<String> = corpus.texts.iter().take(cfg.sample_size.max(1)).cloned().collect();
            let t = generate_candidate_taxonomy(agents.generator, &corpus.description, &sample).await?;
            audit.push(AuditEntry {
                stage: "generate".into(),
                agent: agents.generator.model_name().to_string(),
                item: None,
                raw: t.provenance.clone(),
            });
            Ok(t)
        }
        SynthStart::Refine(t) => Ok(t),
        SynthStart::Label(t) => Err(t),
    };
    let refined = match candidate {
        Ok(c) => {
            let r = refine_taxonomy(agents.refiner, &c, cfg.name_word_limit, cfg.desc_word_limit).await?;
            audit.push(AuditEntry {
                stage: "refine".into(),
                agent: agents.refiner.model_name().to_string(),
                item: None,
                raw: r.provenance.clone(),
            });
            r
        }
        Err(t) => {
            check_refined(&t, cfg.name_word_limit, cfg.desc_word_limit)?;
            t
        }
    };

    let labels = label_corpus(agents.labeler_a, agents.labeler_b, &corpus.texts, &refined, cfg.max_in_flight).await;
    for (i, outcome) in labels.iter().enumerate() {
        for (which, out) in ["label_a", "label_b"].iter().zip(outcome.labelers()) {
            audit.push(AuditEntry {
                stage: (*which).into(),
                agent: if *which == "label_a" {
                    agents.labeler_a.model_name().to_string()
                } else {
                    agents.labeler_b.model_name().to_string()
                },
                item: Some(i + 1),
                raw: out.raw.clone(),
            });
        }
    }
    let task = assemble_task(corpus, &refined, &labels)?;
    Ok(SynthOutput {
        task,
        taxonomy: refined,
        labels,
        audit,
    })
}

// ---------------------------------------------------------------------------
// Reasoning traces

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TraceVerdict {
    Accept,
    Reject,
}

/// On-disk form of one distillation pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub example_id: String,
    pub prompt: String,
    pub trace: String,
    pub verdict: TraceVerdict,
    pub reason: String,
}

const THINK_MARKER: &str = "think process:";

/// Text after the first `Think process:` marker (case-insensitive).
pub fn extract_trace(raw: &str) -> Result<String, SynthError> {
    let lower = raw.to_lowercase();
    let Some(pos) = lower.find(THINK_MARKER) else {
        return Err(SynthError::MissingMarker { raw: raw.to_string() });
    };
    // lowercasing can shift byte offsets for non-ASCII text; re-find on the
    // original when that happens
    let start = if lower.len() == raw.len() {
        pos + THINK_MARKER.len()
    } else {
        raw.char_indices()
            .map(|(i, _)| i)
            .find(|&i| raw[i..].to_lowercase().starts_with(THINK_MARKER))
            .map(|i| i + THINK_MARKER.len())
            .ok_or_else(|| SynthError::MissingMarker { raw: raw.to_string() })?
    };
    let body = raw[start..].trim();
    if body.is_empty() {
        return Err(SynthError::EmptyTrace);
    }
    Ok(body.to_string())
}

pub async fn generate_reasoning_trace<A: ChatAgent>(
    agent: &A,
    example: &Example,
    gold_answer_text: &str,
) -> Result<String, SynthError> {
    let wrapped = format!("<think>x</think><answer>{gold_answer_text}</answer>");
    match parse_response(&wrapped, example.m()) {
        Ok(p) if p.partition == example.gold => {}
        _ => return Err(SynthError::GoldMismatch),
    }
    let raw = agent
        .complete(None, &trace_prompt(example, gold_answer_text))
        .await?
        .text;
    extract_trace(&raw)
}

/// Phrases from `banned` found in the trace, case-insensitively.
pub fn foreknowledge_hits<'a>(trace: &str, banned: &'a [String]) -> Vec<&'a str> {
    let lower = trace.to_lowercase();
    banned
        .iter()
        .filter(|p| lower.contains(&p.to_lowercase()))
        .map(String::as_str)
        .collect()
}

pub fn parse_assessment(raw: &str) -> Option<(TraceVerdict, String)> {
    let mut verdict = None;
    let mut reason = String::new();
    for line in raw.lines() {
        let t = line.trim();
        let upper = t.to_ascii_uppercase();
        if upper.starts_with("ASSESSMENT:") && verdict.is_none() {
            verdict = match strip_brackets(&t["ASSESSMENT:".len()..]).to_ascii_uppercase().as_str() {
                "ACCEPT" => Some(TraceVerdict::Accept),
                "REJECT" => Some(TraceVerdict::Reject),
                _ => None,
            };
        } else if upper.starts_with("REASON:") && reason.is_empty() {
            reason = strip_brackets(&t["REASON:".len()..]).to_string();
        }
    }
    verdict.map(|v| (v, reason))
}

/// Local filters first (banned phrases, length floor); the reviewer is only
/// consulted for traces that pass them.
pub async fn review_trace<A: ChatAgent>(
    agent: &A,
    trace: &str,
    cfg: &SynthConfig,
) -> Result<(TraceVerdict, String), SynthError> {
    if trace.trim().is_empty() {
        return Err(SynthError::EmptyTrace);
    }
    let hits = foreknowledge_hits(trace, &cfg.banned_phrases);
    if !hits.is_empty() {
        return Ok((TraceVerdict::Reject, format!("foreknowledge phrase: {}", hits.join(", "))));
    }
    let len = trace.chars().count();
    if len < cfg.trace_min_chars {
        return Ok((
            TraceVerdict::Reject,
            format!("trace has {len} characters, minimum {}", cfg.trace_min_chars),
        ));
    }
    let raw = agent.complete(None, &review_prompt(trace)).await?.text;
    Ok(parse_assessment(&raw).unwrap_or((TraceVerdict::Reject, "unparseable review".into())))
}

/// Generates and reviews a trace for one example. Generation failures become
/// rejected records so a batch never loses examples.
pub async fn trace_example<G: ChatAgent, R: ChatAgent>(
    generator: &G,
    reviewer: &R,
    example: &Example,
    cfg: &SynthConfig,
) -> TraceRecord {
    let answer = render_answer(&example.gold);
    let prompt = trace_prompt(example, &answer);
    let (trace, verdict, reason) = match generate_reasoning_trace(generator, example, &answer).await {
        Ok(trace) => match review_trace(reviewer, &trace, cfg).await {
            Ok((v, r)) => (trace, v, r),
            Err(e) => (trace, TraceVerdict::Reject, e.to_string()),
        },
        Err(e) => (String::new(), TraceVerdict::Reject, e.to_string()),
    };
    TraceRecord {
        example_id: example.example_id.clone(),
        prompt,
        trace,
        verdict,
        reason,
    }
}

/// Traces for a batch of examples, in input order, with at most
/// `cfg.max_in_flight` examples in progress.
pub async fn trace_examples<G: ChatAgent, R: ChatAgent>(
    generator: &G,
    reviewer: &R,
    examples: &[Example],
    cfg: &SynthConfig,
) -> Vec<TraceRecord> {
    stream::iter(examples)
        .map(|ex| trace_example(generator, reviewer, ex, cfg))
        .buffered(cfg.max_in_flight.max(1))
        .collect()
        .await
}

#[cfg(test)]
mod tests {
    use super::*;
    use ifclust_core::task::Split;
    use ifclust_core::Partition;

    fn reply(s: &'static str) -> impl Fn(Option<&str>, &str) -> Result<String, LlmError> + Sync {
        move |_, _| Ok(s.to_string())
    }

    const TABLE3: &str = "Clustering instruction: Group posts by the author's goal\n\
| id | name | description |\n|---|---|---|\n\
| 1 | Seeking Advice | asks for help |\n| 2 | Sharing News | reports an event |\n| 3 | Venting | expresses frustration |\n";

    fn taxonomy(names: &[&str], instruction: &str) -> CandidateTaxonomy {
        CandidateTaxonomy {
            instruction: instruction.into(),
            categories: names.iter().map(|n| ClusterSpec::new(*n, "some description")).collect(),
            provenance: String::new(),
        }
    }

    #[tokio::test]
    async fn generation_parses_table() {
        let t = generate_candidate_taxonomy(&reply(TABLE3), "forum posts", &["a".into()])
            .await
            .unwrap();
        assert_eq!(t.categories.len(), 3);
        assert_eq!(t.categories[1].name, "Sharing News");
        assert_eq!(t.instruction, "Group posts by the author's goal");
        assert_eq!(t.provenance, TABLE3);

        let one = "| 1 | Only | desc |";
        assert!(matches!(
            generate_candidate_taxonomy(&reply(one), "d", &["a".into()]).await,
            Err(SynthError::TooFewCategories { found: 1, .. })
        ));
        match generate_candidate_taxonomy(&reply("no table here"), "d", &["a".into()]).await {
            Err(SynthError::UnparseableTable { raw }) => assert_eq!(raw, "no table here"),
            other => panic!("{other:?}"),
        }
        assert!(generate_candidate_taxonomy(&reply(TABLE3), "d", &[]).await.is_err());
    }

    #[test]
    fn latex_rows_parse() {
        let raw = "id & name & description \\\\\n1 & Alpha & first \\\\\n2 & Beta & second \\\\";
        let cats = parse_category_table(raw);
        assert_eq!(cats.len(), 2);
        assert_eq!(cats[0].name, "Alpha");
        assert_eq!(cats[1].description, "second");
    }

    #[test]
    fn refinement_rules() {
        assert!(check_refined(&taxonomy(&["Seeking Advice", "Venting"], "Group by intent"), 5, 40).is_ok());
        assert!(matches!(
            check_refined(
                &taxonomy(&["LGBTQ+ Individuals", "Elderly People"], "Cluster by lgbtq+ individuals vs others"),
                5,
                40
            ),
            Err(SynthError::InstructionLeak(n)) if n == "LGBTQ+ Individuals"
        ));
        assert!(matches!(
            check_refined(&taxonomy(&["Other", "Venting"], "Group by intent"), 5, 40),
            Err(SynthError::CategoryRule { .. })
        ));
        assert!(check_refined(&taxonomy(&["a b c d e f", "Venting"], "g"), 5, 40).is_err());
        assert!(check_refined(&taxonomy(&["Venting", "venting"], "g"), 5, 40).is_err());
        let mut long = taxonomy(&["A", "B"], "g");
        long.categories[0].description = "w ".repeat(41);
        assert!(check_refined(&long, 5, 40).is_err());
        assert!(matches!(
            check_refined(&taxonomy(&["A", "B"], " "), 5, 40),
            Err(SynthError::MissingInstruction { .. })
        ));
    }

    #[tokio::test]
    async fn refine_calls_agent_and_checks() {
        let t = taxonomy(&["X", "Y"], "old");
        let r = refine_taxonomy(&reply(TABLE3), &t, 5, 40).await.unwrap();
        assert_eq!(r.categories.len(), 3);
        let leaky = "Clustering instruction: find Venting posts\n| 1 | Venting | d |\n| 2 | Sharing News | d |";
        assert!(matches!(
            refine_taxonomy(&reply(leaky), &t, 5, 40).await,
            Err(SynthError::InstructionLeak(_))
        ));
    }

    #[test]
    fn prompts_fill_placeholders() {
        let t = taxonomy(&["A", "B"], "inst");
        let p = refinement_prompt(&t, 3, 25);
        assert!(p.contains("<= 3 words") && p.contains("<= 25 words"));
        assert!(!p.contains('{'));
        let p = labeling_prompt("some text", &t.categories);
        assert!(p.contains("1. A: some description\n2. B: some description"));
        assert!(p.contains("Data to Classify\nsome text"));
        assert!(!review_prompt("chain").contains("{reasoning_chain}"));
        assert!(!generation_prompt("d", &["x".into()]).contains("{examples}"));
    }

    #[test]
    fn category_lines() {
        assert_eq!(parse_category_line("CATEGORY: 2\nREASON: fits", 3), (Some(2), "fits".into()));
        assert_eq!(parse_category_line("CATEGORY: [3]", 3).0, Some(3));
        assert_eq!(parse_category_line("CATEGORY: no_match", 3).0, None);
        assert_eq!(parse_category_line("CATEGORY: 4", 3).0, None);
        assert_eq!(parse_category_line("I think 2", 3).0, None);
    }

    #[tokio::test]
    async fn consensus_rules() {
        let cats = taxonomy(&["A", "B", "C"], "g").categories;
        let two = reply("CATEGORY: 2\nREASON: r");
        let three = reply("CATEGORY: 3\nREASON: r");
        let none = reply("CATEGORY: no_match\nREASON: unclear");
        let junk = reply("dunno");
        let failing = |_: Option<&str>, _: &str| -> Result<String, LlmError> { Err(LlmError::Transport("down".into())) };

        match consensus_label(&two, &two, "t", &cats).await {
            LabelOutcome::Consensus(c) => {
                assert_eq!(c.category, 2);
                assert_eq!(c.labelers[0].reason, "r");
            }
            other => panic!("{other:?}"),
        }
        for out in [
            consensus_label(&two, &three, "t", &cats).await,
            consensus_label(&two, &none, "t", &cats).await,
            consensus_label(&none, &none, "t", &cats).await,
            consensus_label(&junk, &two, "t", &cats).await,
            consensus_label(&two, &failing, "t", &cats).await,
        ] {
            assert!(matches!(out, LabelOutcome::Discarded { .. }));
        }
    }

    fn example() -> Example {
        Example::from_labeled(
            "e1".into(),
            "t".into(),
            Dataset::Custom,
            Split::Train,
            "group".into(),
            vec!["a".into(), "b".into(), "c".into()],
            &[1, 2, 1],
        )
        .unwrap()
    }

    #[tokio::test]
    async fn trace_generation() {
        let ex = example();
        let gold = render_answer(&ex.gold);
        let body = generate_reasoning_trace(&reply("Think process: first I read."), &ex, &gold)
            .await
            .unwrap();
        assert_eq!(body, "first I read.");
        assert!(matches!(
            generate_reasoning_trace(&reply("no marker"), &ex, &gold).await,
            Err(SynthError::MissingMarker { .. })
        ));
        assert!(matches!(
            generate_reasoning_trace(&reply("Think process:   "), &ex, &gold).await,
            Err(SynthError::EmptyTrace)
        ));
        let wrong = render_answer(&Partition::from_labels(&[1, 1, 2]).unwrap());
        assert!(matches!(
            generate_reasoning_trace(&reply("Think process: x"), &ex, &wrong).await,
            Err(SynthError::GoldMismatch)
        ));
    }

    #[tokio::test]
    async fn review_rules() {
        let cfg = SynthConfig::default();
        let clean = "I read every text and compared their goals. ".repeat(6);
        let accept = reply("ASSESSMENT: ACCEPT\nREASON: ok");
        assert_eq!(
            review_trace(&accept, &clean, &cfg).await.unwrap(),
            (TraceVerdict::Accept, "ok".into())
        );
        let banned = format!("{clean} Looking at the correct answer, it fits.");
        assert_eq!(review_trace(&accept, &banned, &cfg).await.unwrap().0, TraceVerdict::Reject);
        assert_eq!(review_trace(&accept, "short", &cfg).await.unwrap().0, TraceVerdict::Reject);
        assert_eq!(
            review_trace(&reply("ASSESSMENT: REJECT"), &clean, &cfg).await.unwrap().0,
            TraceVerdict::Reject
        );
        assert_eq!(
            review_trace(&reply("looks fine"), &clean, &cfg).await.unwrap(),
            (TraceVerdict::Reject, "unparseable review".into())
        );
        assert!(review_trace(&accept, "  ", &cfg).await.is_err());
    }

    #[tokio::test]
    async fn pipeline_keeps_only_consensus() {
        let corpus = Corpus {
            task_id: "t1".into(),
            dataset: Dataset::Custom,
            description: "posts".into(),
            held_out: false,
            texts: vec!["help me".into(), "big news".into(), "ugh".into(), "hmm".into(), "help me".into()],
        };
        let refined = "Clustering instruction: Group posts by the author's goal\n\
| 1 | Seeking Advice | d |\n| 2 | Sharing News | d |\n| 3 | Venting | d |";
        let pick = |text: &str| -> &'static str {
            if text.contains("help me") {
                "CATEGORY: 1"
            } else if text.contains("big news") {
                "CATEGORY: 2"
            } else {
                "CATEGORY: no_match"
            }
        };
        let a = move |_: Option<&str>, u: &str| -> Result<String, LlmError> { Ok(pick(u).into()) };
        let b = move |_: Option<&str>, u: &str| -> Result<String, LlmError> {
            Ok(if u.contains("ugh") { "CATEGORY: 3".into() } else { pick(u).into() })
        };
        let agents = Agents {
            generator: &reply(TABLE3),
            refiner: &reply(refined),
            labeler_a: &a,
            labeler_b: &b,
        };
        let out = synthesize_task(agents, &corpus, SynthStart::Generate, &SynthConfig::default())
            .await
            .unwrap();
        assert_eq!(out.task.clusters.len(), 2);
        assert_eq!(out.task.clusters[0].texts, vec!["help me".to_string()]);
        assert_eq!(out.task.clusters[1].texts, vec!["big news".to_string()]);
        assert!(out.task.validate().is_ok());
        assert_eq!(out.audit.iter().filter(|e| e.stage.starts_with("label")).count(), 10);
        assert_eq!(out.labels.iter().filter(|l| matches!(l, LabelOutcome::Consensus(_))).count(), 3);
    }
}
