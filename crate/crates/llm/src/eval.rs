//! Batch inference and scoring.
//!
//! Inference and scoring are separate stages: responses are cached as JSONL
//! first, then scored, so saved model outputs can be re-analyzed without
//! repeating model calls.

use std::collections::HashMap;

use futures::stream::{self, StreamExt};
use ifclust_core::baselines::{chars_div4, example_units, DEFAULT_MAX_UNITS};
use ifclust_core::metrics::{aggregate, ReportRecord};
use ifclust_core::reward::score_response;
use ifclust_core::{Dataset, Example, FormatVerdict, MetricScore, Report, RewardBreakdown, RewardConfig, Split, TextItem};
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::client::ChatAgent;
use crate::error::LlmError;
use crate::prompt::{render_clustering_prompt, FORMAT_SYSTEM_PROMPT};

/// One line of the response cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedResponse {
    pub example_id: String,
    pub model: String,
    pub raw: String,
    pub latency_ms: u64,
    pub attempts: u32,
    /// Set when no model output was obtained (request failure or skipped input).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub example_id: String,
    pub dataset: Dataset,
    pub split: Split,
    pub raw_response: String,
    pub verdict: FormatVerdict,
    pub score: MetricScore,
    pub reward: RewardBreakdown,
    pub latency_ms: u64,
    pub attempts: u32,
}

impl EvalRecord {
    pub fn report_record(&self) -> ReportRecord {
        ReportRecord {
            example_id: self.example_id.clone(),
            dataset: self.dataset,
            split: self.split,
            verdict: self.verdict.clone(),
            score: self.score,
            reward: Some(self.reward),
        }
    }
}

/// What to do with examples whose estimated input exceeds the budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlongPolicy {
    /// Do not query the model; the example is recorded as unparseable.
    Skip,
    /// Shorten every item text evenly until the input fits.
    Truncate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferOptions {
    /// Responses requested per example (rollout group size).
    pub samples: usize,
    pub max_in_flight: usize,
    pub max_units: usize,
    pub overlong: OverlongPolicy,
    /// Also send the answer-grammar system message.
    pub format_system_prompt: bool,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            samples: 1,
            max_in_flight: 8,
            max_units: DEFAULT_MAX_UNITS,
            overlong: OverlongPolicy::Skip,
            format_system_prompt: false,
        }
    }
}

/// Shortens item texts (keeping at least one character each) so that the
/// example fits `max_units` under the chars/4 estimate.
fn truncate_items(example: &Example, max_units: usize) -> Vec<TextItem> {
    let mut budget_chars = max_units.saturating_sub(chars_div4(&example.instruction)) * 4;
    let m = example.items.len();
    let mut per_item = (budget_chars / m).max(1);
    // shrink until the estimate fits; rounding up per item can overshoot
    loop {
        let items: Vec<TextItem> = example
            .items
            .iter()
            .map(|it| TextItem {
                index: it.index,
                text: it.text.chars().take(per_item).collect(),
            })
            .collect();
        let units = chars_div4(&example.instruction) + items.iter().map(|i| chars_div4(&i.text)).sum::<usize>();
        if units <= max_units || per_item == 1 {
            return items;
        }
        budget_chars = budget_chars.saturating_sub(4 * m);
        per_item = (budget_chars / m).max(1);
    }
}

async fn infer_one<A: ChatAgent>(
    agent: &A,
    example: &Example,
    sample: usize,
    opts: &InferOptions,
) -> CachedResponse {
    let model = agent.model_name().to_string();
    let failed = |error: String| CachedResponse {
        example_id: example.example_id.clone(),
        model: model.clone(),
        raw: String::new(),
        latency_ms: 0,
        attempts: 0,
        error: Some(error),
    };

    let units = example_units(example, &chars_div4);
    let items = if units > opts.max_units {
        match opts.overlong {
            OverlongPolicy::Skip => {
                return failed(format!("skipped: input of ~{units} units exceeds {}", opts.max_units))
            }
            OverlongPolicy::Truncate => truncate_items(example, opts.max_units),
        }
    } else {
        example.items.clone()
    };

    let prompt = match render_clustering_prompt(&example.instruction, &items) {
        Ok(p) => p,
        Err(e) => return failed(e.to_string()),
    };
    let system = opts.format_system_prompt.then_some(FORMAT_SYSTEM_PROMPT);
    match agent.complete(system, &prompt).await {
        Ok(c) => CachedResponse {
            example_id: example.example_id.clone(),
            model,
            raw: c.text,
            latency_ms: c.latency_ms,
            attempts: c.attempts,
            error: None,
        },
        Err(e) => {
            warn!(example_id = %example.example_id, sample, error = %e, "inference failed");
            let attempts = match &e {
                LlmError::Exhausted { attempts, .. } => *attempts,
                _ => 1,
            };
            CachedResponse {
                attempts,
                ..failed(e.to_string())
            }
        }
    }
}

/// Queries the model for every example, `opts.samples` times each, with at
/// most `opts.max_in_flight` requests outstanding. Per-example failures are
/// recorded in the cache rather than aborting the run. Output is ordered by
/// example id, then sample.
pub async fn infer<A: ChatAgent>(
    agent: &A,
    examples: &[Example],
    opts: &InferOptions,
) -> Result<Vec<CachedResponse>, LlmError> {
    if examples.is_empty() {
        return Err(LlmError::Config("no examples to evaluate".into()));
    }
    if opts.max_in_flight == 0 || opts.samples == 0 {
        return Err(LlmError::Config("max_in_flight and samples must be >= 1".into()));
    }
    let mut order: Vec<&Example> = examples.iter().collect();
    order.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    let jobs: Vec<(&Example, usize)> = order
        .into_iter()
        .flat_map(|e| (0..opts.samples).map(move |s| (e, s)))
        .collect();
    let out = stream::iter(jobs)
        .map(|(ex, s)| infer_one(agent, ex, s, opts))
        .buffered(opts.max_in_flight)
        .collect()
        .await;
    Ok(out)
}

/// Scores cached responses against their examples. Every response yields a
/// record; unknown example ids are a data error.
pub fn score_responses(
    examples: &[Example],
    responses: &[CachedResponse],
    cfg: &RewardConfig,
) -> Result<Vec<EvalRecord>, LlmError> {
    cfg.validate()?;
    let by_id: HashMap<&str, &Example> = examples.iter().map(|e| (e.example_id.as_str(), e)).collect();
    let mut records = responses
        .iter()
        .map(|r| {
            let ex = by_id.get(r.example_id.as_str()).ok_or_else(|| {
                LlmError::Config(format!("response for unknown example {:?}", r.example_id))
            })?;
            let scored = score_response(&r.raw, ex, cfg);
            Ok(EvalRecord {
                example_id: r.example_id.clone(),
                dataset: ex.dataset,
                split: ex.split,
                raw_response: r.raw.clone(),
                verdict: scored.verdict,
                score: scored.score,
                reward: scored.reward,
                latency_ms: r.latency_ms,
                attempts: r.attempts,
            })
        })
        .collect::<Result<Vec<_>, LlmError>>()?;
    records.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    Ok(records)
}

pub async fn run_eval<A: ChatAgent>(
    agent: &A,
    examples: &[Example],
    reward_cfg: &RewardConfig,
    opts: &InferOptions,
) -> Result<Vec<EvalRecord>, LlmError> {
    for e in examples {
        e.validate()?;
    }
    let responses = infer(agent, examples, opts).await?;
    score_responses(examples, &responses, reward_cfg)
}

pub fn build_report(model: &str, records: &[EvalRecord]) -> Result<Report, LlmError> {
    Ok(aggregate(model, records.iter().map(EvalRecord::report_record).collect())?)
}
