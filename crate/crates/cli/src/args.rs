use std::path::PathBuf;

use clap::{Args, ValueEnum};
use ifclust_core::baselines::{Algorithm, Covariance, TemplateId, DEFAULT_MAX_UNITS};
use ifclust_llm::{EndpointConfig, OverlongPolicy};
use serde::Serialize;

use crate::CliError;

#[derive(Debug, Clone, Args, Serialize)]
pub struct EndpointArgs {
    /// Base URL of an OpenAI-compatible API, e.g. https://api.openai.com/v1.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    pub api_key_env: Option<String>,
    #[arg(long, default_value_t = 8)]
    pub max_in_flight: usize,
    #[arg(long, default_value_t = 3)]
    pub max_retries: u32,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 600.0)]
    pub timeout: f64,
    #[arg(long, default_value_t = 1.0)]
    pub backoff: f64,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
}

impl EndpointArgs {
    pub fn config(&self) -> Result<EndpointConfig, CliError> {
        let base = self
            .endpoint
            .clone()
            .ok_or_else(|| CliError::Usage("--endpoint is required".into()))?;
        let model = self
            .model
            .clone()
            .ok_or_else(|| CliError::Usage("--model is required".into()))?;
        Ok(self.config_for(base, model))
    }

    /// Same settings against another endpoint or model.
    pub fn config_for(&self, base_url: String, model: String) -> EndpointConfig {
        let mut cfg = EndpointConfig::new(base_url, model);
        cfg.api_key_env = self.api_key_env.clone();
        cfg.max_in_flight = self.max_in_flight;
        cfg.max_retries = self.max_retries;
        cfg.timeout_secs = self.timeout;
        cfg.backoff_base_secs = self.backoff;
        cfg.temperature = self.temperature;
        cfg.max_output_tokens = self.max_tokens;
        cfg
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RewardFlags {
    #[arg(long, default_value_t = 0.7)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 43)]
    pub seed: u64,
    /// Fraction of each cluster's texts assigned to the training pool.
    #[arg(long, default_value_t = 0.6)]
    pub ratio: f64,
    /// Examples per held-in task for TRAIN.
    #[arg(long, default_value_t = 20)]
    pub train_count: usize,
    /// Examples per task for each evaluation split.
    #[arg(long, default_value_t = 5)]
    pub c0_count: usize,
    #[arg(long, default_value_t = 5)]
    pub c1_count: usize,
    #[arg(long, default_value_t = 5)]
    pub c2_count: usize,
    #[arg(long, default_value_t = 3)]
    pub min_clusters: usize,
    #[arg(long, default_value_t = 8)]
    pub max_clusters: usize,
    #[arg(long, default_value_t = 2)]
    pub min_texts: usize,
    #[arg(long, default_value_t = 6)]
    pub max_texts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StartStage {
    Generate,
    Refine,
    Label,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    /// Corpus JSONL: {task_id, dataset, description, texts, held_out?} per line.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    /// Model for the second labeler (defaults to --model).
    #[arg(long)]
    pub labeler_model: Option<String>,
    /// Endpoint for the second labeler (defaults to --endpoint).
    #[arg(long)]
    pub labeler_endpoint: Option<String>,
    /// Taxonomy JSONL {task_id, instruction, categories} used with --start refine|label.
    #[arg(long)]
    pub taxonomies: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = StartStage::Generate)]
    pub start: StartStage,
    #[arg(long, default_value_t = 5)]
    pub name_limit: usize,
    #[arg(long, default_value_t = 40)]
    pub desc_limit: usize,
    /// Corpus texts shown to the generator.
    #[arg(long, default_value_t = 10)]
    pub sample_size: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TracesArgs {
    #[arg(long)]
    pub examples: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    #[arg(long)]
    pub reviewer_model: Option<String>,
    #[arg(long)]
    pub reviewer_endpoint: Option<String>,
    /// Traces shorter than this many characters are rejected.
    #[arg(long, default_value_t = 200)]
    pub min_chars: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Overlong {
    Skip,
    Truncate,
}

impl From<Overlong> for OverlongPolicy {
    fn from(o: Overlong) -> Self {
        match o {
            Overlong::Skip => OverlongPolicy::Skip,
            Overlong::Truncate => OverlongPolicy::Truncate,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub examples: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    /// Responses sampled per example.
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long, value_enum, default_value_t = Overlong::Skip)]
    pub overlong: Overlong,
    /// Input budget in estimated tokens (characters / 4).
    #[arg(long, default_value_t = DEFAULT_MAX_UNITS)]
    pub max_units: usize,
    /// Also send the answer-format system message.
    #[arg(long)]
    pub format_system_prompt: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub examples: PathBuf,
    #[arg(long)]
    pub responses: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub reward: RewardFlags,
    /// Model label for the report (defaults to the model recorded in the responses).
    #[arg(long)]
    pub model: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgoArg {
    Kmeans,
    Gmm,
}

impl From<AlgoArg> for Algorithm {
    fn from(a: AlgoArg) -> Self {
        match a {
            AlgoArg::Kmeans => Algorithm::Kmeans,
            AlgoArg::Gmm => Algorithm::Gmm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceArg {
    Diagonal,
    Spherical,
}

impl From<CovarianceArg> for Covariance {
    fn from(c: CovarianceArg) -> Self {
        match c {
            CovarianceArg::Diagonal => Covariance::Diagonal,
            CovarianceArg::Spherical => Covariance::Spherical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateArg {
    Instructor,
    Inbedder,
    Qwen,
    Openai,
    Generic,
}

impl From<TemplateArg> for TemplateId {
    fn from(t: TemplateArg) -> Self {
        match t {
            TemplateArg::Instructor => TemplateId::Instructor,
            TemplateArg::Inbedder => TemplateId::Inbedder,
            TemplateArg::Qwen => TemplateId::Qwen,
            TemplateArg::Openai => TemplateId::Openai,
            TemplateArg::Generic => TemplateId::Generic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum KSource {
    Gold,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BaselineArgs {
    #[arg(long)]
    pub examples: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Precomputed embedding blocks, one per example (header carries example_id).
    #[arg(long, conflicts_with = "endpoint")]
    pub embeddings: Option<PathBuf>,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    #[arg(long, value_enum, default_value_t = TemplateArg::Generic)]
    pub template: TemplateArg,
    #[arg(long, value_enum, default_value_t = AlgoArg::Kmeans)]
    pub algo: AlgoArg,
    #[arg(long, value_enum, default_value_t = KSource::Gold)]
    pub k_source: KSource,
    #[arg(long, default_value_t = 43)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub n_init: usize,
    #[arg(long, default_value_t = 300)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, value_enum, default_value_t = CovarianceArg::Diagonal)]
    pub covariance: CovarianceArg,
    #[arg(long, default_value_t = 1e-6)]
    pub reg_covar: f64,
    /// Examples whose estimated length exceeds this are dropped.
    #[arg(long, default_value_t = DEFAULT_MAX_UNITS)]
    pub max_units: usize,
    /// Rescale embeddings to unit length before clustering.
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RewardArgs {
    #[arg(long)]
    pub examples: PathBuf,
    #[arg(long)]
    pub responses: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Responses per rollout group.
    #[arg(long)]
    pub group_size: usize,
    #[command(flatten)]
    pub reward: RewardFlags,
}
