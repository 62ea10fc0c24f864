//! Hybrid format + clustering reward and group-relative advantages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{v_measure, MetricScore};
use crate::parser::{parse_response, FormatVerdict, ParsedResponse};
use crate::task::Example;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Decay applied per unit of cluster-count error.
    pub gamma: f64,
    /// Offset keeping both factors of the clustering reward positive.
    pub epsilon: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            gamma: 0.7,
            epsilon: 0.1,
        }
    }
}

impl RewardConfig {
    pub fn new(gamma: f64, epsilon: f64) -> Result<Self> {
        let cfg = Self { gamma, epsilon };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Largest attainable total reward, reached by a perfect valid answer.
    pub fn max_total(&self) -> f64 {
        1.0 + clustering_reward(1.0, 1.0, self.epsilon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_format: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_count: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_qual: Option<f64>,
    pub r_clust: f64,
    pub total: f64,
}

pub fn format_reward(verdict: &FormatVerdict) -> f64 {
    if verdict.valid {
        1.0
    } else {
        -1.0
    }
}

pub fn count_reward(k_pred: usize, k_gold: usize, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Config(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    if k_pred == 0 || k_gold == 0 {
        return Err(Error::Config("cluster counts must be positive".into()));
    }
    let diff = k_pred.abs_diff(k_gold);
    Ok(gamma.powi(i32::try_from(diff).unwrap_or(i32::MAX)))
}

pub fn clustering_reward(r_count: f64, r_qual: f64, epsilon: f64) -> f64 {
    (r_count + epsilon) * (r_qual + epsilon) - epsilon
}

/// Everything learned from scoring one response against its example.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub verdict: FormatVerdict,
    pub parsed: Option<ParsedResponse>,
    pub score: MetricScore,
    pub reward: RewardBreakdown,
}

/// Parses, scores and rewards `raw` in one pass. Unparseable responses get a
/// zero clustering term and a zero V-measure.
pub fn score_response(raw: &str, example: &Example, cfg: &RewardConfig) -> Scored {
    match parse_response(raw, example.m()) {
        Ok(parsed) => {
            let score = v_measure(&parsed.partition, &example.gold)
                .expect("parser guarantees matching item count");
            let r_count = count_reward(parsed.declared_k, example.gold_k, cfg.gamma)
                .unwrap_or(0.0);
            let r_clust = clustering_reward(r_count, score.v, cfg.epsilon);
            let verdict = FormatVerdict::ok();
            let r_format = format_reward(&verdict);
            Scored {
                reward: RewardBreakdown {
                    r_format,
                    r_count: Some(r_count),
                    r_qual: Some(score.v),
                    r_clust,
                    total: r_format + r_clust,
                },
                verdict,
                parsed: Some(parsed),
                score,
            }
        }
        Err(verdict) => Scored {
            reward: RewardBreakdown {
                r_format: format_reward(&verdict),
                r_count: None,
                r_qual: None,
                r_clust: 0.0,
                total: format_reward(&verdict),
            },
            verdict,
            parsed: None,
            score: MetricScore::ZERO,
        },
    }
}

pub fn total_reward(raw: &str, example: &Example, cfg: &RewardConfig) -> RewardBreakdown {
    score_response(raw, example, cfg).reward
}

/// Each reward minus the group mean.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::Empty("reward group"));
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(rewards.iter().map(|r| r - mean).collect())
}
