//! Building blocks for treating instruction-following text clustering as a
//! generation task: validated partitions, the strict answer grammar, entropy
//! based scoring, reward shaping, benchmark splits and embedding baselines.

pub mod baselines;
pub mod bench;
pub mod error;
pub mod metrics;
pub mod parser;
pub mod partition;
pub mod reward;
pub mod task;

pub use error::{Error, Result};
pub use metrics::{MetricScore, Report};
pub use parser::{FormatError, FormatErrorCode, FormatVerdict, ParsedResponse};
pub use partition::Partition;
pub use reward::{RewardBreakdown, RewardConfig};
pub use task::{ClusterSpec, Dataset, Example, Split, Task, TaskCluster, TextItem};
