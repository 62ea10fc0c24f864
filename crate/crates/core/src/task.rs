//! Benchmark tasks and scoring examples.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::Partition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dataset {
    #[serde(rename = "LMSY")]
    Lmsy,
    #[serde(rename = "ECHR")]
    Echr,
    #[serde(rename = "SP500")]
    Sp500,
    #[serde(rename = "custom")]
    Custom,
}

impl Dataset {
    pub const ALL: [Dataset; 4] = [Dataset::Lmsy, Dataset::Echr, Dataset::Sp500, Dataset::Custom];

    pub fn as_str(self) -> &'static str {
        match self {
            Dataset::Lmsy => "LMSY",
            Dataset::Echr => "ECHR",
            Dataset::Sp500 => "SP500",
            Dataset::Custom => "custom",
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Split {
    Train,
    C0,
    C1,
    C2,
}

impl Split {
    pub const EVAL: [Split; 3] = [Split::C0, Split::C1, Split::C2];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "TRAIN",
            Split::C0 => "C0",
            Split::C1 => "C1",
            Split::C2 => "C2",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextItem {
    pub index: usize,
    pub text: String,
}

/// A named category of a task taxonomy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
}

impl ClusterSpec {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
        }
    }

    pub fn name_words(&self) -> usize {
        self.name.split_whitespace().count()
    }

    pub fn validate(&self, name_word_limit: usize) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Config("cluster name is empty".into()));
        }
        if self.name_words() > name_word_limit {
            return Err(Error::Config(format!(
                "cluster name {:?} exceeds {name_word_limit} words",
                self.name
            )));
        }
        Ok(())
    }
}

/// One category of a task together with its member texts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCluster {
    #[serde(flatten)]
    pub spec: ClusterSpec,
    pub texts: Vec<String>,
}

/// The benchmark unit: one instruction and a labeled taxonomy of clusters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub dataset: Dataset,
    pub instruction: String,
    pub held_out: bool,
    pub clusters: Vec<TaskCluster>,
}

impl Task {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::InvalidTask {
            task_id: self.task_id.clone(),
            reason,
        };
        if self.task_id.is_empty() {
            return Err(fail("empty task_id".into()));
        }
        if self.clusters.len() < 2 {
            return Err(fail(format!("{} cluster(s), need at least 2", self.clusters.len())));
        }
        let mut owner: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
        for (ci, cluster) in self.clusters.iter().enumerate() {
            if cluster.spec.name.trim().is_empty() {
                return Err(fail(format!("cluster {} has an empty name", ci + 1)));
            }
            if cluster.texts.is_empty() {
                return Err(fail(format!("cluster {:?} holds no texts", cluster.spec.name)));
            }
            for text in &cluster.texts {
                if text.trim().is_empty() {
                    return Err(fail(format!("cluster {:?} holds a blank text", cluster.spec.name)));
                }
                match owner.get(text.as_str()) {
                    Some(&other) if other != ci => {
                        return Err(fail(format!(
                            "text {:?} appears in clusters {:?} and {:?}",
                            truncate(text, 40),
                            self.clusters[other].spec.name,
                            cluster.spec.name
                        )))
                    }
                    _ => {
                        owner.insert(text, ci);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn text_count(&self) -> usize {
        self.clusters.iter().map(|c| c.texts.len()).sum()
    }
}

/// One scoring instance: instruction, enumerated items and the gold partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub example_id: String,
    pub task_id: String,
    pub dataset: Dataset,
    pub split: Split,
    pub instruction: String,
    pub items: Vec<TextItem>,
    pub gold: Partition,
    pub gold_k: usize,
}

impl Example {
    /// Builds an example from texts in item order and their source labels.
    pub fn from_labeled<L: Eq + Clone>(
        example_id: String,
        task_id: String,
        dataset: Dataset,
        split: Split,
        instruction: String,
        texts: Vec<String>,
        labels: &[L],
    ) -> Result<Self> {
        let gold = Partition::from_labels(labels)?;
        let items = texts
            .into_iter()
            .enumerate()
            .map(|(i, text)| TextItem { index: i + 1, text })
            .collect();
        let ex = Self {
            example_id,
            task_id,
            dataset,
            split,
            instruction,
            gold_k: gold.k(),
            items,
            gold,
        };
        ex.validate()?;
        Ok(ex)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::InvalidExample {
            example_id: self.example_id.clone(),
            reason,
        };
        if self.items.is_empty() {
            return Err(fail("no items".into()));
        }
        for (pos, item) in self.items.iter().enumerate() {
            if item.index != pos + 1 {
                return Err(fail(format!(
                    "item at position {} has index {}, expected {}",
                    pos + 1,
                    item.index,
                    pos + 1
                )));
            }
            if item.text.trim().is_empty() {
                return Err(fail(format!("item {} has blank text", item.index)));
            }
        }
        if self.gold.m() != self.items.len() {
            return Err(fail(format!(
                "gold covers {} items but example has {}",
                self.gold.m(),
                self.items.len()
            )));
        }
        if self.gold_k != self.gold.k() {
            return Err(fail(format!(
                "gold_k {} but gold has {} clusters",
                self.gold_k,
                self.gold.k()
            )));
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.items.len()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.text.as_str())
    }

    pub fn text_set(&self) -> BTreeSet<&str> {
        self.texts().collect()
    }
}

fn truncate(s: &str, max: usize) -> String {
    s.chars().take(max).collect()
}
