//! Benchmark split construction and JSONL serialization.
//!
//! Every task's texts are split per cluster into a training pool and an
//! evaluation pool. Training examples and C0 examples draw from the training
//! pool (C0 only from entries never consumed by a training example), C1 from
//! the evaluation pool, and C2 from held-out tasks only.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`), seeded per (seed, task,
//! purpose) with an FNV-1a hash of the task id and a purpose tag, so results
//! are identical across platforms and independent of task processing order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::{Example, Split, Task, TaskCluster};

pub const SCHEMA_VERSION: u32 = 1;

/// Inclusive `[min, max]` range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Range {
    pub min: usize,
    pub max: usize,
}

impl Range {
    pub const fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub seed: u64,
    /// Clusters per example; both ends are capped at the task's cluster count.
    pub cluster_subset_range: Range,
    /// Texts drawn from each chosen cluster.
    pub per_cluster_range: Range,
    pub train_ratio: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cluster_subset_range: Range::new(3, 8),
            per_cluster_range: Range::new(2, 6),
            train_ratio: 0.6,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("cluster_subset_range", self.cluster_subset_range),
            ("per_cluster_range", self.per_cluster_range),
        ] {
            if r.min < 1 || r.min > r.max {
                return Err(Error::Config(format!("{name} must satisfy 1 <= min <= max")));
            }
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::Config(format!(
                "train_ratio must lie in (0, 1), got {}",
                self.train_ratio
            )));
        }
        Ok(())
    }
}

/// Per-cluster train/eval pools, stored as indices into the cluster's texts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSplit {
    pub task_id: String,
    pub train: Vec<Vec<usize>>,
    pub eval: Vec<Vec<usize>>,
}

/// (task id, cluster position, text position) triples consumed by training
/// examples.
pub type UsedTexts = BTreeSet<(String, usize, usize)>;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn rng_for(seed: u64, task_id: &str, purpose: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(format!("{task_id}\u{1f}{purpose}").as_bytes()));
    rng
}

/// Training pool size for a cluster of `n >= 2` texts.
pub fn train_size(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).floor() as usize).max(1).min(n - 1)
}

pub fn split_task(task: &Task, cfg: &SamplerConfig) -> Result<PoolSplit> {
    cfg.validate()?;
    if task.held_out {
        return Err(Error::InvalidTask {
            task_id: task.task_id.clone(),
            reason: "held-out tasks are not split into pools".into(),
        });
    }
    let mut rng = rng_for(cfg.seed, &task.task_id, "pools");
    let mut train = Vec::with_capacity(task.clusters.len());
    let mut eval = Vec::with_capacity(task.clusters.len());
    for cluster in &task.clusters {
        let n = cluster.texts.len();
        if n < 2 {
            return Err(Error::InvalidTask {
                task_id: task.task_id.clone(),
                reason: format!("cluster {:?} has {n} text(s), need at least 2", cluster.spec.name),
            });
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let cut = train_size(n, cfg.train_ratio);
        let mut t = order[..cut].to_vec();
        let mut e = order[cut..].to_vec();
        t.sort_unstable();
        e.sort_unstable();
        train.push(t);
        eval.push(e);
    }
    Ok(PoolSplit {
        task_id: task.task_id.clone(),
        train,
        eval,
    })
}

/// Draws `count` examples from per-cluster candidate lists (indices into
/// the task's cluster texts). Returns the examples and every consumed
/// (cluster, text) pair.
fn draw_examples(
    task: &Task,
    candidates: &[Vec<usize>],
    split: Split,
    count: usize,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Example>, BTreeSet<(usize, usize)>)> {
    let per = cfg.per_cluster_range;
    let eligible: Vec<usize> = (0..candidates.len())
        .filter(|&c| candidates[c].len() >= per.min)
        .collect();
    let n_clusters = task.clusters.len();
    let lo = cfg.cluster_subset_range.min.min(n_clusters);
    let hi = cfg.cluster_subset_range.max.min(n_clusters).min(eligible.len());
    if count > 0 && (eligible.is_empty() || hi < lo) {
        return Err(Error::Sampling(format!(
            "task {} ({split}): {} cluster(s) hold at least {} available texts, need {}",
            task.task_id,
            eligible.len(),
            per.min,
            lo
        )));
    }

    let mut examples = Vec::with_capacity(count);
    let mut consumed = BTreeSet::new();
    for n in 0..count {
        let k = rng.random_range(lo..=hi);
        let mut chosen: Vec<usize> = sample(rng, eligible.len(), k)
            .into_iter()
            .map(|i| eligible[i])
            .collect();
        chosen.sort_unstable();

        let mut drawn: Vec<(usize, usize)> = Vec::new();
        for &c in &chosen {
            let pool = &candidates[c];
            let take = rng.random_range(per.min..=per.max.min(pool.len()));
            let mut picks: Vec<usize> = sample(rng, pool.len(), take).into_iter().map(|i| pool[i]).collect();
            picks.sort_unstable();
            drawn.extend(picks.into_iter().map(|t| (c, t)));
        }
        drawn.shuffle(rng);
        consumed.extend(drawn.iter().copied());

        let texts = drawn.iter().map(|&(c, t)| task.clusters[c].texts[t].clone()).collect();
        let labels: Vec<usize> = drawn.iter().map(|&(c, _)| c).collect();
        examples.push(Example::from_labeled(
            format!("{}-{}-{:05}", task.task_id, split.as_str().to_lowercase(), n),
            task.task_id.clone(),
            task.dataset,
            split,
            task.instruction.clone(),
            texts,
            &labels,
        )?);
    }
    Ok((examples, consumed))
}

/// Training examples drawn from the training pools only. Consumed texts are
/// appended to `used`.
pub fn sample_training_examples(
    task: &Task,
    pools: &PoolSplit,
    count: usize,
    cfg: &SamplerConfig,
    used: &mut UsedTexts,
) -> Result<Vec<Example>> {
    cfg.validate()?;
    check_pools(task, pools)?;
    let mut rng = rng_for(cfg.seed, &task.task_id, "train");
    let (examples, consumed) = draw_examples(task, &pools.train, Split::Train, count, cfg, &mut rng)?;
    used.extend(
        consumed
            .into_iter()
            .map(|(c, t)| (task.task_id.clone(), c, t)),
    );
    Ok(examples)
}

fn check_pools(task: &Task, pools: &PoolSplit) -> Result<()> {
    let ok = pools.task_id == task.task_id
        && pools.train.len() == task.clusters.len()
        && pools.eval.len() == task.clusters.len()
        && task.clusters.iter().enumerate().all(|(c, cl)| {
            pools.train[c]
                .iter()
                .chain(&pools.eval[c])
                .all(|&t| t < cl.texts.len())
        });
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidTask {
            task_id: task.task_id.clone(),
            reason: format!("pools belong to task {:?} or do not fit it", pools.task_id),
        })
    }
}

/// Builds `count` examples per task for one evaluation split.
///
/// C0 and C1 accept held-in tasks (with pools); C2 accepts held-out tasks and
/// ignores pools and `used`.
pub fn build_eval_split(
    tasks: &[Task],
    which: Split,
    pools: &BTreeMap<String, PoolSplit>,
    used: &UsedTexts,
    count: usize,
    cfg: &SamplerConfig,
) -> Result<Vec<Example>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for task in tasks {
        let candidates: Vec<Vec<usize>> = match which {
            Split::Train => {
                return Err(Error::Config("use sample_training_examples for TRAIN".into()))
            }
            Split::C2 => {
                if !task.held_out {
                    return Err(Error::InvalidTask {
                        task_id: task.task_id.clone(),
                        reason: "C2 draws only from held-out tasks".into(),
                    });
                }
                task.clusters.iter().map(|c| (0..c.texts.len()).collect()).collect()
            }
            Split::C0 | Split::C1 => {
                if task.held_out {
                    return Err(Error::InvalidTask {
                        task_id: task.task_id.clone(),
                        reason: format!("{which} draws only from held-in tasks"),
                    });
                }
                let p = pools.get(&task.task_id).ok_or_else(|| Error::InvalidTask {
                    task_id: task.task_id.clone(),
                    reason: "no pools for task".into(),
                })?;
                check_pools(task, p)?;
                if which == Split::C1 {
                    p.eval.clone()
                } else {
                    p.train
                        .iter()
                        .enumerate()
                        .map(|(c, pool)| {
                            pool.iter()
                                .copied()
                                .filter(|&t| !used.contains(&(task.task_id.clone(), c, t)))
                                .collect()
                        })
                        .collect()
                }
            }
        };
        let mut rng = rng_for(cfg.seed, &task.task_id, which.as_str());
        let (examples, _) = draw_examples(task, &candidates, which, count, cfg, &mut rng)?;
        out.extend(examples);
    }
    Ok(out)
}

/// All four splits for a benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSplits {
    pub train: Vec<Example>,
    pub c0: Vec<Example>,
    pub c1: Vec<Example>,
    pub c2: Vec<Example>,
    pub pools: BTreeMap<String, PoolSplit>,
    pub used: UsedTexts,
}

/// Per-task example counts for each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub c0: usize,
    pub c1: usize,
    pub c2: usize,
}

pub fn build_benchmark(tasks: &[Task], counts: SplitCounts, cfg: &SamplerConfig) -> Result<BenchmarkSplits> {
    let (held_out, held_in): (Vec<Task>, Vec<Task>) = tasks.iter().cloned().partition(|t| t.held_out);
    let mut pools = BTreeMap::new();
    let mut used = UsedTexts::new();
    let mut train = Vec::new();
    for task in &held_in {
        let p = split_task(task, cfg)?;
        train.extend(sample_training_examples(task, &p, counts.train, cfg, &mut used)?);
        pools.insert(task.task_id.clone(), p);
    }
    let c0 = build_eval_split(&held_in, Split::C0, &pools, &used, counts.c0, cfg)?;
    let c1 = build_eval_split(&held_in, Split::C1, &pools, &used, counts.c1, cfg)?;
    let c2 = build_eval_split(&held_out, Split::C2, &pools, &used, counts.c2, cfg)?;
    Ok(BenchmarkSplits {
        train,
        c0,
        c1,
        c2,
        pools,
        used,
    })
}

// ---------------------------------------------------------------------------
// JSONL I/O

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    v: u32,
    #[serde(flatten)]
    inner: T,
}

#[derive(Serialize)]
struct VersionedRef<'a, T> {
    v: u32,
    #[serde(flatten)]
    inner: &'a T,
}

/// Reads one JSON value per non-blank line, reporting the 1-based line number
/// of the first bad line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Schema {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, values: impl IntoIterator<Item = &'a T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in values {
        serde_json::to_writer(&mut w, v)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_versioned<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    read_jsonl::<Versioned<T>>(path)?
        .into_iter()
        .map(|(line, rec)| {
            if rec.v != SCHEMA_VERSION {
                return Err(Error::Schema {
                    path: path.display().to_string(),
                    line,
                    reason: format!("unsupported schema version {}", rec.v),
                });
            }
            Ok((line, rec.inner))
        })
        .collect()
}

fn write_versioned<T: Serialize>(path: &Path, values: &[T]) -> Result<()> {
    let wrapped: Vec<VersionedRef<'_, T>> = values
        .iter()
        .map(|inner| VersionedRef {
            v: SCHEMA_VERSION,
            inner,
        })
        .collect();
    write_jsonl(path, &wrapped)
}

pub fn load_tasks(path: &Path) -> Result<Vec<Task>> {
    read_versioned::<Task>(path)?
        .into_iter()
        .map(|(line, task)| {
            task.validate().map_err(|e| Error::Schema {
                path: path.display().to_string(),
                line,
                reason: e.to_string(),
            })?;
            Ok(task)
        })
        .collect()
}

pub fn write_tasks(tasks: &[Task], path: &Path) -> Result<()> {
    write_versioned(path, tasks)
}

pub fn load_examples(path: &Path) -> Result<Vec<Example>> {
    read_versioned::<Example>(path)?
        .into_iter()
        .map(|(line, ex)| {
            ex.validate().map_err(|e| Error::Schema {
                path: path.display().to_string(),
                line,
                reason: e.to_string(),
            })?;
            Ok(ex)
        })
        .collect()
}

pub fn write_examples(examples: &[Example], path: &Path) -> Result<()> {
    write_versioned(path, examples)
}

/// Convenience for building tasks in code and tests.
pub fn task_cluster(name: &str, description: &str, texts: Vec<String>) -> TaskCluster {
    TaskCluster {
        spec: crate::task::ClusterSpec::new(name, description),
        texts,
    }
}
