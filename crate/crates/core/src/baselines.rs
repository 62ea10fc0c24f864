//! Embedding-based clustering baselines evaluated with the gold cluster count.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::Partition;
use crate::task::Example;

// ---------------------------------------------------------------------------
// Prompt templates

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateId {
    Instructor,
    Inbedder,
    Qwen,
    Openai,
    Generic,
}

impl std::str::FromStr for TemplateId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "instructor" => Ok(Self::Instructor),
            "inbedder" => Ok(Self::Inbedder),
            "qwen" => Ok(Self::Qwen),
            "openai" => Ok(Self::Openai),
            "generic" => Ok(Self::Generic),
            other => Err(Error::Config(format!("unknown template id {other:?}"))),
        }
    }
}

/// Model input for one text. Instructor-style models take an
/// (instruction, text) pair; everything else takes a single string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbeddingInput {
    Single(String),
    Pair { instruction: String, text: String },
}

impl EmbeddingInput {
    /// Single-string form. Pairs render as a two-element JSON array.
    pub fn render(&self) -> String {
        match self {
            Self::Single(s) => s.clone(),
            Self::Pair { instruction, text } => {
                serde_json::to_string(&[instruction, text]).expect("strings serialize")
            }
        }
    }
}

pub fn embedding_input(template: TemplateId, instruction: &str, text: &str) -> Result<EmbeddingInput> {
    if instruction.trim().is_empty() || text.trim().is_empty() {
        return Err(Error::Config("instruction and text must be non-empty".into()));
    }
    Ok(match template {
        TemplateId::Instructor => EmbeddingInput::Pair {
            instruction: format!("Represent this text for clustering analysis: {instruction}"),
            text: text.to_string(),
        },
        TemplateId::Inbedder => {
            EmbeddingInput::Single(format!("Input:{text} Instruction:{instruction} Response:"))
        }
        TemplateId::Qwen => EmbeddingInput::Single(format!(
            "Represent this text for clustering analysis. Task:{instruction}  Query:{text}"
        )),
        TemplateId::Openai => EmbeddingInput::Single(format!(
            "Represent this text for clustering. Task: {instruction}  Text: {text}"
        )),
        TemplateId::Generic => {
            EmbeddingInput::Single(format!("Clustering task: {instruction}. Text: {text}"))
        }
    })
}

pub fn render_embedding_prompt(template: TemplateId, instruction: &str, text: &str) -> Result<String> {
    Ok(embedding_input(template, instruction, text)?.render())
}

// ---------------------------------------------------------------------------
// Length filter

pub const DEFAULT_MAX_UNITS: usize = 28_000;

/// Default token estimate: characters / 4, rounded up.
pub fn chars_div4(s: &str) -> usize {
    s.chars().count().div_ceil(4)
}

/// Estimated input size of an example: instruction plus every item text.
pub fn example_units(example: &Example, estimator: &dyn Fn(&str) -> usize) -> usize {
    estimator(&example.instruction) + example.texts().map(estimator).sum::<usize>()
}

/// Splits examples into (kept, dropped) by estimated total input size.
pub fn filter_by_length(
    examples: Vec<Example>,
    max_units: usize,
    estimator: &dyn Fn(&str) -> usize,
) -> (Vec<Example>, Vec<Example>) {
    examples
        .into_iter()
        .partition(|e| example_units(e, estimator) <= max_units)
}

// ---------------------------------------------------------------------------
// Embeddings

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub dim: usize,
    /// Position `i` holds the vector of item `i + 1`.
    pub vectors: Vec<Vec<f64>>,
    pub normalized: bool,
}

impl EmbeddingSet {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self> {
        let dim = vectors.first().map(Vec::len).ok_or(Error::Empty("embedding set"))?;
        if dim == 0 {
            return Err(Error::Config("zero-dimensional embeddings".into()));
        }
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: v.len(),
                    index: i + 1,
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!("non-finite value in vector {}", i + 1)));
            }
        }
        let normalized = vectors.iter().all(|v| (norm(v) - 1.0).abs() <= 1e-6);
        Ok(Self {
            dim,
            vectors,
            normalized,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Rescales every non-zero vector to unit length.
    pub fn normalize(&mut self) {
        for v in &mut self.vectors {
            let n = norm(v);
            if n > 0.0 {
                v.iter_mut().for_each(|x| *x /= n);
            }
        }
        self.normalized = self.vectors.iter().all(|v| (norm(v) - 1.0).abs() <= 1e-6);
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmbeddingHeader {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    example_id: Option<String>,
    dim: usize,
    normalized: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmbeddingLine {
    index: usize,
    vector: Vec<f64>,
}

/// Writes one block: a header line `{example_id?, dim, normalized}` followed by
/// `{index, vector}` lines.
pub fn write_embedding_block(w: &mut impl Write, example_id: Option<&str>, set: &EmbeddingSet) -> Result<()> {
    let header = EmbeddingHeader {
        example_id: example_id.map(str::to_string),
        dim: set.dim,
        normalized: set.normalized,
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for (i, v) in set.vectors.iter().enumerate() {
        serde_json::to_writer(&mut *w, &EmbeddingLine {
            index: i + 1,
            vector: v.clone(),
        })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a file of one or more embedding blocks. Each block starts with a
/// header line; the block's example id is `None` when the header has none.
pub fn read_embedding_blocks(r: impl BufRead, source: &str) -> Result<Vec<(Option<String>, EmbeddingSet)>> {
    let schema = |line: usize, reason: String| Error::Schema {
        path: source.to_string(),
        line,
        reason,
    };
    let mut blocks: Vec<(Option<String>, EmbeddingHeader, Vec<Vec<f64>>)> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| schema(lineno, e.to_string()))?;
        if value.get("dim").is_some() {
            let header: EmbeddingHeader =
                serde_json::from_value(value).map_err(|e| schema(lineno, e.to_string()))?;
            blocks.push((header.example_id.clone(), header, Vec::new()));
            continue;
        }
        let entry: EmbeddingLine = serde_json::from_value(value).map_err(|e| schema(lineno, e.to_string()))?;
        let Some((_, header, vectors)) = blocks.last_mut() else {
            return Err(schema(lineno, "vector before header line".into()));
        };
        if entry.index != vectors.len() + 1 {
            return Err(schema(
                lineno,
                format!("expected index {}, got {}", vectors.len() + 1, entry.index),
            ));
        }
        if entry.vector.len() != header.dim {
            return Err(schema(
                lineno,
                format!("vector has {} dims, header says {}", entry.vector.len(), header.dim),
            ));
        }
        vectors.push(entry.vector);
    }
    blocks
        .into_iter()
        .map(|(id, header, vectors)| {
            let mut set = EmbeddingSet::new(vectors)?;
            set.normalized = header.normalized && set.normalized;
            Ok((id, set))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Clustering

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Kmeans,
    Gmm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Covariance {
    Diagonal,
    Spherical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub algorithm: Algorithm,
    pub k: usize,
    pub seed: u64,
    pub n_init: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub covariance: Covariance,
    pub reg_covar: f64,
}

impl BaselineConfig {
    pub fn new(algorithm: Algorithm, k: usize) -> Self {
        Self {
            algorithm,
            k,
            seed: 43,
            n_init: 10,
            max_iter: 300,
            tol: 1e-4,
            covariance: Covariance::Diagonal,
            reg_covar: 1e-6,
        }
    }

    fn validate(&self, m: usize) -> Result<()> {
        if self.k == 0 || self.k > m {
            return Err(Error::Config(format!("k = {} must lie in 1..={m}", self.k)));
        }
        if self.n_init == 0 || self.max_iter == 0 {
            return Err(Error::Config("n_init and max_iter must be >= 1".into()));
        }
        if !(self.tol > 0.0) || !(self.reg_covar > 0.0) {
            return Err(Error::Config("tol and reg_covar must be > 0".into()));
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding.
fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

fn means(points: &[Vec<f64>], labels: &[usize], k: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|x| *x /= c as f64);
        }
    }
    (sums, counts)
}

fn sse(points: &[Vec<f64>], labels: &[usize], centers: &[Vec<f64>]) -> f64 {
    points.iter().zip(labels).map(|(p, &l)| sq_dist(p, &centers[l])).sum()
}

/// Moves points into empty clusters until every cluster is populated: each
/// empty cluster takes the point farthest from its current center among
/// clusters that have more than one member.
fn fill_empty(points: &[Vec<f64>], labels: &mut [usize], centers: &mut [Vec<f64>], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let donor = (0..points.len())
            .filter(|&i| counts[labels[i]] > 1)
            .map(|i| (i, sq_dist(&points[i], &centers[labels[i]])))
            .fold(None::<(usize, f64)>, |best, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        let Some((i, _)) = donor else { return };
        labels[i] = empty;
        centers[empty] = points[i].clone();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub partition: Partition,
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub sse: f64,
    /// SSE after each assignment step of the winning restart.
    pub sse_trace: Vec<f64>,
    pub restart: usize,
}

fn lloyd(points: &[Vec<f64>], k: usize, cfg: &BaselineConfig, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<Vec<f64>>, Vec<f64>) {
    let dim = points[0].len();
    let mut centers = kmeans_pp(points, k, rng);
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
    fill_empty(points, &mut labels, &mut centers, k);
    let mut trace = vec![sse(points, &labels, &centers)];
    for _ in 0..cfg.max_iter {
        let (new_centers, _) = means(points, &labels, k, dim);
        let shift = centers
            .iter()
            .zip(&new_centers)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centers = new_centers;
        let mut new_labels: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
        fill_empty(points, &mut new_labels, &mut centers, k);
        let changed = new_labels != labels;
        labels = new_labels;
        trace.push(sse(points, &labels, &centers));
        if !changed || shift < cfg.tol {
            break;
        }
    }
    let (final_centers, _) = means(points, &labels, k, dim);
    (labels, final_centers, trace)
}

fn restart_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    rng
}

pub fn kmeans_fit(emb: &EmbeddingSet, cfg: &BaselineConfig) -> Result<KMeansFit> {
    cfg.validate(emb.len())?;
    let points = &emb.vectors;
    let mut best: Option<KMeansFit> = None;
    for restart in 0..cfg.n_init {
        let mut rng = restart_rng(cfg.seed, restart);
        let (labels, centers, trace) = lloyd(points, cfg.k, cfg, &mut rng);
        let total = sse(points, &labels, &centers);
        if best.as_ref().is_none_or(|b| total < b.sse) {
            best = Some(KMeansFit {
                partition: Partition::from_labels(&labels)?,
                labels,
                centers,
                sse: total,
                sse_trace: trace,
                restart,
            });
        }
    }
    Ok(best.expect("n_init >= 1"))
}

pub fn kmeans(emb: &EmbeddingSet, cfg: &BaselineConfig) -> Result<Partition> {
    Ok(kmeans_fit(emb, cfg)?.partition)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub partition: Partition,
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Per-component, per-dimension variances (all equal for spherical).
    pub variances: Vec<Vec<f64>>,
    /// Mean per-sample log-likelihood after each EM iteration.
    pub log_likelihood_trace: Vec<f64>,
    pub converged: bool,
    pub restart: usize,
}

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

fn log_resp(points: &[Vec<f64>], weights: &[f64], mu: &[Vec<f64>], var: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
    let k = weights.len();
    let consts: Vec<f64> = (0..k)
        .map(|j| weights[j].ln() - 0.5 * var[j].iter().map(|v| LOG_2PI + v.ln()).sum::<f64>())
        .collect();
    let mut total = 0.0;
    let resp = points
        .iter()
        .map(|x| {
            let logp: Vec<f64> = (0..k)
                .map(|j| {
                    consts[j]
                        - 0.5
                            * x.iter()
                                .zip(&mu[j])
                                .zip(&var[j])
                                .map(|((xi, mi), vi)| (xi - mi) * (xi - mi) / vi)
                                .sum::<f64>()
                })
                .collect();
            let mx = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logp.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
            total += lse;
            logp.into_iter().map(|l| l - lse).collect()
        })
        .collect();
    (resp, total / points.len() as f64)
}

fn m_step(points: &[Vec<f64>], resp_log: &[Vec<f64>], k: usize, cfg: &BaselineConfig) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = points.len();
    let dim = points[0].len();
    let tiny = 10.0 * f64::EPSILON;
    let resp: Vec<Vec<f64>> = resp_log.iter().map(|r| r.iter().map(|l| l.exp()).collect()).collect();
    let nk: Vec<f64> = (0..k).map(|j| resp.iter().map(|r| r[j]).sum::<f64>() + tiny).collect();
    let mu: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let mut m = vec![0.0; dim];
            for (x, r) in points.iter().zip(&resp) {
                for (md, xd) in m.iter_mut().zip(x) {
                    *md += r[j] * xd;
                }
            }
            m.iter_mut().for_each(|v| *v /= nk[j]);
            m
        })
        .collect();
    let var: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let mut v = vec![0.0; dim];
            for (x, r) in points.iter().zip(&resp) {
                for ((vd, xd), md) in v.iter_mut().zip(x).zip(&mu[j]) {
                    *vd += r[j] * (xd - md) * (xd - md);
                }
            }
            v.iter_mut().for_each(|s| *s = *s / nk[j] + cfg.reg_covar);
            if cfg.covariance == Covariance::Spherical {
                let avg = v.iter().sum::<f64>() / dim as f64;
                v.iter_mut().for_each(|s| *s = avg);
            }
            v
        })
        .collect();
    let weights = nk.iter().map(|w| w / n as f64).collect();
    (weights, mu, var)
}

pub fn gmm_fit(emb: &EmbeddingSet, cfg: &BaselineConfig) -> Result<GmmFit> {
    cfg.validate(emb.len())?;
    let points = &emb.vectors;
    let k = cfg.k;
    let mut best: Option<(f64, GmmFit)> = None;
    for restart in 0..cfg.n_init {
        // initial responsibilities from a hard k-means assignment
        let mut rng = restart_rng(cfg.seed, restart);
        let (labels, _, _) = lloyd(points, k, cfg, &mut rng);
        let init: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..k).map(|j| if j == l { 0.0 } else { f64::NEG_INFINITY }).collect())
            .collect();
        let (mut weights, mut mu, mut var) = m_step(points, &init, k, cfg);
        let mut trace = Vec::new();
        let mut converged = false;
        let mut resp = init;
        for iteration in 1..=cfg.max_iter {
            let (r, ll) = log_resp(points, &weights, &mu, &var);
            if !ll.is_finite() {
                return Err(Error::NonFinite { iteration });
            }
            resp = r;
            let done = trace.last().is_some_and(|prev: &f64| (ll - prev).abs() < cfg.tol);
            trace.push(ll);
            if done {
                converged = true;
                break;
            }
            (weights, mu, var) = m_step(points, &resp, k, cfg);
        }
        let mut labels: Vec<usize> = resp
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (j, &l)| if l > b.1 { (j, l) } else { b })
                    .0
            })
            .collect();
        let mut centers = mu.clone();
        fill_empty(points, &mut labels, &mut centers, k);
        let final_ll = *trace.last().expect("max_iter >= 1");
        if best.as_ref().is_none_or(|(b, _)| final_ll > *b) {
            best = Some((
                final_ll,
                GmmFit {
                    partition: Partition::from_labels(&labels)?,
                    labels,
                    weights: weights.clone(),
                    means: mu.clone(),
                    variances: var.clone(),
                    log_likelihood_trace: trace,
                    converged,
                    restart,
                },
            ));
        }
    }
    Ok(best.expect("n_init >= 1").1)
}

pub fn gmm(emb: &EmbeddingSet, cfg: &BaselineConfig) -> Result<Partition> {
    Ok(gmm_fit(emb, cfg)?.partition)
}

pub fn cluster(emb: &EmbeddingSet, cfg: &BaselineConfig) -> Result<Partition> {
    match cfg.algorithm {
        Algorithm::Kmeans => kmeans(emb, cfg),
        Algorithm::Gmm => gmm(emb, cfg),
    }
}
