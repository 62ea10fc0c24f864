//! Hard partitions of the 1-based item indices `1..=m`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A disjoint, exhaustive assignment of items `1..=m` into non-empty clusters.
///
/// Every value of this type satisfies the partition invariants: construction
/// goes through [`Partition::new`], which rejects duplicate, missing or
/// out-of-range indices and empty clusters. Indices inside a cluster are kept
/// sorted ascending; cluster order is preserved as given.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<usize>>", into = "Vec<Vec<usize>>")]
pub struct Partition {
    clusters: Vec<Vec<usize>>,
    m: usize,
}

impl Partition {
    pub fn new(clusters: Vec<Vec<usize>>, m: usize) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::InvalidPartition("no clusters".into()));
        }
        let mut seen = vec![false; m + 1];
        let mut clusters = clusters;
        for (ci, cluster) in clusters.iter_mut().enumerate() {
            if cluster.is_empty() {
                return Err(Error::InvalidPartition(format!("cluster {} is empty", ci + 1)));
            }
            for &item in cluster.iter() {
                if item == 0 || item > m {
                    return Err(Error::InvalidPartition(format!(
                        "item {item} out of range 1..={m}"
                    )));
                }
                if seen[item] {
                    return Err(Error::InvalidPartition(format!("item {item} appears twice")));
                }
                seen[item] = true;
            }
            cluster.sort_unstable();
        }
        if let Some(missing) = (1..=m).find(|&i| !seen[i]) {
            return Err(Error::InvalidPartition(format!("item {missing} is missing")));
        }
        Ok(Self { clusters, m })
    }

    /// Builds a partition from per-item labels (position `i` holds the label of
    /// item `i + 1`). Clusters are ordered by first appearance of their label.
    pub fn from_labels<L: Eq + Clone>(labels: &[L]) -> Result<Self> {
        let mut keys: Vec<L> = Vec::new();
        let mut clusters: Vec<Vec<usize>> = Vec::new();
        for (pos, label) in labels.iter().enumerate() {
            match keys.iter().position(|k| k == label) {
                Some(ci) => clusters[ci].push(pos + 1),
                None => {
                    keys.push(label.clone());
                    clusters.push(vec![pos + 1]);
                }
            }
        }
        Self::new(clusters, labels.len())
    }

    /// Number of clusters.
    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    /// Number of items.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    /// Cluster labels, 1-based: position `i` holds the cluster of item `i + 1`.
    pub fn labels(&self) -> Vec<usize> {
        let mut labels = vec![0; self.m];
        for (ci, cluster) in self.clusters.iter().enumerate() {
            for &item in cluster {
                labels[item - 1] = ci + 1;
            }
        }
        labels
    }

    /// Clusters sorted by their smallest member; two partitions are equal up
    /// to relabeling iff their canonical forms are equal.
    pub fn canonical(&self) -> Vec<Vec<usize>> {
        let mut c = self.clusters.clone();
        c.sort_unstable_by_key(|cluster| cluster[0]);
        c
    }

    pub fn equivalent(&self, other: &Partition) -> Result<bool> {
        if self.m != other.m {
            return Err(Error::SizeMismatch {
                left: self.m,
                right: other.m,
            });
        }
        Ok(self.k() == other.k() && self.canonical() == other.canonical())
    }
}

impl TryFrom<Vec<Vec<usize>>> for Partition {
    type Error = Error;

    fn try_from(clusters: Vec<Vec<usize>>) -> Result<Self> {
        let m = clusters.iter().map(Vec::len).sum();
        Self::new(clusters, m)
    }
}

impl From<Partition> for Vec<Vec<usize>> {
    fn from(p: Partition) -> Self {
        p.clusters
    }
}

pub fn labels_of(p: &Partition) -> Vec<usize> {
    p.labels()
}

pub fn equivalent(a: &Partition, b: &Partition) -> Result<bool> {
    a.equivalent(b)
}
