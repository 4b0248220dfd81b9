//! Complete-linkage agglomerative clustering under cosine distance.
//!
//! Clusters are identified by their smallest member index. Each round merges
//! the pair of live clusters with the smallest linkage distance; ties go to
//! the lexicographically smallest `(a, b)` pair of identifiers. Labels are
//! assigned in order of each cluster's smallest member, so the cluster
//! holding item 0 is always label 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::cosine_distance;

/// Partition of a set of vectors with per-group mean representatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub representatives: Vec<Vec<f32>>,
}

impl ClusterAssignment {
    pub fn group_count(&self) -> usize {
        self.representatives.len()
    }

    pub fn members(&self, group: usize) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(move |(_, &l)| l == group)
            .map(|(i, _)| i)
    }

    /// Builds an assignment from labels, computing member means.
    pub fn from_labels(labels: Vec<usize>, vectors: &[Vec<f32>]) -> Self {
        let groups = labels.iter().max().map_or(0, |m| m + 1);
        let dim = vectors.first().map_or(0, Vec::len);
        let mut sums = vec![vec![0.0f64; dim]; groups];
        let mut counts = vec![0usize; groups];
        for (v, &l) in vectors.iter().zip(&labels) {
            counts[l] += 1;
            for (s, &x) in sums[l].iter_mut().zip(v) {
                *s += x as f64;
            }
        }
        let representatives = sums
            .into_iter()
            .zip(counts)
            .map(|(s, c)| s.into_iter().map(|x| (x / c.max(1) as f64) as f32).collect())
            .collect();
        Self {
            labels,
            representatives,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    /// Stop once the closest pair of clusters is farther apart than this.
    Threshold(f64),
    /// Stop once exactly this many clusters remain.
    Count(usize),
}

pub fn pairwise_cosine(vectors: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
    let n = vectors.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = cosine_distance(&vectors[i], &vectors[j])?;
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    Ok(d)
}

/// Runs the agglomeration and returns canonical labels.
pub fn agglomerate(vectors: &[Vec<f32>], stop: StopRule) -> Result<Vec<usize>> {
    let n = vectors.len();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot cluster an empty set".into()));
    }
    if let Some(dim) = vectors.first().map(Vec::len) {
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::Shape("embeddings differ in length".into()));
        }
    }
    if let StopRule::Count(k) = stop {
        if k == 0 || k > n {
            return Err(Error::InvalidArgument(format!(
                "cannot form {k} groups from {n} items"
            )));
        }
    }
    let mut dist = pairwise_cosine(vectors)?;
    // owner[i] = identifier of the cluster holding item i
    let mut owner: Vec<usize> = (0..n).collect();
    let mut live: Vec<usize> = (0..n).collect();
    loop {
        if let StopRule::Count(k) = stop {
            if live.len() <= k {
                break;
            }
        }
        if live.len() < 2 {
            break;
        }
        let mut best = (f64::INFINITY, 0, 0);
        for (ai, &a) in live.iter().enumerate() {
            for &b in &live[ai + 1..] {
                if dist[a][b] < best.0 {
                    best = (dist[a][b], a, b);
                }
            }
        }
        let (d, a, b) = best;
        if let StopRule::Threshold(t) = stop {
            if d > t {
                break;
            }
        }
        // complete linkage: the merged cluster's distance is the larger one
        for &k in &live {
            if k != a && k != b {
                let m = dist[a][k].max(dist[b][k]);
                dist[a][k] = m;
                dist[k][a] = m;
            }
        }
        live.retain(|&k| k != b);
        for o in owner.iter_mut() {
            if *o == b {
                *o = a;
            }
        }
    }
    Ok(owner
        .iter()
        .map(|o| live.binary_search(o).expect("owner is live"))
        .collect())
}

/// Threshold-stopped clustering used for instance embeddings.
pub fn agglomerative_cluster(embeddings: &[Vec<f32>], merge_threshold: f64) -> Result<ClusterAssignment> {
    let labels = agglomerate(embeddings, StopRule::Threshold(merge_threshold))?;
    Ok(ClusterAssignment::from_labels(labels, embeddings))
}

/// Count-stopped clustering used for channel grouping.
pub fn agglomerative_groups(vectors: &[Vec<f32>], groups: usize) -> Result<ClusterAssignment> {
    let labels = agglomerate(vectors, StopRule::Count(groups))?;
    Ok(ClusterAssignment::from_labels(labels, vectors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_embedding() {
        let a = agglomerative_cluster(&[vec![1.0, 2.0]], 0.1).unwrap();
        assert_eq!(a.labels, vec![0]);
        assert_eq!(a.representatives, vec![vec![1.0, 2.0]]);
    }

    #[test]
    fn collinear_vectors_merge() {
        let a = agglomerative_cluster(&[vec![1.0, 2.0], vec![2.0, 4.0]], 0.1).unwrap();
        assert_eq!(a.labels, vec![0, 0]);
        assert_eq!(a.representatives, vec![vec![1.5, 3.0]]);
    }

    #[test]
    fn orthogonal_vectors_stay_apart() {
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.05]];
        let a = agglomerative_cluster(&v, 0.1).unwrap();
        assert_eq!(a.labels, vec![0, 1, 0]);
    }

    #[test]
    fn complete_linkage_uses_farthest_member() {
        // chain a-b-c where a,b and b,c are close but a,c are not
        let ang = |t: f32| vec![t.cos(), t.sin()];
        let v = vec![ang(0.0), ang(0.3), ang(0.7)];
        // d(a,b) ≈ 0.045, d(b,c) ≈ 0.079, d(a,c) ≈ 0.235: single linkage would chain all three
        let a = agglomerative_cluster(&v, 0.1).unwrap();
        assert_eq!(a.group_count(), 2);
        assert_eq!(a.labels, vec![0, 0, 1]);
    }

    #[test]
    fn all_zero_embeddings_error() {
        let err = agglomerative_cluster(&[vec![0.0, 0.0], vec![0.0, 0.0]], 0.1).unwrap_err();
        assert!(matches!(err, Error::DegenerateEmbedding));
    }

    #[test]
    fn count_stop() {
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let a = agglomerative_groups(&v, 2).unwrap();
        assert_eq!(a.labels, vec![0, 1, 0, 1]);
        let s = agglomerative_groups(&v, 4).unwrap();
        assert_eq!(s.labels, vec![0, 1, 2, 3]);
        assert!(agglomerative_groups(&v, 5).is_err());
    }
}
