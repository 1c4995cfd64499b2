//! First-neighbor agglomerative clustering.
//!
//! Each point is linked to its first (nearest) neighbor; points `i` and `j` are
//! adjacent when `j = κ(i)`, `κ(j) = i` or `κ(i) = κ(j)`. Connected components
//! of that graph form the partition at the current level, their means become
//! the points of the next level, and the process repeats.

use crate::error::{Error, Result};
use crate::linalg::{gemm_into, Matrix, Real};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        })
    }
}

/// Source of first-neighbor vectors. The exact backend is quadratic; an
/// approximate index can be substituted for large scenes.
pub trait NeighborBackend<T: Real> {
    fn first_neighbors(&self, points: &Matrix<T>, metric: Metric) -> Result<Vec<usize>>;
}

/// Exhaustive search through blocked Gram products.
#[derive(Clone, Copy, Debug)]
pub struct ExactNeighbors {
    pub block_rows: usize,
}

impl Default for ExactNeighbors {
    fn default() -> Self {
        ExactNeighbors { block_rows: 256 }
    }
}

impl<T: Real> NeighborBackend<T> for ExactNeighbors {
    fn first_neighbors(&self, points: &Matrix<T>, metric: Metric) -> Result<Vec<usize>> {
        let n = points.rows();
        if n < 2 {
            return Err(Error::contract("first neighbors need at least 2 points"));
        }
        let sq_norms: Vec<T> = (0..n)
            .map(|i| points.row(i).iter().fold(T::zero(), |s, &x| s + x * x))
            .collect();
        let work = match metric {
            Metric::Euclidean => points.clone(),
            Metric::Cosine => {
                let mut m = points.clone();
                for (i, &sq) in sq_norms.iter().enumerate() {
                    let nrm = sq.sqrt();
                    if nrm > T::zero() {
                        for x in m.row_mut(i) {
                            *x = *x / nrm;
                        }
                    }
                }
                m
            }
        };

        let mut kappa = vec![0usize; n];
        let block = self.block_rows.max(1);
        let mut start = 0;
        while start < n {
            let rows = block.min(n - start);
            let chunk = work.select_rows(&(start..start + rows).collect::<Vec<_>>());
            let mut gram = Matrix::zeros(rows, n);
            gemm_into(T::one(), &chunk, false, &work, true, T::zero(), &mut gram, "first_neighbors")?;
            for r in 0..rows {
                let i = start + r;
                let mut best: Option<(T, usize)> = None;
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let g = gram[(r, j)];
                    let d = match metric {
                        Metric::Cosine => T::one() - g,
                        Metric::Euclidean => sq_norms[i] + sq_norms[j] - (g + g),
                    };
                    if best.map_or(true, |(bd, _)| d < bd) {
                        best = Some((d, j));
                    }
                }
                kappa[i] = best.expect("n >= 2").1;
            }
            start += rows;
        }
        Ok(kappa)
    }
}

/// First-neighbor vector with the exact backend; ties go to the smallest index.
pub fn first_neighbors<T: Real>(points: &Matrix<T>, metric: Metric) -> Result<Vec<usize>> {
    ExactNeighbors::default().first_neighbors(points, metric)
}

/// Assignment of `n` samples to `l` mini-clusters.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniClusterPartition {
    index: Vec<usize>,
    members: Vec<Vec<usize>>,
    depth: usize,
    centroids: Option<Matrix<f64>>,
}

impl MiniClusterPartition {
    /// Builds a partition from arbitrary labels, renumbering clusters by order
    /// of first appearance.
    pub fn from_labels(labels: &[usize], depth: usize) -> Self {
        let mut remap = std::collections::HashMap::new();
        let mut index = Vec::with_capacity(labels.len());
        let mut members: Vec<Vec<usize>> = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            let next = remap.len();
            let c = *remap.entry(l).or_insert(next);
            if c == members.len() {
                members.push(Vec::new());
            }
            members[c].push(i);
            index.push(c);
        }
        MiniClusterPartition {
            index,
            members,
            depth,
            centroids: None,
        }
    }

    pub fn index(&self) -> &[usize] {
        &self.index
    }

    pub fn members(&self) -> &[Vec<usize>] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn samples(&self) -> usize {
        self.index.len()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn centroids(&self) -> Option<&Matrix<f64>> {
        self.centroids.as_ref()
    }

    /// Whether the index vector and member lists describe the same contiguous,
    /// non-empty clusters.
    pub fn is_consistent(&self) -> bool {
        let l = self.members.len();
        if self.members.iter().any(|m| m.is_empty()) {
            return false;
        }
        if self.index.iter().any(|&c| c >= l) {
            return false;
        }
        let total: usize = self.members.iter().map(Vec::len).sum();
        total == self.index.len()
            && self
                .members
                .iter()
                .enumerate()
                .all(|(c, m)| m.iter().all(|&i| self.index.get(i) == Some(&c)))
    }

    fn with_centroids<T: Real>(mut self, points: &Matrix<T>) -> Self {
        let d = points.cols();
        let mut cent = Matrix::<f64>::zeros(self.len(), d);
        for (c, mem) in self.members.iter().enumerate() {
            let row = cent.row_mut(c);
            for &i in mem {
                for (o, &x) in row.iter_mut().zip(points.row(i)) {
                    *o += x.as_f64();
                }
            }
            let inv = 1.0 / mem.len() as f64;
            for o in row.iter_mut() {
                *o *= inv;
            }
        }
        self.centroids = Some(cent);
        self
    }

    /// Mean over clusters of the mean squared Euclidean distance between
    /// members and their centroid.
    fn mean_variance<T: Real>(&self, points: &Matrix<T>) -> f64 {
        let cent = self.centroids.as_ref().expect("centroids computed");
        let total: f64 = self
            .members
            .iter()
            .enumerate()
            .map(|(c, mem)| {
                let cr = cent.row(c);
                let s: f64 = mem
                    .iter()
                    .map(|&i| {
                        points
                            .row(i)
                            .iter()
                            .zip(cr)
                            .map(|(&x, &m)| (x.as_f64() - m).powi(2))
                            .sum::<f64>()
                    })
                    .sum();
                s / mem.len() as f64
            })
            .sum();
        total / self.len() as f64
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Connected components of the first-neighbor graph. Linking every `i` to
/// `κ(i)` already connects pairs sharing a neighbor, so the `n × n` adjacency
/// matrix is never built.
pub fn adjacency_components(kappa: &[usize]) -> Result<MiniClusterPartition> {
    let n = kappa.len();
    if let Some(bad) = kappa.iter().position(|&k| k >= n) {
        return Err(Error::contract(format!("neighbor of {bad} out of range")));
    }
    let mut ds = DisjointSet::new(n);
    for (i, &k) in kappa.iter().enumerate() {
        ds.union(i, k);
    }
    let roots: Vec<usize> = (0..n).map(|i| ds.find(i)).collect();
    Ok(MiniClusterPartition::from_labels(&roots, 1))
}

/// Partitions produced by successive merging rounds, finest first.
#[derive(Clone, Debug)]
pub struct PartitionHierarchy {
    levels: Vec<MiniClusterPartition>,
    mean_variance: Vec<f64>,
}

impl PartitionHierarchy {
    pub fn levels(&self) -> &[MiniClusterPartition] {
        &self.levels
    }

    pub fn cluster_counts(&self) -> Vec<usize> {
        self.levels.iter().map(MiniClusterPartition::len).collect()
    }

    pub fn mean_variance(&self) -> &[f64] {
        &self.mean_variance
    }

    /// Text summary: one `iteration clusters mean_variance` line per level.
    pub fn summary(&self) -> String {
        let mut s = String::from("iteration clusters mean_variance\n");
        for (i, (p, v)) in self.levels.iter().zip(&self.mean_variance).enumerate() {
            s.push_str(&format!("{} {} {:.6}\n", i + 1, p.len(), v));
        }
        s
    }
}

/// Runs merging rounds until one cluster remains or `max_iters` levels exist.
pub fn finch_hierarchy<T: Real>(
    points: &Matrix<T>,
    metric: Metric,
    max_iters: usize,
) -> Result<PartitionHierarchy> {
    finch_hierarchy_with(&ExactNeighbors::default(), points, metric, max_iters)
}

pub fn finch_hierarchy_with<T: Real, B: NeighborBackend<T>>(
    backend: &B,
    points: &Matrix<T>,
    metric: Metric,
    max_iters: usize,
) -> Result<PartitionHierarchy> {
    if points.rows() < 2 {
        return Err(Error::contract("clustering needs at least 2 points"));
    }
    if max_iters == 0 {
        return Err(Error::contract("max_iters must be at least 1"));
    }
    let kappa = backend.first_neighbors(points, metric)?;
    let first = adjacency_components(&kappa)?.with_centroids(points);
    let mut mean_variance = vec![first.mean_variance(points)];
    let mut levels = vec![first];

    while levels.len() < max_iters {
        let prev = levels.last().expect("non-empty");
        if prev.len() < 2 {
            break;
        }
        let cent: Matrix<T> = prev.centroids().expect("centroids").cast();
        let kappa = backend.first_neighbors(&cent, metric)?;
        let merged = adjacency_components(&kappa)?;
        let labels: Vec<usize> = prev.index().iter().map(|&c| merged.index()[c]).collect();
        let next = MiniClusterPartition::from_labels(&labels, levels.len() + 1).with_centroids(points);
        mean_variance.push(next.mean_variance(points));
        levels.push(next);
    }
    Ok(PartitionHierarchy {
        levels,
        mean_variance,
    })
}

/// Partition after `iteration` merging rounds (1-based), with membership
/// expressed over the original samples.
pub fn select_partition(
    hierarchy: &PartitionHierarchy,
    iteration: usize,
) -> Result<MiniClusterPartition> {
    if iteration == 0 || iteration > hierarchy.levels.len() {
        return Err(Error::DepthOutOfRange {
            requested: iteration,
            available: hierarchy.levels.len(),
        });
    }
    Ok(hierarchy.levels[iteration - 1].clone())
}
