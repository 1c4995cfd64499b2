//! Subspace bases, soft assignments and basis initialization.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{orthonormalize_columns, top_right_singular_vectors, Matrix, Real};
use crate::rng::{stream, Stream};

/// Default number of basis vectors per subspace.
pub const DEFAULT_RANK: usize = 5;
/// Default smoothing constant of the soft assignment.
pub const DEFAULT_THETA: f64 = 0.1;

/// `k` subspaces of `r` basis vectors each, stored as the columns of a
/// `d × (k·r)` matrix; block `j` is columns `j·r..(j+1)·r`.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisSet {
    matrix: Matrix<f32>,
    k: usize,
    r: usize,
    theta: f64,
}

impl BasisSet {
    pub fn new(matrix: Matrix<f32>, k: usize, r: usize, theta: f64) -> Result<Self> {
        if k == 0 || r == 0 || matrix.cols() != k * r {
            return Err(Error::Dimension {
                op: "BasisSet::new",
                lhs: matrix.shape(),
                rhs: (k, r),
            });
        }
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(Error::Config(format!("theta must be positive, got {theta}")));
        }
        Ok(BasisSet { matrix, k, r, theta })
    }

    pub fn matrix(&self) -> &Matrix<f32> {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut Matrix<f32> {
        &mut self.matrix
    }

    pub fn latent_dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn subspaces(&self) -> usize {
        self.k
    }

    pub fn rank(&self) -> usize {
        self.r
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Basis `D_j` as a `d × r` matrix.
    pub fn block(&self, j: usize) -> Matrix<f32> {
        self.matrix.column_block(j * self.r, self.r)
    }
}

/// Row-stochastic `n × k` soft assignments.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMatrix<T = f32> {
    matrix: Matrix<T>,
}

impl<T: Real> AssignmentMatrix<T> {
    pub fn new(matrix: Matrix<T>) -> Self {
        AssignmentMatrix { matrix }
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.matrix
    }

    /// Hard labels in `0..k`: the column of the largest entry, lowest index on
    /// ties.
    pub fn labels(&self) -> Vec<usize> {
        argmax_rows(&self.matrix)
    }

    /// Rows sum to 1 within `tol` and every entry is strictly positive.
    pub fn is_row_stochastic(&self, tol: f64) -> bool {
        (0..self.matrix.rows()).all(|i| {
            let row = self.matrix.row(i);
            let s: f64 = row.iter().map(|x| x.as_f64()).sum();
            (s - 1.0).abs() <= tol && row.iter().all(|&x| x > T::zero())
        })
    }
}

pub fn argmax_rows<T: Real>(m: &Matrix<T>) -> Vec<usize> {
    (0..m.rows())
        .map(|i| {
            let row = m.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// `s_ij = (‖h_i D_j‖ + θr) / Σ_j (‖h_i D_j‖ + θr)`, differentiable in both `h`
/// and `d`.
pub fn soft_assign_on<T: Real>(
    tape: &mut Tape<T>,
    h: Var,
    d: Var,
    r: usize,
    theta: f64,
) -> Result<Var> {
    let proj = tape.matmul(h, d)?;
    let norms = tape.block_row_l2norm(proj, r)?;
    let shifted = tape.add_scalar(norms, T::of(theta * r as f64));
    Ok(tape.row_normalize(shifted))
}

pub fn soft_assign(h: &Matrix<f32>, bases: &BasisSet) -> Result<AssignmentMatrix<f32>> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let dv = tape.constant(bases.matrix().clone());
    let s = soft_assign_on(&mut tape, hv, dv, bases.rank(), bases.theta())?;
    Ok(AssignmentMatrix::new(tape.value(s).clone()))
}

/// Off-block-diagonal indicator `O` (zeros on the `r × r` diagonal blocks).
pub fn off_block_mask<T: Real>(k: usize, r: usize) -> Matrix<T> {
    Matrix::from_fn(k * r, k * r, |i, j| {
        if i / r == j / r {
            T::zero()
        } else {
            T::one()
        }
    })
}

/// `‖DᵀD ⊙ O‖²_F + ‖DᵀD ⊙ I − I‖²_F`.
pub fn dissimilarity_loss_on<T: Real>(tape: &mut Tape<T>, d: Var, k: usize, r: usize) -> Result<Var> {
    if d.shape().1 != k * r {
        return Err(Error::Dimension {
            op: "dissimilarity_loss",
            lhs: d.shape(),
            rhs: (k, r),
        });
    }
    let dt = tape.transpose(d);
    let gram = tape.matmul(dt, d)?;
    let mask = tape.constant(off_block_mask(k, r));
    let eye = tape.constant(Matrix::identity(k * r));
    let off = tape.hadamard(gram, mask)?;
    let off = tape.frobenius_sq(off);
    let diag = tape.hadamard(gram, eye)?;
    let diag = tape.sub(diag, eye)?;
    let diag = tape.frobenius_sq(diag);
    tape.add(off, diag)
}

pub fn dissimilarity_loss(bases: &BasisSet) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let d = tape.constant(bases.matrix().cast());
    let l = dissimilarity_loss_on(&mut tape, d, bases.subspaces(), bases.rank())?;
    Ok(tape.scalar(l))
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Matrix<f64>,
    pub inertia: f64,
    pub iterations: usize,
}

const KMEANS_MAX_ITERS: usize = 300;
const KMEANS_TOL: f64 = 1e-6;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &Matrix<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seed(x: &Matrix<f64>, k: usize, rng: &mut impl Rng) -> Matrix<f64> {
    let n = x.rows();
    let mut centroids = Matrix::zeros(k, x.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(x.row(first));
    let mut closest: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(first))).collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in closest.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            while closest[chosen] == 0.0 {
                chosen -= 1;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(x.row(pick));
        for (i, d) in closest.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(pick)));
        }
    }
    centroids
}

fn lloyd(x: &Matrix<f64>, mut centroids: Matrix<f64>) -> KMeansResult {
    let (n, dim) = x.shape();
    let k = centroids.rows();
    let mut labels = vec![0usize; n];
    let mut iterations = 0;
    for it in 1..=KMEANS_MAX_ITERS {
        iterations = it;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (c, d) = nearest(x.row(i), &centroids);
            labels[i] = c;
            dists[i] = d;
        }
        let mut next = Matrix::<f64>::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (o, &v) in next.row_mut(labels[i]).iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed an empty cluster at the worst-fit point.
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("n > 0");
                next.row_mut(c).copy_from_slice(x.row(far));
                dists[far] = 0.0;
            } else {
                let inv = 1.0 / counts[c] as f64;
                next.row_mut(c).iter_mut().for_each(|v| *v *= inv);
            }
        }
        let shift = (0..k)
            .map(|c| sq_dist(next.row(c), centroids.row(c)).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < KMEANS_TOL {
            break;
        }
    }
    let mut inertia = 0.0;
    for i in 0..n {
        let (c, d) = nearest(x.row(i), &centroids);
        labels[i] = c;
        inertia += d;
    }
    KMeansResult {
        labels,
        centroids,
        inertia,
        iterations,
    }
}

/// k-means++ seeding followed by Lloyd iterations; the restart with the lowest
/// inertia wins.
pub fn kmeans<T: Real>(points: &Matrix<T>, k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    let x: Matrix<f64> = points.cast();
    let n = x.rows();
    if k == 0 || n < k {
        return Err(Error::Degenerate(format!("cannot form {k} clusters from {n} points")));
    }
    let mut distinct: Vec<&[f64]> = (0..n).map(|i| x.row(i)).collect();
    distinct.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::Degenerate(format!(
            "only {} distinct points for {k} clusters",
            distinct.len()
        )));
    }
    let mut rng = stream(seed, Stream::KMeans);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let seeds = plus_plus_seed(&x, k, &mut rng);
        let run = lloyd(&x, seeds);
        if best.as_ref().map_or(true, |b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// One `d × r` orthonormal basis per cluster from the top right singular
/// vectors of the stacked member codes. Rank-deficient clusters are completed
/// with random orthonormal directions.
pub fn init_bases<T: Real>(
    h: &Matrix<T>,
    labels: &[usize],
    k: usize,
    r: usize,
    theta: f64,
    seed: u64,
) -> Result<BasisSet> {
    let d = h.cols();
    if labels.len() != h.rows() {
        return Err(Error::Dimension {
            op: "init_bases",
            lhs: h.shape(),
            rhs: (labels.len(), 1),
        });
    }
    if r == 0 || r > d {
        return Err(Error::Config(format!("need 0 < r <= d, got r = {r}, d = {d}")));
    }
    let mut members = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::contract(format!("label {l} out of range for {k} clusters")));
        }
        members[l].push(i);
    }
    let mut rng = stream(seed, Stream::BasisCompletion);
    let mut out = Matrix::<f32>::zeros(d, k * r);
    for (j, mem) in members.iter().enumerate() {
        if mem.is_empty() {
            return Err(Error::Initialization(format!(
                "cluster {j} is empty; re-seed the clustering"
            )));
        }
        let z: Matrix<f64> = h.select_rows(mem).cast();
        let block = subspace_basis(&z, r, &mut rng);
        for row in 0..d {
            for c in 0..r {
                out[(row, j * r + c)] = block[(row, c)] as f32;
            }
        }
    }
    BasisSet::new(out, k, r, theta)
}

fn subspace_basis(z: &Matrix<f64>, r: usize, rng: &mut impl Rng) -> Matrix<f64> {
    let d = z.cols();
    let (sv, vecs) = top_right_singular_vectors(z, r);
    let top = sv.first().copied().unwrap_or(0.0);
    let keep = sv
        .iter()
        .take_while(|&&s| s > 0.0 && s > 1e-8 * top)
        .count();
    let mut basis = Matrix::<f64>::zeros(d, r);
    for row in 0..d {
        for c in 0..keep {
            basis[(row, c)] = vecs[(row, c)];
        }
    }
    let mut filled = keep;
    while filled < r {
        for row in 0..d {
            basis[(row, filled)] = StandardNormal.sample(rng);
        }
        let mut trial = basis.column_block(0, filled + 1);
        if orthonormalize_columns(&mut trial, 1e-8).is_empty() {
            for row in 0..d {
                basis[(row, filled)] = trial[(row, filled)];
            }
            filled += 1;
        }
    }
    basis
}

#[cfg(test)]
mod tests {
    use super::*;

    fn standard_bases(d: usize, k: usize, r: usize, scale: f32) -> BasisSet {
        let m = Matrix::from_fn(d, k * r, |i, j| if i == j { scale } else { 0.0 });
        BasisSet::new(m, k, r, DEFAULT_THETA).unwrap()
    }

    #[test]
    fn axis_projection_with_vanishing_theta() {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Matrix::from_rows(&[&[1.0, 0.0]]));
        let d = tape.constant(Matrix::identity(2));
        let s = soft_assign_on(&mut tape, h, d, 1, 1e-12).unwrap();
        let v = tape.value(s);
        assert!((v[(0, 0)] - 1.0).abs() < 1e-9);
        assert!(v[(0, 1)].abs() < 1e-9);
    }

    #[test]
    fn zero_latent_gives_uniform_assignment() {
        let bases = standard_bases(6, 3, 2, 1.0);
        let s = soft_assign(&Matrix::zeros(2, 6), &bases).unwrap();
        for v in s.matrix().data() {
            assert!((*v as f64 - 1.0 / 3.0).abs() < 1e-6);
        }
        assert!(s.is_row_stochastic(1e-6));
    }

    #[test]
    fn orthonormal_blocks_have_zero_dissimilarity() {
        assert_eq!(dissimilarity_loss(&standard_bases(12, 3, 4, 1.0)).unwrap(), 0.0);
    }

    #[test]
    fn doubled_basis_costs_nine_per_column() {
        let (k, r) = (3, 2);
        let l = dissimilarity_loss(&standard_bases(8, k, r, 2.0)).unwrap();
        assert!((l - 9.0 * (k * r) as f64).abs() < 1e-9);
    }

    #[test]
    fn theta_must_be_positive() {
        assert!(BasisSet::new(Matrix::zeros(4, 4), 2, 2, 0.0).is_err());
        assert!(BasisSet::new(Matrix::zeros(4, 5), 2, 2, 0.1).is_err());
    }

    #[test]
    fn single_cluster_centroid_is_mean() {
        let x = Matrix::<f64>::from_rows(&[&[0.0, 1.0], &[2.0, 3.0], &[4.0, 8.0]]);
        let res = kmeans(&x, 1, 3, 2).unwrap();
        assert_eq!(res.labels, vec![0, 0, 0]);
        assert!((res.centroids[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((res.centroids[(0, 1)] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_distinct_points_is_degenerate() {
        let x = Matrix::<f64>::from_rows(&[&[1.0], &[1.0], &[1.0], &[2.0]]);
        assert!(matches!(kmeans(&x, 3, 0, 1), Err(Error::Degenerate(_))));
        assert!(matches!(kmeans(&x, 5, 0, 1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn rank_one_cluster_recovers_direction() {
        let u = [0.6, 0.0, 0.8];
        let h = Matrix::<f64>::from_fn(4, 3, |_, j| u[j]);
        let b = init_bases(&h, &[0, 0, 0, 0], 1, 1, 0.1, 5).unwrap();
        let col = b.block(0);
        let dot: f64 = (0..3).map(|i| col[(i, 0)] as f64 * u[i]).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_cluster_fails_initialization() {
        let h = Matrix::<f64>::from_fn(3, 4, |i, j| (i + j) as f64);
        assert!(matches!(
            init_bases(&h, &[0, 0, 0], 2, 1, 0.1, 0),
            Err(Error::Initialization(_))
        ));
    }

    #[test]
    fn rank_deficient_cluster_is_completed_orthonormally() {
        let h = Matrix::<f64>::from_fn(3, 6, |i, j| if j == 0 { 1.0 + i as f64 } else { 0.0 });
        let b = init_bases(&h, &[0, 0, 0], 1, 4, 0.1, 11).unwrap();
        let blk: Matrix<f64> = b.block(0).cast();
        let g = blk.t_matmul(&blk).unwrap();
        assert!(g.max_abs_diff(&Matrix::identity(4)) < 1e-6);
    }
}
