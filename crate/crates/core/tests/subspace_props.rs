use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use hsc_core::autodiff::Tape;
use hsc_core::subspace::{dissimilarity_loss, init_bases, kmeans, soft_assign, soft_assign_on, BasisSet};
use hsc_core::Matrix;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn assign(h: &Matrix<f64>, d: &Matrix<f64>, r: usize, theta: f64) -> Matrix<f64> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let dv = tape.constant(d.clone());
    let s = soft_assign_on(&mut tape, hv, dv, r, theta).unwrap();
    tape.value(s).clone()
}

fn assign_oracle(h: &Matrix<f64>, d: &Matrix<f64>, k: usize, r: usize, theta: f64) -> Matrix<f64> {
    Matrix::from_fn(h.rows(), k, |i, j| {
        let score = |j: usize| -> f64 {
            let mut sq = 0.0;
            for c in j * r..(j + 1) * r {
                let p: f64 = (0..h.cols()).map(|a| h[(i, a)] * d[(a, c)]).sum();
                sq += p * p;
            }
            sq.sqrt() + theta * r as f64
        };
        score(j) / (0..k).map(score).sum::<f64>()
    })
}

fn dissimilarity_oracle(d: &Matrix<f64>, r: usize) -> f64 {
    let m = d.cols();
    let mut total = 0.0;
    for a in 0..m {
        for b in 0..m {
            let g: f64 = (0..d.rows()).map(|i| d[(i, a)] * d[(i, b)]).sum();
            if a / r != b / r {
                total += g * g;
            } else if a == b {
                total += (g - 1.0) * (g - 1.0);
            }
        }
    }
    total
}

fn shapes() -> impl Strategy<Value = (u64, usize, usize, usize, usize)> {
    (any::<u64>(), 1usize..12, 1usize..8, 1usize..5, 1usize..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn assignments_are_strictly_positive_row_stochastic((seed, n, d, k, r) in shapes()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h: Matrix<f32> = random(&mut rng, n, d).cast();
        let bases = BasisSet::new(random(&mut rng, d, k * r).cast(), k, r, 0.1).unwrap();
        prop_assert!(soft_assign(&h, &bases).unwrap().is_row_stochastic(1e-5));
    }

    #[test]
    fn assignments_match_scalar_oracle((seed, n, d, k, r) in shapes()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random(&mut rng, n, d);
        let basis = random(&mut rng, d, k * r);
        let got = assign(&h, &basis, r, 0.1);
        prop_assert!(got.max_abs_diff(&assign_oracle(&h, &basis, k, r, 0.1)) < 1e-6);
    }

    #[test]
    fn without_offset_assignments_ignore_code_scale((seed, n, d, k, r) in shapes(), c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random(&mut rng, n, d).map(|v| v + 2.0);
        let basis = random(&mut rng, d, k * r).map(|v| v + 2.0);
        let a = assign(&h, &basis, r, 0.0);
        let b = assign(&h.map(|v| v * c), &basis, r, 0.0);
        prop_assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn dissimilarity_matches_scalar_oracle((seed, _n, d, k, r) in shapes()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = random(&mut rng, d, k * r);
        let got = dissimilarity_loss(&BasisSet::new(basis.cast(), k, r, 0.1).unwrap()).unwrap();
        let want = dissimilarity_oracle(&basis.cast::<f32>().cast(), r);
        prop_assert!((got - want).abs() <= 1e-9 * want.max(1.0));
    }

    #[test]
    fn dissimilarity_vanishes_exactly_on_orthonormal_columns(
        seed in any::<u64>(), k in 1usize..4, r in 1usize..4, extra in 0usize..4, eps in 0.01f64..0.5
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = k * r + extra;
        let raw = DMatrix::from_fn(d, k * r, |_, _| StandardNormal.sample(&mut rng));
        let q = raw.qr().q();
        let basis = Matrix::from_fn(d, k * r, |i, j| q[(i, j)]);
        prop_assert!(dissimilarity_oracle(&basis, r) < 1e-20);
        let set = BasisSet::new(basis.cast(), k, r, 0.1).unwrap();
        prop_assert!(dissimilarity_loss(&set).unwrap() < 1e-10);
        // Stretching one column breaks unit norm by at least 2 eps.
        let bent = Matrix::from_fn(d, k * r, |i, j| if j == 0 { basis[(i, j)] * (1.0 + eps) } else { basis[(i, j)] });
        prop_assert!(dissimilarity_oracle(&bent, r) > 0.0);
        let bent = BasisSet::new(bent.cast(), k, r, 0.1).unwrap();
        prop_assert!(dissimilarity_loss(&bent).unwrap() > 1e-6);
    }
}

#[test]
fn initial_blocks_are_orthonormal_and_capture_the_top_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, d, k, r) = (90, 8, 3, 3);
    let h = random(&mut rng, n, d);
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let bases = init_bases(&h, &labels, k, r, 0.1, 1).unwrap();
    let all: Matrix<f64> = bases.matrix().cast();
    for j in 0..k {
        let block = all.column_block(j * r, r);
        let gram = block.t_matmul(&block).unwrap();
        assert!(gram.max_abs_diff(&Matrix::identity(r)) < 1e-5, "block {j}");
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == j).collect();
        let z = h.select_rows(&members);
        let captured = z.matmul(&block).unwrap().frobenius_sq();
        let nz = DMatrix::from_fn(z.rows(), d, |a, b| z[(a, b)]);
        let mut sv: Vec<f64> = nz.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let best: f64 = sv[..r].iter().map(|s| s * s).sum();
        assert!((captured - best).abs() < 1e-4 * best, "block {j}: {captured} vs {best}");
    }
}

#[test]
fn rank_deficient_clusters_are_completed_orthonormally() {
    // Every member code lies on one line, so two directions are filled in.
    let h = Matrix::from_fn(10, 5, |i, c| (i + 1) as f64 * [1.0, 2.0, 0.0, -1.0, 0.5][c]);
    let bases = init_bases(&h, &[0; 10], 1, 3, 0.1, 4).unwrap();
    let b: Matrix<f64> = bases.matrix().cast();
    assert!(b.t_matmul(&b).unwrap().max_abs_diff(&Matrix::identity(3)) < 1e-5);
}

fn blobs(seed: u64, per: usize, k: usize) -> (Matrix<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..k).map(|j| (0..3).map(|c| if c == j % 3 { 30.0 * (1 + j / 3) as f64 } else { 0.0 }).collect()).collect();
    let truth: Vec<usize> = (0..per * k).map(|i| i % k).collect();
    let pts = Matrix::from_fn(per * k, 3, |i, c| {
        let z: f64 = StandardNormal.sample(&mut rng);
        centers[truth[i]][c] + z
    });
    (pts, truth)
}

#[test]
fn kmeans_recovers_separated_blobs() {
    for seed in 0..5 {
        let (pts, truth) = blobs(seed, 40, 4);
        let res = kmeans(&pts, 4, seed, 4).unwrap();
        for i in 0..truth.len() {
            for j in 0..truth.len() {
                assert_eq!(truth[i] == truth[j], res.labels[i] == res.labels[j], "seed {seed}");
            }
        }
    }
}

#[test]
fn duplicate_rows_share_a_label() {
    let (pts, _) = blobs(11, 20, 3);
    let mut rows: Vec<usize> = (0..pts.rows()).collect();
    rows.extend([0, 5, 17, 42, 0]);
    let dup = pts.select_rows(&rows);
    let res = kmeans(&dup, 3, 2, 3).unwrap();
    let n = pts.rows();
    for (extra, &orig) in rows[n..].iter().enumerate() {
        assert_eq!(res.labels[n + extra], res.labels[orig]);
    }
}

#[test]
fn too_few_distinct_points_is_an_error() {
    let pts = Matrix::from_fn(6, 2, |i, _| (i % 2) as f64);
    assert!(kmeans(&pts, 3, 0, 1).is_err());
}
