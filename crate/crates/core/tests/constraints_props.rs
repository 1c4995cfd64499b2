use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hsc_core::autodiff::Tape;
use hsc_core::constraints::{
    kl_divergence, local_loss_on, mini_cluster_mean, refine, spatial_smooth, window_index,
};
use hsc_core::finch::MiniClusterPartition;
use hsc_core::Matrix;

fn stochastic(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> Matrix<f64> {
    let mut m = Matrix::from_fn(rows, k, |_, _| rng.random_range(0.01..1.0));
    for i in 0..rows {
        let t: f64 = m.row(i).iter().sum();
        m.row_mut(i).iter_mut().for_each(|v| *v /= t);
    }
    m
}

fn entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

fn permute_cols(m: &Matrix<f64>, perm: &[usize]) -> Matrix<f64> {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, perm[j])])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn refined_rows_stay_on_the_simplex(seed in any::<u64>(), l in 1usize..20, k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = refine(&stochastic(&mut rng, l, k)).unwrap();
        for i in 0..l {
            prop_assert!((r.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.row(i).iter().all(|&v| v > 0.0));
        }
    }

    /// Stacking every cyclic shift of a row block equalizes the column sums,
    /// so refinement reduces to squaring and renormalizing.
    #[test]
    fn with_equal_frequencies_refinement_sharpens(seed in any::<u64>(), l in 1usize..6, k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = stochastic(&mut rng, l, k);
        let m = Matrix::from_fn(l * k, k, |i, j| base[(i % l, (j + i / l) % k)]);
        let r = refine(&m).unwrap();
        let am = hsc_core::subspace::argmax_rows(&m);
        let ar = hsc_core::subspace::argmax_rows(&r);
        for i in 0..m.rows() {
            prop_assert_eq!(am[i], ar[i]);
            prop_assert!(entropy(r.row(i)) <= entropy(m.row(i)) + 1e-12);
        }
    }

    #[test]
    fn refinement_commutes_with_column_permutations(seed in any::<u64>(), l in 1usize..10, k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = stochastic(&mut rng, l, k);
        let mut perm: Vec<usize> = (0..k).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let a = permute_cols(&refine(&m).unwrap(), &perm);
        let b = refine(&permute_cols(&m, &perm)).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn mini_cluster_means_match_loop_oracle(seed in any::<u64>(), n in 1usize..40, groups in 1usize..8, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = stochastic(&mut rng, n, k);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..groups)).collect();
        let part = MiniClusterPartition::from_labels(&labels, 0);
        let m = mini_cluster_mean(&s, &part).unwrap();
        prop_assert_eq!(m.rows(), part.len());
        for p in 0..part.len() {
            let members: Vec<usize> = (0..n).filter(|&i| part.index()[i] == p).collect();
            for j in 0..k {
                let want = members.iter().map(|&i| s[(i, j)]).sum::<f64>() / members.len() as f64;
                prop_assert!((m[(p, j)] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn smoothing_matches_window_loop_oracle(
        seed in any::<u64>(), w in 1usize..9, h in 1usize..9, k in 1usize..4, edge in prop::sample::select(vec![3usize, 5, 7])
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Roughly a quarter of the pixels are unlabeled and left out.
        let coords: Vec<(usize, usize)> = (0..h)
            .flat_map(|r| (0..w).map(move |c| (r, c)))
            .filter(|_| rng.random_range(0..4) != 0)
            .collect();
        prop_assume!(!coords.is_empty());
        let s = stochastic(&mut rng, coords.len(), k);
        let win = Arc::new(window_index(&coords, w, h, edge).unwrap());
        let f = spatial_smooth(&s, &win).unwrap();
        let half = (edge / 2) as isize;
        for (i, &(r, c)) in coords.iter().enumerate() {
            let near: Vec<usize> = (0..coords.len())
                .filter(|&j| {
                    let (rr, cc) = coords[j];
                    (rr as isize - r as isize).abs() <= half && (cc as isize - c as isize).abs() <= half
                })
                .collect();
            for j in 0..k {
                let want = near.iter().map(|&q| s[(q, j)]).sum::<f64>() / near.len() as f64;
                prop_assert!((f[(i, j)] - want).abs() < 1e-6);
            }
        }
        let mut perm: Vec<usize> = (0..k).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let permuted = spatial_smooth(&permute_cols(&s, &perm), &win).unwrap();
        prop_assert!(permuted.max_abs_diff(&permute_cols(&f, &perm)) < 1e-12);
    }
}

#[test]
fn kl_matches_hand_computed_two_by_two() {
    let t = Matrix::<f64>::from_rows(&[&[0.9, 0.1], &[0.3, 0.7]]);
    let q = Matrix::<f64>::from_rows(&[&[0.6, 0.4], &[0.5, 0.5]]);
    let want = 0.9 * (0.9f64 / 0.6).ln() + 0.1 * (0.1f64 / 0.4).ln() + 0.3 * (0.3f64 / 0.5).ln() + 0.7 * (0.7f64 / 0.5).ln();
    assert!((kl_divergence(&t, &q).unwrap() - want).abs() < 1e-12);
    assert!(kl_divergence(&t, &t).unwrap().abs() < 1e-12);
}

#[test]
fn constant_assignment_is_its_own_smoothing_with_zero_local_loss() {
    let (w, h) = (6, 5);
    let coords: Vec<(usize, usize)> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
    let row = [0.2f64, 0.5, 0.3];
    let s = Matrix::from_fn(coords.len(), 3, |_, j| row[j]);
    let win = Arc::new(window_index(&coords, w, h, 5).unwrap());
    let f = spatial_smooth(&s, &win).unwrap();
    assert!(f.max_abs_diff(&s) < 1e-15);
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let l = local_loss_on(&mut tape, sv, &f).unwrap();
    assert!(tape.scalar(l).abs() < 1e-12);
}

#[test]
fn unsupported_window_edges_are_rejected() {
    assert!(window_index(&[(0, 0)], 1, 1, 4).is_err());
    assert!(window_index(&[(0, 0)], 1, 1, 9).is_err());
}
