//! Linear assignment and the permutation-invariant point-set loss built on it.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::geometry::{dist2, AtomCloud};

/// A bijection from rows to columns with its total cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `permutation[row] = column`.
    pub permutation: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    /// Sum of the selected entries, accumulated in row order.
    pub fn cost_of(cost: ArrayView2<f64>, permutation: &[usize]) -> f64 {
        permutation.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum()
    }
}

/// Minimum-cost perfect assignment on a square matrix.
///
/// Shortest augmenting paths with row/column potentials, O(n³). Ties are
/// resolved deterministically by scan order.
pub fn hungarian(cost: ArrayView2<f64>) -> Result<Assignment> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(Error::shape(format!("cost matrix must be square, got {}×{}", n, cost.ncols())));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    if n == 0 {
        return Ok(Assignment { permutation: Vec::new(), total_cost: 0.0 });
    }

    // 1-based arrays; index 0 is the virtual root of each augmenting search.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        row_of_col[0] = row;
        let mut col0 = 0usize;
        let mut min_slack = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = row_of_col[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0usize;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let cur = cost[[r - 1, col - 1]] - u[r] - v[col];
                if cur < min_slack[col] {
                    min_slack[col] = cur;
                    way[col] = col0;
                }
                if min_slack[col] < delta {
                    delta = min_slack[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[row_of_col[col]] += delta;
                    v[col] -= delta;
                } else {
                    min_slack[col] -= delta;
                }
            }
            col0 = col1;
            if row_of_col[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            row_of_col[col0] = row_of_col[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }

    let mut permutation = vec![0usize; n];
    for col in 1..=n {
        permutation[row_of_col[col] - 1] = col - 1;
    }
    let total_cost = Assignment::cost_of(cost, &permutation);
    Ok(Assignment { permutation, total_cost })
}

/// Squared-distance cost matrix between two equally sized point sets.
pub fn squared_distance_matrix(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Array2<f64> {
    Array2::from_shape_fn((x.nrows(), y.nrows()), |(i, j)| dist2(x.row(i), y.row(j)))
}

fn check_counts(x: &AtomCloud, x_hat: &AtomCloud) -> Result<()> {
    if x.len() != x_hat.len() {
        return Err(Error::shape(format!(
            "bipartite loss needs equal atom counts, got {} and {}",
            x.len(),
            x_hat.len()
        )));
    }
    Ok(())
}

/// `min_π Σ_i ‖x_i − x̂_π(i)‖²` and the minimizing assignment
/// (`permutation[i] = π(i)`).
pub fn bipartite_loss(x: &AtomCloud, x_hat: &AtomCloud) -> Result<(f64, Assignment)> {
    check_counts(x, x_hat)?;
    bipartite_loss_positions(x.positions(), x_hat.positions())
}

pub fn bipartite_loss_positions(x: ArrayView2<f64>, x_hat: ArrayView2<f64>) -> Result<(f64, Assignment)> {
    if x.nrows() != x_hat.nrows() {
        return Err(Error::shape(format!(
            "bipartite loss needs equal atom counts, got {} and {}",
            x.nrows(),
            x_hat.nrows()
        )));
    }
    let cost = squared_distance_matrix(x, x_hat);
    let a = hungarian(cost.view())?;
    Ok((a.total_cost, a))
}

/// Gradient of the bipartite loss with respect to `x_hat`, holding the
/// optimal assignment fixed: `2 (x̂_π(i) − x_i)` written to row `π(i)`.
pub fn bipartite_loss_gradient(x: &AtomCloud, x_hat: &AtomCloud) -> Result<Array2<f64>> {
    check_counts(x, x_hat)?;
    let (_, a) = bipartite_loss(x, x_hat)?;
    Ok(gradient_for_assignment(x.positions(), x_hat.positions(), &a))
}

pub fn gradient_for_assignment(x: ArrayView2<f64>, x_hat: ArrayView2<f64>, a: &Assignment) -> Array2<f64> {
    let mut g = Array2::zeros(x_hat.raw_dim());
    for (i, &j) in a.permutation.iter().enumerate() {
        for k in 0..3 {
            g[[j, k]] = 2.0 * (x_hat[[j, k]] - x[[i, k]]);
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::{apply_transform, RigidTransform, Vec3};

    /// Exhaustive oracle: the minimum over all permutations, each summed in
    /// row order.
    fn brute_force_min(cost: ArrayView2<f64>) -> f64 {
        fn rec(cost: ArrayView2<f64>, row: usize, used: &mut [bool], acc: &mut Vec<usize>, best: &mut f64) {
            let n = cost.nrows();
            if row == n {
                let c = Assignment::cost_of(cost, acc);
                if c < *best {
                    *best = c;
                }
                return;
            }
            for col in 0..n {
                if !used[col] {
                    used[col] = true;
                    acc.push(col);
                    rec(cost, row + 1, used, acc, best);
                    acc.pop();
                    used[col] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cost.nrows()], &mut Vec::new(), &mut best);
        best
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> AtomCloud {
        let pts: Vec<Vec3> = (0..n)
            .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
            .collect();
        AtomCloud::from_points(&pts).unwrap()
    }

    #[test]
    fn zero_diagonal_gives_identity() {
        let cost = Array2::from_shape_fn((5, 5), |(i, j)| if i == j { 0.0 } else { 1.0 + (i + j) as f64 });
        let a = hungarian(cost.view()).unwrap();
        assert_eq!(a.permutation, vec![0, 1, 2, 3, 4]);
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn two_by_two_against_enumeration() {
        let cost = array![[1.0, 2.0], [3.0, 1.0]];
        // the two permutations cost 1+1=2 and 2+3=5
        let a = hungarian(cost.view()).unwrap();
        assert_eq!(a.permutation, vec![0, 1]);
        assert_eq!(a.total_cost, 2.0);
    }

    #[test]
    fn matches_brute_force_on_random_7x7() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let cost = Array2::from_shape_fn((7, 7), |_| rng.random_range(-5.0..10.0));
            let a = hungarian(cost.view()).unwrap();
            assert_eq!(a.total_cost, brute_force_min(cost.view()));
            let mut p = a.permutation.clone();
            p.sort_unstable();
            assert_eq!(p, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(hungarian(Array2::<f64>::zeros((2, 3)).view()).is_err());
        assert!(hungarian(array![[1.0, f64::NAN], [0.0, 1.0]].view()).is_err());
    }

    #[test]
    fn cost_invariant_under_row_and_column_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = 9;
            let cost = Array2::from_shape_fn((n, n), |_| rng.random_range(0.0..1.0));
            let mut rows: Vec<usize> = (0..n).collect();
            let mut cols: Vec<usize> = (0..n).collect();
            rows.shuffle(&mut rng);
            cols.shuffle(&mut rng);
            let permuted = Array2::from_shape_fn((n, n), |(i, j)| cost[[rows[i], cols[j]]]);
            let a = hungarian(cost.view()).unwrap();
            let b = hungarian(permuted.view()).unwrap();
            assert!((a.total_cost - b.total_cost).abs() < 1e-12);
            for i in 0..n {
                assert_eq!(cols[b.permutation[i]], a.permutation[rows[i]]);
            }
        }
    }

    #[test]
    fn identical_and_permuted_sets_have_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = cloud(&mut rng, 12);
        assert_eq!(bipartite_loss(&x, &x).unwrap().0, 0.0);
        let mut perm: Vec<usize> = (0..12).collect();
        perm.shuffle(&mut rng);
        let (loss, a) = bipartite_loss(&x, &x.select(&perm)).unwrap();
        assert_eq!(loss, 0.0);
        for (i, &j) in a.permutation.iter().enumerate() {
            assert_eq!(perm[j], i);
        }
    }

    #[test]
    fn uniform_shift_costs_n_times_shift_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // well separated points so the shift does not change the matching
        let pts: Vec<Vec3> = (0..8).map(|i| [3.0 * i as f64, (i % 3) as f64 * 4.0, 0.0]).collect();
        let x = AtomCloud::from_points(&pts).unwrap();
        let delta = [0.3, -0.2, 0.25];
        let shifted = x.translated(delta);
        let (loss, a) = bipartite_loss(&x, &shifted).unwrap();
        let d2: f64 = delta.iter().map(|v| v * v).sum();
        assert!((loss - 8.0 * d2).abs() < 1e-12);
        assert_eq!(a.permutation, (0..8).collect::<Vec<_>>());
        let g = bipartite_loss_gradient(&x, &shifted).unwrap();
        for row in g.outer_iter() {
            for k in 0..3 {
                assert!((row[k] - 2.0 * delta[k]).abs() < 1e-12);
            }
        }
        let _ = &mut rng;
    }

    #[test]
    fn gradient_zero_at_exact_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = cloud(&mut rng, 6);
        assert!(bipartite_loss_gradient(&x, &x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = cloud(&mut rng, 7);
        let y = cloud(&mut rng, 7);
        let g = bipartite_loss_gradient(&x, &y).unwrap();
        let h = 1e-5;
        for i in 0..7 {
            for k in 0..3 {
                let mut p = y.positions().to_owned();
                p[[i, k]] += h;
                let lp = bipartite_loss_positions(x.positions(), p.view()).unwrap().0;
                p[[i, k]] -= 2.0 * h;
                let lm = bipartite_loss_positions(x.positions(), p.view()).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - g[[i, k]]).abs() <= 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[[i, k]]);
            }
        }
    }

    #[test]
    fn loss_invariant_under_permutations_and_shared_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = cloud(&mut rng, 10);
        let y = cloud(&mut rng, 10);
        let base = bipartite_loss(&x, &y).unwrap().0;
        let mut p1: Vec<usize> = (0..10).collect();
        let mut p2 = p1.clone();
        p1.shuffle(&mut rng);
        p2.shuffle(&mut rng);
        let permuted = bipartite_loss(&x.select(&p1), &y.select(&p2)).unwrap().0;
        assert!((base - permuted).abs() < 1e-10);
        let g = RigidTransform::random(&mut rng, true, 5.0);
        let moved = bipartite_loss(&apply_transform(&x, &g), &apply_transform(&y, &g)).unwrap().0;
        assert!((base - moved).abs() < 1e-9);
    }

    #[test]
    fn count_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = cloud(&mut rng, 4);
        let y = cloud(&mut rng, 5);
        assert!(bipartite_loss(&x, &y).is_err());
        assert!(bipartite_loss_gradient(&x, &y).is_err());
    }
}
