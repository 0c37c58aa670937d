use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block::{Block, MembershipMatrix};
use crate::decoder::ProxyMatrix;
use crate::diagnostics::proxy_mae;
use crate::error::{ensure, Result};
use crate::pullback::pseudo_inverse;
use crate::scalar::Real;

const MAX_LLOYD: usize = 200;
const SHIFT_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct SoftKmeans<T> {
    pub memberships: MembershipMatrix<T>,
    pub centers: Array2<T>,
    pub iterations: usize,
}

fn sq_dist<T: Real>(a: ndarray::ArrayView1<'_, T>, b: ndarray::ArrayView1<'_, T>) -> T {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// `(index of nearest center, squared distance)` per item.
fn nearest<T: Real>(x: &Array2<T>, centers: &Array2<T>) -> Vec<(usize, T)> {
    x.axis_iter(Axis(0))
        .map(|row| {
            centers
                .axis_iter(Axis(0))
                .map(|c| sq_dist(row, c))
                .enumerate()
                .fold((0, T::infinity()), |best, (k, d)| if d < best.1 { (k, d) } else { best })
        })
        .collect()
}

fn kmeans_pp<T: Real, R: Rng + ?Sized>(x: &Array2<T>, k: usize, rng: &mut R) -> Array2<T> {
    let n = x.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    while chosen.len() < k {
        let centers = x.select(Axis(0), &chosen);
        let d2: Vec<f64> = nearest(x, &centers).iter().map(|&(_, d)| d.to_f64_lossy()).collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
    }
    x.select(Axis(0), &chosen)
}

/// Coordinate-only baseline: k-means++ seeding, Lloyd iterations, then
/// `s_ik ∝ exp(−‖x_i − μ_k‖² / σ²)` with `σ²` the mean squared distance to
/// the nearest center.
pub fn soft_kmeans_baseline<T: Real>(block: &Block<T>, k: usize, seed: u64) -> Result<SoftKmeans<T>> {
    let x = block.coords();
    let n = block.n_items();
    ensure(k >= 1 && k <= n, || format!("K = {k} must lie in 1..={n}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_pp(x, k, &mut rng);
    let mut iterations = 0;
    for _ in 0..MAX_LLOYD {
        iterations += 1;
        let assign = nearest(x, &centers);
        let mut sums = Array2::<T>::zeros(centers.dim());
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assign.iter().enumerate() {
            let mut row = sums.row_mut(c);
            row.zip_mut_with(&x.row(i), |a, &b| *a = *a + b);
            counts[c] += 1;
        }
        let mut taken: Vec<usize> = Vec::new();
        let mut next = sums;
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                let m = T::lit(count as f64);
                next.row_mut(c).mapv_inplace(|v| v / m);
            } else {
                // reseed to the item farthest from its current center
                let far = assign
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken.contains(i))
                    .fold((0, T::neg_infinity()), |best, (i, &(_, d))| if d > best.1 { (i, d) } else { best })
                    .0;
                taken.push(far);
                next.row_mut(c).assign(&x.row(far));
            }
        }
        let shift = centers
            .axis_iter(Axis(0))
            .zip(next.axis_iter(Axis(0)))
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(T::zero(), T::max);
        centers = next;
        if shift < T::lit(SHIFT_TOL) {
            break;
        }
    }
    let d2 = Array2::from_shape_fn((n, k), |(i, c)| sq_dist(x.row(i), centers.row(c)));
    let sigma2 = d2
        .axis_iter(Axis(0))
        .map(|r| r.iter().copied().fold(T::infinity(), T::min))
        .sum::<T>()
        / T::lit(n as f64);
    let mut s = Array2::<T>::zeros((n, k));
    for (i, row) in d2.axis_iter(Axis(0)).enumerate() {
        let dmin = row.iter().copied().fold(T::infinity(), T::min);
        if sigma2 > T::zero() {
            for c in 0..k {
                s[[i, c]] = (-(row[c] - dmin) / sigma2).exp();
            }
        } else {
            let c = row.iter().position(|&d| d == dmin).unwrap_or(0);
            s[[i, c]] = T::one();
        }
        let total = s.row(i).sum();
        s.row_mut(i).mapv_inplace(|v| v / total);
    }
    Ok(SoftKmeans {
        memberships: MembershipMatrix::new(s)?,
        centers,
        iterations,
    })
}

#[derive(Debug, Clone)]
pub struct BilinearFit<T> {
    /// `K × K` weights of `Â_ij = s_iᵀ W s_j`.
    pub w: Array2<T>,
    /// Off-diagonal mean absolute error of the fit.
    pub mae: T,
    pub a_hat: Array2<T>,
}

/// Least-squares `W` minimizing `Σ_{i≠j} (A_ij − s_iᵀ W s_j)²`, solved through
/// the `K² × K²` normal equations and a pseudoinverse.
pub fn bilinear_decoder_fit<T: Real>(s: &MembershipMatrix<T>, proxy: &ProxyMatrix<T>) -> Result<BilinearFit<T>> {
    let n = s.n_items();
    let k = s.n_components();
    ensure(proxy.n_items() == n, || "proxy and memberships differ in N".into())?;
    let a = proxy.matrix();
    let kk = k * k;
    let mut gram = Array2::<T>::zeros((kk, kk));
    let mut rhs = Array1::<T>::zeros(kk);
    let mut phi = Array1::<T>::zeros(kk);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            for p in 0..k {
                for q in 0..k {
                    phi[p * k + q] = s.matrix()[[i, p]] * s.matrix()[[j, q]];
                }
            }
            for r in 0..kk {
                rhs[r] = rhs[r] + phi[r] * a[[i, j]];
                for c in 0..kk {
                    gram[[r, c]] = gram[[r, c]] + phi[r] * phi[c];
                }
            }
        }
    }
    let w_flat = pseudo_inverse(&gram)?.dot(&rhs);
    let w = w_flat.into_shape_with_order((k, k)).expect("K*K weights");
    let mut a_hat = s.matrix().dot(&w).dot(&s.matrix().t());
    a_hat.diag_mut().fill(T::zero());
    let mae = proxy_mae(a, &a_hat, None)?;
    Ok(BilinearFit { w, mae, a_hat })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::gaussian_weights;
    use ndarray::{array, concatenate};

    fn two_clouds() -> Block<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let jitter: Array2<f64> = gaussian_weights(10, 2, &mut rng) * 0.05;
        let mut x = concatenate![Axis(0), Array2::from_elem((5, 2), 0.0), Array2::from_elem((5, 2), 10.0)];
        x += &jitter;
        Block::unlabeled(x).unwrap()
    }

    #[test]
    fn separated_clouds_get_confident_memberships() {
        let block = two_clouds();
        let fit = soft_kmeans_baseline(&block, 2, 1).unwrap();
        let s = fit.memberships.matrix();
        let own0 = if s[[0, 0]] > 0.5 { 0 } else { 1 };
        for i in 0..10 {
            let own = if i < 5 { own0 } else { 1 - own0 };
            assert!(s[[i, own]] >= 0.99, "row {i}: {:?}", s.row(i));
        }
    }

    #[test]
    fn k_equals_n_is_one_hot() {
        let block = Block::unlabeled(array![[0.0, 0.0], [1.0, 0.0], [0.0, 5.0]]).unwrap();
        let fit = soft_kmeans_baseline(&block, 3, 0).unwrap();
        for row in fit.memberships.matrix().axis_iter(Axis(0)) {
            assert!(row.iter().any(|&v| v > 1.0 - 1e-12));
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..10 {
            let block = Block::unlabeled(gaussian_weights::<f64, _>(15, 4, &mut rng)).unwrap();
            let fit = soft_kmeans_baseline(&block, 3, seed).unwrap();
            for row in fit.memberships.matrix().axis_iter(Axis(0)) {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicate_points_still_seed() {
        let block = Block::unlabeled(array![[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]).unwrap();
        let fit = soft_kmeans_baseline(&block, 2, 0).unwrap();
        assert_eq!(fit.memberships.n_components(), 2);
    }

    fn random_s(seed: u64, n: usize, k: usize) -> MembershipMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores = Array2::from_shape_simple_fn((n, k), || rng.random::<f64>() + 0.05);
        MembershipMatrix::from_positive_scores(&scores).unwrap()
    }

    #[test]
    fn realizable_target_is_recovered() {
        let s = random_s(1, 9, 2);
        let w0 = array![[0.7, 0.1], [0.1, 0.2]];
        let a = s.matrix().dot(&w0).dot(&s.matrix().t());
        let proxy = ProxyMatrix::clipped(&a, "bilinear").unwrap();
        let fit = bilinear_decoder_fit(&s, &proxy).unwrap();
        assert!(fit.mae < 1e-8, "{}", fit.mae);
    }

    #[test]
    fn matches_gradient_descent() {
        let s = random_s(2, 10, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = Array2::from_shape_simple_fn((10, 10), || rng.random::<f64>());
        let proxy = ProxyMatrix::clipped(&raw, "noise").unwrap();
        let fit = bilinear_decoder_fit(&s, &proxy).unwrap();
        let sm = s.matrix();
        let a = proxy.matrix();
        let mut w = Array2::<f64>::zeros((2, 2));
        for _ in 0..200_000 {
            let mut grad = Array2::<f64>::zeros((2, 2));
            for i in 0..10 {
                for j in 0..10 {
                    if i == j {
                        continue;
                    }
                    let e = sm.row(i).dot(&w.dot(&sm.row(j))) - a[[i, j]];
                    for p in 0..2 {
                        for q in 0..2 {
                            grad[[p, q]] += 2.0 * e * sm[[i, p]] * sm[[j, q]];
                        }
                    }
                }
            }
            w.scaled_add(-0.02, &grad);
        }
        for (x, y) in w.iter().zip(fit.w.iter()) {
            assert!((x - y).abs() < 1e-6, "{w:?} vs {:?}", fit.w);
        }
    }
}
