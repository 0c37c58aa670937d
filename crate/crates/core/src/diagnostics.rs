//! Audit readouts: reconstruction error, component mass, entropy,
//! mass-canonical relabelling, witness records, residual ranking and
//! nearest-vocabulary readouts.

use std::cmp::Ordering;
use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::block::{Block, MembershipMatrix, PoleMatrix, ResidualMatrix};
use crate::decoder::{RelationHeads, RouterParams};
use crate::error::{ensure, Result};
use crate::ingestion::EmbeddingTable;
use crate::scalar::Real;

/// Components with mass below this are flagged in reports.
pub const SMALL_MASS: f64 = 0.02;

/// Default coordinate and proxy budgets in objective scale.
pub const DEFAULT_BUDGET: f64 = 0.05;

/// `ρ_X = ‖X − S·C‖_F / max(‖X‖_F, ε)`.
pub fn relative_reconstruction_error<T: Real>(
    block: &Block<T>,
    s: &MembershipMatrix<T>,
    c: &PoleMatrix<T>,
    epsilon: T,
) -> Result<T> {
    crate::pullback::relative_error(block, s, c, epsilon)
}

/// `π_k = mean_i s_ik`.
pub fn component_mass<T: Real>(s: &MembershipMatrix<T>) -> Array1<T> {
    s.matrix()
        .mean_axis(Axis(0))
        .expect("membership matrix has at least one row")
}

/// `H_i = −Σ_k s_ik ln s_ik` with `0·ln 0 = 0`.
pub fn assignment_entropy<T: Real>(s: &MembershipMatrix<T>) -> Array1<T> {
    s.matrix()
        .axis_iter(Axis(0))
        .map(|row| {
            -row.iter()
                .filter(|&&p| p > T::zero())
                .map(|&p| p * p.ln())
                .sum::<T>()
        })
        .collect()
}

/// Component order by descending mass, ties kept in index order.
pub fn mass_order<T: Real>(mass: ArrayView1<'_, T>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..mass.len()).collect();
    order.sort_by(|&a, &b| mass[b].partial_cmp(&mass[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct Canonical<T> {
    pub s: MembershipMatrix<T>,
    pub c: PoleMatrix<T>,
    pub heads: RelationHeads<T>,
    pub router: RouterParams<T>,
    /// New component `j` is old component `permutation[j]`.
    pub permutation: Vec<usize>,
}

/// Relabels components so that `c_0` carries the largest mass. `S` columns,
/// pole rows, head rows and router inputs move together, so `S·C` and the
/// decoded proxy are unchanged.
pub fn mass_canonicalize<T: Real>(
    s: &MembershipMatrix<T>,
    c: &PoleMatrix<T>,
    heads: &RelationHeads<T>,
    router: &RouterParams<T>,
) -> Canonical<T> {
    let perm = mass_order(component_mass(s).view());
    Canonical {
        s: s.permute_columns(&perm),
        c: c.permute_rows(&perm),
        heads: heads.permute_rows(&perm),
        router: router.permute_components(&perm),
        permutation: perm,
    }
}

/// Mean absolute error over the held-out unordered pairs when a mask is
/// given, else over every off-diagonal entry.
pub fn proxy_mae<T: Real>(a: &Array2<T>, a_hat: &Array2<T>, masked_pairs: Option<&[(usize, usize)]>) -> Result<T> {
    ensure(a.dim() == a_hat.dim() && a.is_square(), || "proxy shapes differ".into())?;
    let n = a.nrows();
    let (sum, count) = match masked_pairs {
        Some(pairs) => {
            ensure(!pairs.is_empty(), || "empty held-out selection".into())?;
            let mut sum = T::zero();
            for &(i, j) in pairs {
                ensure(i < n && j < n && i != j, || format!("bad held-out pair ({i},{j})"))?;
                sum = sum + (a[[i, j]] - a_hat[[i, j]]).abs();
            }
            (sum, pairs.len())
        }
        None => {
            ensure(n >= 2, || "need N >= 2 for off-diagonal MAE".into())?;
            let sum = a
                .indexed_iter()
                .filter(|((i, j), _)| i != j)
                .map(|(idx, &v)| (v - a_hat[idx]).abs())
                .sum();
            (sum, n * (n - 1))
        }
    };
    Ok(sum / T::lit(count as f64))
}

/// Budgeted cross-view witness check. A failed check is not a proof that no
/// witness exists; it only records that this fit missed a budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WitnessRecord {
    pub budget_x: f64,
    pub budget_a: f64,
    pub loss_x: f64,
    pub loss_a: f64,
    /// `budget_x − loss_x`; negative when the coordinate budget is missed.
    pub coordinate_margin: f64,
    pub proxy_margin: f64,
    pub coordinate_ok: bool,
    pub proxy_ok: bool,
    pub witness: bool,
}

pub fn witness_report(loss_x: f64, loss_a: f64, budget_x: f64, budget_a: f64) -> Result<WitnessRecord> {
    ensure(budget_x > 0.0 && budget_a > 0.0, || "budgets must be positive".into())?;
    let coordinate_ok = loss_x <= budget_x;
    let proxy_ok = loss_a <= budget_a;
    Ok(WitnessRecord {
        budget_x,
        budget_a,
        loss_x,
        loss_a,
        coordinate_margin: budget_x - loss_x,
        proxy_margin: budget_a - loss_a,
        coordinate_ok,
        proxy_ok,
        witness: coordinate_ok && proxy_ok,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub index: usize,
    pub label: String,
    pub residual_norm: f64,
}

/// Items by descending residual norm; ties resolve to the lower index.
pub fn residual_ranking<T: Real>(
    block: &Block<T>,
    r: &ResidualMatrix<T>,
    top_n: usize,
) -> Result<Vec<RankedItem>> {
    let n = block.n_items();
    ensure(top_n <= n, || format!("top_n = {top_n} exceeds N = {n}"))?;
    ensure(r.per_item_norm.len() == n, || "residual does not match block".into())?;
    let norms = &r.per_item_norm;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(top_n)
        .map(|i| RankedItem {
            index: i,
            label: block.items()[i].clone(),
            residual_norm: norms[i].to_f64_lossy(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub word: String,
    pub cosine: f64,
}

/// Top-`k` vocabulary words by cosine similarity to `direction`, skipping
/// anything in `exclude`.
pub fn neighbor_readout<T: Real>(
    direction: ArrayView1<'_, T>,
    vocab: &EmbeddingTable<T>,
    k: usize,
    exclude: &HashSet<String>,
) -> Result<Vec<Neighbor>> {
    ensure(!vocab.is_empty(), || "readout vocabulary is empty".into())?;
    ensure(direction.len() == vocab.dim(), || {
        format!("direction has {} dims, vocabulary {}", direction.len(), vocab.dim())
    })?;
    let dnorm = direction.dot(&direction).sqrt();
    ensure(dnorm > T::zero(), || "readout direction is zero".into())?;
    let mut scored: Vec<(usize, T)> = vocab
        .vectors()
        .axis_iter(Axis(0))
        .enumerate()
        .filter(|(i, _)| !exclude.contains(&vocab.tokens()[*i]))
        .filter_map(|(i, v)| {
            let vn = v.dot(&v).sqrt();
            (vn > T::zero()).then(|| (i, v.dot(&direction) / (vn * dnorm)))
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(i, c)| Neighbor {
            word: vocab.tokens()[i].clone(),
            cosine: c.to_f64_lossy(),
        })
        .collect())
}

/// Readout directions: every pole row `c_k`, then `R⁺` (mean learned
/// residual) and `R⁻ = −R⁺`.
pub fn readout_directions<T: Real>(c: &PoleMatrix<T>, r: &ResidualMatrix<T>) -> Vec<(String, Array1<T>)> {
    let mut out: Vec<(String, Array1<T>)> = c
        .matrix()
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(k, row)| (format!("c{k}"), row.to_owned()))
        .collect();
    if let Some(mean) = r.r.mean_axis(Axis(0)) {
        out.push(("R-".into(), mean.mapv(|v| -v)));
        out.insert(out.len() - 1, ("R+".into(), mean));
    }
    out
}

/// Components whose mass falls below [`SMALL_MASS`].
pub fn small_mass_components<T: Real>(mass: &Array1<T>) -> Vec<usize> {
    mass.iter()
        .enumerate()
        .filter(|(_, &m)| m < T::lit(SMALL_MASS))
        .map(|(k, _)| k)
        .collect()
}

/// Index of the largest membership per item (ties to the lower index).
pub fn dominant_component<T: Real>(s: &MembershipMatrix<T>) -> Vec<usize> {
    s.matrix()
        .axis_iter(Axis(0))
        .map(|row| mass_order(row)[0])
        .collect()
}
