//! The audited block, the membership encoder and the coordinate
//! reconstruction `X ≈ S·C`.

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure, Result, RsdError};
use crate::scalar::Real;

/// Row-sum tolerance for simplex rows: 1e-12 in `f64`, looser for `f32`.
pub fn simplex_tolerance<T: Real>() -> T {
    T::lit(1e-12).max(T::epsilon() * T::lit(1e3))
}

/// A finite block of `N` labelled items with coordinates `X` (`N × D`).
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    items: Vec<String>,
    x: Array2<T>,
}

impl<T: Real> Block<T> {
    pub fn new(items: Vec<String>, x: Array2<T>) -> Result<Self> {
        let (n, d) = x.dim();
        ensure(n >= 2, || format!("a block needs at least 2 items, got {n}"))?;
        ensure(d >= 1, || "a block needs at least one coordinate".into())?;
        ensure(items.len() == n, || {
            format!("{} labels for {n} coordinate rows", items.len())
        })?;
        if let Some((idx, _)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(RsdError::Contract(format!(
                "non-finite coordinate at item {} dim {}",
                idx.0, idx.1
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        for label in &items {
            ensure(seen.insert(label.as_str()), || {
                format!("duplicate item label {label:?}")
            })?;
        }
        Ok(Self { items, x })
    }

    /// Block with generated labels `item0`, `item1`, ...
    pub fn unlabeled(x: Array2<T>) -> Result<Self> {
        let items = (0..x.nrows()).map(|i| format!("item{i}")).collect();
        Self::new(items, x)
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn coords(&self) -> &Array2<T> {
        &self.x
    }

    pub fn n_items(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn frobenius_norm(&self) -> T {
        frobenius(&self.x)
    }
}

pub(crate) fn frobenius<T: Real>(m: &Array2<T>) -> T {
    m.iter().map(|&v| v * v).sum::<T>().sqrt()
}

/// Row-stochastic memberships `S` (`N × K`).
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipMatrix<T>(Array2<T>);

impl<T: Real> MembershipMatrix<T> {
    /// Validates nonnegativity and unit row sums.
    pub fn new(s: Array2<T>) -> Result<Self> {
        ensure(s.ncols() >= 2, || {
            format!("memberships need K >= 2 components, got {}", s.ncols())
        })?;
        let tol = simplex_tolerance::<T>();
        for (i, row) in s.axis_iter(Axis(0)).enumerate() {
            ensure(row.iter().all(|&v| v >= T::zero() && v.is_finite()), || {
                format!("membership row {i} has a negative or non-finite entry")
            })?;
            let sum: T = row.sum();
            ensure((sum - T::one()).abs() <= tol, || {
                format!("membership row {i} sums to {sum}")
            })?;
        }
        Ok(Self(s))
    }

    /// Normalizes strictly positive scores row-wise onto the simplex.
    pub fn from_positive_scores(scores: &Array2<T>) -> Result<Self> {
        let mut s = scores.clone();
        for (i, mut row) in s.axis_iter_mut(Axis(0)).enumerate() {
            let total: T = row.sum();
            ensure(total > T::zero() && total.is_finite(), || {
                format!("scores for row {i} do not have a positive finite sum")
            })?;
            row.mapv_inplace(|v| v / total);
        }
        Self::new(s)
    }

    pub fn matrix(&self) -> &Array2<T> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<T> {
        self.0
    }

    pub fn n_items(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, T> {
        self.0.row(i)
    }

    /// Reorders columns: column `j` of the result is column `perm[j]` of `self`.
    pub fn permute_columns(&self, perm: &[usize]) -> Self {
        Self(self.0.select(Axis(1), perm))
    }
}

/// Poles `C` (`K × D`); reconstructions are convex combinations of its rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PoleMatrix<T>(Array2<T>);

impl<T: Real> PoleMatrix<T> {
    pub fn new(c: Array2<T>) -> Result<Self> {
        ensure(c.iter().all(|v| v.is_finite()), || "non-finite pole entry".into())?;
        Ok(Self(c))
    }

    pub fn matrix(&self) -> &Array2<T> {
        &self.0
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut Array2<T> {
        &mut self.0
    }

    pub fn n_components(&self) -> usize {
        self.0.nrows()
    }

    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        Self(self.0.select(Axis(0), perm))
    }
}

/// Learned residual `R = X − S·C` with per-item Euclidean norms.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMatrix<T> {
    pub r: Array2<T>,
    pub per_item_norm: Array1<T>,
}

impl<T: Real> ResidualMatrix<T> {
    pub fn from_residual(r: Array2<T>) -> Self {
        let per_item_norm = r
            .axis_iter(Axis(0))
            .map(|row| row.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        Self { r, per_item_norm }
    }
}

/// Two-layer encoder `affine(D→H) → tanh → affine(H→K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

/// Seeded Gaussian weights with standard deviation `1/sqrt(fan_in)`.
pub(crate) fn gaussian_weights<T: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Array2<T> {
    let std = 1.0 / (rows.max(1) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = rng.sample(StandardNormal);
        T::lit(z * std)
    })
}

impl<T: Real> EncoderParams<T> {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w1: gaussian_weights(input, hidden, rng),
            b1: Array1::zeros(hidden),
            w2: gaussian_weights(hidden, output, rng),
            b2: Array1::zeros(output),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.ncols()
    }

    /// Returns `(tanh hidden activations, raw outputs ℓ)` for every row of `x`.
    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, Array2<T>) {
        let mut hidden = x.dot(&self.w1) + &self.b1;
        hidden.mapv_inplace(|v| v.tanh());
        let out = hidden.dot(&self.w2) + &self.b2;
        (hidden, out)
    }
}

/// Maps raw encoder outputs to memberships: `a = ℓ² + ε`, rows normalized.
pub fn memberships_from_logits<T: Real>(logits: &Array2<T>, epsilon: T) -> Result<MembershipMatrix<T>> {
    ensure(epsilon > T::zero(), || "epsilon must be positive".into())?;
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(RsdError::NonFiniteEncoder { item: i });
        }
    }
    let scores = logits.mapv(|l| l * l + epsilon);
    MembershipMatrix::from_positive_scores(&scores)
}

pub fn encode_memberships<T: Real>(
    params: &EncoderParams<T>,
    block: &Block<T>,
    epsilon: T,
) -> Result<MembershipMatrix<T>> {
    ensure(params.input_dim() == block.dim(), || {
        format!(
            "encoder expects {} inputs, block has {} dims",
            params.input_dim(),
            block.dim()
        )
    })?;
    let (_, logits) = params.forward(block.coords());
    memberships_from_logits(&logits, epsilon)
}

pub fn reconstruct<T: Real>(s: &MembershipMatrix<T>, c: &PoleMatrix<T>) -> Result<Array2<T>> {
    ensure(s.n_components() == c.n_components(), || {
        format!(
            "S has {} components but C has {} rows",
            s.n_components(),
            c.n_components()
        )
    })?;
    Ok(s.matrix().dot(c.matrix()))
}

pub fn residual<T: Real>(
    block: &Block<T>,
    s: &MembershipMatrix<T>,
    c: &PoleMatrix<T>,
) -> Result<ResidualMatrix<T>> {
    ensure(s.n_items() == block.n_items(), || {
        format!("S has {} rows, block has {} items", s.n_items(), block.n_items())
    })?;
    ensure(c.matrix().ncols() == block.dim(), || {
        format!("C has {} columns, block has {} dims", c.matrix().ncols(), block.dim())
    })?;
    let xhat = reconstruct(s, c)?;
    Ok(ResidualMatrix::from_residual(block.coords() - &xhat))
}
