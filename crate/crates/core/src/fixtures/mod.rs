//! Seeded synthetic blocks, held-out masks and coordinate-only baselines.

mod baseline;
mod controls;

pub use baseline::{bilinear_decoder_fit, soft_kmeans_baseline, BilinearFit};
pub use controls::{
    heldout_bench, run_control_suite, BenchCell, BenchConfig, BenchSummary, ControlConfig, ControlRow,
    ControlSummary, GeneratorSummary,
};

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::block::{frobenius, Block, MembershipMatrix, PoleMatrix};
use crate::decoder::{dot_head, poincare_head, ProxyMatrix, RelationHeads};
use crate::error::{ensure, Result, RsdError};
use crate::pullback::{pullback_poles, project};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    SameGeometry,
    Misaligned,
    ResidualInjection,
    Hyperbolic,
    Mixed,
    ScaledDot,
}

impl GeneratorKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::SameGeometry => "same-geometry",
            Self::Misaligned => "misaligned",
            Self::ResidualInjection => "residual-injection",
            Self::Hyperbolic => "hyperbolic",
            Self::Mixed => "mixed",
            Self::ScaledDot => "scaled-dot",
        }
    }
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for GeneratorKind {
    type Err = RsdError;

    fn from_str(s: &str) -> Result<Self> {
        [
            Self::SameGeometry,
            Self::Misaligned,
            Self::ResidualInjection,
            Self::Hyperbolic,
            Self::Mixed,
            Self::ScaledDot,
        ]
        .into_iter()
        .find(|g| g.label() == s)
        .ok_or_else(|| RsdError::Config(format!("unknown generator {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub dirichlet_alpha: Vec<f64>,
    pub coord_noise_std: f64,
    pub kind: GeneratorKind,
    /// Injection amplitude, used by [`GeneratorKind::ResidualInjection`].
    pub gamma: f64,
    pub seed: u64,
    /// Width of the planted relation heads.
    pub head_dim: usize,
    pub temperature: f64,
    pub ball_margin: f64,
    /// Standard deviation of planted `V*` entries.
    pub dot_scale: f64,
    /// Standard deviation of planted `U*` entries.
    pub ball_scale: f64,
}

/// Planted `(V*, U*)` entry standard deviations of [`SyntheticSpec::standard`].
pub const STANDARD_SCALES: (f64, f64) = (1.0, 0.5);

/// Scale applied to the centered proxy-side heads of the misaligned kind.
pub const MISALIGNED_CONTRAST: f64 = 2.0;

impl SyntheticSpec {
    /// `N = 18, K = 2, D = 16`, Dirichlet `(0.55, 0.55)`, noise `0.01`.
    pub fn standard(kind: GeneratorKind, seed: u64) -> Self {
        Self {
            n: 18,
            k: 2,
            d: 16,
            dirichlet_alpha: vec![0.55, 0.55],
            coord_noise_std: 0.01,
            kind,
            gamma: 0.0,
            seed,
            head_dim: 8,
            temperature: 1.0,
            ball_margin: 1e-3,
            dot_scale: STANDARD_SCALES.0,
            ball_scale: STANDARD_SCALES.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.n >= 2 && self.k >= 1 && self.d >= 1 && self.head_dim >= 1, || {
            "synthetic spec needs N >= 2 and positive K, D, head width".into()
        })?;
        ensure(self.dirichlet_alpha.len() == self.k, || {
            format!("{} Dirichlet entries for K = {}", self.dirichlet_alpha.len(), self.k)
        })?;
        ensure(self.dirichlet_alpha.iter().all(|&a| a > 0.0 && a.is_finite()), || {
            "Dirichlet entries must be positive".into()
        })?;
        ensure(self.coord_noise_std >= 0.0 && self.gamma >= 0.0, || {
            "noise and gamma must be nonnegative".into()
        })?;
        ensure(self.temperature > 0.0 && self.dot_scale >= 0.0 && self.ball_scale >= 0.0, || {
            "temperature must be positive and head scales nonnegative".into()
        })
    }
}

/// Generated block, proxy and the parameters that produced them.
#[derive(Debug, Clone)]
pub struct SyntheticFixture<T> {
    pub spec: SyntheticSpec,
    pub block: Block<T>,
    pub proxy: ProxyMatrix<T>,
    pub s_star: MembershipMatrix<T>,
    pub c_star: PoleMatrix<T>,
    /// Planted relation heads applied to the proxy-side memberships.
    pub heads: RelationHeads<T>,
    /// Memberships the proxy was built from (`S*` except when misaligned).
    pub s_proxy: MembershipMatrix<T>,
}

/// Rows drawn from `Dirichlet(alpha)` by normalizing independent Gamma draws.
pub fn dirichlet_rows<R: Rng + ?Sized>(n: usize, alpha: &[f64], rng: &mut R) -> Result<Array2<f64>> {
    let gammas = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).map_err(|e| RsdError::Contract(format!("Dirichlet parameter {a}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Array2::zeros((n, alpha.len()));
    for mut row in out.axis_iter_mut(Axis(0)) {
        loop {
            for (v, g) in row.iter_mut().zip(&gammas) {
                *v = g.sample(rng);
            }
            let total: f64 = row.sum();
            if total > 0.0 && total.is_finite() {
                row.mapv_inplace(|v| v / total);
                break;
            }
        }
    }
    Ok(out)
}

fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    if std == 0.0 {
        return Array2::zeros((rows, cols));
    }
    let dist = Normal::new(0.0, std).expect("finite positive std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

fn cast<T: Real>(m: &Array2<f64>) -> Array2<T> {
    m.mapv(T::lit)
}

fn memberships<T: Real>(m: &Array2<f64>) -> Result<MembershipMatrix<T>> {
    MembershipMatrix::new(cast(m))
}

fn planted_heads<T: Real, R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<RelationHeads<T>> {
    let v = normal_matrix(spec.k, spec.head_dim, spec.dot_scale, rng);
    let u = normal_matrix(spec.k, spec.head_dim, spec.ball_scale, rng);
    RelationHeads::new(cast(&v), cast(&u), T::lit(spec.temperature), T::lit(spec.ball_margin))
}

/// Deterministic synthetic block and proxy for `spec`.
///
/// Every kind draws `S*`, `C*`, noise and planted heads from one ChaCha8
/// stream seeded with `spec.seed`. The misaligned kind then draws a second
/// membership matrix `S_A` and fresh heads for the proxy side from a separate
/// stream; its `V_A` rows are centered across components and scaled by
/// [`MISALIGNED_CONTRAST`], so affinity tracks co-membership under `S_A`.
pub fn generate_synthetic<T: Real>(spec: &SyntheticSpec) -> Result<SyntheticFixture<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s_raw = dirichlet_rows(spec.n, &spec.dirichlet_alpha, &mut rng)?;
    let c_raw = normal_matrix(spec.k, spec.d, 1.0, &mut rng);
    let noise = normal_matrix(spec.n, spec.d, spec.coord_noise_std, &mut rng);
    let x = s_raw.dot(&c_raw) + noise;
    let s_star: MembershipMatrix<T> = memberships(&s_raw)?;
    let c_star = PoleMatrix::new(cast(&c_raw))?;
    let mut heads = planted_heads::<T, _>(spec, &mut rng)?;
    let mut s_proxy = s_star.clone();
    let eps = T::lit(1e-8);
    let raw = match spec.kind {
        GeneratorKind::SameGeometry | GeneratorKind::ScaledDot | GeneratorKind::ResidualInjection => {
            dot_head(&s_proxy, &heads)?
        }
        GeneratorKind::Hyperbolic => poincare_head(&s_proxy, &heads, eps)?,
        GeneratorKind::Mixed => {
            let half = T::lit(0.5);
            dot_head(&s_proxy, &heads)? * half + poincare_head(&s_proxy, &heads, eps)? * half
        }
        GeneratorKind::Misaligned => {
            let mut side = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
            s_proxy = memberships(&dirichlet_rows(spec.n, &spec.dirichlet_alpha, &mut side)?)?;
            heads = planted_heads::<T, _>(spec, &mut side)?;
            let mean = heads.v.mean_axis(Axis(0)).expect("K >= 1");
            heads.v = (&heads.v - &mean.insert_axis(Axis(0))) * T::lit(MISALIGNED_CONTRAST);
            dot_head(&s_proxy, &heads)?
        }
    };
    let proxy = ProxyMatrix::clipped(&raw, format!("synthetic {}", spec.kind))?;
    let mut block = Block::unlabeled(cast(&x))?;
    if spec.kind == GeneratorKind::ResidualInjection && spec.gamma > 0.0 {
        block = inject_orthogonal_residual(&block, &s_star, T::lit(spec.gamma), spec.seed)?;
    }
    Ok(SyntheticFixture {
        spec: spec.clone(),
        block,
        proxy,
        s_star,
        c_star,
        heads,
        s_proxy,
    })
}

/// Unit-norm direction orthogonal to both `col(S*)` and the current
/// pullback residual of `block`, built from a seeded Gaussian draw.
pub fn orthogonal_direction<T: Real>(block: &Block<T>, s_star: &MembershipMatrix<T>, seed: u64) -> Result<Array2<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x51ed_270b));
    let g: Array2<T> = cast(&normal_matrix(block.n_items(), block.dim(), 1.0, &mut rng));
    let g_scale = frobenius(&g);
    let mut g_perp = &g - &project(s_star, &g)?;
    let r = pullback_poles(block, s_star)?.r_star;
    let r_sq: T = r.iter().map(|&v| v * v).sum();
    if r_sq > T::zero() {
        let coef: T = g_perp.iter().zip(r.iter()).map(|(&a, &b)| a * b).sum::<T>() / r_sq;
        g_perp = &g_perp - &(&r * coef);
        // second pass against rounding drift back into col(S*)
        g_perp = &g_perp - &project(s_star, &g_perp)?;
    }
    let norm = frobenius(&g_perp);
    if norm <= T::lit(1e3) * T::epsilon() * g_scale {
        return Err(RsdError::DegenerateFixture(
            "membership span leaves no orthogonal direction".into(),
        ));
    }
    Ok(g_perp / norm)
}

/// `X′ = X + γ·G⊥` with `‖G⊥‖_F = 1` and `G⊥` orthogonal to `col(S*)` and to
/// the pullback residual of `X`, so the pullback residual energy at `S*`
/// grows by exactly `γ²`.
pub fn inject_orthogonal_residual<T: Real>(
    block: &Block<T>,
    s_star: &MembershipMatrix<T>,
    gamma: T,
    seed: u64,
) -> Result<Block<T>> {
    ensure(gamma >= T::zero(), || "gamma must be nonnegative".into())?;
    if gamma == T::zero() {
        return Ok(block.clone());
    }
    let dir = orthogonal_direction(block, s_star, seed)?;
    Block::new(block.items().to_vec(), block.coords() + &(dir * gamma))
}

/// Hidden unordered pairs `(i, j)` with `i < j`, sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutMask {
    pub pairs: Vec<(usize, usize)>,
    pub fraction: f64,
    pub seed: u64,
}

/// Hides `floor(fraction · N(N−1)/2)` unordered pairs, sampled without
/// replacement.
pub fn make_holdout_mask(n: usize, fraction: f64, seed: u64) -> Result<HoldoutMask> {
    ensure(fraction > 0.0 && fraction < 1.0, || format!("holdout fraction {fraction} not in (0,1)"))?;
    let all: Vec<(usize, usize)> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
    let hidden = (fraction * all.len() as f64).floor() as usize;
    ensure(hidden > 0 && hidden < all.len(), || {
        format!("holdout of {fraction} over {} pairs hides {hidden}", all.len())
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, all.len(), hidden).into_vec();
    idx.sort_unstable();
    Ok(HoldoutMask {
        pairs: idx.into_iter().map(|i| all[i]).collect(),
        fraction,
        seed,
    })
}

/// Least-squares slope through `(x, y)` points.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}
