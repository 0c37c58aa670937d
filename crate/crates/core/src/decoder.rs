//! Relation decoder: predicts the weak affinity proxy from membership rows
//! alone, through a scaled-dot head and a Poincaré-ball head mixed by a
//! learned symmetric gate.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::block::{gaussian_weights, MembershipMatrix};
use crate::error::{ensure, Result, RsdError};
use crate::scalar::{sigmoid, Real};

/// Tolerance used when validating symmetry of an externally supplied proxy.
const PROXY_SYMMETRY_TOL: f64 = 1e-9;

/// Declared weak pairwise affinity `A`: bounded in `[0, 1]`, symmetric,
/// zero diagonal, tagged with the name of its source.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyMatrix<T> {
    a: Array2<T>,
    source: String,
}

impl<T: Real> ProxyMatrix<T> {
    /// Validates a proxy supplied from outside (e.g. a CSV file). Tiny
    /// asymmetries are averaged away; anything else is rejected.
    pub fn new(a: Array2<T>, source: impl Into<String>) -> Result<Self> {
        let n = a.nrows();
        ensure(n >= 2 && a.ncols() == n, || {
            format!("proxy must be square with N >= 2, got {:?}", a.dim())
        })?;
        let tol = T::lit(PROXY_SYMMETRY_TOL);
        for ((i, j), &v) in a.indexed_iter() {
            ensure(v.is_finite() && v >= T::zero() && v <= T::one(), || {
                format!("proxy entry ({i},{j}) = {v} outside [0,1]")
            })?;
            if i == j {
                ensure(v == T::zero(), || format!("proxy diagonal ({i},{i}) = {v} is not zero"))?;
            } else {
                ensure((v - a[[j, i]]).abs() <= tol, || {
                    format!("proxy is not symmetric at ({i},{j})")
                })?;
            }
        }
        let half = T::lit(0.5);
        let sym = Array2::from_shape_fn((n, n), |(i, j)| (a[[i, j]] + a[[j, i]]) * half);
        Ok(Self {
            a: sym,
            source: source.into(),
        })
    }

    /// Forces an arbitrary square matrix into a valid proxy: symmetrize,
    /// clip to `[0, 1]`, zero the diagonal. Used by generators.
    pub fn clipped(raw: &Array2<T>, source: impl Into<String>) -> Result<Self> {
        let n = raw.nrows();
        ensure(n >= 2 && raw.ncols() == n, || "proxy must be square with N >= 2".into())?;
        let half = T::lit(0.5);
        let a = Array2::from_shape_fn((n, n), |(i, j)| {
            if i == j {
                T::zero()
            } else {
                ((raw[[i, j]] + raw[[j, i]]) * half).max(T::zero()).min(T::one())
            }
        });
        ensure(a.iter().all(|v| v.is_finite()), || "non-finite proxy entry".into())?;
        Ok(Self {
            a,
            source: source.into(),
        })
    }

    pub fn matrix(&self) -> &Array2<T> {
        &self.a
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn n_items(&self) -> usize {
        self.a.nrows()
    }

    pub fn frobenius_norm(&self) -> T {
        crate::block::frobenius(&self.a)
    }
}

/// Dot-head matrix `V`, Poincaré-head matrix `U` and their fixed constants.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationHeads<T> {
    pub v: Array2<T>,
    pub u: Array2<T>,
    pub temperature: T,
    pub ball_margin: T,
}

impl<T: Real> RelationHeads<T> {
    pub fn new(v: Array2<T>, u: Array2<T>, temperature: T, ball_margin: T) -> Result<Self> {
        ensure(v.dim() == u.dim(), || "V and U must share a shape".into())?;
        ensure(v.ncols() >= 1, || "head dimension m must be >= 1".into())?;
        ensure(temperature > T::zero(), || "temperature must be positive".into())?;
        ensure(ball_margin > T::zero() && ball_margin < T::one(), || {
            "ball margin must lie in (0,1)".into()
        })?;
        Ok(Self {
            v,
            u,
            temperature,
            ball_margin,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        k: usize,
        m: usize,
        temperature: T,
        ball_margin: T,
        rng: &mut R,
    ) -> Result<Self> {
        let v = gaussian_weights(k, m, rng);
        let u = gaussian_weights(k, m, rng);
        Self::new(v, u, temperature, ball_margin)
    }

    pub fn head_dim(&self) -> usize {
        self.v.ncols()
    }

    pub fn n_components(&self) -> usize {
        self.v.nrows()
    }

    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        Self {
            v: self.v.select(Axis(0), perm),
            u: self.u.select(Axis(0), perm),
            ..self.clone()
        }
    }
}

/// Router `h_ω`: `affine(3K→H_r) → tanh → affine(H_r→2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams<T> {
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

impl<T: Real> RouterParams<T> {
    pub fn init<R: Rng + ?Sized>(k: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w1: gaussian_weights(3 * k, hidden, rng),
            b1: Array1::zeros(hidden),
            w2: gaussian_weights(hidden, 2, rng),
            b2: Array1::zeros(2),
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

    /// Component-relabelled router: the input blocks of `w1` follow `perm`.
    pub fn permute_components(&self, perm: &[usize]) -> Self {
        let k = perm.len();
        let rows: Vec<usize> = (0..3)
            .flat_map(|block| perm.iter().map(move |&p| block * k + p))
            .collect();
        Self {
            w1: self.w1.select(Axis(0), &rows),
            ..self.clone()
        }
    }

    /// Returns `(hidden activations, logits)` for one feature vector.
    pub fn forward(&self, phi: ArrayView1<'_, T>) -> (Array1<T>, [T; 2]) {
        let mut hidden = phi.dot(&self.w1) + &self.b1;
        hidden.mapv_inplace(|v| v.tanh());
        let out = hidden.dot(&self.w2) + &self.b2;
        (hidden, [out[0], out[1]])
    }
}

/// Which heads feed the final prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderMode {
    /// Gated mixture of both heads.
    #[default]
    Dual,
    /// Gate pinned to 1.
    DotOnly,
    /// Gate pinned to 0.
    PoincareOnly,
}

impl DecoderMode {
    pub const ALL: [DecoderMode; 3] = [DecoderMode::Dual, DecoderMode::DotOnly, DecoderMode::PoincareOnly];

    pub fn label(self) -> &'static str {
        match self {
            DecoderMode::Dual => "attentive dual-head",
            DecoderMode::DotOnly => "scaled-dot head only",
            DecoderMode::PoincareOnly => "Poincare head only",
        }
    }
}

impl fmt::Display for DecoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderMode::Dual => "dual",
            DecoderMode::DotOnly => "dot",
            DecoderMode::PoincareOnly => "poincare",
        })
    }
}

impl FromStr for DecoderMode {
    type Err = RsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dual" => Ok(DecoderMode::Dual),
            "dot" | "dot-only" => Ok(DecoderMode::DotOnly),
            "poincare" | "poincare-only" | "hyp" => Ok(DecoderMode::PoincareOnly),
            other => Err(RsdError::Config(format!("unknown decoder {other:?}"))),
        }
    }
}

fn check_heads<T: Real>(s: &MembershipMatrix<T>, heads: &RelationHeads<T>) -> Result<()> {
    ensure(s.n_components() == heads.n_components(), || {
        format!(
            "S has {} components, heads expect {}",
            s.n_components(),
            heads.n_components()
        )
    })
}

/// `σ(q_iᵀq_j / (√m·τ))` with `q = S·V`; zero diagonal.
pub fn dot_head<T: Real>(s: &MembershipMatrix<T>, heads: &RelationHeads<T>) -> Result<Array2<T>> {
    check_heads(s, heads)?;
    let q = s.matrix().dot(&heads.v);
    let scale = T::one() / (T::lit(heads.head_dim() as f64).sqrt() * heads.temperature);
    let gram = q.dot(&q.t());
    let n = s.n_items();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            T::zero()
        } else {
            sigmoid(gram[[i, j]] * scale)
        }
    }))
}

/// `arcosh(1 + u)` evaluated as `ln(1 + u + sqrt(u(u+2)))`, with `u`
/// clamped at zero so rounding at coincident points cannot produce NaN.
pub(crate) fn arcosh1p<T: Real>(u: T) -> T {
    let u = u.max(T::zero());
    (u + (u * (u + T::lit(2.0))).sqrt()).ln_1p()
}

/// Argument offset `u` with `d = arcosh(1 + u)` for two in-ball points.
pub(crate) fn poincare_offset<T: Real>(sq_dist: T, alpha_i: T, alpha_j: T) -> T {
    T::lit(2.0) * sq_dist / (alpha_i * alpha_j)
}

/// Unit Poincaré-ball distance.
pub fn poincare_distance<T: Real>(y_i: ArrayView1<'_, T>, y_j: ArrayView1<'_, T>) -> Result<T> {
    ensure(y_i.len() == y_j.len(), || "points must share a dimension".into())?;
    let ni = y_i.dot(&y_i);
    let nj = y_j.dot(&y_j);
    if ni >= T::one() || nj >= T::one() {
        return Err(RsdError::Contract(
            "Poincare distance needs points strictly inside the unit ball".into(),
        ));
    }
    let diff = &y_i - &y_j;
    let u = poincare_offset(diff.dot(&diff), T::one() - ni, T::one() - nj);
    Ok(arcosh1p(u))
}

/// Ball-projection scale: `(1−ε_p)·tanh(‖z‖)/max(‖z‖, ε)`.
pub(crate) fn ball_scale<T: Real>(norm: T, ball_margin: T, epsilon: T) -> T {
    (T::one() - ball_margin) * norm.tanh() / norm.max(epsilon)
}

/// Projects rows of `z` into the Poincaré ball.
pub fn project_to_ball<T: Real>(z: &Array2<T>, ball_margin: T, epsilon: T) -> Array2<T> {
    let mut y = z.clone();
    for mut row in y.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        let f = ball_scale(norm, ball_margin, epsilon);
        row.mapv_inplace(|v| v * f);
    }
    y
}

/// Ball positions `y = project(S·U)` used by the Poincaré head.
pub fn ball_points<T: Real>(s: &MembershipMatrix<T>, heads: &RelationHeads<T>, epsilon: T) -> Result<Array2<T>> {
    check_heads(s, heads)?;
    Ok(project_to_ball(&s.matrix().dot(&heads.u), heads.ball_margin, epsilon))
}

/// `exp(−d(y_i, y_j)²/τ)` on ball-projected `S·U`; zero diagonal.
pub fn poincare_head<T: Real>(
    s: &MembershipMatrix<T>,
    heads: &RelationHeads<T>,
    epsilon: T,
) -> Result<Array2<T>> {
    let y = ball_points(s, heads, epsilon)?;
    let n = s.n_items();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = poincare_distance(y.row(i), y.row(j))?;
            let v = (-(d * d) / heads.temperature).exp();
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
    }
    Ok(out)
}

/// Pair features `(s_i + s_j, |s_i − s_j|, s_i ⊙ s_j)`.
pub fn pair_features<T: Real>(s_i: ArrayView1<'_, T>, s_j: ArrayView1<'_, T>) -> Array1<T> {
    let k = s_i.len();
    let mut phi = Array1::zeros(3 * k);
    for c in 0..k {
        phi[c] = s_i[c] + s_j[c];
        phi[k + c] = (s_i[c] - s_j[c]).abs();
        phi[2 * k + c] = s_i[c] * s_j[c];
    }
    phi
}

/// How `router_gate` makes the gate symmetric; echoed into audit reports.
pub const GATE_SYMMETRIZATION: &str = "mean of the (i,j) and (j,i) router gates";

/// Gate `softmax(h_ω(φ_ij))₀`, symmetrized by averaging, zero diagonal.
pub fn router_gate<T: Real>(s: &MembershipMatrix<T>, router: &RouterParams<T>) -> Result<Array2<T>> {
    ensure(router.w1.nrows() == 3 * s.n_components(), || {
        format!(
            "router expects {} features, S gives {}",
            router.w1.nrows(),
            3 * s.n_components()
        )
    })?;
    let n = s.n_items();
    let raw = Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            return T::zero();
        }
        let phi = pair_features(s.row(i), s.row(j));
        let (_, [o0, o1]) = router.forward(phi.view());
        // softmax over two logits, first coordinate
        sigmoid(o0 - o1)
    });
    let half = T::lit(0.5);
    Ok(Array2::from_shape_fn((n, n), |(i, j)| (raw[[i, j]] + raw[[j, i]]) * half))
}

/// Everything the decoder computes, kept for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedProxy<T> {
    pub a_hat: Array2<T>,
    pub dot: Array2<T>,
    pub hyp: Array2<T>,
    pub gate: Array2<T>,
}

/// Full decoder pass under `mode`; `a_hat = g·dot + (1−g)·hyp`.
pub fn decode_parts<T: Real>(
    s: &MembershipMatrix<T>,
    heads: &RelationHeads<T>,
    router: &RouterParams<T>,
    mode: DecoderMode,
    epsilon: T,
) -> Result<DecodedProxy<T>> {
    let dot = dot_head(s, heads)?;
    let hyp = poincare_head(s, heads, epsilon)?;
    let n = s.n_items();
    let off_diag = |v: T| Array2::from_shape_fn((n, n), |(i, j)| if i == j { T::zero() } else { v });
    let gate = match mode {
        DecoderMode::Dual => router_gate(s, router)?,
        DecoderMode::DotOnly => off_diag(T::one()),
        DecoderMode::PoincareOnly => off_diag(T::zero()),
    };
    let a_hat = Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            T::zero()
        } else {
            let g = gate[[i, j]];
            g * dot[[i, j]] + (T::one() - g) * hyp[[i, j]]
        }
    });
    Ok(DecodedProxy { a_hat, dot, hyp, gate })
}

/// Predicted proxy `Â` for the dual-head decoder.
pub fn decode_proxy<T: Real>(
    s: &MembershipMatrix<T>,
    heads: &RelationHeads<T>,
    router: &RouterParams<T>,
    epsilon: T,
) -> Result<Array2<T>> {
    Ok(decode_parts(s, heads, router, DecoderMode::Dual, epsilon)?.a_hat)
}

/// Mean of the off-diagonal gate entries.
pub fn relation_mix_weight<T: Real>(gate: &Array2<T>) -> Result<T> {
    let n = gate.nrows();
    ensure(n >= 2 && gate.ncols() == n, || "gate must be square with N >= 2".into())?;
    let total: T = gate
        .indexed_iter()
        .filter(|((i, j), _)| i != j)
        .map(|(_, &v)| v)
        .sum();
    Ok(total / T::lit((n * (n - 1)) as f64))
}
