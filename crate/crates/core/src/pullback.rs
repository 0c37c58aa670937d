//! Fixed-`S` least-squares pullback `C* = (SᵀS)⁺SᵀX` and the residual
//! energy split `‖X‖² = ‖P_S X‖² + ‖R*‖²`.
//!
//! The projector `P_S` is never formed; projections go through `S` and the
//! `K × K` pseudoinverse.

use ndarray::{Array1, Array2, Axis};

use crate::block::{frobenius, Block, MembershipMatrix, PoleMatrix};
use crate::error::{ensure, Result, RsdError};
use crate::scalar::Real;

/// Singular values below `PINV_RCOND · σ_max` are treated as zero.
pub const PINV_RCOND: f64 = 1e-12;

const MAX_SWEEPS: usize = 80;

/// Thin SVD `M = U·diag(σ)·Vᵀ` by one-sided Jacobi rotations.
#[derive(Debug, Clone)]
pub struct Svd<T> {
    pub u: Array2<T>,
    pub sigma: Array1<T>,
    pub v: Array2<T>,
}

pub fn svd<T: Real>(m: &Array2<T>) -> Result<Svd<T>> {
    ensure(m.iter().all(|v| v.is_finite()), || "SVD input is not finite".into())?;
    if m.nrows() < m.ncols() {
        let t = jacobi_svd(&m.t().to_owned())?;
        return Ok(Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        });
    }
    jacobi_svd(m)
}

// Requires rows >= cols.
fn jacobi_svd<T: Real>(m: &Array2<T>) -> Result<Svd<T>> {
    let (rows, cols) = m.dim();
    let mut w = m.to_owned();
    let mut v = Array2::<T>::eye(cols);
    let tol = T::epsilon();
    let negligible = tol * tol * m.iter().map(|&x| x * x).sum::<T>();
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (mut alpha, mut beta, mut gamma) = (T::zero(), T::zero(), T::zero());
                for i in 0..rows {
                    let (a, b) = (w[[i, p]], w[[i, q]]);
                    alpha = alpha + a * a;
                    beta = beta + b * b;
                    gamma = gamma + a * b;
                }
                if alpha <= negligible || beta <= negligible || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (a, b) = (w[[i, p]], w[[i, q]]);
                    w[[i, p]] = c * a - s * b;
                    w[[i, q]] = s * a + c * b;
                }
                for i in 0..cols {
                    let (a, b) = (v[[i, p]], v[[i, q]]);
                    v[[i, p]] = c * a - s * b;
                    v[[i, q]] = s * a + c * b;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(RsdError::Numerical(format!(
            "Jacobi SVD did not converge in {MAX_SWEEPS} sweeps"
        )));
    }
    let sigma: Array1<T> = w.axis_iter(Axis(1)).map(|c| c.dot(&c).sqrt()).collect();
    let mut u = w;
    for (mut col, &s) in u.axis_iter_mut(Axis(1)).zip(sigma.iter()) {
        if s > T::zero() {
            col.mapv_inplace(|x| x / s);
        }
    }
    Ok(Svd { u, sigma, v })
}

/// Moore–Penrose pseudoinverse with relative cutoff [`PINV_RCOND`]
/// (widened to machine precision for `f32`).
pub fn pseudo_inverse<T: Real>(m: &Array2<T>) -> Result<Array2<T>> {
    let floor = T::epsilon() * T::lit(m.nrows().max(m.ncols()) as f64);
    pseudo_inverse_with(m, T::lit(PINV_RCOND).max(floor))
}

pub fn pseudo_inverse_with<T: Real>(m: &Array2<T>, rcond: T) -> Result<Array2<T>> {
    let Svd { u, sigma, v } = svd(m)?;
    let smax = sigma.iter().copied().fold(T::zero(), T::max);
    let cutoff = rcond * smax;
    let inv: Array1<T> = sigma.mapv(|s| if s > cutoff && s > T::zero() { T::one() / s } else { T::zero() });
    // V · diag(inv) · Uᵀ
    let scaled = &v * &inv.view().insert_axis(Axis(0));
    Ok(scaled.dot(&u.t()))
}

/// Projection `P_S·M` onto the column space of `S`.
pub fn project<T: Real>(s: &MembershipMatrix<T>, m: &Array2<T>) -> Result<Array2<T>> {
    ensure(s.n_items() == m.nrows(), || "projection row count mismatch".into())?;
    let st = s.matrix().t();
    let gram_pinv = pseudo_inverse(&st.dot(s.matrix()))?;
    Ok(s.matrix().dot(&gram_pinv.dot(&st.dot(m))))
}

#[derive(Debug, Clone)]
pub struct PullbackResult<T> {
    pub c_star: PoleMatrix<T>,
    pub r_star: Array2<T>,
    /// `‖X‖_F²`
    pub energy_x: T,
    /// `‖P_S X‖_F²`
    pub energy_proj: T,
    /// `‖R*‖_F²`
    pub energy_res: T,
    /// `|⟨P_S X, R*⟩_F|`
    pub orthogonality_error: T,
    /// `|energy_x − energy_proj − energy_res|`
    pub energy_gap: T,
}

fn sq_norm<T: Real>(m: &Array2<T>) -> T {
    m.iter().map(|&v| v * v).sum()
}

pub fn pullback_poles<T: Real>(block: &Block<T>, s: &MembershipMatrix<T>) -> Result<PullbackResult<T>> {
    ensure(s.n_items() == block.n_items(), || {
        format!("S has {} rows, block has {} items", s.n_items(), block.n_items())
    })?;
    let x = block.coords();
    let st = s.matrix().t();
    let gram_pinv = pseudo_inverse(&st.dot(s.matrix()))?;
    let c_star = gram_pinv.dot(&st.dot(x));
    let proj = s.matrix().dot(&c_star);
    let r_star = x - &proj;
    let energy_x = sq_norm(x);
    let energy_proj = sq_norm(&proj);
    let energy_res = sq_norm(&r_star);
    let inner: T = proj.iter().zip(r_star.iter()).map(|(&a, &b)| a * b).sum();
    Ok(PullbackResult {
        c_star: PoleMatrix::new(c_star)?,
        r_star,
        energy_x,
        energy_proj,
        energy_res,
        orthogonality_error: inner.abs(),
        energy_gap: (energy_x - energy_proj - energy_res).abs(),
    })
}

/// `ρ_X = ‖X − S·C‖_F / max(‖X‖_F, ε)`.
pub fn relative_error<T: Real>(block: &Block<T>, s: &MembershipMatrix<T>, c: &PoleMatrix<T>, epsilon: T) -> Result<T> {
    let r = crate::block::residual(block, s, c)?;
    Ok(frobenius(&r.r) / block.frobenius_norm().max(epsilon))
}

/// `(ρ_X with the learned poles, ρ_X with the pullback poles)`.
pub fn compare_learned_vs_pullback<T: Real>(
    block: &Block<T>,
    s: &MembershipMatrix<T>,
    c_learned: &PoleMatrix<T>,
    epsilon: T,
) -> Result<(T, T)> {
    let learned = relative_error(block, s, c_learned, epsilon)?;
    let pb = pullback_poles(block, s)?;
    let pulled = relative_error(block, s, &pb.c_star, epsilon)?;
    Ok((learned, pulled))
}
