//! Forward pass with cached intermediates and the matching reverse pass
//! over the fixed RSD computation graph.

use ndarray::{Array1, Array2, Axis, Zip};

use crate::block::{memberships_from_logits, Block, MembershipMatrix};
use crate::decoder::{arcosh1p, ball_scale, poincare_offset, DecoderMode, ProxyMatrix};
use crate::error::{ensure, Result};
use crate::model::{ModelGrad, RsdModel};
use crate::scalar::{sigmoid, Real};

use super::Objective;

/// Per-fit constants of the loss: inclusion weights and normalizers.
#[derive(Debug, Clone)]
pub(crate) struct LossContext<T> {
    /// 1 for entries counted in the relation loss, 0 for held-out ones.
    pub included: Array2<T>,
    pub count: T,
    pub denom_x: T,
    pub denom_a: T,
    pub lambda: T,
}

impl<T: Real> LossContext<T> {
    pub fn new(
        block: &Block<T>,
        proxy: &ProxyMatrix<T>,
        masked_pairs: Option<&[(usize, usize)]>,
        lambda: T,
        epsilon: T,
    ) -> Result<Self> {
        let n = block.n_items();
        ensure(proxy.n_items() == n, || {
            format!("proxy has {} items, block has {n}", proxy.n_items())
        })?;
        let included = inclusion_weights(n, masked_pairs)?;
        let count: T = included.sum();
        Ok(Self {
            included,
            count,
            denom_x: block.frobenius_norm().max(epsilon),
            denom_a: proxy.frobenius_norm().max(epsilon),
            lambda,
        })
    }
}

/// Builds the 0/1 inclusion matrix for the relation loss; a masked
/// unordered pair removes both `(i,j)` and `(j,i)`.
pub(crate) fn inclusion_weights<T: Real>(n: usize, masked_pairs: Option<&[(usize, usize)]>) -> Result<Array2<T>> {
    let mut inc = Array2::from_elem((n, n), T::one());
    let Some(pairs) = masked_pairs else {
        return Ok(inc);
    };
    for &(i, j) in pairs {
        ensure(i < n && j < n && i != j, || {
            format!("masked pair ({i},{j}) is not an off-diagonal pair of an N={n} block")
        })?;
        inc[[i, j]] = T::zero();
        inc[[j, i]] = T::zero();
    }
    let off_diag_left = inc.indexed_iter().any(|((i, j), &w)| i != j && w > T::zero());
    if !off_diag_left {
        return Err(crate::error::RsdError::DegenerateObjective(
            "the mask hides every off-diagonal proxy entry".into(),
        ));
    }
    Ok(inc)
}

/// Cached values of one forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Forward<T> {
    pub enc_hidden: Array2<T>,
    pub logits: Array2<T>,
    pub score_sum: Array1<T>,
    pub s: Array2<T>,
    pub resid: Array2<T>,
    pub q: Array2<T>,
    pub z: Array2<T>,
    pub z_norm: Array1<T>,
    pub y_scale: Array1<T>,
    pub y: Array2<T>,
    pub alpha: Array1<T>,
    /// Unordered pairs `(i, j)`, `i < j`, in row-major order.
    pub pairs: Vec<(usize, usize)>,
    pub phi: Array2<T>,
    pub router_hidden: Array2<T>,
    /// Per-pair values, indexed like `pairs`.
    pub dot: Vec<T>,
    pub offset: Vec<T>,
    pub hyp: Vec<T>,
    pub gate: Vec<T>,
    pub a_hat: Vec<T>,
    pub objective: Objective<T>,
}

impl<T: Real> Forward<T> {
    pub fn memberships(&self) -> MembershipMatrix<T> {
        MembershipMatrix::new(self.s.clone()).expect("forward pass yields simplex rows")
    }

    fn pair_matrix(&self, n: usize, vals: &[T]) -> Array2<T> {
        let mut out = Array2::zeros((n, n));
        for (&(i, j), &v) in self.pairs.iter().zip(vals) {
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
        out
    }

    pub fn a_hat_matrix(&self) -> Array2<T> {
        self.pair_matrix(self.s.nrows(), &self.a_hat)
    }

    pub fn gate_matrix(&self) -> Array2<T> {
        self.pair_matrix(self.s.nrows(), &self.gate)
    }

    pub fn dot_matrix(&self) -> Array2<T> {
        self.pair_matrix(self.s.nrows(), &self.dot)
    }

    pub fn hyp_matrix(&self) -> Array2<T> {
        self.pair_matrix(self.s.nrows(), &self.hyp)
    }
}

pub(crate) fn unordered_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect()
}

pub(crate) fn forward<T: Real>(
    model: &RsdModel<T>,
    block: &Block<T>,
    proxy: &ProxyMatrix<T>,
    ctx: &LossContext<T>,
) -> Result<Forward<T>> {
    let eps = model.epsilon();
    let x = block.coords();
    let n = block.n_items();
    let k = model.hyper.components;

    let (enc_hidden, logits) = model.encoder.forward(x);
    let s = memberships_from_logits(&logits, eps)?.into_inner();
    let score_sum = logits.mapv(|l| l * l + eps).sum_axis(Axis(1));

    let resid = x - &s.dot(model.poles.matrix());
    let nd = T::lit((n * block.dim()) as f64);
    let loss_x = resid.iter().map(|&r| r * r).sum::<T>() / nd / ctx.denom_x;

    let heads = &model.heads;
    let q = s.dot(&heads.v);
    let z = s.dot(&heads.u);
    let z_norm: Array1<T> = z.axis_iter(Axis(0)).map(|r| r.dot(&r).sqrt()).collect();
    let y_scale = z_norm.mapv(|nrm| ball_scale(nrm, heads.ball_margin, eps));
    let y = &z * &y_scale.view().insert_axis(Axis(1));
    let alpha: Array1<T> = y.axis_iter(Axis(0)).map(|r| T::one() - r.dot(&r)).collect();

    let pairs = unordered_pairs(n);
    let mut phi = Array2::zeros((pairs.len(), 3 * k));
    for (p, &(i, j)) in pairs.iter().enumerate() {
        let mut row = phi.row_mut(p);
        for c in 0..k {
            let (si, sj) = (s[[i, c]], s[[j, c]]);
            row[c] = si + sj;
            row[k + c] = (si - sj).abs();
            row[2 * k + c] = si * sj;
        }
    }
    let router = &model.router;
    let mut router_hidden = phi.dot(&router.w1) + &router.b1;
    router_hidden.mapv_inplace(|v| v.tanh());
    let router_out = router_hidden.dot(&router.w2) + &router.b2;

    let scale = T::one() / (T::lit(heads.head_dim() as f64).sqrt() * heads.temperature);
    let mut dot = Vec::with_capacity(pairs.len());
    let mut offset = Vec::with_capacity(pairs.len());
    let mut hyp = Vec::with_capacity(pairs.len());
    let mut gate = Vec::with_capacity(pairs.len());
    let mut a_hat = Vec::with_capacity(pairs.len());
    let mut sq_err = T::zero();
    let a = proxy.matrix();
    for (p, &(i, j)) in pairs.iter().enumerate() {
        let d = sigmoid(q.row(i).dot(&q.row(j)) * scale);
        let diff = &y.row(i) - &y.row(j);
        let u = poincare_offset(diff.dot(&diff), alpha[i], alpha[j]);
        let dist = arcosh1p(u);
        let h = (-(dist * dist) / heads.temperature).exp();
        let g = match model.hyper.decoder {
            DecoderMode::Dual => sigmoid(router_out[[p, 0]] - router_out[[p, 1]]),
            DecoderMode::DotOnly => T::one(),
            DecoderMode::PoincareOnly => T::zero(),
        };
        let pred = g * d + (T::one() - g) * h;
        let e = pred - a[[i, j]];
        sq_err = sq_err + e * e * (ctx.included[[i, j]] + ctx.included[[j, i]]);
        dot.push(d);
        offset.push(u);
        hyp.push(h);
        gate.push(g);
        a_hat.push(pred);
    }
    let loss_a = sq_err / ctx.count / ctx.denom_a;

    Ok(Forward {
        enc_hidden,
        logits,
        score_sum,
        s,
        resid,
        q,
        z,
        z_norm,
        y_scale,
        y,
        alpha,
        pairs,
        phi,
        router_hidden,
        dot,
        offset,
        hyp,
        gate,
        a_hat,
        objective: Objective::new(loss_x, loss_a, ctx.lambda),
    })
}

/// `d/du arcosh(1+u)²`, with its series `2 − 2u/3` near the coincident limit.
fn sq_arcosh_slope<T: Real>(u: T) -> T {
    if u < T::epsilon().sqrt() {
        T::lit(2.0) - T::lit(2.0 / 3.0) * u
    } else {
        T::lit(2.0) * arcosh1p(u) / (u * (u + T::lit(2.0))).sqrt()
    }
}

pub(crate) fn backward<T: Real>(
    model: &RsdModel<T>,
    block: &Block<T>,
    proxy: &ProxyMatrix<T>,
    ctx: &LossContext<T>,
    fw: &Forward<T>,
) -> ModelGrad<T> {
    let n = block.n_items();
    let k = model.hyper.components;
    let eps = model.epsilon();
    let two = T::lit(2.0);
    let heads = &model.heads;
    let mut grad = model.zero_grad();
    let s = &fw.s;

    // coordinate view
    let nd = T::lit((n * block.dim()) as f64);
    let g_xhat = fw.resid.mapv(|r| -two * r / nd / ctx.denom_x);
    grad.poles = s.t().dot(&g_xhat);
    let mut g_s = g_xhat.dot(&model.poles.matrix().t());

    // relation view, one unordered pair at a time
    let m = heads.head_dim();
    let scale = T::one() / (T::lit(m as f64).sqrt() * heads.temperature);
    let mut g_q = Array2::<T>::zeros(fw.q.raw_dim());
    let mut g_y = Array2::<T>::zeros(fw.y.raw_dim());
    let mut g_alpha = Array1::<T>::zeros(n);
    let mut g_logit = Array2::<T>::zeros((fw.pairs.len(), 2));
    let a = proxy.matrix();
    let base = two * ctx.lambda / ctx.count / ctx.denom_a;
    let dual = model.hyper.decoder == DecoderMode::Dual;
    for (p, &(i, j)) in fw.pairs.iter().enumerate() {
        let weight = ctx.included[[i, j]] + ctx.included[[j, i]];
        if weight == T::zero() {
            continue;
        }
        let g_pred = base * (fw.a_hat[p] - a[[i, j]]) * weight;
        let (d, h, g) = (fw.dot[p], fw.hyp[p], fw.gate[p]);

        if dual {
            let g_gate = g_pred * (d - h) * g * (T::one() - g);
            g_logit[[p, 0]] = g_gate;
            g_logit[[p, 1]] = -g_gate;
        }

        let g_t = g_pred * g * d * (T::one() - d) * scale;
        if g_t != T::zero() {
            for c in 0..m {
                let (qi, qj) = (fw.q[[i, c]], fw.q[[j, c]]);
                g_q[[i, c]] = g_q[[i, c]] + g_t * qj;
                g_q[[j, c]] = g_q[[j, c]] + g_t * qi;
            }
        }

        let g_h = g_pred * (T::one() - g);
        if g_h != T::zero() {
            let u = fw.offset[p];
            let g_u = -g_h * h / heads.temperature * sq_arcosh_slope(u);
            let (ai, aj) = (fw.alpha[i], fw.alpha[j]);
            let g_w = g_u * two / (ai * aj);
            g_alpha[i] = g_alpha[i] - g_u * u / ai;
            g_alpha[j] = g_alpha[j] - g_u * u / aj;
            for c in 0..m {
                let delta = two * (fw.y[[i, c]] - fw.y[[j, c]]) * g_w;
                g_y[[i, c]] = g_y[[i, c]] + delta;
                g_y[[j, c]] = g_y[[j, c]] - delta;
            }
        }
    }

    // alpha_i = 1 - |y_i|^2
    Zip::from(g_y.rows_mut())
        .and(fw.y.rows())
        .and(&g_alpha)
        .for_each(|mut gy, y, &ga| {
            gy.zip_mut_with(&y, |g, &yv| *g = *g - two * ga * yv);
        });

    // y = f(|z|) z
    let margin_scale = T::one() - heads.ball_margin;
    let mut g_z = Array2::<T>::zeros(fw.z.raw_dim());
    for i in 0..n {
        let nrm = fw.z_norm[i];
        let f = fw.y_scale[i];
        let gy = g_y.row(i);
        let z = fw.z.row(i);
        let th = nrm.tanh();
        let sech2 = T::one() - th * th;
        let f_prime = if nrm > eps {
            margin_scale * (sech2 / nrm - th / (nrm * nrm))
        } else {
            margin_scale * sech2 / eps
        };
        let radial = if nrm > T::zero() {
            f_prime / nrm * z.dot(&gy)
        } else {
            T::zero()
        };
        let mut gz = g_z.row_mut(i);
        for c in 0..m {
            gz[c] = f * gy[c] + radial * z[c];
        }
    }

    grad.v = s.t().dot(&g_q);
    grad.u = s.t().dot(&g_z);
    g_s = g_s + g_q.dot(&heads.v.t()) + g_z.dot(&heads.u.t());

    if dual {
        let router = &model.router;
        grad.router.w2 = fw.router_hidden.t().dot(&g_logit);
        grad.router.b2 = g_logit.sum_axis(Axis(0));
        let mut g_pre = g_logit.dot(&router.w2.t());
        Zip::from(&mut g_pre)
            .and(&fw.router_hidden)
            .for_each(|g, &hv| *g = *g * (T::one() - hv * hv));
        grad.router.w1 = fw.phi.t().dot(&g_pre);
        grad.router.b1 = g_pre.sum_axis(Axis(0));
        let g_phi = g_pre.dot(&router.w1.t());
        for (p, &(i, j)) in fw.pairs.iter().enumerate() {
            for c in 0..k {
                let (si, sj) = (s[[i, c]], s[[j, c]]);
                let g_sum = g_phi[[p, c]];
                let sign = match si.partial_cmp(&sj) {
                    Some(std::cmp::Ordering::Greater) => T::one(),
                    Some(std::cmp::Ordering::Less) => -T::one(),
                    _ => T::zero(),
                };
                let g_abs = g_phi[[p, k + c]] * sign;
                let g_prod = g_phi[[p, 2 * k + c]];
                g_s[[i, c]] = g_s[[i, c]] + g_sum + g_abs + g_prod * sj;
                g_s[[j, c]] = g_s[[j, c]] + g_sum - g_abs + g_prod * si;
            }
        }
    }

    // s = a / sum(a), a = l^2 + eps
    let mut g_logits = Array2::<T>::zeros(fw.logits.raw_dim());
    for i in 0..n {
        let inner: T = (0..k).map(|c| g_s[[i, c]] * s[[i, c]]).sum();
        for c in 0..k {
            let g_a = (g_s[[i, c]] - inner) / fw.score_sum[i];
            g_logits[[i, c]] = two * fw.logits[[i, c]] * g_a;
        }
    }

    let enc = &model.encoder;
    grad.encoder.w2 = fw.enc_hidden.t().dot(&g_logits);
    grad.encoder.b2 = g_logits.sum_axis(Axis(0));
    let mut g_pre = g_logits.dot(&enc.w2.t());
    Zip::from(&mut g_pre)
        .and(&fw.enc_hidden)
        .for_each(|g, &hv| *g = *g * (T::one() - hv * hv));
    grad.encoder.w1 = block.coords().t().dot(&g_pre);
    grad.encoder.b1 = g_pre.sum_axis(Axis(0));

    grad
}
