//! Normalized joint objective `L = L_X + λ·L_A`, its reverse-mode gradient
//! and the full-batch Adam loop.

mod adam;
pub(crate) mod grad;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::block::{Block, MembershipMatrix, PoleMatrix};
use crate::decoder::{DecodedProxy, ProxyMatrix};
use crate::error::{ensure, Result, RsdError};
use crate::model::{Hyperparams, ModelGrad, RsdModel};
use crate::scalar::Real;

pub use adam::Adam;
use grad::{backward, forward, inclusion_weights, LossContext};

/// Value of the joint objective at one parameter setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective<T> {
    pub loss_x: T,
    pub loss_a: T,
    pub lambda: T,
    pub total: T,
}

impl<T: Real> Objective<T> {
    pub fn new(loss_x: T, loss_a: T, lambda: T) -> Self {
        Self {
            loss_x,
            loss_a,
            lambda,
            total: loss_x + lambda * loss_a,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.loss_x.is_finite() && self.loss_a.is_finite() && self.total.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub lambda: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Unordered off-diagonal pairs hidden from the relation loss.
    pub masked_pairs: Option<Vec<(usize, usize)>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.01,
            seed: 0,
            lambda: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            masked_pairs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.steps >= 1, || "steps must be >= 1".into())?;
        ensure(self.learning_rate > 0.0, || "learning rate must be positive".into())?;
        ensure(self.lambda >= 0.0, || "lambda must be nonnegative".into())?;
        ensure(
            self.adam_beta1 > 0.0 && self.adam_beta1 < 1.0 && self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0,
            || "Adam betas must lie in (0,1)".into(),
        )?;
        ensure(self.adam_eps > 0.0, || "Adam eps must be positive".into())
    }
}

/// Outcome of one fit.
#[derive(Debug, Clone)]
pub struct FitTrace<T> {
    /// Objective evaluated at the parameters each update started from.
    pub history: Vec<Objective<T>>,
    /// Objective at the returned parameters.
    pub final_objective: Objective<T>,
    pub model: RsdModel<T>,
    pub memberships: MembershipMatrix<T>,
    pub decoded: DecodedProxy<T>,
    /// Final objective within 1e-3 (relative) of the best one recorded.
    pub converged: bool,
    pub seed: u64,
}

impl<T: Real> FitTrace<T> {
    pub fn poles(&self) -> &PoleMatrix<T> {
        &self.model.poles
    }

    pub fn a_hat(&self) -> &Array2<T> {
        &self.decoded.a_hat
    }

    /// Lowest total objective over the recorded steps and the final state.
    pub fn best_total(&self) -> T {
        self.history
            .iter()
            .map(|o| o.total)
            .fold(self.final_objective.total, T::min)
    }
}

/// `mean((X − S·C)²) / max(‖X‖_F, ε)`.
pub fn loss_x<T: Real>(block: &Block<T>, s: &MembershipMatrix<T>, c: &PoleMatrix<T>, epsilon: T) -> Result<T> {
    let r = crate::block::residual(block, s, c)?;
    let nd = T::lit((block.n_items() * block.dim()) as f64);
    let sq: T = r.r.iter().map(|&v| v * v).sum();
    Ok(sq / nd / block.frobenius_norm().max(epsilon))
}

/// `mean((A − Â)²) / max(‖A‖_F, ε)`; held-out pairs drop out of both the
/// numerator and the entry count, while the norm always covers all of `A`.
pub fn loss_a<T: Real>(
    proxy: &ProxyMatrix<T>,
    a_hat: &Array2<T>,
    epsilon: T,
    masked_pairs: Option<&[(usize, usize)]>,
) -> Result<T> {
    let n = proxy.n_items();
    ensure(a_hat.dim() == (n, n), || {
        format!("prediction shape {:?} does not match proxy N={n}", a_hat.dim())
    })?;
    let inc = inclusion_weights::<T>(n, masked_pairs)?;
    let a = proxy.matrix();
    let mut sq = T::zero();
    for ((idx, &w), &pred) in inc.indexed_iter().zip(a_hat.iter()) {
        let e = a[idx] - pred;
        sq = sq + w * e * e;
    }
    Ok(sq / inc.sum() / proxy.frobenius_norm().max(epsilon))
}

/// Objective evaluated directly at given memberships, poles and prediction.
pub fn objective_at<T: Real>(
    block: &Block<T>,
    proxy: &ProxyMatrix<T>,
    s: &MembershipMatrix<T>,
    c: &PoleMatrix<T>,
    a_hat: &Array2<T>,
    lambda: T,
    epsilon: T,
) -> Result<Objective<T>> {
    Ok(Objective::new(
        loss_x(block, s, c, epsilon)?,
        loss_a(proxy, a_hat, epsilon, None)?,
        lambda,
    ))
}

/// Objective and its gradient at `model`.
pub fn objective_and_grad<T: Real>(
    model: &RsdModel<T>,
    block: &Block<T>,
    proxy: &ProxyMatrix<T>,
    lambda: T,
    masked_pairs: Option<&[(usize, usize)]>,
) -> Result<(Objective<T>, ModelGrad<T>)> {
    let ctx = LossContext::new(block, proxy, masked_pairs, lambda, model.epsilon())?;
    let fw = forward(model, block, proxy, &ctx)?;
    let g = backward(model, block, proxy, &ctx, &fw);
    Ok((fw.objective, g))
}

pub fn evaluate<T: Real>(
    model: &RsdModel<T>,
    block: &Block<T>,
    proxy: &ProxyMatrix<T>,
    lambda: T,
    masked_pairs: Option<&[(usize, usize)]>,
) -> Result<Objective<T>> {
    let ctx = LossContext::new(block, proxy, masked_pairs, lambda, model.epsilon())?;
    Ok(forward(model, block, proxy, &ctx)?.objective)
}

fn diverged(step: usize, err: RsdError) -> RsdError {
    match err {
        RsdError::NonFiniteEncoder { item } => RsdError::FitDivergence {
            step,
            detail: format!("non-finite encoder output at item {item}"),
        },
        other => other,
    }
}

/// Runs `config.steps` full-batch Adam updates on every trained tensor.
pub fn train<T: Real>(
    block: &Block<T>,
    proxy: &ProxyMatrix<T>,
    config: &TrainConfig,
    hyper: &Hyperparams,
) -> Result<FitTrace<T>> {
    config.validate()?;
    let mut model = RsdModel::init(block, *hyper, config.seed)?;
    let ctx = LossContext::new(
        block,
        proxy,
        config.masked_pairs.as_deref(),
        T::lit(config.lambda),
        model.epsilon(),
    )?;
    let mut flat = model.flatten();
    let mut adam = Adam::new(
        flat.len(),
        T::lit(config.learning_rate),
        T::lit(config.adam_beta1),
        T::lit(config.adam_beta2),
        T::lit(config.adam_eps),
    );
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let fw = forward(&model, block, proxy, &ctx).map_err(|e| diverged(step, e))?;
        if !fw.objective.is_finite() {
            return Err(RsdError::FitDivergence {
                step,
                detail: format!("non-finite objective {:?}", fw.objective.total),
            });
        }
        history.push(fw.objective);
        let g = backward(&model, block, proxy, &ctx, &fw).flatten();
        if g.iter().any(|v| !v.is_finite()) {
            return Err(RsdError::FitDivergence {
                step,
                detail: "non-finite gradient".into(),
            });
        }
        adam.step(&mut flat, &g);
        model.load_flat(&flat);
    }
    let fw = forward(&model, block, proxy, &ctx).map_err(|e| diverged(config.steps, e))?;
    if !fw.objective.is_finite() {
        return Err(RsdError::FitDivergence {
            step: config.steps,
            detail: "non-finite final objective".into(),
        });
    }
    let final_objective = fw.objective;
    let best = history.iter().map(|o| o.total).fold(final_objective.total, T::min);
    let converged = final_objective.total <= best * T::lit(1.001) + T::epsilon();
    let decoded = DecodedProxy {
        a_hat: fw.a_hat_matrix(),
        dot: fw.dot_matrix(),
        hyp: fw.hyp_matrix(),
        gate: fw.gate_matrix(),
    };
    Ok(FitTrace {
        history,
        final_objective,
        memberships: fw.memberships(),
        decoded,
        model,
        converged,
        seed: config.seed,
    })
}

/// Max relative deviation between the analytic gradient and central
/// differences (step `1e-5`) over every trained parameter of a freshly
/// initialized model. Entries are compared as
/// `|g − g_fd| / max(|g|, |g_fd|, 1e-6)`.
pub fn gradient_check(
    block: &Block<f64>,
    proxy: &ProxyMatrix<f64>,
    hyper: &Hyperparams,
    seed: u64,
    lambda: f64,
) -> Result<f64> {
    let model = RsdModel::init(block, *hyper, seed)?;
    gradient_check_at(&model, block, proxy, lambda, None)
}

pub fn gradient_check_at(
    model: &RsdModel<f64>,
    block: &Block<f64>,
    proxy: &ProxyMatrix<f64>,
    lambda: f64,
    masked_pairs: Option<&[(usize, usize)]>,
) -> Result<f64> {
    const STEP: f64 = 1e-5;
    let (_, grad) = objective_and_grad(model, block, proxy, lambda, masked_pairs)?;
    let analytic = grad.flatten();
    let base = model.flatten();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (idx, &g) in analytic.iter().enumerate() {
        let mut shifted = base.clone();
        shifted[idx] = base[idx] + STEP;
        probe.load_flat(&shifted);
        let up = evaluate(&probe, block, proxy, lambda, masked_pairs)?.total;
        shifted[idx] = base[idx] - STEP;
        probe.load_flat(&shifted);
        let down = evaluate(&probe, block, proxy, lambda, masked_pairs)?.total;
        let numeric = (up - down) / (2.0 * STEP);
        let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::gaussian_weights;
    use crate::decoder::{decode_parts, DecoderMode};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_instance(seed: u64, n: usize, d: usize) -> (Block<f64>, ProxyMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_simple_fn((n, d), || rand::Rng::random::<f64>(&mut rng) * 2.0 - 1.0);
        let raw = Array2::from_shape_simple_fn((n, n), || rand::Rng::random::<f64>(&mut rng));
        (
            Block::unlabeled(x).unwrap(),
            ProxyMatrix::clipped(&raw, "random").unwrap(),
        )
    }

    #[test]
    fn loss_x_zero_on_exact_fit() {
        let s = MembershipMatrix::new(array![[0.5, 0.5], [1.0, 0.0]]).unwrap();
        let c = PoleMatrix::new(array![[1.0, 2.0], [3.0, -1.0]]).unwrap();
        let x = crate::block::reconstruct(&s, &c).unwrap();
        let block = Block::unlabeled(x).unwrap();
        assert_eq!(loss_x(&block, &s, &c, 1e-8).unwrap(), 0.0);
    }

    #[test]
    fn loss_x_zero_block_uses_epsilon_guard() {
        let s = MembershipMatrix::new(array![[0.5, 0.5], [1.0, 0.0]]).unwrap();
        let c = PoleMatrix::new(array![[1.0, 2.0], [3.0, -1.0]]).unwrap();
        let m = crate::block::reconstruct(&s, &c).unwrap();
        let block = Block::unlabeled(Array2::zeros((2, 2))).unwrap();
        let expected = m.iter().map(|v| v * v).sum::<f64>() / 4.0 / 1e-8;
        assert_abs_diff_eq!(loss_x(&block, &s, &c, 1e-8).unwrap(), expected, epsilon = 1e-3);
    }

    #[test]
    fn loss_x_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Array2<f64> = gaussian_weights(4, 3, &mut rng);
        let scores = Array2::from_shape_simple_fn((4, 2), || rand::Rng::random::<f64>(&mut rng) + 0.1);
        let s = MembershipMatrix::from_positive_scores(&scores).unwrap();
        let c = PoleMatrix::new(gaussian_weights::<f64, _>(2, 3, &mut rng)).unwrap();
        let mut sq = 0.0f64;
        let mut norm = 0.0f64;
        for i in 0..4 {
            for d in 0..3 {
                let pred = s.matrix()[[i, 0]] * c.matrix()[[0, d]] + s.matrix()[[i, 1]] * c.matrix()[[1, d]];
                sq += (x[[i, d]] - pred).powi(2);
                norm += x[[i, d]].powi(2);
            }
        }
        let expected = (sq / 12.0) / norm.sqrt();
        let block = Block::unlabeled(x).unwrap();
        assert_abs_diff_eq!(loss_x(&block, &s, &c, 1e-8).unwrap(), expected, epsilon = 1e-15);
    }

    #[test]
    fn loss_a_examples() {
        let a = 0.6;
        let proxy = ProxyMatrix::new(array![[0.0, a], [a, 0.0]], "t").unwrap();
        assert_eq!(loss_a(&proxy, proxy.matrix(), 1e-8, None).unwrap(), 0.0);
        let got = loss_a(&proxy, &Array2::zeros((2, 2)), 1e-8, None).unwrap();
        let expected = (2.0 * a * a / 4.0) / (a * 2f64.sqrt());
        assert_abs_diff_eq!(got, expected, epsilon = 1e-15);
        let err = loss_a(&proxy, proxy.matrix(), 1e-8, Some(&[(0, 1)])).unwrap_err();
        assert!(matches!(err, RsdError::DegenerateObjective(_)));
    }

    #[test]
    fn masked_pairs_leave_the_mean() {
        let proxy = ProxyMatrix::new(
            array![[0.0, 1.0, 0.5], [1.0, 0.0, 0.2], [0.5, 0.2, 0.0]],
            "t",
        )
        .unwrap();
        let pred = Array2::zeros((3, 3));
        let got = loss_a(&proxy, &pred, 1e-8, Some(&[(2, 0)])).unwrap();
        let expected = (2.0 * 1.0 + 2.0 * 0.04) / 7.0 / proxy.frobenius_norm();
        assert_abs_diff_eq!(got, expected, epsilon = 1e-15);
    }

    #[test]
    fn forward_agrees_with_decoder_module() {
        let (block, proxy) = small_instance(1, 6, 4);
        for mode in DecoderMode::ALL {
            let hyper = Hyperparams::default().with_components(3).with_decoder(mode);
            let model = RsdModel::init(&block, hyper, 4).unwrap();
            let ctx = LossContext::new(&block, &proxy, None, 1.0, 1e-8).unwrap();
            let fw = forward(&model, &block, &proxy, &ctx).unwrap();
            let s = fw.memberships();
            let reference = decode_parts(&s, &model.heads, &model.router, mode, 1e-8).unwrap();
            for (a, b) in fw.a_hat_matrix().iter().zip(reference.a_hat.iter()) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-13);
            }
            let direct = objective_at(&block, &proxy, &s, &model.poles, &reference.a_hat, 1.0, 1e-8).unwrap();
            assert_abs_diff_eq!(direct.total, fw.objective.total, epsilon = 1e-13);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let (block, proxy) = small_instance(seed, 6, 4);
            for mode in DecoderMode::ALL {
                let hyper = Hyperparams {
                    encoder_hidden: 5,
                    head_dim: 3,
                    router_hidden: 4,
                    ..Hyperparams::default()
                }
                .with_decoder(mode);
                let err = gradient_check(&block, &proxy, &hyper, seed + 10, 1.0).unwrap();
                assert!(err < 1e-4, "seed {seed} mode {mode}: {err}");
            }
        }
    }

    #[test]
    fn masked_gradient_matches_finite_differences() {
        let (block, proxy) = small_instance(7, 5, 3);
        let hyper = Hyperparams {
            encoder_hidden: 4,
            head_dim: 3,
            router_hidden: 4,
            ..Hyperparams::default()
        };
        let model = RsdModel::init(&block, hyper, 1).unwrap();
        let err = gradient_check_at(&model, &block, &proxy, 0.7, Some(&[(0, 3), (1, 2)])).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_heads_gradient_matches_finite_differences() {
        let (block, proxy) = small_instance(8, 5, 3);
        let hyper = Hyperparams {
            encoder_hidden: 4,
            head_dim: 3,
            router_hidden: 4,
            ..Hyperparams::default()
        };
        let mut model = RsdModel::init(&block, hyper, 2).unwrap();
        model.heads.v.fill(0.0);
        model.heads.u.fill(0.0);
        let err = gradient_check_at(&model, &block, &proxy, 1.0, None).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn lambda_zero_leaves_relation_gradients_at_zero() {
        let (block, proxy) = small_instance(9, 6, 3);
        let model = RsdModel::init(&block, Hyperparams::default(), 0).unwrap();
        let (_, g) = objective_and_grad(&model, &block, &proxy, 0.0, None).unwrap();
        assert!(g.relation_part().iter().all(|&v| v == 0.0));
        assert!(g.poles.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn training_is_deterministic_and_descends_on_coordinates() {
        let (block, proxy) = small_instance(10, 8, 5);
        let config = TrainConfig {
            steps: 150,
            learning_rate: 0.01,
            seed: 3,
            lambda: 0.0,
            ..TrainConfig::default()
        };
        let hyper = Hyperparams::default();
        let a = train(&block, &proxy, &config, &hyper).unwrap();
        let b = train(&block, &proxy, &config, &hyper).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 150);
        assert!(a.final_objective.loss_x < a.history[0].loss_x);
        assert!(a.history.iter().all(|o| o.loss_x >= 0.0 && o.loss_a >= 0.0));
    }

    #[test]
    fn trained_fit_is_a_loss_witness() {
        let (block, proxy) = small_instance(11, 6, 3);
        let config = TrainConfig {
            steps: 100,
            seed: 1,
            lambda: 2.0,
            ..TrainConfig::default()
        };
        let fit = train(&block, &proxy, &config, &Hyperparams::default()).unwrap();
        let eta = fit.final_objective.total;
        assert!(fit.final_objective.loss_x <= eta);
        assert!(fit.final_objective.loss_a <= eta / 2.0);
    }

    #[test]
    fn f32_training_runs() {
        let (block, proxy) = small_instance(12, 6, 3);
        let block32 = Block::new(block.items().to_vec(), block.coords().mapv(|v| v as f32)).unwrap();
        let proxy32 = ProxyMatrix::new(proxy.matrix().mapv(|v| v as f32), "random").unwrap();
        let config = TrainConfig {
            steps: 50,
            ..TrainConfig::default()
        };
        let fit = train(&block32, &proxy32, &config, &Hyperparams::default()).unwrap();
        assert!(fit.final_objective.is_finite());
        assert!(fit.final_objective.total < fit.history[0].total);
    }
}
