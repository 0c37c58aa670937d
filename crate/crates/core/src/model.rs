//! Full parameter set for one fit and its fixed hyperparameters.

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::{Block, EncoderParams, PoleMatrix};
use crate::decoder::{DecoderMode, RelationHeads, RouterParams};
use crate::error::{ensure, Result};
use crate::scalar::Real;

/// Fixed (non-trained) settings of the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub components: usize,
    pub encoder_hidden: usize,
    pub head_dim: usize,
    pub temperature: f64,
    pub ball_margin: f64,
    pub router_hidden: usize,
    pub epsilon: f64,
    pub decoder: DecoderMode,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            components: 2,
            encoder_hidden: 32,
            head_dim: 8,
            temperature: 1.0,
            ball_margin: 1e-3,
            router_hidden: 16,
            epsilon: 1e-8,
            decoder: DecoderMode::Dual,
        }
    }
}

impl Hyperparams {
    pub fn with_components(mut self, k: usize) -> Self {
        self.components = k;
        self
    }

    pub fn with_decoder(mut self, decoder: DecoderMode) -> Self {
        self.decoder = decoder;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.components >= 2, || "K must be >= 2".into())?;
        ensure(self.encoder_hidden >= 1 && self.router_hidden >= 1, || {
            "hidden widths must be >= 1".into()
        })?;
        ensure(self.head_dim >= 1, || "head dimension m must be >= 1".into())?;
        ensure(self.temperature > 0.0, || "temperature must be positive".into())?;
        ensure(self.ball_margin > 0.0 && self.ball_margin < 1.0, || {
            "ball margin must lie in (0,1)".into()
        })?;
        ensure(self.epsilon > 0.0, || "epsilon must be positive".into())
    }
}

/// Every trained tensor of an RSD fit.
#[derive(Debug, Clone, PartialEq)]
pub struct RsdModel<T> {
    pub encoder: EncoderParams<T>,
    pub poles: PoleMatrix<T>,
    pub heads: RelationHeads<T>,
    pub router: RouterParams<T>,
    pub hyper: Hyperparams,
}

/// Gradient of the objective with respect to every trained tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad<T> {
    pub encoder: EncoderParams<T>,
    pub poles: Array2<T>,
    pub v: Array2<T>,
    pub u: Array2<T>,
    pub router: RouterParams<T>,
}

impl<T: Real> RsdModel<T> {
    /// Seeded initialization. Network weights are Gaussian with std
    /// `1/sqrt(fan_in)`, biases zero; poles start at distinct block items.
    pub fn init(block: &Block<T>, hyper: Hyperparams, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let k = hyper.components;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(block.dim(), hyper.encoder_hidden, k, &mut rng);
        let picks: Vec<usize> = if k <= block.n_items() {
            sample(&mut rng, block.n_items(), k).into_vec()
        } else {
            (0..k).map(|c| c % block.n_items()).collect()
        };
        let poles = PoleMatrix::new(block.coords().select(Axis(0), &picks))?;
        let heads = RelationHeads::init(
            k,
            hyper.head_dim,
            T::lit(hyper.temperature),
            T::lit(hyper.ball_margin),
            &mut rng,
        )?;
        let router = RouterParams::init(k, hyper.router_hidden, &mut rng);
        Ok(Self {
            encoder,
            poles,
            heads,
            router,
            hyper,
        })
    }

    pub fn epsilon(&self) -> T {
        T::lit(self.hyper.epsilon)
    }

    pub fn zero_grad(&self) -> ModelGrad<T> {
        ModelGrad {
            encoder: self.encoder.zeros_like(),
            poles: Array2::zeros(self.poles.matrix().raw_dim()),
            v: Array2::zeros(self.heads.v.raw_dim()),
            u: Array2::zeros(self.heads.u.raw_dim()),
            router: self.router.zeros_like(),
        }
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit(|s| n += s.len());
        n
    }

    /// Visits trained tensors in a fixed order.
    pub fn visit(&self, mut f: impl FnMut(&[T])) {
        let e = &self.encoder;
        let r = &self.router;
        for a in [&e.w1, self.poles.matrix(), &self.heads.v, &self.heads.u, &e.w2, &r.w1, &r.w2] {
            f(a.as_slice().expect("standard layout"));
        }
        for b in [&e.b1, &e.b2, &r.b1, &r.b2] {
            f(b.as_slice().expect("standard layout"));
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&mut [T])) {
        let e = &mut self.encoder;
        let r = &mut self.router;
        for a in [&mut e.w1, self.poles.matrix_mut(), &mut self.heads.v, &mut self.heads.u, &mut e.w2, &mut r.w1, &mut r.w2] {
            f(a.as_slice_mut().expect("standard layout"));
        }
        for b in [&mut e.b1, &mut e.b2, &mut r.b1, &mut r.b2] {
            f(b.as_slice_mut().expect("standard layout"));
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.n_params());
        self.visit(|s| out.extend_from_slice(s));
        out
    }

    pub fn load_flat(&mut self, flat: &[T]) {
        let mut at = 0;
        self.visit_mut(|s| {
            s.copy_from_slice(&flat[at..at + s.len()]);
            at += s.len();
        });
        assert_eq!(at, flat.len(), "flat parameter length mismatch");
    }
}

impl<T: Real> ModelGrad<T> {
    /// Same ordering as [`RsdModel::visit`].
    pub fn flatten(&self) -> Vec<T> {
        let e = &self.encoder;
        let r = &self.router;
        let mut out = Vec::new();
        for a in [&e.w1, &self.poles, &self.v, &self.u, &e.w2, &r.w1, &r.w2] {
            out.extend_from_slice(a.as_slice().expect("standard layout"));
        }
        for b in [&e.b1, &e.b2, &r.b1, &r.b2] {
            out.extend_from_slice(b.as_slice().expect("standard layout"));
        }
        out
    }

    /// Flat gradient of the relation-decoder tensors only (`V`, `U`, router).
    pub fn relation_part(&self) -> Vec<T> {
        let r = &self.router;
        let mut out: Vec<T> = Vec::new();
        for a in [&self.v, &self.u, &r.w1, &r.w2] {
            out.extend(a.iter().copied());
        }
        for b in [&r.b1, &r.b2] {
            out.extend(b.iter().copied());
        }
        out
    }
}
