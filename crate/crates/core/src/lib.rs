//! Local triangulation audit for finite blocks of learned vectors.
//!
//! A block `X` (`N × D`) and a declared weak affinity proxy `A` (`N × N`)
//! share one row-simplex membership matrix `S`. Coordinates are rebuilt as
//! `S·C` from learned poles `C`; the proxy is decoded from `S` alone by a
//! gated scaled-dot / Poincaré-ball decoder. The fit is audited through its
//! losses, component masses, learned residual `X − S·C`, and the fixed-`S`
//! least-squares pullback residual.
//!
//! All numeric code is generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases below name the `f64` instantiations used by the CLI.

pub mod block;
pub mod decoder;
pub mod diagnostics;
pub mod error;
pub mod fixtures;
pub mod ingestion;
pub mod model;
pub mod pullback;
pub mod report;
pub mod scalar;
pub mod trainer;

pub use block::{Block, EncoderParams, MembershipMatrix, PoleMatrix, ResidualMatrix};
pub use decoder::{DecodedProxy, DecoderMode, ProxyMatrix, RelationHeads, RouterParams};
pub use error::{Result, RsdError};
pub use ingestion::{BlockFixture, EmbeddingTable, FixtureItem, TopicAffinity};
pub use model::{Hyperparams, ModelGrad, RsdModel};
pub use pullback::PullbackResult;
pub use scalar::Real;
pub use trainer::{FitTrace, Objective, TrainConfig};

pub type Block64 = Block<f64>;
pub type Block32 = Block<f32>;
pub type Membership64 = MembershipMatrix<f64>;
pub type Poles64 = PoleMatrix<f64>;
pub type Proxy64 = ProxyMatrix<f64>;
pub type Model64 = RsdModel<f64>;
pub type Model32 = RsdModel<f32>;
pub type FitTrace64 = FitTrace<f64>;
pub type Embeddings64 = EmbeddingTable<f64>;
