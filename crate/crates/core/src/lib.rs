//! Codebook-based code spaces and cross-modal feature-code-feature
//! translation for collaborative perception between agents whose sensing
//! modalities never co-occur in training data.
//!
//! The crate covers the whole desk-scale pipeline: a synthetic world and
//! modality models ([`worldgen`], [`dataset`]), per-modality and group code
//! spaces ([`codespace`]), translators into foreign code spaces
//! ([`translator`]), the packed code-map wire format ([`wire`]), multi-agent
//! fusion ([`collab`]) and metrics plus experiment suites ([`eval`],
//! [`pipeline`]).

pub mod codespace;
pub mod collab;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod grid;
mod linalg;
pub mod numeric;
pub mod pipeline;
pub mod translator;
pub mod wire;
pub mod worldgen;

pub use error::{Error, Result};
pub use grid::{DetectionMap, FeatureMap, GridGeometry, Pose};
pub use numeric::RngSeed;
