//! Rectified-and-renormalized Fisher-Bingham (RRFB) models for compositional
//! data with exact zeros.
//!
//! Compositions are mapped to the nonnegative orthant of the unit sphere by a
//! coordinatewise square root. The model treats each observation as the image
//! of a latent Fisher-Bingham direction under `z -> z⁺ / ‖z⁺‖`, which produces
//! exact zeros whenever latent coordinates are negative.
//!
//! Module map:
//!
//! - [`sphere`]: orthogonal matrices, skew coordinates, sphere sampling.
//! - [`fb`]: Fisher-Bingham density, normalizing constant, rejection sampler.
//! - [`rrfb`]: rectification, zero-pattern blocks, posterior moments, likelihood.
//! - [`mcem`]: Monte Carlo EM estimation.
//! - [`inference`]: two-sample score test and PERMANOVA baselines.
//! - [`sim`]: scenario registry and simulation experiments.

pub mod chart;
pub mod error;
pub mod fb;
pub mod inference;
pub mod linalg;
pub mod mcem;
pub mod optim;
pub mod quadrature;
pub mod rng;
pub mod rrfb;
pub mod sim;
pub mod sphere;

pub use error::{Error, Result};
pub use fb::{FbParams, LogNormConst, NormConstMethod};
pub use inference::{DistanceMatrix, ScoreTestResult, ThetaVector, TwoSampleData};
pub use mcem::{FitConfig, FitResult, FitTrace, SufficientStats};
pub use rrfb::{BlockDecomposition, PosteriorMoments, RrfbObservation};
pub use sim::{LogScoreResult, PerturbationGrid, ScenarioConfig};
pub use sphere::{EigenvalueReparam, OrthogonalMatrix, SkewCoordinates};

pub use nalgebra;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
