//! Joint breakpoint detection in the means of correlated series.
//!
//! Between-series correlation is carried by a `Q`-factor model
//! `Σ = BB' + Ψ`. Conditionally on the latent factors the series are
//! independent, so the segmentation step of the EM algorithm is an exact
//! two-stage dynamic program. The crate also provides model selection over
//! `(K, Q)`, a simulator for correlated piecewise-constant panels, scoring
//! against ground truth, and the Monte-Carlo harness used by the CLI.

pub mod bench;
pub mod em;
pub mod error;
pub mod exec;
pub mod io;
pub mod metrics;
pub mod segdp;
pub mod selection;
pub mod simgen;
pub mod types;

pub use error::{Error, Result};
pub use exec::Exec;
pub use types::{
    assemble_sigma, expand_means, FactorParams, LatentMoments, ModelFit, Noise, NoiseMode,
    SegmentMeans, Segmentation, SeriesMatrix, SimTruth,
};
