//! Guided harmonic path-integral diffusion.
//!
//! A controlled diffusion `dx = u*(t, x) dt + dW` started at the origin is steered by a
//! piecewise-constant harmonic guide `V_t(x) = (β_t / 2) ‖x − ν_t‖²` and lands exactly on a
//! prescribed Gaussian-mixture terminal law. Everything the drift needs is available in
//! closed form:
//!
//! - [`protocol`] builds the guidance schedule from corridor templates;
//! - [`greens`] evaluates the backward/forward Gaussian Green-function coefficients;
//! - [`target`] holds the mixture target and exact product-of-experts fusion;
//! - [`inference`] turns coefficients and target into the posterior over terminal states and
//!   the optimal drift;
//! - [`sampler`] runs the Euler–Maruyama ensemble;
//! - [`diagnostics`] and [`learn`] score and optimize protocols.

pub mod diagnostics;
pub mod error;
pub mod greens;
pub mod inference;
pub mod learn;
pub mod protocol;
pub mod rng;
pub mod sampler;
pub mod target;

mod numeric;


pub use diagnostics::{DiagnosticReport, FidelityReport};
pub use error::{Error, Result};
pub use greens::{BackwardCoeffs, ForwardCoeffs, GreensTable};
pub use learn::{ConsensusTask, DesiderataTask, GradientMethod, LearnConfig};
pub use inference::{DriftPlan, PosteriorState, ReweightState};
pub use sampler::{DriftForm, EnsembleRun, SimConfig};
pub use target::{GaussianMixture, TrustWeights};


pub use protocol::{
    Centerline, ContinuousProtocol, CorridorFrame, GuideReference, PwcProtocol, Stiffness,
    TimeWarp,
};


