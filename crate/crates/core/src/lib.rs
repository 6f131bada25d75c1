//! Markov-switching zero-inflated autoregressive multinomial (MS-ZIARMN) models
//! for panels of co-circulating infectious-disease counts.
//!
//! The crate is organised around the inference pipeline:
//!
//! - [`data`]: validated count panels, area metadata and covariate construction.
//! - [`model`]: pure evaluation of the model formulas (relative odds, mixture
//!   probabilities, presence chains, transition matrices, likelihoods).
//! - [`ffbs`]: forward filtering, marginal likelihood and joint backward sampling
//!   of the presence states, plus an enumeration oracle.
//! - [`mcmc`]: adaptive Metropolis kernels, conjugate updates, the hybrid Gibbs
//!   sampler and convergence diagnostics.
//! - [`posterior`]: marginalized WAIC, fitted values, presence probabilities and
//!   posterior summaries.
//! - [`simulate`]: generative simulators (model panels, multivariate Reed-Frost)
//!   and the random-effect correlation study.
//!
//! Data-parallel loops (areas, chains, Monte Carlo replicates) go through
//! [`par`], which uses rayon when the `parallel` feature is enabled and falls
//! back to sequential iteration otherwise. Reductions always run in index order,
//! so results are bit-identical in both modes.

pub mod data;
pub mod ffbs;
pub mod io;
pub mod mcmc;
pub mod model;
pub mod par;
pub mod posterior;
pub mod rng;
pub mod simulate;

pub use data::{AreaMetadata, CovariateBundle, CovariateSeries, DiseasePanel};
pub use model::{Model, ModelVariant, ParameterState, StateSequence};
pub use par::Execution;
