//! Adaptive Metropolis kernels, conjugate updates, the hybrid Gibbs sampler
//! and convergence diagnostics.

pub mod adapt;
pub mod diagnostics;
pub mod gibbs;
pub mod prior;
pub mod wishart;

pub use adapt::{Acceptance, AdaptiveBlockRwm, AdaptiveRwm};
pub use diagnostics::{effective_sample_size, split_rhat};
pub use gibbs::{run_gibbs, ChainOutput, Draw, PosteriorDraws, Retain, RunConfig, SamplerError};
pub use prior::{NormalPrior, PriorSpec, ScalePrior};
