//! Model formulas: state encoding, relative odds, mixture probabilities,
//! presence chains, transition matrices and likelihoods.
//!
//! Non-baseline diseases are indexed `d = 0..K-1` (disease `k = d + 2` in
//! one-based notation). A joint presence state is stored as a *code*: bit `d`
//! is set when disease `d` is **absent**, so code `0` means every disease is
//! present. The one-based *label* used in reports is `code + 1`; for three
//! diseases this gives (1,1) -> 1, (0,1) -> 2, (1,0) -> 3, (0,0) -> 4.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::data::{CovariateBundle, DiseasePanel};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("total {total} does not match the sum of counts {sum}")]
    TotalMismatch { total: u64, sum: u64 },
    #[error("state label {label} outside 1..={max}")]
    StateLabel { label: usize, max: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("unknown model variant `{0}` (expected ms-ziarmn, ziarmn, zeng or armn)")]
    Variant(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelVariant {
    #[serde(rename = "ms-ziarmn")]
    MsZiarmn,
    #[serde(rename = "ziarmn")]
    Ziarmn,
    #[serde(rename = "zeng")]
    Zeng,
    #[serde(rename = "armn")]
    Armn,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [Self::MsZiarmn, Self::Ziarmn, Self::Zeng, Self::Armn];

    pub fn has_states(self) -> bool {
        self != Self::Armn
    }

    /// Whether presence depends on the previous state.
    pub fn has_persistence(self) -> bool {
        self == Self::MsZiarmn
    }

    /// Whether presence uses `z` covariates.
    pub fn has_presence_covariates(self) -> bool {
        matches!(self, Self::MsZiarmn | Self::Ziarmn)
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MsZiarmn => "ms-ziarmn",
            Self::Ziarmn => "ziarmn",
            Self::Zeng => "zeng",
            Self::Armn => "armn",
        })
    }
}

impl FromStr for ModelVariant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "ms-ziarmn" | "msziarmn" => Ok(Self::MsZiarmn),
            "ziarmn" => Ok(Self::Ziarmn),
            "zeng" => Ok(Self::Zeng),
            "armn" => Ok(Self::Armn),
            _ => Err(ModelError::Variant(s.to_string())),
        }
    }
}

/// One-based state label of a presence vector over the non-baseline diseases.
pub fn encode_state(present: &[bool]) -> usize {
    state_code(present) + 1
}

/// Presence vector of a one-based state label.
pub fn decode_state(label: usize, n_nonbaseline: usize) -> Result<Vec<bool>, ModelError> {
    let max = 1usize << n_nonbaseline;
    if label == 0 || label > max {
        return Err(ModelError::StateLabel { label, max });
    }
    Ok(code_presence(label - 1, n_nonbaseline))
}

pub fn state_code(present: &[bool]) -> usize {
    present.iter().enumerate().filter(|(_, &p)| !p).map(|(d, _)| 1usize << d).sum()
}

pub fn code_presence(code: usize, n_nonbaseline: usize) -> Vec<bool> {
    (0..n_nonbaseline).map(|d| is_present(code, d)).collect()
}

#[inline]
pub fn is_present(code: usize, d: usize) -> bool {
    code & (1 << d) == 0
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Log Bernoulli mass of `present` with success log-odds `logit_p`.
#[inline]
pub fn log_bernoulli(present: bool, logit_p: f64) -> f64 {
    if present {
        -log1p_exp(-logit_p)
    } else {
        -log1p_exp(logit_p)
    }
}

/// `lambda * (y_prev_k + 1)^zeta_k / (y_prev_1 + 1)^zeta_1`.
pub fn relative_odds(lambda: f64, y_prev_k: u64, y_prev_1: u64, zeta_k: f64, zeta_1: f64) -> f64 {
    (lambda.ln() + zeta_k * (y_prev_k as f64).ln_1p() - zeta_1 * (y_prev_1 as f64).ln_1p()).exp()
}

/// `alpha0_ki + x . alpha + phi`.
pub fn log_lambda(alpha0_ki: f64, x: &[f64], alpha: &[f64], phi: f64) -> Result<f64, ModelError> {
    if x.len() != alpha.len() {
        return Err(ModelError::Dimension(format!("{} covariates but {} coefficients", x.len(), alpha.len())));
    }
    Ok(alpha0_ki + dot(x, alpha) + phi)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Multinomial probabilities `(pi_1, ..., pi_K)` for a presence vector and
/// relative odds of the non-baseline diseases.
pub fn mixture_probs(present: &[bool], lambda_star: &[f64]) -> Vec<f64> {
    let denom = 1.0 + present.iter().zip(lambda_star).filter(|(p, _)| **p).map(|(_, l)| l).sum::<f64>();
    let mut out = Vec::with_capacity(lambda_star.len() + 1);
    out.push(1.0 / denom);
    out.extend(present.iter().zip(lambda_star).map(|(&p, &l)| if p { l / denom } else { 0.0 }));
    out
}

/// Log mixture probabilities from log relative odds; absent diseases get `-inf`.
pub fn log_mixture_probs(code: usize, log_lambda_star: &[f64], out: &mut [f64]) {
    let mut max = 0.0f64;
    for (d, &l) in log_lambda_star.iter().enumerate() {
        if is_present(code, d) {
            max = max.max(l);
        }
    }
    let mut s = (-max).exp();
    for (d, &l) in log_lambda_star.iter().enumerate() {
        if is_present(code, d) {
            s += (l - max).exp();
        }
    }
    let log_denom = max + s.ln();
    out[0] = -log_denom;
    for (d, &l) in log_lambda_star.iter().enumerate() {
        out[d + 1] = if is_present(code, d) { l - log_denom } else { f64::NEG_INFINITY };
    }
}

/// `log(total! / prod y_k!)`.
pub fn log_multinomial_coefficient(y: &[u64]) -> f64 {
    let total: u64 = y.iter().sum();
    if y.iter().any(|&v| v == total) {
        return 0.0;
    }
    ln_gamma(total as f64 + 1.0) - y.iter().map(|&v| ln_gamma(v as f64 + 1.0)).sum::<f64>()
}

/// Multinomial log mass of `y` given log probabilities, with the coefficient
/// supplied by the caller. Zero-count categories are skipped.
#[inline]
fn multinomial_kernel(y: &[u64], log_pi: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&v, &lp) in y.iter().zip(log_pi) {
        if v > 0 {
            if lp == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            acc += v as f64 * lp;
        }
    }
    acc
}

/// Log probability of one cell's counts under the mixture component `present`.
pub fn emission_logpmf(y: &[u64], present: &[bool], lambda_star: &[f64], total: u64) -> Result<f64, ModelError> {
    let sum: u64 = y.iter().sum();
    if sum != total {
        return Err(ModelError::TotalMismatch { total, sum });
    }
    if y.len() != lambda_star.len() + 1 || present.len() != lambda_star.len() {
        return Err(ModelError::Dimension(format!(
            "{} counts, {} presence bits, {} odds",
            y.len(),
            present.len(),
            lambda_star.len()
        )));
    }
    let log_l: Vec<f64> = lambda_star.iter().map(|l| l.ln()).collect();
    let mut log_pi = vec![0.0; y.len()];
    log_mixture_probs(state_code(present), &log_l, &mut log_pi);
    let k = multinomial_kernel(y, &log_pi);
    Ok(if k == f64::NEG_INFINITY { k } else { log_multinomial_coefficient(y) + k })
}

/// Presence indicators for every area and time.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateSequence {
    n_areas: usize,
    n_times: usize,
    n_nonbaseline: usize,
    codes: Vec<u16>,
}

impl StateSequence {
    /// Every disease present everywhere.
    pub fn all_present(n_areas: usize, n_times: usize, n_nonbaseline: usize) -> Self {
        Self { n_areas, n_times, n_nonbaseline, codes: vec![0; n_areas * n_times] }
    }

    pub fn from_codes(n_areas: usize, n_times: usize, n_nonbaseline: usize, codes: Vec<u16>) -> Result<Self, ModelError> {
        if codes.len() != n_areas * n_times {
            return Err(ModelError::Dimension(format!("{} state codes for {n_areas} x {n_times}", codes.len())));
        }
        if let Some(c) = codes.iter().find(|&&c| (c as usize) >= (1usize << n_nonbaseline)) {
            return Err(ModelError::StateLabel { label: *c as usize + 1, max: 1 << n_nonbaseline });
        }
        Ok(Self { n_areas, n_times, n_nonbaseline, codes })
    }

    pub fn n_areas(&self) -> usize {
        self.n_areas
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    #[inline]
    pub fn code(&self, i: usize, t: usize) -> usize {
        self.codes[i * self.n_times + t] as usize
    }

    #[inline]
    pub fn set_code(&mut self, i: usize, t: usize, code: usize) {
        self.codes[i * self.n_times + t] = code as u16;
    }

    pub fn label(&self, i: usize, t: usize) -> usize {
        self.code(i, t) + 1
    }

    /// Presence of non-baseline disease `d`.
    #[inline]
    pub fn present(&self, d: usize, i: usize, t: usize) -> bool {
        is_present(self.code(i, t), d)
    }

    /// Codes of one area over time.
    pub fn area(&self, i: usize) -> &[u16] {
        &self.codes[i * self.n_times..(i + 1) * self.n_times]
    }

    pub fn area_mut(&mut self, i: usize) -> &mut [u16] {
        &mut self.codes[i * self.n_times..(i + 1) * self.n_times]
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }
}

/// One point in parameter space.
///
/// Index conventions (`m = K - 1`, `d` a non-baseline disease):
/// `alpha0_area[d * N + i]`, `phi[(i * (T - 1) + t - 1) * m + d]`,
/// `rho_di[j * m + d]` is the effect of disease `j` being present on disease `d`.
/// `zeta_logit` has one entry per disease including the baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterState {
    pub zeta_logit: Vec<f64>,
    pub alpha0: Vec<f64>,
    pub sigma: Vec<f64>,
    pub alpha0_area: Vec<f64>,
    pub alpha: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub phi: Vec<f64>,
    pub eta0: Vec<f64>,
    pub eta: Vec<f64>,
    pub rho_ar: Vec<f64>,
    pub rho_di: Vec<f64>,
    pub initial_presence: Vec<f64>,
}

/// Array shapes implied by a panel and covariate bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub n_diseases: usize,
    pub n_areas: usize,
    pub n_times: usize,
    pub n_alpha: usize,
    pub n_eta: usize,
}

impl Dims {
    pub fn m(&self) -> usize {
        self.n_diseases - 1
    }

    pub fn n_cells(&self) -> usize {
        self.n_areas * (self.n_times - 1)
    }
}

impl ParameterState {
    /// Neutral point: zero coefficients, `zeta = 0.5`, unit scales, identity covariance.
    pub fn neutral(dims: Dims) -> Self {
        let m = dims.m();
        Self {
            zeta_logit: vec![0.0; dims.n_diseases],
            alpha0: vec![0.0; m],
            sigma: vec![1.0; m],
            alpha0_area: vec![0.0; m * dims.n_areas],
            alpha: vec![0.0; dims.n_alpha],
            cov: DMatrix::identity(m, m),
            phi: vec![0.0; dims.n_cells() * m],
            eta0: vec![0.0; m],
            eta: vec![0.0; dims.n_eta],
            rho_ar: vec![0.0; m],
            rho_di: vec![0.0; m * m],
            initial_presence: vec![0.5; m],
        }
    }

    #[inline]
    pub fn zeta(&self, k: usize) -> f64 {
        logistic(self.zeta_logit[k])
    }

    pub fn set_zeta(&mut self, k: usize, value: f64) {
        self.zeta_logit[k] = logit(value);
    }

    pub fn check(&self, dims: Dims) -> Result<(), ModelError> {
        let m = dims.m();
        let shapes = [
            ("zeta", self.zeta_logit.len(), dims.n_diseases),
            ("alpha0", self.alpha0.len(), m),
            ("sigma", self.sigma.len(), m),
            ("alpha0_area", self.alpha0_area.len(), m * dims.n_areas),
            ("alpha", self.alpha.len(), dims.n_alpha),
            ("phi", self.phi.len(), m * dims.n_cells()),
            ("eta0", self.eta0.len(), m),
            ("eta", self.eta.len(), dims.n_eta),
            ("rho_ar", self.rho_ar.len(), m),
            ("rho_di", self.rho_di.len(), m * m),
            ("initial_presence", self.initial_presence.len(), m),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(ModelError::Dimension(format!("{name} has {got} entries, expected {want}")));
            }
        }
        if self.cov.nrows() != m || self.cov.ncols() != m {
            return Err(ModelError::Dimension(format!("covariance is {}x{}", self.cov.nrows(), self.cov.ncols())));
        }
        if self.sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(ModelError::Parameter("random-intercept sd must be positive".into()));
        }
        if self.initial_presence.iter().any(|&q| !(0.0..=1.0).contains(&q)) {
            return Err(ModelError::Parameter("initial presence probabilities must lie in [0, 1]".into()));
        }
        if self.cov.clone().cholesky().is_none() {
            return Err(ModelError::Parameter("covariance is not positive definite".into()));
        }
        Ok(())
    }
}

/// A panel with its covariates and variant, with cached per-cell constants.
#[derive(Clone, Debug)]
pub struct Model {
    panel: DiseasePanel,
    covariates: CovariateBundle,
    variant: ModelVariant,
    likelihood: bool,
    log_counts: Vec<f64>,
    log_coef: Vec<f64>,
    positive: Vec<u16>,
}

impl Model {
    pub fn new(panel: DiseasePanel, covariates: CovariateBundle, variant: ModelVariant) -> Result<Self, ModelError> {
        let m = panel.n_diseases() - 1;
        if m > 15 {
            return Err(ModelError::Dimension("at most 16 diseases are supported".into()));
        }
        if covariates.x.len() != m || covariates.z.len() != m {
            return Err(ModelError::Dimension("covariate bundle does not match the number of diseases".into()));
        }
        let log_counts = panel.counts().iter().map(|&y| (y as f64).ln_1p()).collect();
        let (n, nt) = (panel.n_areas(), panel.n_times());
        let mut log_coef = Vec::with_capacity(n * nt);
        let mut positive = Vec::with_capacity(n * nt);
        for i in 0..n {
            for t in 0..nt {
                let y = panel.cell(i, t);
                log_coef.push(log_multinomial_coefficient(y));
                positive.push(
                    (0..m).filter(|&d| y[d + 1] > 0).map(|d| 1u16 << d).sum(),
                );
            }
        }
        Ok(Self { panel, covariates, variant, likelihood: true, log_counts, log_coef, positive })
    }

    /// Switches the count likelihood off (prior-only sampling).
    pub fn without_likelihood(mut self) -> Self {
        self.likelihood = false;
        self
    }

    pub fn with_variant(&self, variant: ModelVariant) -> Self {
        Self { variant, ..self.clone() }
    }

    pub fn panel(&self) -> &DiseasePanel {
        &self.panel
    }

    pub fn covariates(&self) -> &CovariateBundle {
        &self.covariates
    }

    pub fn variant(&self) -> ModelVariant {
        self.variant
    }

    pub fn has_likelihood(&self) -> bool {
        self.likelihood
    }

    pub fn dims(&self) -> Dims {
        Dims {
            n_diseases: self.panel.n_diseases(),
            n_areas: self.panel.n_areas(),
            n_times: self.panel.n_times(),
            n_alpha: self.covariates.x_layout.n_free(),
            n_eta: self.covariates.z_layout.n_free(),
        }
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.panel.n_diseases() - 1
    }

    /// Number of joint presence states (1 for the variant without states).
    pub fn n_states(&self) -> usize {
        if self.variant.has_states() {
            1 << self.m()
        } else {
            1
        }
    }

    /// Bitmask of non-baseline diseases with positive counts at `(i, t)`.
    #[inline]
    pub fn positive_mask(&self, i: usize, t: usize) -> usize {
        self.positive[i * self.panel.n_times() + t] as usize
    }

    /// Whether state `code` can produce the counts at `(i, t)`.
    #[inline]
    pub fn allowed(&self, i: usize, t: usize, code: usize) -> bool {
        !self.likelihood || code & self.positive_mask(i, t) == 0
    }

    #[inline]
    fn log_count(&self, k: usize, i: usize, t: usize) -> f64 {
        self.log_counts[(i * self.panel.n_times() + t) * self.panel.n_diseases() + k]
    }

    #[inline]
    pub fn phi_index(&self, i: usize, t: usize, d: usize) -> usize {
        (i * (self.panel.n_times() - 1) + t - 1) * self.m() + d
    }

    /// `x . alpha` for disease `d` at `(i, t)`.
    #[inline]
    pub fn x_effect(&self, p: &ParameterState, d: usize, i: usize, t: usize) -> f64 {
        let row = self.covariates.x[d].row(i, t);
        let slots = self.covariates.x_layout.slots(d);
        row.iter().zip(slots).map(|(x, &s)| x * p.alpha[s]).sum()
    }

    #[inline]
    pub fn z_effect(&self, p: &ParameterState, d: usize, i: usize, t: usize) -> f64 {
        let row = self.covariates.z[d].row(i, t);
        let slots = self.covariates.z_layout.slots(d);
        row.iter().zip(slots).map(|(z, &s)| z * p.eta[s]).sum()
    }

    /// Mean over `t >= 1` of `log(y[k, i, t-1] + 1)`; the sensitivity of the
    /// linear predictor of area `i` to `zeta_k`.
    pub fn mean_lagged_log_count(&self, k: usize, i: usize) -> f64 {
        let nt = self.panel.n_times();
        (0..nt - 1).map(|t| self.log_count(k, i, t)).sum::<f64>() / (nt - 1) as f64
    }

    /// `log lambda*` of disease `d` at `(i, t >= 1)`.
    #[inline]
    pub fn log_lambda_star(&self, p: &ParameterState, d: usize, i: usize, t: usize) -> f64 {
        self.log_lambda_star_without_phi(p, d, i, t) + p.phi[self.phi_index(i, t, d)]
    }

    /// `log lambda*` with the random effect left out.
    #[inline]
    pub fn log_lambda_star_without_phi(&self, p: &ParameterState, d: usize, i: usize, t: usize) -> f64 {
        let n = self.panel.n_areas();
        p.alpha0_area[d * n + i] + self.x_effect(p, d, i, t) + p.zeta(d + 1) * self.log_count(d + 1, i, t - 1)
            - p.zeta(0) * self.log_count(0, i, t - 1)
    }

    /// `log lambda` (relative risk before the autoregressive terms) of disease `d` at `(i, t >= 1)`.
    pub fn log_lambda(&self, p: &ParameterState, d: usize, i: usize, t: usize) -> f64 {
        let n = self.panel.n_areas();
        p.alpha0_area[d * n + i] + self.x_effect(p, d, i, t) + p.phi[self.phi_index(i, t, d)]
    }

    /// `log lambda*` of every non-baseline disease at `(i, t)`.
    pub fn cell_log_lambda_star(&self, p: &ParameterState, i: usize, t: usize, out: &mut [f64]) {
        for (d, o) in out.iter_mut().enumerate() {
            *o = self.log_lambda_star(p, d, i, t);
        }
    }

    /// Emission log-likelihood at `(i, t >= 1)` under state `code`, given
    /// precomputed `log lambda*`.
    pub fn emission_with(&self, i: usize, t: usize, code: usize, log_lstar: &[f64]) -> f64 {
        if !self.likelihood {
            return 0.0;
        }
        if code & self.positive_mask(i, t) != 0 {
            return f64::NEG_INFINITY;
        }
        let y = self.panel.cell(i, t);
        let mut log_pi = [0.0f64; 17];
        let log_pi = &mut log_pi[..y.len()];
        log_mixture_probs(code, log_lstar, log_pi);
        self.log_coef[i * self.panel.n_times() + t] + multinomial_kernel(y, log_pi)
    }

    pub fn emission(&self, p: &ParameterState, i: usize, t: usize, code: usize) -> f64 {
        let mut l = [0.0f64; 16];
        let l = &mut l[..self.m()];
        self.cell_log_lambda_star(p, i, t, l);
        self.emission_with(i, t, code, l)
    }

    /// Emission log-likelihood of every state at `(i, t)`.
    pub fn emission_all(&self, p: &ParameterState, i: usize, t: usize, out: &mut [f64]) {
        let mut l = [0.0f64; 16];
        let l = &mut l[..self.m()];
        self.cell_log_lambda_star(p, i, t, l);
        for (code, o) in out.iter_mut().enumerate() {
            *o = self.emission_with(i, t, code, l);
        }
    }

    /// Log-odds of presence of disease `d` at `(i, t >= 1)` given the previous state.
    #[inline]
    pub fn presence_logit(&self, p: &ParameterState, d: usize, i: usize, t: usize, prev_code: usize) -> f64 {
        match self.variant {
            ModelVariant::Armn => f64::INFINITY,
            ModelVariant::Zeng => p.eta0[d],
            ModelVariant::Ziarmn => p.eta0[d] + self.z_effect(p, d, i, t),
            ModelVariant::MsZiarmn => {
                let m = self.m();
                let mut v = p.eta0[d] + self.z_effect(p, d, i, t);
                if is_present(prev_code, d) {
                    v += p.rho_ar[d];
                }
                for j in 0..m {
                    if j != d && is_present(prev_code, j) {
                        v += p.rho_di[j * m + d];
                    }
                }
                v
            }
        }
    }

    pub fn presence_prob(&self, p: &ParameterState, d: usize, i: usize, t: usize, prev_code: usize) -> f64 {
        logistic(self.presence_logit(p, d, i, t, prev_code))
    }

    /// Log transition matrix at `(i, t >= 1)`, row-major `[prev * S + next]`.
    pub fn log_transition(&self, p: &ParameterState, i: usize, t: usize, out: &mut [f64]) {
        let s = self.n_states();
        if s == 1 {
            out[0] = 0.0;
            return;
        }
        let m = self.m();
        let mut logits = [0.0f64; 16];
        for prev in 0..s {
            for (d, l) in logits.iter_mut().enumerate().take(m) {
                *l = self.presence_logit(p, d, i, t, prev);
            }
            for next in 0..s {
                out[prev * s + next] = (0..m).map(|d| log_bernoulli(is_present(next, d), logits[d])).sum();
            }
        }
    }

    /// Transition matrix at `(i, t >= 1)` on the probability scale.
    pub fn transition_matrix(&self, p: &ParameterState, i: usize, t: usize) -> Vec<f64> {
        let s = self.n_states();
        let mut out = vec![0.0; s * s];
        self.log_transition(p, i, t, &mut out);
        out.iter_mut().for_each(|v| *v = v.exp());
        out
    }

    /// Prior distribution of the state at `t = 0`, before looking at counts.
    pub fn initial_presence_distribution(&self, p: &ParameterState) -> Vec<f64> {
        if !self.variant.has_states() {
            return vec![1.0];
        }
        (0..self.n_states())
            .map(|code| {
                (0..self.m())
                    .map(|d| if is_present(code, d) { p.initial_presence[d] } else { 1.0 - p.initial_presence[d] })
                    .product()
            })
            .collect()
    }

    /// Log initial probability of state `code` at `t = 0` in area `i`.
    ///
    /// There is no emission term at `t = 0`, but a state that marks a disease
    /// with positive counts as absent is still impossible.
    pub fn log_initial(&self, p: &ParameterState, i: usize, code: usize) -> f64 {
        if !self.variant.has_states() {
            return 0.0;
        }
        if !self.allowed(i, 0, code) {
            return f64::NEG_INFINITY;
        }
        (0..self.m())
            .map(|d| {
                let q = p.initial_presence[d];
                if is_present(code, d) {
                    q.ln()
                } else {
                    (1.0 - q).ln()
                }
            })
            .sum()
    }

    /// Sum of emission terms over `t >= 1` at the given states.
    pub fn emission_loglik(&self, p: &ParameterState, states: &StateSequence) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.panel.n_areas() {
            acc += self.area_emission_loglik(p, states, i);
        }
        acc
    }

    pub fn area_emission_loglik(&self, p: &ParameterState, states: &StateSequence, i: usize) -> f64 {
        let mut acc = 0.0;
        for t in 1..self.panel.n_times() {
            acc += self.emission(p, i, t, self.state_code(states, i, t));
        }
        acc
    }

    #[inline]
    pub fn state_code(&self, states: &StateSequence, i: usize, t: usize) -> usize {
        if self.variant.has_states() {
            states.code(i, t)
        } else {
            0
        }
    }

    /// Log-probability of the presence path of disease `d` given the other
    /// diseases' paths (initial term plus transitions).
    pub fn presence_loglik(&self, p: &ParameterState, states: &StateSequence, d: usize) -> f64 {
        if !self.variant.has_states() {
            return 0.0;
        }
        let q = p.initial_presence[d];
        let mut acc = 0.0;
        for i in 0..self.panel.n_areas() {
            if self.likelihood && !states.present(d, i, 0) && self.positive_mask(i, 0) & (1 << d) != 0 {
                return f64::NEG_INFINITY;
            }
            acc += if states.present(d, i, 0) { q.ln() } else { (1.0 - q).ln() };
            for t in 1..self.panel.n_times() {
                let l = self.presence_logit(p, d, i, t, states.code(i, t - 1));
                acc += log_bernoulli(states.present(d, i, t), l);
            }
        }
        acc
    }

    /// Complete-data log-likelihood: emissions for `t >= 1`, the initial
    /// state and all transitions.
    pub fn complete_data_loglik(&self, p: &ParameterState, states: &StateSequence) -> f64 {
        let mut acc = self.emission_loglik(p, states);
        for d in 0..self.m() {
            acc += self.presence_loglik(p, states, d);
        }
        acc
    }

    /// Joint log-probability of one area's state path and its counts up to
    /// time `path.len() - 1`.
    pub fn area_path_loglik(&self, p: &ParameterState, i: usize, path: &[usize]) -> f64 {
        let s = self.n_states();
        let mut acc = self.log_initial(p, i, path[0]);
        let mut trans = vec![0.0; s * s];
        for t in 1..path.len() {
            self.log_transition(p, i, t, &mut trans);
            acc += trans[path[t - 1] * s + path[t]];
            acc += self.emission(p, i, t, path[t]);
        }
        acc
    }
}

/// Address of one scalar in a [`ParameterState`] (random effects excluded).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamId {
    Zeta(usize),
    Alpha0(usize),
    Sigma(usize),
    Alpha0Area(usize, usize),
    Alpha(usize),
    /// Lower-triangle entry `(row, col)` with `row >= col`.
    Cov(usize, usize),
    Eta0(usize),
    Eta(usize),
    RhoAr(usize),
    /// Effect of disease `.0` on disease `.1`.
    RhoDi(usize, usize),
    InitialPresence(usize),
}

impl ParamId {
    pub fn get(&self, p: &ParameterState) -> f64 {
        let m = p.alpha0.len();
        let n = if m == 0 { 0 } else { p.alpha0_area.len() / m };
        match *self {
            ParamId::Zeta(k) => p.zeta(k),
            ParamId::Alpha0(d) => p.alpha0[d],
            ParamId::Sigma(d) => p.sigma[d],
            ParamId::Alpha0Area(d, i) => p.alpha0_area[d * n + i],
            ParamId::Alpha(f) => p.alpha[f],
            ParamId::Cov(r, c) => p.cov[(r, c)],
            ParamId::Eta0(d) => p.eta0[d],
            ParamId::Eta(f) => p.eta[f],
            ParamId::RhoAr(d) => p.rho_ar[d],
            ParamId::RhoDi(j, d) => p.rho_di[j * m + d],
            ParamId::InitialPresence(d) => p.initial_presence[d],
        }
    }

    pub fn set(&self, p: &mut ParameterState, v: f64) {
        let m = p.alpha0.len();
        let n = if m == 0 { 0 } else { p.alpha0_area.len() / m };
        match *self {
            ParamId::Zeta(k) => p.set_zeta(k, v),
            ParamId::Alpha0(d) => p.alpha0[d] = v,
            ParamId::Sigma(d) => p.sigma[d] = v,
            ParamId::Alpha0Area(d, i) => p.alpha0_area[d * n + i] = v,
            ParamId::Alpha(f) => p.alpha[f] = v,
            ParamId::Cov(r, c) => {
                p.cov[(r, c)] = v;
                p.cov[(c, r)] = v;
            }
            ParamId::Eta0(d) => p.eta0[d] = v,
            ParamId::Eta(f) => p.eta[f] = v,
            ParamId::RhoAr(d) => p.rho_ar[d] = v,
            ParamId::RhoDi(j, d) => p.rho_di[j * m + d] = v,
            ParamId::InitialPresence(d) => p.initial_presence[d] = v,
        }
    }

    pub fn name(&self, model: &Model) -> String {
        let names = model.panel().disease_names();
        let nb = |d: usize| &names[d + 1];
        match *self {
            ParamId::Zeta(k) => format!("zeta[{}]", names[k]),
            ParamId::Alpha0(d) => format!("alpha0[{}]", nb(d)),
            ParamId::Sigma(d) => format!("sigma[{}]", nb(d)),
            ParamId::Alpha0Area(d, i) => format!("alpha0_area[{},{}]", nb(d), model.panel().area_labels()[i]),
            ParamId::Alpha(f) => format!("alpha[{}]", model.covariates().x_layout.free_names()[f]),
            ParamId::Cov(r, c) => format!("Sigma[{},{}]", nb(r), nb(c)),
            ParamId::Eta0(d) => format!("eta0[{}]", nb(d)),
            ParamId::Eta(f) => format!("eta[{}]", model.covariates().z_layout.free_names()[f]),
            ParamId::RhoAr(d) => format!("rho_ar[{}]", nb(d)),
            ParamId::RhoDi(j, d) => format!("rho_di[{}->{}]", nb(j), nb(d)),
            ParamId::InitialPresence(d) => format!("q[{}]", nb(d)),
        }
    }

    /// Whether the sampler updates this scalar under `variant`.
    pub fn is_free(&self, variant: ModelVariant) -> bool {
        match self {
            ParamId::Eta0(_) => variant.has_states(),
            ParamId::Eta(_) => variant.has_presence_covariates(),
            ParamId::RhoAr(_) | ParamId::RhoDi(..) => variant.has_persistence(),
            ParamId::InitialPresence(_) => false,
            _ => true,
        }
    }

    /// Whether the natural report scale is the exponential (rate ratios).
    pub fn is_log_scale(&self) -> bool {
        matches!(self, ParamId::Alpha0(_) | ParamId::Alpha0Area(..) | ParamId::Alpha(_))
    }
}

impl Model {
    /// Every scalar parameter in a fixed order. Area intercepts are included
    /// when `with_area` is set; parameters fixed under the variant when
    /// `with_fixed` is set.
    pub fn parameter_ids(&self, with_area: bool, with_fixed: bool) -> Vec<ParamId> {
        let m = self.m();
        let mut out = Vec::new();
        out.extend((0..=m).map(ParamId::Zeta));
        out.extend((0..m).map(ParamId::Alpha0));
        out.extend((0..m).map(ParamId::Sigma));
        if with_area {
            for d in 0..m {
                out.extend((0..self.panel.n_areas()).map(|i| ParamId::Alpha0Area(d, i)));
            }
        }
        out.extend((0..self.covariates.x_layout.n_free()).map(ParamId::Alpha));
        for c in 0..m {
            for r in c..m {
                out.push(ParamId::Cov(r, c));
            }
        }
        out.extend((0..m).map(ParamId::Eta0));
        out.extend((0..self.covariates.z_layout.n_free()).map(ParamId::Eta));
        out.extend((0..m).map(ParamId::RhoAr));
        for d in 0..m {
            for j in 0..m {
                if j != d {
                    out.push(ParamId::RhoDi(j, d));
                }
            }
        }
        out.extend((0..m).map(ParamId::InitialPresence));
        if !with_fixed {
            out.retain(|id| id.is_free(self.variant));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CovariateSeries, DiseasePanel};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn encoding_matches_three_disease_table() {
        assert_eq!(encode_state(&[true, true]), 1);
        assert_eq!(encode_state(&[false, true]), 2);
        assert_eq!(encode_state(&[true, false]), 3);
        assert_eq!(encode_state(&[false, false]), 4);
        for label in 1..=4 {
            assert_eq!(encode_state(&decode_state(label, 2).unwrap()), label);
        }
        assert!(decode_state(0, 2).is_err());
        assert!(decode_state(5, 2).is_err());
    }

    #[test]
    fn four_disease_states_unique() {
        let mut seen = std::collections::HashSet::new();
        for bits in 0..8u32 {
            let v: Vec<bool> = (0..3).map(|d| bits & (1 << d) != 0).collect();
            let l = encode_state(&v);
            assert!((1..=8).contains(&l));
            assert!(seen.insert(l));
            assert_eq!(decode_state(l, 3).unwrap(), v);
        }
    }

    #[test]
    fn relative_odds_examples() {
        assert_relative_eq!(relative_odds(1.0, 0, 0, 0.3, 0.7), 1.0);
        assert_relative_eq!(relative_odds(1.0, 3, 0, 0.5, 0.5), 2.0, epsilon = 1e-14);
        assert_relative_eq!(relative_odds(2.0, 8, 8, 0.5, 0.5), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn log_lambda_examples() {
        assert_eq!(log_lambda(0.0, &[], &[], 0.0).unwrap(), 0.0);
        assert_relative_eq!(log_lambda(1.14f64.ln(), &[0.0], &[0.3], 0.0).unwrap().exp(), 1.14, epsilon = 1e-14);
        assert_eq!(log_lambda(0.0, &[1.0, -1.0], &[0.2, 0.2], 0.0).unwrap(), 0.0);
        assert!(log_lambda(0.0, &[1.0], &[], 0.0).is_err());
    }

    #[test]
    fn mixture_examples() {
        assert_eq!(mixture_probs(&[false, false], &[3.0, 7.0]), vec![1.0, 0.0, 0.0]);
        let p = mixture_probs(&[true, true], &[1.0, 1.0]);
        p.iter().for_each(|&v| assert_relative_eq!(v, 1.0 / 3.0));
        assert_eq!(mixture_probs(&[false, true], &[9.0, 1.0]), vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn emission_examples() {
        assert_eq!(emission_logpmf(&[5, 0, 0], &[false, false], &[2.0, 3.0], 5).unwrap(), 0.0);
        assert_eq!(emission_logpmf(&[0, 3, 0], &[false, true], &[1.0, 1.0], 3).unwrap(), f64::NEG_INFINITY);
        assert_relative_eq!(
            emission_logpmf(&[1, 1, 1], &[true, true], &[1.0, 1.0], 3).unwrap(),
            (2.0f64 / 9.0).ln(),
            epsilon = 1e-13
        );
        assert!(matches!(
            emission_logpmf(&[1, 1, 1], &[true, true], &[1.0, 1.0], 4),
            Err(ModelError::TotalMismatch { .. })
        ));
    }

    #[test]
    fn emission_sums_to_one_over_simplex() {
        let lstar = [0.7, 2.3];
        for present in [[true, true], [true, false], [false, true], [false, false]] {
            for total in 0..=6u64 {
                let mut s = 0.0;
                for a in 0..=total {
                    for b in 0..=total - a {
                        let y = [total - a - b, a, b];
                        s += emission_logpmf(&y, &present, &lstar, total).unwrap().exp();
                    }
                }
                assert_relative_eq!(s, 1.0, epsilon = 1e-12);
            }
        }
    }

    fn tiny_model(variant: ModelVariant, counts: Vec<u64>, n: usize, t: usize, with_z: bool) -> Model {
        let panel = DiseasePanel::with_default_labels(3, n, t, counts).unwrap();
        let z = if with_z {
            let c = CovariateSeries::from_fn("z", n, t, |i, tt| 0.3 * i as f64 - 0.2 * tt as f64).unwrap();
            vec![vec![c.clone()], vec![c]]
        } else {
            vec![vec![], vec![]]
        };
        let xc = CovariateSeries::from_fn("x", n, t, |i, tt| ((i + 2 * tt) as f64).sin()).unwrap();
        let cov = CovariateBundle::new(&panel, vec![vec![xc.clone()], vec![xc]], z, &[], &[]).unwrap();
        Model::new(panel, cov, variant).unwrap()
    }

    #[test]
    fn presence_examples() {
        let model = tiny_model(ModelVariant::MsZiarmn, vec![0; 3 * 1 * 2], 1, 2, false);
        let mut p = ParameterState::neutral(model.dims());
        assert_relative_eq!(model.presence_prob(&p, 0, 0, 1, 3), 0.5);
        p.rho_ar[0] = 3f64.ln();
        assert_relative_eq!(model.presence_prob(&p, 0, 0, 1, 0b10), 0.75, epsilon = 1e-15);
        let zeng = model.with_variant(ModelVariant::Zeng);
        p.eta0[0] = -2.0;
        p.rho_di[1 * 2] = 5.0;
        for prev in 0..4 {
            assert_relative_eq!(zeng.presence_prob(&p, 0, 0, 1, prev), logistic(-2.0));
        }
    }

    #[test]
    fn transition_degenerate_and_uniform() {
        let model = tiny_model(ModelVariant::MsZiarmn, vec![0; 3 * 1 * 2], 1, 2, false);
        let mut p = ParameterState::neutral(model.dims());
        model.transition_matrix(&p, 0, 1).iter().for_each(|&v| assert_relative_eq!(v, 0.25));
        p.eta0 = vec![60.0, -60.0];
        let g = model.transition_matrix(&p, 0, 1);
        let target = encode_state(&[true, false]) - 1;
        for prev in 0..4 {
            for next in 0..4 {
                assert_relative_eq!(g[prev * 4 + next], if next == target { 1.0 } else { 0.0 }, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn transition_matches_bruteforce_product() {
        let model = tiny_model(ModelVariant::MsZiarmn, vec![0; 3 * 2 * 3], 2, 3, true);
        let mut p = ParameterState::neutral(model.dims());
        p.eta0 = vec![-0.4, 0.9];
        p.eta = vec![0.7, -1.1];
        p.rho_ar = vec![1.5, 0.3];
        p.rho_di = vec![0.0, -0.8, 0.6, 0.0];
        let g = model.transition_matrix(&p, 1, 2);
        let z = 0.3 * 1.0 - 0.2 * 2.0;
        for prev in 1..=4 {
            let sp = decode_state(prev, 2).unwrap();
            for next in 1..=4 {
                let sn = decode_state(next, 2).unwrap();
                let l2 = -0.4 + 0.7 * z + 1.5 * sp[0] as u8 as f64 + 0.6 * sp[1] as u8 as f64;
                let l3 = 0.9 - 1.1 * z + 0.3 * sp[1] as u8 as f64 - 0.8 * sp[0] as u8 as f64;
                let p2 = 1.0 / (1.0 + (-l2).exp());
                let p3 = 1.0 / (1.0 + (-l3).exp());
                let want = if sn[0] { p2 } else { 1.0 - p2 } * if sn[1] { p3 } else { 1.0 - p3 };
                assert_relative_eq!(g[(prev - 1) * 4 + next - 1], want, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn armn_complete_loglik_is_emission_sum() {
        let counts = vec![3, 1, 2, 0, 4, 1];
        let model = tiny_model(ModelVariant::Armn, counts, 1, 2, false);
        let p = ParameterState::neutral(model.dims());
        let states = StateSequence::all_present(1, 2, 2);
        let y = model.panel().cell(0, 1).to_vec();
        let l = (0..2).map(|d| model.log_lambda_star(&p, d, 0, 1).exp()).collect::<Vec<_>>();
        let want = emission_logpmf(&y, &[true, true], &l, 5).unwrap();
        assert_relative_eq!(model.complete_data_loglik(&p, &states), want, epsilon = 1e-12);
    }

    #[test]
    fn complete_loglik_hand_computed() {
        // N = 1, T = 2, no covariates in x effect (alpha = 0)
        let counts = vec![2, 1, 0, 3, 0, 0];
        let model = tiny_model(ModelVariant::MsZiarmn, counts, 1, 2, false);
        let mut p = ParameterState::neutral(model.dims());
        p.zeta_logit = vec![logit(0.3), logit(0.6), logit(0.5)];
        p.alpha0_area = vec![0.2, -0.5];
        p.eta0 = vec![0.1, -0.3];
        p.rho_ar = vec![0.8, 1.2];
        p.rho_di = vec![0.0, 0.4, -0.2, 0.0];
        p.initial_presence = vec![0.7, 0.1];
        // states: t=0 (1,0), t=1 (0,0)
        let states = StateSequence::from_codes(1, 2, 2, vec![0b10, 0b11]).unwrap();
        let init = 0.7f64.ln() + 0.9f64.ln();
        let l2 = 0.1 + 0.8;
        let l3 = -0.3 + 0.4;
        let trans = (1.0 - logistic(l2)).ln() + (1.0 - logistic(l3)).ln();
        let emission = 0.0;
        assert_relative_eq!(model.complete_data_loglik(&p, &states), init + trans + emission, epsilon = 1e-13);
        let bad = StateSequence::from_codes(1, 2, 2, vec![0b01, 0]).unwrap();
        assert_eq!(model.complete_data_loglik(&p, &bad), f64::NEG_INFINITY);
    }

    #[test]
    fn lambda_star_uses_previous_counts() {
        let counts = vec![0, 3, 0, 5, 5, 5];
        let model = tiny_model(ModelVariant::MsZiarmn, counts, 1, 2, false);
        let mut p = ParameterState::neutral(model.dims());
        p.set_zeta(0, 0.5);
        p.set_zeta(1, 0.5);
        let want = relative_odds(1.0, 3, 0, 0.5, 0.5);
        assert_relative_eq!(model.log_lambda_star(&p, 0, 0, 1).exp(), want, epsilon = 1e-14);
    }

    #[test]
    fn two_disease_zero_inflated_binomial() {
        // with one non-baseline disease the marginal over presence is the
        // zero-inflated binomial: P(y2 = 0) = (1 - p) + p (1 - pi)^n
        let panel = DiseasePanel::with_default_labels(2, 1, 2, vec![0, 0, 4, 0]).unwrap();
        let model = Model::new(panel.clone(), CovariateBundle::empty(&panel), ModelVariant::Zeng).unwrap();
        for (eta0, a0) in [(-1.0, 0.3), (0.5, -0.7), (2.0, 1.1)] {
            let mut p = ParameterState::neutral(model.dims());
            p.eta0 = vec![eta0];
            p.alpha0_area = vec![a0];
            let pr = logistic(eta0);
            let pi2 = a0.exp() / (1.0 + a0.exp());
            let mix = (1.0 - pr) * model.emission(&p, 0, 1, 1).exp() + pr * model.emission(&p, 0, 1, 0).exp();
            assert_relative_eq!(mix, (1.0 - pr) + pr * (1.0 - pi2).powi(4), epsilon = 1e-13);
        }
    }

    proptest! {
        #[test]
        fn mixture_normalized_and_ratio_preserving(
            l in proptest::collection::vec(-30.0f64..30.0, 3),
            code in 0usize..8,
        ) {
            let present = code_presence(code, 3);
            let ls: Vec<f64> = l.iter().map(|v| v.exp()).collect();
            let p = mixture_probs(&present, &ls);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let mut lp = [0.0; 4];
            log_mixture_probs(code, &l, &mut lp);
            prop_assert!((lp.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
            for a in 0..3 {
                for b in 0..3 {
                    if present[a] && present[b] {
                        prop_assert!((lp[a + 1] - lp[b + 1] - (l[a] - l[b])).abs() < 1e-9);
                    }
                }
                if !present[a] {
                    prop_assert_eq!(p[a + 1], 0.0);
                }
            }
        }

        #[test]
        fn transition_rows_stochastic(
            eta0 in proptest::collection::vec(-5.0f64..5.0, 2),
            eta in proptest::collection::vec(-3.0f64..3.0, 2),
            rho in proptest::collection::vec(-4.0f64..4.0, 4),
        ) {
            let model = tiny_model(ModelVariant::MsZiarmn, vec![0; 3 * 2 * 3], 2, 3, true);
            let mut p = ParameterState::neutral(model.dims());
            p.eta0 = eta0;
            p.eta = eta;
            p.rho_ar = vec![rho[0], rho[3]];
            p.rho_di = rho;
            for i in 0..2 {
                for t in 1..3 {
                    let g = model.transition_matrix(&p, i, t);
                    for r in g.chunks(4) {
                        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
