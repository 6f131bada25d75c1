//! Forward simulation: panels from any model variant, the multivariate
//! Reed-Frost model, the Poisson to multinomial conditioning check and the
//! random-effect correlation study.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CovariateBundle, CovariateSeries, DataError, DiseasePanel, SharingGroup};
use crate::model::{is_present, mixture_probs, Model, ModelError, ModelVariant, ParameterState, StateSequence};
use crate::par::{self, Execution};
use crate::posterior::sample_multinomial;
use crate::rng;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid design: {0}")]
    Design(String),
    #[error("conditioning event too rare: {accepted} of {draws} draws have total {total}; try a total closer to {suggested}")]
    RareEvent { accepted: usize, draws: usize, total: u64, suggested: u64 },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How cell totals are obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Totals {
    /// Area-major `N * T` matrix.
    Fixed { values: Vec<u64> },
    /// Gamma-Poisson draws with the given mean and size (dispersion).
    NegativeBinomial { mean: f64, size: f64 },
}

impl Default for Totals {
    fn default() -> Self {
        Totals::NegativeBinomial { mean: 10.0, size: 2.0 }
    }
}

/// Dimensions and exogenous covariates of a simulated panel.
#[derive(Clone, Debug)]
pub struct SimulationDesign {
    pub n_diseases: usize,
    pub n_areas: usize,
    pub n_times: usize,
    pub x: Vec<Vec<CovariateSeries>>,
    pub z: Vec<Vec<CovariateSeries>>,
    pub x_sharing: Vec<SharingGroup>,
    pub z_sharing: Vec<SharingGroup>,
    pub totals: Totals,
}

impl SimulationDesign {
    pub fn new(n_diseases: usize, n_areas: usize, n_times: usize) -> Self {
        let m = n_diseases.saturating_sub(1);
        Self {
            n_diseases,
            n_areas,
            n_times,
            x: vec![Vec::new(); m],
            z: vec![Vec::new(); m],
            x_sharing: Vec::new(),
            z_sharing: Vec::new(),
            totals: Totals::default(),
        }
    }

    /// Model skeleton over an all-zero panel, used for covariate effects and
    /// transition probabilities (neither depends on the counts).
    pub fn skeleton(&self, variant: ModelVariant) -> Result<Model, SimulationError> {
        if self.n_diseases < 2 || self.n_areas == 0 || self.n_times < 2 {
            return Err(SimulationError::Design("need at least 2 diseases, 1 area and 2 times".into()));
        }
        let panel = DiseasePanel::with_default_labels(
            self.n_diseases,
            self.n_areas,
            self.n_times,
            vec![0; self.n_diseases * self.n_areas * self.n_times],
        )?;
        let cov = CovariateBundle::new(&panel, self.x.clone(), self.z.clone(), &self.x_sharing, &self.z_sharing)?;
        Ok(Model::new(panel, cov, variant)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedPanel {
    pub panel: DiseasePanel,
    /// True states; `None` for ARMN.
    pub states: Option<StateSequence>,
    /// Generating parameters with the drawn random effects filled in.
    pub params: ParameterState,
}

fn draw_totals<R: Rng>(design: &SimulationDesign, rng: &mut R) -> Result<Vec<u64>, SimulationError> {
    let n = design.n_areas * design.n_times;
    match &design.totals {
        Totals::Fixed { values } => {
            if values.len() != n {
                return Err(SimulationError::Design(format!("expected {n} totals, got {}", values.len())));
            }
            Ok(values.clone())
        }
        Totals::NegativeBinomial { mean, size } => {
            if !(*mean > 0.0 && *size > 0.0) {
                return Err(SimulationError::Design("negative-binomial mean and size must be positive".into()));
            }
            let g = Gamma::new(*size, mean / size).expect("valid gamma");
            Ok((0..n).map(|_| poisson(g.sample(rng), rng)).collect())
        }
    }
}

fn poisson<R: Rng>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("valid poisson").sample(rng) as u64
}

fn mvn_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>, SimulationError> {
    cov.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| SimulationError::Design("random-effect covariance is not positive definite".into()))
}

/// Fills `alpha0_area` with draws from `N(alpha0[d], sigma[d]^2)`.
pub fn draw_area_intercepts<R: Rng>(p: &mut ParameterState, rng: &mut R) {
    let m = p.alpha0.len();
    let n = p.alpha0_area.len() / m.max(1);
    for d in 0..m {
        for i in 0..n {
            let z: f64 = StandardNormal.sample(rng);
            p.alpha0_area[d * n + i] = p.alpha0[d] + p.sigma[d] * z;
        }
    }
}

/// Simulates a panel forward in time. At `t = 0` the states come from the
/// initial presence probabilities and the shares use `lambda* = exp(alpha0_area)`.
pub fn simulate_panel<R: Rng>(
    design: &SimulationDesign,
    params: &ParameterState,
    variant: ModelVariant,
    rng: &mut R,
) -> Result<SimulatedPanel, SimulationError> {
    let model = design.skeleton(variant)?;
    let dims = model.dims();
    let mut p = params.clone();
    if p.phi.is_empty() {
        p.phi = vec![0.0; dims.n_cells() * dims.m()];
    }
    p.check(dims)?;
    let chol = mvn_factor(&p.cov)?;
    let totals = draw_totals(design, rng)?;
    let base: u64 = rng.random();
    let (n, nt, k, m) = (design.n_areas, design.n_times, design.n_diseases, dims.m());

    let areas = par::map_indexed(n, Execution::Parallel, |i| {
        let mut r = rng::stream(base, i as u64);
        let mut counts = vec![0u64; nt * k];
        let mut codes = vec![0u16; nt];
        let mut phi = vec![0.0; (nt - 1) * m];
        let mut present = vec![true; m];
        for t in 0..nt {
            let code = if !variant.has_states() {
                0
            } else if t == 0 {
                (0..m).filter(|&d| r.random::<f64>() >= p.initial_presence[d]).map(|d| 1usize << d).sum()
            } else {
                let prev = codes[t - 1] as usize;
                let probs: Vec<f64> = (0..m).map(|d| model.presence_prob(&p, d, i, t, prev)).collect();
                (0..m).filter(|&d| r.random::<f64>() >= probs[d]).map(|d| 1usize << d).sum()
            };
            codes[t] = code as u16;
            for (d, s) in present.iter_mut().enumerate() {
                *s = is_present(code, d);
            }
            let lstar: Vec<f64> = if t == 0 {
                (0..m).map(|d| p.alpha0_area[d * n + i].exp()).collect()
            } else {
                let z: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut r)).collect();
                let prev = &counts[(t - 1) * k..t * k];
                (0..m)
                    .map(|d| {
                        let e: f64 = (0..=d).map(|c| chol[(d, c)] * z[c]).sum();
                        phi[(t - 1) * m + d] = e;
                        let log_l = p.alpha0_area[d * n + i]
                            + model.x_effect(&p, d, i, t)
                            + e
                            + p.zeta(d + 1) * (prev[d + 1] as f64).ln_1p()
                            - p.zeta(0) * (prev[0] as f64).ln_1p();
                        log_l.exp()
                    })
                    .collect()
            };
            let y = sample_multinomial(totals[i * nt + t], &mixture_probs(&present, &lstar), &mut r);
            counts[t * k..(t + 1) * k].copy_from_slice(&y);
        }
        (counts, codes, phi)
    });

    let mut counts = Vec::with_capacity(n * nt * k);
    let mut codes = Vec::with_capacity(n * nt);
    for (i, (c, s, f)) in areas.into_iter().enumerate() {
        counts.extend(c);
        codes.extend(s);
        let off = i * (nt - 1) * m;
        p.phi[off..off + (nt - 1) * m].copy_from_slice(&f);
    }
    let panel = DiseasePanel::with_default_labels(k, n, nt, counts)?;
    let states = if variant.has_states() { Some(StateSequence::from_codes(n, nt, m, codes)?) } else { None };
    Ok(SimulatedPanel { panel, states, params: p })
}

/// Parameters of the multivariate Reed-Frost model with log-linear
/// reproduction numbers `log R = beta0_area + x . beta_k + psi + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReedFrostParams {
    pub n_diseases: usize,
    pub n_areas: usize,
    pub n_times: usize,
    /// `[k * N + i]`
    pub beta0_area: Vec<f64>,
    /// Shared covariates, `covariates[l].at(i, t)`.
    pub covariates: Vec<CovariateSeries>,
    /// `beta[k][l]`
    pub beta: Vec<Vec<f64>>,
    /// Covariance of the disease random effects `psi`.
    pub psi_cov: DMatrix<f64>,
    /// Shared factor `b[i * (T-1) + t - 1]`.
    pub shared: Vec<f64>,
    pub population: Vec<f64>,
    /// Initial susceptibles `[k * N + i]`; depleted by new cases when `deplete` is set.
    pub susceptible: Vec<f64>,
    pub deplete: bool,
    pub zeta: Vec<f64>,
    /// Weighted neighbours `(j, omega_ji)` of each area.
    pub neighbors: Vec<Vec<(usize, f64)>>,
    pub beta_ne: Vec<f64>,
    /// Conditional means above this are capped.
    pub mean_cap: f64,
}

impl ReedFrostParams {
    /// Fully susceptible areas of population 1000, no covariates, no neighbours.
    pub fn simple(n_diseases: usize, n_areas: usize, n_times: usize, beta0: f64) -> Self {
        Self {
            n_diseases,
            n_areas,
            n_times,
            beta0_area: vec![beta0; n_diseases * n_areas],
            covariates: Vec::new(),
            beta: vec![Vec::new(); n_diseases],
            psi_cov: DMatrix::zeros(n_diseases, n_diseases),
            shared: vec![0.0; n_areas * (n_times - 1)],
            population: vec![1000.0; n_areas],
            susceptible: vec![1000.0; n_diseases * n_areas],
            deplete: false,
            zeta: vec![1.0; n_diseases],
            neighbors: vec![Vec::new(); n_areas],
            beta_ne: vec![0.0; n_diseases],
            mean_cap: 1e6,
        }
    }

    fn validate(&self) -> Result<(), SimulationError> {
        let (k, n) = (self.n_diseases, self.n_areas);
        let ok = self.beta0_area.len() == k * n
            && self.beta.len() == k
            && self.beta.iter().all(|b| b.len() == self.covariates.len())
            && self.psi_cov.nrows() == k
            && self.psi_cov.ncols() == k
            && self.shared.len() == n * (self.n_times - 1)
            && self.population.len() == n
            && self.susceptible.len() == k * n
            && self.zeta.len() == k
            && self.neighbors.len() == n
            && self.beta_ne.len() == k;
        if !ok {
            return Err(SimulationError::Design("Reed-Frost parameter shapes do not match".into()));
        }
        for (j, s) in self.susceptible.iter().enumerate() {
            if !(*s >= 0.0 && *s <= self.population[j % n]) {
                return Err(SimulationError::Design("susceptibles must lie in [0, pop]".into()));
            }
        }
        Ok(())
    }

    /// Conditional mean of disease `k` in area `i` at `t >= 1`.
    pub fn conditional_mean(&self, k: usize, i: usize, t: usize, prev: &[u64], susceptible: f64, psi: f64) -> f64 {
        let n = self.n_areas;
        let x: f64 = self.covariates.iter().zip(&self.beta[k]).map(|(c, b)| c.at(i, t) * b).sum();
        let log_r = self.beta0_area[k * n + i] + x + psi + self.shared[i * (self.n_times - 1) + t - 1];
        let own = (prev[i * self.n_diseases + k] as f64 + 1.0).powf(self.zeta[k]);
        let nb: f64 = self.neighbors[i].iter().map(|&(j, w)| w * prev[j * self.n_diseases + k] as f64).sum();
        susceptible / self.population[i] * log_r.exp() * own * (nb + 1.0).powf(self.beta_ne[k])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReedFrostOutput {
    /// `counts[(i * T + t) * K + k]`
    pub counts: Vec<u64>,
    pub means: Vec<f64>,
    /// Cells whose mean hit the cap.
    pub capped: usize,
}

impl ReedFrostOutput {
    pub fn to_panel(&self, params: &ReedFrostParams) -> Result<DiseasePanel, DataError> {
        DiseasePanel::with_default_labels(params.n_diseases, params.n_areas, params.n_times, self.counts.clone())
    }
}

/// Simulates Poisson counts for `t >= 1` given the counts at `t = 0` (`[i * K + k]`).
pub fn simulate_reed_frost<R: Rng>(params: &ReedFrostParams, initial: &[u64], rng: &mut R) -> Result<ReedFrostOutput, SimulationError> {
    params.validate()?;
    let (k, n, nt) = (params.n_diseases, params.n_areas, params.n_times);
    if initial.len() != n * k {
        return Err(SimulationError::Design("initial counts must have N * K entries".into()));
    }
    let chol = if params.psi_cov.iter().all(|&v| v == 0.0) { DMatrix::zeros(k, k) } else { mvn_factor(&params.psi_cov)? };
    let mut counts = vec![0u64; n * nt * k];
    let mut means = vec![0.0; n * nt * k];
    let mut susceptible = params.susceptible.clone();
    for i in 0..n {
        counts[i * nt * k..i * nt * k + k].copy_from_slice(&initial[i * k..(i + 1) * k]);
    }
    let mut capped = 0;
    let mut prev = initial.to_vec();
    for t in 1..nt {
        let mut next = vec![0u64; n * k];
        for i in 0..n {
            let z: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
            for d in 0..k {
                let psi: f64 = (0..=d).map(|c| chol[(d, c)] * z[c]).sum();
                let mut mu = params.conditional_mean(d, i, t, &prev, susceptible[d * n + i], psi);
                if mu > params.mean_cap {
                    mu = params.mean_cap;
                    capped += 1;
                }
                let y = poisson(mu, rng);
                let idx = (i * nt + t) * k + d;
                counts[idx] = y;
                means[idx] = mu;
                next[i * k + d] = y;
                if params.deplete {
                    susceptible[d * n + i] = (susceptible[d * n + i] - y as f64).max(0.0);
                }
            }
        }
        prev = next;
    }
    Ok(ReedFrostOutput { counts, means, capped })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditioningReport {
    pub total: u64,
    pub draws: usize,
    pub accepted: usize,
    pub total_variation: f64,
}

/// Every composition of `total` into `k` non-negative parts, in lexicographic order.
pub fn compositions(total: u64, k: usize) -> Vec<Vec<u64>> {
    if k == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in 0..=total {
        for mut rest in compositions(total - first, k - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

fn multinomial_pmf(y: &[u64], probs: &[f64]) -> f64 {
    let n: u64 = y.iter().sum();
    let mut log = statrs::function::gamma::ln_gamma(n as f64 + 1.0);
    for (&c, &p) in y.iter().zip(probs) {
        log -= statrs::function::gamma::ln_gamma(c as f64 + 1.0);
        if c > 0 {
            log += c as f64 * p.ln();
        }
    }
    log.exp()
}

/// Draws independent Poisson vectors with means `phi`, keeps those summing to
/// `total`, and measures the distance to `Multinom(phi / sum phi, total)`.
pub fn check_conditioning_identity<R: Rng>(phi: &[f64], total: u64, draws: usize, rng: &mut R) -> Result<ConditioningReport, SimulationError> {
    let k = phi.len();
    let comps = compositions(total, k);
    let index = |y: &[u64]| comps.binary_search_by(|c| c.as_slice().cmp(y)).expect("composition");
    let mut hits = vec![0usize; comps.len()];
    let dists: Vec<Poisson<f64>> = phi.iter().map(|&m| Poisson::new(m).expect("positive mean")).collect();
    let mut y = vec![0u64; k];
    let mut accepted = 0;
    for _ in 0..draws {
        let mut s = 0;
        for (v, dist) in y.iter_mut().zip(&dists) {
            *v = dist.sample(rng) as u64;
            s += *v;
        }
        if s == total {
            hits[index(&y)] += 1;
            accepted += 1;
        }
    }
    if (accepted as f64) < 1e-4 * draws as f64 || accepted == 0 {
        return Err(SimulationError::RareEvent { accepted, draws, total, suggested: phi.iter().sum::<f64>().round() as u64 });
    }
    let sum: f64 = phi.iter().sum();
    let probs: Vec<f64> = phi.iter().map(|v| v / sum).collect();
    let tv = comps
        .iter()
        .zip(&hits)
        .map(|(c, &h)| (h as f64 / accepted as f64 - multinomial_pmf(c, &probs)).abs())
        .sum::<f64>()
        / 2.0;
    Ok(ConditioningReport { total, draws, accepted, total_variation: tv })
}

/// Largest discrepancy between the Reed-Frost parameterization and its
/// mapped multinomial counterpart on one random configuration with `k`
/// diseases: share probabilities, and the implied covariance of the
/// differenced random effects.
pub fn mapping_discrepancy<R: Rng>(k: usize, rng: &mut R) -> f64 {
    let mut u = |a: f64, b: f64| rng.random_range(a..b);
    let n_cov = 2;
    let beta0: Vec<f64> = (0..k).map(|_| u(-1.0, 1.0)).collect();
    let beta: Vec<Vec<f64>> = (0..k).map(|_| (0..n_cov).map(|_| u(-1.0, 1.0)).collect()).collect();
    let x: Vec<f64> = (0..n_cov).map(|_| u(-2.0, 2.0)).collect();
    let psi: Vec<f64> = (0..k).map(|_| u(-1.0, 1.0)).collect();
    let b = u(-2.0, 2.0);
    let pop = u(500.0, 5000.0);
    let delta: Vec<f64> = (0..k).map(|_| u(0.1, 1.0) * pop).collect();
    let zeta: Vec<f64> = (0..k).map(|_| u(0.05, 0.95)).collect();
    let y_prev: Vec<f64> = (0..k).map(|_| u(0.0, 30.0).floor()).collect();
    let nb_prev: Vec<f64> = (0..k).map(|_| u(0.0, 3.0)).collect();
    let beta_ne: Vec<f64> = (0..k).map(|_| u(-0.5, 0.5)).collect();

    let phi_rf: Vec<f64> = (0..k)
        .map(|d| {
            let log_r = beta0[d] + (0..n_cov).map(|l| x[l] * beta[d][l]).sum::<f64>() + psi[d] + b;
            delta[d] / pop * log_r.exp() * (y_prev[d] + 1.0).powf(zeta[d]) * (nb_prev[d] + 1.0).powf(beta_ne[d])
        })
        .collect();
    let sum: f64 = phi_rf.iter().sum();

    let lstar: Vec<f64> = (1..k)
        .map(|d| {
            let alpha0 = beta0[d] - beta0[0];
            let alpha: f64 = (0..n_cov).map(|l| x[l] * (beta[d][l] - beta[0][l])).sum();
            let phi = psi[d] - psi[0];
            let offset = (delta[d] / delta[0]).ln();
            let ne = beta_ne[d] * (nb_prev[d] + 1.0).ln() - beta_ne[0] * (nb_prev[0] + 1.0).ln();
            let log_lambda = alpha0 + alpha + phi + offset + ne;
            log_lambda.exp() * (y_prev[d] + 1.0).powf(zeta[d]) / (y_prev[0] + 1.0).powf(zeta[0])
        })
        .collect();
    let pi = mixture_probs(&vec![true; k - 1], &lstar);
    let mut worst = (0..k).map(|d| (pi[d] - phi_rf[d] / sum).abs()).fold(0.0, f64::max);

    // covariance of psi_k - psi_1 via the difference operator against the entry formula
    let a = DMatrix::from_fn(k, k, |r, c| u(-1.0, 1.0) + if r == c { 2.0 } else { 0.0 });
    let cov_rf = &a * a.transpose();
    let diff = DMatrix::from_fn(k - 1, k, |r, c| {
        if c == 0 {
            -1.0
        } else if c == r + 1 {
            1.0
        } else {
            0.0
        }
    });
    let via_operator = &diff * &cov_rf * diff.transpose();
    for r in 0..k - 1 {
        for c in 0..k - 1 {
            let entry = cov_rf[(r + 1, c + 1)] - cov_rf[(r + 1, 0)] - cov_rf[(c + 1, 0)] + cov_rf[(0, 0)];
            worst = worst.max((entry - via_operator[(r, c)]).abs() / cov_rf.abs().max());
        }
    }
    worst
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationPoint {
    pub rho: f64,
    pub correlation: f64,
    pub std_error: f64,
    pub baseline: f64,
}

/// `corr(y2, y3 | total)` of the three-category multinomial without random effects.
pub fn baseline_correlation(alpha02: f64, alpha03: f64, total: u64) -> f64 {
    let den = 1.0 + alpha02.exp() + alpha03.exp();
    let (p2, p3) = (alpha02.exp() / den, alpha03.exp() / den);
    let n = total as f64;
    -n * p2 * p3 / ((n * p2 * (1.0 - p2)).sqrt() * (n * p3 * (1.0 - p3)).sqrt())
}

fn correlation(xs: &[(f64, f64)]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = xs.iter().fold((0.0, 0.0), |a, &(x, y)| (a.0 + x / n, a.1 + y / n));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y) in xs {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationStudy {
    pub alpha02: f64,
    pub alpha03: f64,
    pub sigma2: f64,
    pub sigma3: f64,
    pub total: u64,
    pub draws: usize,
    pub batches: usize,
}

impl Default for CorrelationStudy {
    fn default() -> Self {
        Self { alpha02: 1.14f64.ln(), alpha03: 0.0, sigma2: 0.75, sigma3: 0.8, total: 10, draws: 1_000_000, batches: 100 }
    }
}

/// Monte Carlo `corr(y2, y3 | total)` with correlated random effects, for each
/// `rho` in the grid. Standard errors come from batch means.
pub fn correlation_study(study: &CorrelationStudy, grid: &[f64], seed: u64, mode: Execution) -> Vec<CorrelationPoint> {
    let baseline = baseline_correlation(study.alpha02, study.alpha03, study.total);
    par::map_indexed(grid.len(), mode, |g| {
        let rho = grid[g];
        let mut r = rng::stream(seed, g as u64);
        let c = (1.0 - rho * rho).sqrt();
        let mut pairs = Vec::with_capacity(study.draws);
        for _ in 0..study.draws {
            let z1: f64 = StandardNormal.sample(&mut r);
            let z2: f64 = StandardNormal.sample(&mut r);
            let phi2 = study.sigma2 * z1;
            let phi3 = study.sigma3 * (rho * z1 + c * z2);
            let lstar = [(study.alpha02 + phi2).exp(), (study.alpha03 + phi3).exp()];
            let y = sample_multinomial(study.total, &mixture_probs(&[true, true], &lstar), &mut r);
            pairs.push((y[1] as f64, y[2] as f64));
        }
        let batches = study.batches.max(2);
        let size = study.draws / batches;
        let bc: Vec<f64> = (0..batches).map(|b| correlation(&pairs[b * size..(b + 1) * size])).collect();
        let mean_b = bc.iter().sum::<f64>() / batches as f64;
        let var_b = bc.iter().map(|v| (v - mean_b).powi(2)).sum::<f64>() / (batches - 1) as f64;
        CorrelationPoint { rho, correlation: correlation(&pairs), std_error: (var_b / batches as f64).sqrt(), baseline }
    })
}

/// Values of `rho` where the curve crosses its baseline, linearly interpolated.
pub fn baseline_crossings(curve: &[CorrelationPoint]) -> Vec<f64> {
    curve
        .windows(2)
        .filter_map(|w| {
            let (a, b) = (w[0].correlation - w[0].baseline, w[1].correlation - w[1].baseline);
            (a <= 0.0 && b > 0.0 || a >= 0.0 && b < 0.0).then(|| w[0].rho + (w[1].rho - w[0].rho) * a / (a - b))
        })
        .collect()
}
