//! Posterior summaries: marginalized WAIC, posterior-predictive fitted values,
//! presence probabilities, parameter tables, response curves and
//! presence-weighted relative risks.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use crate::ffbs::{self, FfbsError};
use crate::mcmc::diagnostics::{effective_sample_size, split_rhat};
use crate::mcmc::gibbs::{Draw, PosteriorDraws};
use crate::model::{is_present, mixture_probs, Model, ParamId};
use crate::par::{self, Execution};

#[derive(Debug, Error)]
pub enum PosteriorError {
    #[error("no retained draws")]
    Empty,
    #[error("posterior mean likelihood is zero at area {area}, time {time}")]
    ZeroLikelihood { area: usize, time: usize },
    #[error("retained draws lack {0}")]
    Missing(&'static str),
    #[error("index out of range: {0}")]
    Index(String),
    #[error(transparent)]
    Ffbs(#[from] FfbsError),
}

/// Contribution of one cell to the WAIC.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CellWaic {
    pub area: usize,
    pub time: usize,
    pub lpd: f64,
    pub pwaic: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WaicReport {
    pub lpdd: f64,
    pub pwaic: f64,
    pub waic: f64,
    pub n_draws: usize,
    pub cells: Vec<CellWaic>,
}

fn log_mean_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let s: f64 = v.iter().map(|x| (x - max).exp()).sum();
    max + (s / v.len() as f64).ln()
}

fn sample_variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// WAIC from per-draw, per-cell log-likelihoods (`loglik[draw][i * (T-1) + t - 1]`).
///
/// `pwaic` uses the sample variance (divisor `M - 1`) and is zero for a single draw.
pub fn waic_from_logliks(loglik: &[Vec<f64>], n_areas: usize, n_times: usize) -> Result<WaicReport, PosteriorError> {
    if loglik.is_empty() {
        return Err(PosteriorError::Empty);
    }
    let per = n_times - 1;
    let mut cells = Vec::with_capacity(n_areas * per);
    let mut column = vec![0.0; loglik.len()];
    for i in 0..n_areas {
        for t in 1..n_times {
            let c = i * per + t - 1;
            for (m, draw) in loglik.iter().enumerate() {
                column[m] = draw[c];
            }
            let lpd = log_mean_exp(&column);
            if !lpd.is_finite() {
                return Err(PosteriorError::ZeroLikelihood { area: i + 1, time: t + 1 });
            }
            cells.push(CellWaic { area: i, time: t, lpd, pwaic: sample_variance(&column) });
        }
    }
    let lpdd: f64 = cells.iter().map(|c| c.lpd).sum();
    let pwaic: f64 = cells.iter().map(|c| c.pwaic).sum();
    Ok(WaicReport { lpdd, pwaic, waic: -2.0 * (lpdd - pwaic), n_draws: loglik.len(), cells })
}

/// Per-cell marginal log-likelihoods of one draw, recomputed with the forward filter.
pub fn recompute_cell_logliks(model: &Model, draw: &Draw) -> Result<Vec<f64>, PosteriorError> {
    if draw.params.phi.is_empty() && model.m() > 0 {
        return Err(PosteriorError::Missing("random effects"));
    }
    Ok(ffbs::forward_filter(model, &draw.params, Execution::Sequential)?.cell_logliks())
}

/// WAIC with the states marginalized out. Uses the stored per-cell terms
/// when every draw has them, otherwise recomputes them from the parameters.
pub fn waic(model: &Model, draws: &PosteriorDraws, mode: Execution) -> Result<WaicReport, PosteriorError> {
    let all: Vec<&Draw> = draws.iter().collect();
    let stored = all.iter().all(|d| d.cell_loglik.is_some());
    let loglik: Vec<Vec<f64>> = if stored {
        all.iter().map(|d| d.cell_loglik.clone().unwrap()).collect()
    } else {
        par::map_indexed(all.len(), mode, |m| recompute_cell_logliks(model, all[m])).into_iter().collect::<Result<_, _>>()?
    };
    waic_from_logliks(&loglik, model.panel().n_areas(), model.panel().n_times())
}

/// Same as [`waic`] but always recomputing the per-cell terms.
pub fn waic_recomputed(model: &Model, draws: &PosteriorDraws, mode: Execution) -> Result<WaicReport, PosteriorError> {
    let all: Vec<&Draw> = draws.iter().collect();
    let loglik: Vec<Vec<f64>> =
        par::map_indexed(all.len(), mode, |m| recompute_cell_logliks(model, all[m])).into_iter().collect::<Result<_, _>>()?;
    waic_from_logliks(&loglik, model.panel().n_areas(), model.panel().n_times())
}

/// Multinomial draw by sequential conditional binomials.
pub fn sample_multinomial<R: Rng>(total: u64, probs: &[f64], rng: &mut R) -> Vec<u64> {
    let mut out = vec![0u64; probs.len()];
    let mut left = total;
    let mut mass = 1.0;
    for (k, &p) in probs.iter().enumerate() {
        if left == 0 {
            break;
        }
        if k + 1 == probs.len() || mass <= p {
            out[k] = left;
            break;
        }
        let q = (p / mass).clamp(0.0, 1.0);
        let y = Binomial::new(left, q).expect("valid binomial").sample(rng);
        out[k] = y;
        left -= y;
        mass -= p;
    }
    out
}

fn mvn_draw<R: Rng>(chol: &DMatrix<f64>, rng: &mut R) -> Vec<f64> {
    let m = chol.nrows();
    let z: Vec<f64> = (0..m).map(|_| StandardNormal.sample(rng)).collect();
    (0..m).map(|r| (0..=r).map(|c| chol[(r, c)] * z[c]).sum()).collect()
}

/// Posterior-predictive counts at `(i, t >= 1)`, one per retained draw, with a
/// fresh random effect and the drawn state.
pub fn fitted_values<R: Rng>(
    model: &Model,
    draws: &PosteriorDraws,
    i: usize,
    t: usize,
    rng: &mut R,
) -> Result<Vec<Vec<u64>>, PosteriorError> {
    let panel = model.panel();
    if i >= panel.n_areas() || t == 0 || t >= panel.n_times() {
        return Err(PosteriorError::Index(format!("cell ({i}, {t})")));
    }
    let m = model.m();
    let total = panel.total(i, t);
    let mut out = Vec::with_capacity(draws.n_draws());
    for draw in draws.iter() {
        let code = match (&draw.states, model.variant().has_states()) {
            (Some(s), true) => s.code(i, t),
            (None, true) => return Err(PosteriorError::Missing("state draws")),
            _ => 0,
        };
        let chol = draw
            .params
            .cov
            .clone()
            .cholesky()
            .map(|c| c.l())
            .unwrap_or_else(|| DMatrix::from_diagonal(&draw.params.cov.diagonal().map(|v| v.max(0.0).sqrt())));
        let phi = mvn_draw(&chol, rng);
        let lstar: Vec<f64> =
            (0..m).map(|d| (model.log_lambda_star_without_phi(&draw.params, d, i, t) + phi[d]).exp()).collect();
        let present: Vec<bool> = (0..m).map(|d| is_present(code, d)).collect();
        out.push(sample_multinomial(total, &mixture_probs(&present, &lstar), rng));
    }
    Ok(out)
}

/// Monte Carlo estimate of `P(S = 1 | y)` for non-baseline disease `d`.
pub fn presence_probability(model: &Model, draws: &PosteriorDraws, d: usize, i: usize, t: usize) -> Result<f64, PosteriorError> {
    if !model.variant().has_states() {
        return Ok(1.0);
    }
    if draws.n_draws() == 0 {
        return Err(PosteriorError::Empty);
    }
    let mut hits = 0usize;
    for draw in draws.iter() {
        let s = draw.states.as_ref().ok_or(PosteriorError::Missing("state draws"))?;
        hits += s.present(d, i, t) as usize;
    }
    Ok(hits as f64 / draws.n_draws() as f64)
}

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub median: f64,
    pub upper: f64,
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
}

/// Mean, sd, equal-tailed 95% interval and diagnostics of per-chain draws.
pub fn summarize_chains(name: impl Into<String>, chains: &[Vec<f64>]) -> Result<SummaryRow, PosteriorError> {
    let mut pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    if pooled.is_empty() {
        return Err(PosteriorError::Empty);
    }
    let n = pooled.len() as f64;
    let mean = pooled.iter().sum::<f64>() / n;
    let sd = sample_variance(&pooled).sqrt();
    pooled.sort_by(f64::total_cmp);
    let refs: Vec<&[f64]> = chains.iter().map(|c| c.as_slice()).collect();
    Ok(SummaryRow {
        name: name.into(),
        mean,
        sd,
        lower: quantile(&pooled, 0.025),
        median: quantile(&pooled, 0.5),
        upper: quantile(&pooled, 0.975),
        rhat: split_rhat(&refs),
        ess: effective_sample_size(&refs),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Transform {
    /// Report `exp` of log-scale coefficients (rate ratios).
    pub exponentiate: bool,
}

/// Summary table of the given parameters.
pub fn summarize(model: &Model, draws: &PosteriorDraws, ids: &[ParamId], transform: Transform) -> Result<Vec<SummaryRow>, PosteriorError> {
    if draws.n_draws() == 0 {
        return Err(PosteriorError::Empty);
    }
    ids.iter()
        .map(|&id| {
            let mut traces = draws.traces(id);
            let mut name = id.name(model);
            if transform.exponentiate && id.is_log_scale() {
                traces.iter_mut().flatten().for_each(|v| *v = v.exp());
                name = format!("exp({name})");
            }
            summarize_chains(name, &traces)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub value: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Posterior of `lambda = exp(alpha0 + alpha_c * x)` for disease `d` over a
/// grid of raw values of one multinomial covariate, with the other
/// covariates at their centre and no random effect.
pub fn response_curve(
    model: &Model,
    draws: &PosteriorDraws,
    d: usize,
    covariate: &str,
    grid: &[f64],
) -> Result<Vec<CurvePoint>, PosteriorError> {
    if draws.n_draws() == 0 {
        return Err(PosteriorError::Empty);
    }
    let cov = model.covariates();
    let col = cov.x.get(d).and_then(|x| x.column(covariate)).ok_or_else(|| PosteriorError::Index(format!("covariate {covariate}")))?;
    let slot = cov.x_layout.slots(d)[col];
    let disease = &model.panel().disease_names()[d + 1];
    let std = cov.standardization_for(crate::data::ModelPart::X, disease, covariate);
    grid.iter()
        .map(|&g| {
            let xs = std.map_or(g, |r| (g - r.mean) / r.sd);
            let mut v: Vec<f64> = draws.iter().map(|dr| (dr.params.alpha0[d] + dr.params.alpha[slot] * xs).exp()).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            v.sort_by(f64::total_cmp);
            Ok(CurvePoint { value: g, mean, lower: quantile(&v, 0.025), upper: quantile(&v, 0.975) })
        })
        .collect()
}

/// Grid values where the posterior-mean curve crosses `threshold`, linearly interpolated.
pub fn threshold_crossings(curve: &[CurvePoint], threshold: f64) -> Vec<f64> {
    curve
        .windows(2)
        .filter_map(|w| {
            let (a, b) = (w[0].mean - threshold, w[1].mean - threshold);
            if a == 0.0 {
                Some(w[0].value)
            } else if a * b < 0.0 {
                Some(w[0].value + (w[1].value - w[0].value) * a / (a - b))
            } else {
                None
            }
        })
        .collect()
}

/// `sum_t lambda_t S_t / sum_t S_t`, or `None` when the disease is never present.
pub fn presence_weighted_average(lambda: &[f64], present: &[bool]) -> Option<f64> {
    let n = present.iter().filter(|&&s| s).count();
    if n == 0 {
        return None;
    }
    Some(lambda.iter().zip(present).filter(|(_, &s)| s).map(|(l, _)| l).sum::<f64>() / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LambdaBar {
    pub area: usize,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    /// Draws where the disease was never present in the area.
    pub excluded: usize,
}

/// Posterior of the presence-weighted average relative risk of disease `d` in area `i`.
pub fn lambda_bar(model: &Model, draws: &PosteriorDraws, d: usize, i: usize) -> Result<LambdaBar, PosteriorError> {
    let nt = model.panel().n_times();
    let mut vals = Vec::new();
    let mut excluded = 0;
    for draw in draws.iter() {
        if draw.params.phi.is_empty() {
            return Err(PosteriorError::Missing("random effects"));
        }
        let lambda: Vec<f64> = (1..nt).map(|t| model.log_lambda(&draw.params, d, i, t).exp()).collect();
        let present: Vec<bool> = match (&draw.states, model.variant().has_states()) {
            (Some(s), true) => (1..nt).map(|t| s.present(d, i, t)).collect(),
            (None, true) => return Err(PosteriorError::Missing("state draws")),
            _ => vec![true; nt - 1],
        };
        match presence_weighted_average(&lambda, &present) {
            Some(v) => vals.push(v),
            None => excluded += 1,
        }
    }
    if vals.is_empty() {
        return Err(PosteriorError::Empty);
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.sort_by(f64::total_cmp);
    Ok(LambdaBar { area: i, mean, lower: quantile(&vals, 0.025), upper: quantile(&vals, 0.975), excluded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CovariateBundle, DiseasePanel};
    use crate::mcmc::gibbs::{run_gibbs, ChainOutput, RunConfig};
    use crate::mcmc::prior::PriorSpec;
    use crate::model::{ModelVariant, ParameterState, StateSequence};
    use crate::rng;
    use approx::assert_relative_eq;

    fn tiny_model(variant: ModelVariant) -> Model {
        let counts = vec![3, 1, 0, 2, 0, 0, 0, 0, 0, 4, 2, 1, 1, 0, 0, 5, 0, 2];
        let panel = DiseasePanel::with_default_labels(3, 2, 3, counts).unwrap();
        Model::new(panel.clone(), CovariateBundle::empty(&panel), variant).unwrap()
    }

    fn wrap(draws: Vec<Draw>) -> PosteriorDraws {
        PosteriorDraws { chains: vec![ChainOutput { draws, ..Default::default() }], config: RunConfig::default() }
    }

    fn draw_at(model: &Model, p: ParameterState, states: Option<StateSequence>) -> Draw {
        let ll = ffbs::forward_filter(model, &p, Execution::Sequential).unwrap().cell_logliks();
        Draw { iteration: 1, params: p, states, cell_loglik: Some(ll) }
    }

    #[test]
    fn single_and_duplicated_draws() {
        let model = tiny_model(ModelVariant::MsZiarmn);
        let p = ParameterState::neutral(model.dims());
        let d = draw_at(&model, p, None);
        let one = waic(&model, &wrap(vec![d.clone()]), Execution::Sequential).unwrap();
        assert_eq!(one.pwaic, 0.0);
        let sum: f64 = d.cell_loglik.as_ref().unwrap().iter().sum();
        assert_relative_eq!(one.waic, -2.0 * sum, epsilon = 1e-12);
        let two = waic(&model, &wrap(vec![d.clone(), d]), Execution::Sequential).unwrap();
        assert_relative_eq!(two.waic, one.waic, epsilon = 1e-12);
    }

    #[test]
    fn stored_and_recomputed_agree() {
        let model = tiny_model(ModelVariant::MsZiarmn);
        let cfg = RunConfig { chains: 2, iterations: 200, burn_in: 100, thin: 5, seed: 4, ..Default::default() };
        let draws = run_gibbs(&model, &PriorSpec::default(), &cfg).unwrap();
        let a = waic(&model, &draws, Execution::Parallel).unwrap();
        let b = waic_recomputed(&model, &draws, Execution::Sequential).unwrap();
        assert!((a.waic - b.waic).abs() < 1e-10);
        assert!(a.pwaic >= 0.0);
    }

    #[test]
    fn zero_likelihood_names_cell() {
        let ll = vec![vec![0.0, f64::NEG_INFINITY]];
        match waic_from_logliks(&ll, 1, 3) {
            Err(PosteriorError::ZeroLikelihood { area: 1, time: 3 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fitted_values_edge_cases() {
        let model = tiny_model(ModelVariant::MsZiarmn);
        let p = ParameterState::neutral(model.dims());
        let mut s = StateSequence::all_present(2, 3, 2);
        s.set_code(1, 1, 3);
        let draws = wrap(vec![draw_at(&model, p, Some(s))]);
        let mut r = rng::stream(1, 0);
        // area 0, t = 2 has total 0
        assert!(fitted_values(&model, &draws, 0, 2, &mut r).unwrap().iter().all(|y| y == &vec![0, 0, 0]));
        // both non-baseline diseases absent
        let total = model.panel().total(1, 1);
        assert_eq!(fitted_values(&model, &draws, 1, 1, &mut r).unwrap()[0], vec![total, 0, 0]);
        assert!(fitted_values(&model, &draws, 0, 0, &mut r).is_err());
    }

    #[test]
    fn fitted_mean_matches_analytic() {
        // one draw, zero covariance: the predictive mean is total * pi
        let model = tiny_model(ModelVariant::Armn);
        let mut p = ParameterState::neutral(model.dims());
        p.cov *= 1e-300;
        p.alpha0_area = vec![0.4, -0.3, 0.4, -0.3];
        let draw = Draw { iteration: 1, params: p.clone(), states: None, cell_loglik: None };
        let draws = wrap(vec![draw; 20_000]);
        let mut r = rng::stream(2, 0);
        let ys = fitted_values(&model, &draws, 1, 1, &mut r).unwrap();
        let total = model.panel().total(1, 1) as f64;
        let lstar: Vec<f64> = (0..2).map(|d| model.log_lambda_star(&p, d, 1, 1).exp()).collect();
        let pi = mixture_probs(&[true, true], &lstar);
        for k in 0..3 {
            let mean = ys.iter().map(|y| y[k] as f64).sum::<f64>() / ys.len() as f64;
            let se = (total * pi[k] * (1.0 - pi[k]) / ys.len() as f64).sqrt();
            assert!((mean - total * pi[k]).abs() < 4.0 * se, "{k}: {mean} vs {}", total * pi[k]);
        }
    }

    #[test]
    fn multinomial_sampler_moments() {
        let mut r = rng::stream(3, 0);
        let probs = [0.2, 0.5, 0.3];
        let n = 50_000;
        let mut sum = [0.0; 3];
        for _ in 0..n {
            let y = sample_multinomial(10, &probs, &mut r);
            assert_eq!(y.iter().sum::<u64>(), 10);
            for k in 0..3 {
                sum[k] += y[k] as f64;
            }
        }
        for k in 0..3 {
            assert!((sum[k] / n as f64 - 10.0 * probs[k]).abs() < 0.03);
        }
    }

    #[test]
    fn presence_probability_rules() {
        let model = tiny_model(ModelVariant::MsZiarmn);
        let cfg = RunConfig { chains: 1, iterations: 100, burn_in: 50, thin: 1, seed: 2, ..Default::default() };
        let draws = run_gibbs(&model, &PriorSpec::default(), &cfg).unwrap();
        assert_eq!(presence_probability(&model, &draws, 0, 0, 0).unwrap(), 1.0);
        let p = presence_probability(&model, &draws, 1, 0, 1).unwrap();
        assert!((0.0..=1.0).contains(&p));
        let armn = model.with_variant(ModelVariant::Armn);
        assert_eq!(presence_probability(&armn, &draws, 1, 0, 1).unwrap(), 1.0);
    }

    #[test]
    fn constant_and_normal_summaries() {
        let row = summarize_chains("c", &[vec![2.5; 100], vec![2.5; 100]]).unwrap();
        assert_eq!((row.mean, row.lower, row.upper), (2.5, 2.5, 2.5));
        assert!(row.rhat.is_none());
        let mut r = rng::stream(5, 0);
        let z: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut r)).collect();
        let row = summarize_chains("z", &[z]).unwrap();
        assert!((row.lower + 1.96).abs() < 0.03 && (row.upper - 1.96).abs() < 0.03);
        assert!(summarize_chains("e", &[vec![]]).is_err());
    }

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_relative_eq!(quantile(&v, 0.025), 1.075, epsilon = 1e-12);
    }

    #[test]
    fn weighted_average_cases() {
        assert_eq!(presence_weighted_average(&[2.0, 2.0, 2.0], &[true, true, true]), Some(2.0));
        assert_eq!(presence_weighted_average(&[1.0, 5.0], &[false, true]), Some(5.0));
        assert_eq!(presence_weighted_average(&[1.0], &[false]), None);
    }

    #[test]
    fn crossings_interpolate() {
        let c: Vec<CurvePoint> =
            [0.5, 0.8, 1.2, 1.5].iter().enumerate().map(|(k, &m)| CurvePoint { value: k as f64, mean: m, lower: m, upper: m }).collect();
        let x = threshold_crossings(&c, 1.0);
        assert_eq!(x.len(), 1);
        assert_relative_eq!(x[0], 1.5, epsilon = 1e-12);
    }
}
