//! Forward filtering, backward sampling and smoothing of presence states.
//!
//! Areas are conditionally independent given the parameters, so each area is
//! filtered on its own and the per-area log-likelihoods are summed in index
//! order. Probabilities are renormalized at every step and emissions enter as
//! `exp(e - max e)`, which keeps long series with large totals in range.

use rand::Rng;
use thiserror::Error;

use crate::model::{Model, ParameterState, StateSequence};
use crate::par::{self, Execution};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FfbsError {
    #[error("no presence state can produce the counts at area {area}, time {time}")]
    ImpossibleCell { area: usize, time: usize },
    #[error("{paths} state paths exceed the enumeration limit of {limit}")]
    TooManyPaths { paths: f64, limit: usize },
}

pub const ENUMERATION_LIMIT: usize = 1_000_000;

/// Filter output for one area.
#[derive(Clone, Debug)]
pub struct AreaFilter {
    n_states: usize,
    /// `pred[t * S + l] = P(S_t = l | y_{<t})`; at `t = 0` the initial distribution.
    pub pred: Vec<f64>,
    /// `filt[t * S + l] = P(S_t = l | y_{<=t})`.
    pub filt: Vec<f64>,
    /// `log p(y_t | y_{<t})`; the `t = 0` entry is the log-probability that
    /// the initial state is compatible with the first counts.
    pub log_marginal: Vec<f64>,
    /// Transition matrices, `trans[(t * S + prev) * S + next]`, unused at `t = 0`.
    pub trans: Vec<f64>,
}

impl AreaFilter {
    pub fn n_times(&self) -> usize {
        self.log_marginal.len()
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn filtered(&self, t: usize) -> &[f64] {
        &self.filt[t * self.n_states..(t + 1) * self.n_states]
    }

    pub fn predicted(&self, t: usize) -> &[f64] {
        &self.pred[t * self.n_states..(t + 1) * self.n_states]
    }

    #[inline]
    fn gamma(&self, t: usize, prev: usize, next: usize) -> f64 {
        self.trans[(t * self.n_states + prev) * self.n_states + next]
    }

    /// Area log-likelihood.
    pub fn loglik(&self) -> f64 {
        self.log_marginal.iter().sum()
    }
}

/// Filter output for the whole panel.
#[derive(Clone, Debug)]
pub struct FilterResult {
    pub areas: Vec<AreaFilter>,
    pub loglik: f64,
}

impl FilterResult {
    /// `log p(y_it | y_{i,<t})` for `t >= 1`.
    pub fn cell_loglik(&self, i: usize, t: usize) -> f64 {
        self.areas[i].log_marginal[t]
    }

    /// Per-cell log marginals in `(i, t >= 1)` order.
    pub fn cell_logliks(&self) -> Vec<f64> {
        self.areas.iter().flat_map(|a| a.log_marginal[1..].iter().copied()).collect()
    }
}

fn categorical<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (l, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = l;
            if u < acc {
                return l;
            }
        }
    }
    last
}

/// Runs the filter for area `i`.
pub fn filter_area(model: &Model, p: &ParameterState, i: usize) -> Result<AreaFilter, FfbsError> {
    let s = model.n_states();
    let nt = model.panel().n_times();
    let mut pred = vec![0.0; nt * s];
    let mut filt = vec![0.0; nt * s];
    let mut log_marginal = vec![0.0; nt];
    let mut trans = vec![0.0; nt * s * s];
    let mut e = vec![0.0; s];

    let q = model.initial_presence_distribution(p);
    pred[..s].copy_from_slice(&q);
    let mut c = 0.0;
    for l in 0..s {
        let w = if model.allowed(i, 0, l) { q[l] } else { 0.0 };
        filt[l] = w;
        c += w;
    }
    if !(c > 0.0) {
        return Err(FfbsError::ImpossibleCell { area: i + 1, time: 1 });
    }
    filt[..s].iter_mut().for_each(|v| *v /= c);
    log_marginal[0] = c.ln();

    for t in 1..nt {
        let g = &mut trans[t * s * s..(t + 1) * s * s];
        model.log_transition(p, i, t, g);
        g.iter_mut().for_each(|v| *v = v.exp());
        let (prev_filt, rest) = filt.split_at_mut(t * s);
        let prev_filt = &prev_filt[(t - 1) * s..];
        let cur_pred = &mut pred[t * s..(t + 1) * s];
        for (l, cp) in cur_pred.iter_mut().enumerate() {
            *cp = (0..s).map(|j| prev_filt[j] * g[j * s + l]).sum();
        }
        model.emission_all(p, i, t, &mut e);
        let max = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(FfbsError::ImpossibleCell { area: i + 1, time: t + 1 });
        }
        let cur = &mut rest[..s];
        let mut c = 0.0;
        for l in 0..s {
            let w = cur_pred[l] * (e[l] - max).exp();
            cur[l] = w;
            c += w;
        }
        if !(c > 0.0) {
            return Err(FfbsError::ImpossibleCell { area: i + 1, time: t + 1 });
        }
        cur.iter_mut().for_each(|v| *v /= c);
        log_marginal[t] = c.ln() + max;
    }
    Ok(AreaFilter { n_states: s, pred, filt, log_marginal, trans })
}

/// Filters every area. Errors report the lowest-indexed failing area.
pub fn forward_filter(model: &Model, p: &ParameterState, mode: Execution) -> Result<FilterResult, FfbsError> {
    let results = par::map_indexed(model.panel().n_areas(), mode, |i| filter_area(model, p, i));
    let mut areas = Vec::with_capacity(results.len());
    let mut loglik = 0.0;
    for r in results {
        let a = r?;
        loglik += a.loglik();
        areas.push(a);
    }
    Ok(FilterResult { areas, loglik })
}

/// Marginal log-likelihood of the counts with the presence states summed out.
pub fn marginal_loglik(model: &Model, p: &ParameterState, mode: Execution) -> Result<f64, FfbsError> {
    let terms = par::map_indexed(model.panel().n_areas(), mode, |i| filter_area(model, p, i).map(|a| a.loglik()));
    let mut acc = 0.0;
    for t in terms {
        acc += t?;
    }
    Ok(acc)
}

/// Draws one area's state path jointly from its posterior.
pub fn backward_sample<R: Rng>(filter: &AreaFilter, rng: &mut R) -> Vec<usize> {
    let (s, nt) = (filter.n_states, filter.n_times());
    let mut path = vec![0; nt];
    path[nt - 1] = categorical(filter.filtered(nt - 1), rng);
    let mut w = vec![0.0; s];
    for t in (0..nt - 1).rev() {
        let next = path[t + 1];
        let f = filter.filtered(t);
        for l in 0..s {
            w[l] = f[l] * filter.gamma(t + 1, l, next);
        }
        path[t] = categorical(&w, rng);
    }
    path
}

/// Draws all areas' paths; area `i` uses stream `i` of `seed`.
pub fn backward_sample_all(model: &Model, result: &FilterResult, seed: u64, mode: Execution) -> StateSequence {
    let (n, nt) = (model.panel().n_areas(), model.panel().n_times());
    let mut states = StateSequence::all_present(n, nt, model.m());
    if model.n_states() == 1 {
        return states;
    }
    let paths = par::map_indexed(n, mode, |i| {
        let mut r = rng::stream(seed, i as u64);
        backward_sample(&result.areas[i], &mut r)
    });
    for (i, path) in paths.into_iter().enumerate() {
        for (t, code) in path.into_iter().enumerate() {
            states.set_code(i, t, code);
        }
    }
    states
}

/// `P(S_t = l | y_{1:T})` for one area, laid out `[t * S + l]`.
pub fn smoothed_marginals(filter: &AreaFilter) -> Vec<f64> {
    let (s, nt) = (filter.n_states, filter.n_times());
    let mut out = vec![0.0; nt * s];
    out[(nt - 1) * s..].copy_from_slice(filter.filtered(nt - 1));
    for t in (0..nt - 1).rev() {
        let f = filter.filtered(t);
        let pred = filter.predicted(t + 1);
        let mut ratio = vec![0.0; s];
        for j in 0..s {
            let sm = out[(t + 1) * s + j];
            ratio[j] = if sm > 0.0 { sm / pred[j] } else { 0.0 };
        }
        let mut c = 0.0;
        for l in 0..s {
            let v = f[l] * (0..s).map(|j| filter.gamma(t + 1, l, j) * ratio[j]).sum::<f64>();
            out[t * s + l] = v;
            c += v;
        }
        out[t * s..(t + 1) * s].iter_mut().for_each(|v| *v /= c);
    }
    out
}

/// Exact posterior over all state paths of one area, by direct summation.
#[derive(Clone, Debug)]
pub struct PathPosterior {
    pub n_states: usize,
    pub n_times: usize,
    /// Normalized path probabilities; path index is base-`S` with `t = 0`
    /// as the most significant digit.
    pub probs: Vec<f64>,
    pub log_marginal: f64,
}

impl PathPosterior {
    pub fn path(&self, index: usize) -> Vec<usize> {
        decode_path(index, self.n_states, self.n_times)
    }

    /// Posterior marginals `[t * S + l]`.
    pub fn marginals(&self) -> Vec<f64> {
        let s = self.n_states;
        let mut out = vec![0.0; self.n_times * s];
        for (idx, &pr) in self.probs.iter().enumerate() {
            for (t, l) in self.path(idx).into_iter().enumerate() {
                out[t * s + l] += pr;
            }
        }
        out
    }

    /// Distribution over the sub-path at times `1..T`, indexed like
    /// [`path_index`] on that sub-path.
    pub fn tail_distribution(&self) -> Vec<f64> {
        let tail = self.n_states.pow(self.n_times as u32 - 1);
        let mut out = vec![0.0; tail];
        for (idx, &pr) in self.probs.iter().enumerate() {
            out[idx % tail] += pr;
        }
        out
    }
}

pub fn path_index(path: &[usize], n_states: usize) -> usize {
    path.iter().fold(0, |acc, &l| acc * n_states + l)
}

fn decode_path(mut index: usize, n_states: usize, len: usize) -> Vec<usize> {
    let mut out = vec![0; len];
    for t in (0..len).rev() {
        out[t] = index % n_states;
        index /= n_states;
    }
    out
}

fn enumerate_prefix(model: &Model, p: &ParameterState, i: usize, len: usize) -> Result<(Vec<f64>, f64), FfbsError> {
    let s = model.n_states();
    let paths = (s as f64).powi(len as i32);
    if paths > ENUMERATION_LIMIT as f64 {
        return Err(FfbsError::TooManyPaths { paths, limit: ENUMERATION_LIMIT });
    }
    let n = paths as usize;
    let logs: Vec<f64> = (0..n).map(|idx| model.area_path_loglik(p, i, &decode_path(idx, s, len))).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(FfbsError::ImpossibleCell { area: i + 1, time: len });
    }
    let total: f64 = logs.iter().map(|l| (l - max).exp()).sum();
    let probs = logs.iter().map(|l| (l - max).exp() / total).collect();
    Ok((probs, max + total.ln()))
}

/// Enumerates every state path of area `i`.
pub fn enumerate_posterior(model: &Model, p: &ParameterState, i: usize) -> Result<PathPosterior, FfbsError> {
    let nt = model.panel().n_times();
    let (probs, log_marginal) = enumerate_prefix(model, p, i, nt)?;
    Ok(PathPosterior { n_states: model.n_states(), n_times: nt, probs, log_marginal })
}

/// Filtered marginals `[t * S + l]` and per-time log marginals of area `i`,
/// computed by enumerating every prefix path.
pub fn enumerate_filtered(model: &Model, p: &ParameterState, i: usize) -> Result<(Vec<f64>, Vec<f64>), FfbsError> {
    let s = model.n_states();
    let nt = model.panel().n_times();
    let mut filt = vec![0.0; nt * s];
    let mut marg = vec![0.0; nt];
    let mut prev = 0.0;
    for len in 1..=nt {
        let (probs, lm) = enumerate_prefix(model, p, i, len)?;
        for (idx, pr) in probs.iter().enumerate() {
            filt[(len - 1) * s + idx % s] += pr;
        }
        marg[len - 1] = lm - prev;
        prev = lm;
    }
    Ok((filt, marg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CovariateBundle, CovariateSeries, DiseasePanel};
    use crate::model::{logit, ModelVariant};
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    pub(crate) fn random_setting(seed: u64, n: usize, nt: usize, variant: ModelVariant) -> (Model, ParameterState) {
        use rand::Rng;
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let counts: Vec<u64> = (0..3 * n * nt)
            .map(|_| if r.random::<f64>() < 0.4 { 0 } else { r.random_range(0..6) })
            .collect();
        let panel = DiseasePanel::with_default_labels(3, n, nt, counts).unwrap();
        let zc = CovariateSeries::from_fn("z", n, nt, |i, t| ((i * 7 + t * 3) as f64).cos()).unwrap();
        let xc = CovariateSeries::from_fn("x", n, nt, |i, t| ((i * 5 + t) as f64).sin()).unwrap();
        let cov = CovariateBundle::new(&panel, vec![vec![xc.clone()], vec![xc]], vec![vec![zc.clone()], vec![zc]], &[], &[]).unwrap();
        let model = Model::new(panel, cov, variant).unwrap();
        let mut p = ParameterState::neutral(model.dims());
        let mut g = |a: f64| r.random_range(-a..a);
        p.zeta_logit = vec![g(2.0), g(2.0), g(2.0)];
        p.alpha0_area.iter_mut().for_each(|v| *v = g(1.5));
        p.alpha.iter_mut().for_each(|v| *v = g(1.0));
        p.phi.iter_mut().for_each(|v| *v = g(1.0));
        p.eta0 = vec![g(2.0), g(2.0)];
        p.eta = vec![g(1.0), g(1.0)];
        p.rho_ar = vec![g(3.0), g(3.0)];
        p.rho_di = vec![0.0, g(2.0), g(2.0), 0.0];
        p.initial_presence = vec![r.random_range(0.05..0.95), r.random_range(0.05..0.95)];
        (model, p)
    }

    #[test]
    fn filter_matches_enumeration() {
        for seed in 0..10 {
            let (model, p) = random_setting(seed, 1, 5, ModelVariant::MsZiarmn);
            let f = filter_area(&model, &p, 0).unwrap();
            let (filt, marg) = enumerate_filtered(&model, &p, 0).unwrap();
            for (a, b) in f.filt.iter().zip(&filt) {
                assert!((a - b).abs() < 1e-10, "seed {seed}: {a} vs {b}");
            }
            for (a, b) in f.log_marginal.iter().zip(&marg) {
                assert!((a - b).abs() < 1e-10);
            }
            let post = enumerate_posterior(&model, &p, 0).unwrap();
            assert!((f.loglik() - post.log_marginal).abs() < 1e-10);
            for (a, b) in smoothed_marginals(&f).iter().zip(post.marginals()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn enumeration_two_times() {
        let (model, p) = random_setting(3, 1, 2, ModelVariant::MsZiarmn);
        let post = enumerate_posterior(&model, &p, 0).unwrap();
        assert_eq!(post.probs.len(), 16);
        assert_relative_eq!(post.probs.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn enumeration_guard() {
        let (model, p) = random_setting(3, 1, 11, ModelVariant::MsZiarmn);
        assert!(matches!(enumerate_posterior(&model, &p, 0), Err(FfbsError::TooManyPaths { .. })));
    }

    #[test]
    fn backward_sampling_matches_enumeration() {
        let (model, p) = random_setting(11, 1, 4, ModelVariant::MsZiarmn);
        let f = filter_area(&model, &p, 0).unwrap();
        let post = enumerate_posterior(&model, &p, 0).unwrap();
        let exact = post.tail_distribution();
        let mut counts = vec![0usize; exact.len()];
        let mut r = rng::stream(5, 0);
        let draws = 200_000;
        for _ in 0..draws {
            let path = backward_sample(&f, &mut r);
            counts[path_index(&path[1..], 4)] += 1;
        }
        let tv: f64 = counts.iter().zip(&exact).map(|(&c, &e)| (c as f64 / draws as f64 - e).abs()).sum::<f64>() / 2.0;
        assert!(tv < 0.01, "tv {tv}");
    }

    #[test]
    fn fully_observed_cells_force_state_one() {
        let panel = DiseasePanel::with_default_labels(3, 1, 4, vec![1; 12]).unwrap();
        let model = Model::new(panel.clone(), CovariateBundle::empty(&panel), ModelVariant::MsZiarmn).unwrap();
        let p = ParameterState::neutral(model.dims());
        let f = filter_area(&model, &p, 0).unwrap();
        for t in 0..4 {
            assert_eq!(f.filtered(t)[0], 1.0);
        }
        let mut r = rng::stream(1, 0);
        for _ in 0..100 {
            assert!(backward_sample(&f, &mut r).iter().all(|&c| c == 0));
        }
    }

    #[test]
    fn degenerate_chain_gives_one_hot_filter() {
        let panel = DiseasePanel::with_default_labels(3, 1, 4, vec![0; 12]).unwrap();
        let model = Model::new(panel.clone(), CovariateBundle::empty(&panel), ModelVariant::Zeng).unwrap();
        let mut p = ParameterState::neutral(model.dims());
        p.eta0 = vec![800.0, 800.0];
        p.initial_presence = vec![1.0, 1.0];
        let f = filter_area(&model, &p, 0).unwrap();
        for t in 0..4 {
            assert_eq!(f.filtered(t), &[1.0, 0.0, 0.0, 0.0]);
        }
        let mut r = rng::stream(1, 0);
        assert_eq!(backward_sample(&f, &mut r), vec![0; 4]);
    }

    #[test]
    fn impossible_cell_reported() {
        let panel = DiseasePanel::with_default_labels(3, 2, 3, vec![0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 2, 0, 0, 0, 0]).unwrap();
        let model = Model::new(panel.clone(), CovariateBundle::empty(&panel), ModelVariant::MsZiarmn).unwrap();
        let mut p = ParameterState::neutral(model.dims());
        p.initial_presence = vec![0.0, 0.5];
        p.eta0 = vec![f64::NEG_INFINITY, 0.0];
        // area 2, time 2 has a positive count for a disease that can never be present
        assert_eq!(
            forward_filter(&model, &p, Execution::Sequential).unwrap_err(),
            FfbsError::ImpossibleCell { area: 2, time: 2 }
        );
    }

    #[test]
    fn armn_marginal_equals_emission_sum() {
        let (model, p) = random_setting(4, 3, 6, ModelVariant::Armn);
        let states = StateSequence::all_present(3, 6, 2);
        let ml = marginal_loglik(&model, &p, Execution::Sequential).unwrap();
        assert_relative_eq!(ml, model.emission_loglik(&p, &states), epsilon = 1e-10);
        assert_relative_eq!(ml, model.complete_data_loglik(&p, &states), epsilon = 1e-10);
    }

    #[test]
    fn duplicated_area_doubles_contribution() {
        let (model, p) = random_setting(8, 1, 6, ModelVariant::MsZiarmn);
        let one = marginal_loglik(&model, &p, Execution::Sequential).unwrap();
        let panel2 = DiseasePanel::with_default_labels(3, 2, 6, model.panel().counts().repeat(2)).unwrap();
        let cov2 = model.covariates().select_areas(&[0, 0]);
        let model2 = Model::new(panel2, cov2, ModelVariant::MsZiarmn).unwrap();
        let mut p2 = ParameterState::neutral(model2.dims());
        p2.zeta_logit = p.zeta_logit.clone();
        p2.alpha0_area = vec![p.alpha0_area[0], p.alpha0_area[0], p.alpha0_area[1], p.alpha0_area[1]];
        p2.alpha = p.alpha.clone();
        p2.phi = [p.phi.clone(), p.phi.clone()].concat();
        p2.eta0 = p.eta0.clone();
        p2.eta = p.eta.clone();
        p2.rho_ar = p.rho_ar.clone();
        p2.rho_di = p.rho_di.clone();
        p2.initial_presence = p.initial_presence.clone();
        let two = marginal_loglik(&model2, &p2, Execution::Parallel).unwrap();
        assert_relative_eq!(two, 2.0 * one, epsilon = 1e-10);
    }

    #[test]
    fn area_permutation_invariance() {
        let (model, p) = random_setting(21, 3, 5, ModelVariant::MsZiarmn);
        let perm = [2usize, 0, 1];
        let panel = model.panel().select_areas(&perm).unwrap();
        let cov = model.covariates().select_areas(&perm);
        let m2 = Model::new(panel, cov, ModelVariant::MsZiarmn).unwrap();
        let mut p2 = p.clone();
        let n = 3;
        for d in 0..2 {
            for (a, &old) in perm.iter().enumerate() {
                p2.alpha0_area[d * n + a] = p.alpha0_area[d * n + old];
            }
        }
        let per = 4 * 2;
        p2.phi = perm.iter().flat_map(|&old| p.phi[old * per..(old + 1) * per].to_vec()).collect();
        let f1 = forward_filter(&model, &p, Execution::Sequential).unwrap();
        let f2 = forward_filter(&m2, &p2, Execution::Parallel).unwrap();
        for (a, &old) in perm.iter().enumerate() {
            for (x, y) in f2.areas[a].filt.iter().zip(&f1.areas[old].filt) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zeng_filter_has_no_memory() {
        // two histories that agree at time t give the same filtered distribution at t
        let mk = |first: u64| {
            let counts = vec![1, first, 0, 2, 0, 0, 3, 0, 1];
            let panel = DiseasePanel::with_default_labels(3, 1, 3, counts).unwrap();
            Model::new(panel.clone(), CovariateBundle::empty(&panel), ModelVariant::Zeng).unwrap()
        };
        let (a, b) = (mk(0), mk(4));
        let mut p = ParameterState::neutral(a.dims());
        p.eta0 = vec![0.3, -0.6];
        p.zeta_logit = vec![-30.0, -30.0, -30.0];
        let fa = filter_area(&a, &p, 0).unwrap();
        let fb = filter_area(&b, &p, 0).unwrap();
        for (x, y) in fa.filtered(2).iter().zip(fb.filtered(2)) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn marginal_loglik_is_continuous() {
        let (model, mut p) = random_setting(2, 2, 5, ModelVariant::MsZiarmn);
        let base = marginal_loglik(&model, &p, Execution::Sequential).unwrap();
        p.alpha[0] += 1e-6;
        let moved = marginal_loglik(&model, &p, Execution::Sequential).unwrap();
        assert!((moved - base).abs() < 1e-4);
        p.eta0[1] = logit(0.3);
        assert!(marginal_loglik(&model, &p, Execution::Sequential).unwrap().is_finite());
    }
}
