//! Adaptive random-walk Metropolis kernels.
//!
//! Scales adapt every `interval` proposals with a decaying gain
//! `gamma = 1 / (n + 3)^0.8` (Shaby and Wells); blocked kernels additionally
//! move their proposal covariance toward the empirical covariance of the
//! recent interval. Calling [`freeze`](AdaptiveRwm::freeze) stops all
//! adaptation, after which the kernels are plain Metropolis.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const SCALAR_TARGET: f64 = 0.44;
pub const BLOCK_TARGET: f64 = 0.234;
pub const DEFAULT_INTERVAL: u32 = 50;

/// Metropolis acceptance test `u <= exp(log_ratio)`.
#[inline]
pub fn accept(log_ratio: f64, u: f64) -> bool {
    if log_ratio.is_nan() {
        return false;
    }
    log_ratio >= 0.0 || u <= log_ratio.exp()
}

#[derive(Clone, Debug, PartialEq)]
struct Schedule {
    target: f64,
    interval: u32,
    times: u32,
    batch_accepted: u32,
    batch_proposed: u32,
    adapting: bool,
    accepted: u64,
    proposed: u64,
}

impl Schedule {
    fn new(target: f64) -> Self {
        Self {
            target,
            interval: DEFAULT_INTERVAL,
            times: 0,
            batch_accepted: 0,
            batch_proposed: 0,
            adapting: true,
            accepted: 0,
            proposed: 0,
        }
    }

    /// Records one decision; returns the gain when an adaptation step is due.
    fn record(&mut self, accepted: bool) -> Option<(f64, f64)> {
        self.proposed += 1;
        self.accepted += accepted as u64;
        if !self.adapting {
            return None;
        }
        self.batch_proposed += 1;
        self.batch_accepted += accepted as u32;
        if self.batch_proposed < self.interval {
            return None;
        }
        let rate = self.batch_accepted as f64 / self.batch_proposed as f64;
        let gamma = 1.0 / (self.times as f64 + 3.0).powf(0.8);
        self.times += 1;
        self.batch_accepted = 0;
        self.batch_proposed = 0;
        Some((gamma, rate))
    }
}

/// Acceptance counts of a kernel.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Acceptance {
    pub accepted: u64,
    pub proposed: u64,
}

impl Acceptance {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    pub fn merge(&mut self, other: Acceptance) {
        self.accepted += other.accepted;
        self.proposed += other.proposed;
    }
}

/// Scalar adaptive random-walk Metropolis.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveRwm {
    scale: f64,
    schedule: Schedule,
}

impl AdaptiveRwm {
    pub fn new(scale: f64) -> Self {
        Self { scale, schedule: Schedule::new(SCALAR_TARGET) }
    }

    pub fn with_target(mut self, target: f64) -> Self {
        self.schedule.target = target;
        self
    }

    pub fn with_interval(mut self, interval: u32) -> Self {
        self.schedule.interval = interval.max(1);
        self
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn freeze(&mut self) {
        self.schedule.adapting = false;
    }

    pub fn acceptance(&self) -> Acceptance {
        Acceptance { accepted: self.schedule.accepted, proposed: self.schedule.proposed }
    }

    pub fn propose<R: Rng>(&self, x: f64, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        x + self.scale * z
    }

    /// Accept/reject for a proposal with the given log ratio; adapts the scale.
    pub fn decide<R: Rng>(&mut self, log_ratio: f64, rng: &mut R) -> bool {
        let ok = accept(log_ratio, rng.random::<f64>());
        self.record(ok);
        ok
    }

    fn record(&mut self, ok: bool) {
        if let Some((gamma, rate)) = self.schedule.record(ok) {
            self.scale *= (10.0 * gamma * (rate - self.schedule.target)).exp();
        }
    }

    /// One full update of `x` with current log density `lp`; returns the new
    /// value and its log density.
    pub fn step<R: Rng>(&mut self, x: f64, lp: f64, mut log_density: impl FnMut(f64) -> f64, rng: &mut R) -> (f64, f64) {
        let y = self.propose(x, rng);
        let lq = log_density(y);
        if self.decide(lq - lp, rng) {
            (y, lq)
        } else {
            (x, lp)
        }
    }
}

/// Blocked adaptive random-walk Metropolis with an adapted proposal covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveBlockRwm {
    scale: f64,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    schedule: Schedule,
    sum: DVector<f64>,
    outer: DMatrix<f64>,
    seen: u32,
}

impl AdaptiveBlockRwm {
    /// Identity proposal covariance. The target acceptance is 0.234, or 0.44
    /// for a one-dimensional block.
    pub fn new(dim: usize, scale: f64) -> Self {
        Self::with_covariance(DMatrix::identity(dim, dim), scale)
    }

    pub fn with_covariance(cov: DMatrix<f64>, scale: f64) -> Self {
        let dim = cov.nrows();
        let target = if dim == 1 { SCALAR_TARGET } else { BLOCK_TARGET };
        let chol = cov.clone().cholesky().map(|c| c.l()).unwrap_or_else(|| DMatrix::identity(dim, dim));
        Self {
            scale,
            cov,
            chol,
            schedule: Schedule::new(target),
            sum: DVector::zeros(dim),
            outer: DMatrix::zeros(dim, dim),
            seen: 0,
        }
    }

    pub fn with_interval(mut self, interval: u32) -> Self {
        self.schedule.interval = interval.max(1);
        self
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn freeze(&mut self) {
        self.schedule.adapting = false;
    }

    pub fn acceptance(&self) -> Acceptance {
        Acceptance { accepted: self.schedule.accepted, proposed: self.schedule.proposed }
    }

    /// Writes `x + scale * L z` into `out`.
    pub fn propose<R: Rng>(&self, x: &[f64], rng: &mut R, out: &mut [f64]) {
        let d = self.dim();
        let mut z = [0.0f64; 32];
        let z = if d <= 32 { &mut z[..d] } else { unreachable!("block dimension above 32") };
        for v in z.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        for r in 0..d {
            let mut acc = 0.0;
            for c in 0..=r {
                acc += self.chol[(r, c)] * z[c];
            }
            out[r] = x[r] + self.scale * acc;
        }
    }

    /// Accept/reject; on acceptance copies `proposal` into `current`.
    /// Returns whether the proposal was accepted.
    pub fn decide<R: Rng>(&mut self, log_ratio: f64, proposal: &[f64], current: &mut [f64], rng: &mut R) -> bool {
        let ok = accept(log_ratio, rng.random::<f64>());
        if ok {
            current.copy_from_slice(proposal);
        }
        self.record(ok, current);
        ok
    }

    fn record(&mut self, ok: bool, x: &[f64]) {
        let d = self.dim();
        if self.schedule.adapting && d > 1 {
            for r in 0..d {
                self.sum[r] += x[r];
                for c in 0..d {
                    self.outer[(r, c)] += x[r] * x[c];
                }
            }
            self.seen += 1;
        }
        if let Some((gamma, rate)) = self.schedule.record(ok) {
            self.scale *= (10.0 * gamma * (rate - self.schedule.target)).exp();
            if d > 1 && self.seen > 1 {
                let n = self.seen as f64;
                let mean = &self.sum / n;
                let emp = (&self.outer - &mean * mean.transpose() * n) / (n - 1.0);
                let next = &self.cov + (emp - &self.cov) * gamma;
                if let Some(c) = next.clone().cholesky() {
                    self.chol = c.l();
                    self.cov = next;
                }
            }
            self.sum.fill(0.0);
            self.outer.fill(0.0);
            self.seen = 0;
        }
    }

    /// One full update of `x` in place with current log density `lp`;
    /// returns the new log density.
    pub fn step<R: Rng>(&mut self, x: &mut [f64], lp: f64, mut log_density: impl FnMut(&[f64]) -> f64, rng: &mut R) -> f64 {
        let mut y = vec![0.0; x.len()];
        self.propose(x, rng, &mut y);
        let lq = log_density(&y);
        if self.decide(lq - lp, &y, x, rng) {
            lq
        } else {
            lp
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn ratio_one_accepts_at_half() {
        assert!(accept(0.0, 0.5));
        assert!(!accept(-1.0, 0.5));
        assert!(accept(-0.5, 0.5));
        assert!(!accept(f64::NAN, 0.0));
    }

    #[test]
    fn all_rejections_shrink_scale() {
        let mut k = AdaptiveRwm::new(2.0);
        let mut r = rng::stream(1, 0);
        let mut last = k.scale();
        for n in 1..=500 {
            k.decide(f64::NEG_INFINITY, &mut r);
            if n % DEFAULT_INTERVAL as usize == 0 {
                assert!(k.scale() < last);
                last = k.scale();
            } else {
                assert_eq!(k.scale(), last);
            }
        }
    }

    #[test]
    fn frozen_kernel_keeps_scale() {
        let mut k = AdaptiveRwm::new(1.0);
        k.freeze();
        let mut r = rng::stream(1, 0);
        for _ in 0..200 {
            k.decide(f64::NEG_INFINITY, &mut r);
        }
        assert_eq!(k.scale(), 1.0);
        assert_eq!(k.acceptance().proposed, 200);
    }

    #[test]
    fn standard_normal_target() {
        let mut k = AdaptiveRwm::new(0.1);
        let mut r = rng::stream(3, 0);
        let lp = |x: f64| -0.5 * x * x;
        let (mut x, mut l) = (3.0, lp(3.0));
        for _ in 0..5_000 {
            (x, l) = k.step(x, l, lp, &mut r);
        }
        k.freeze();
        let n = 200_000;
        let (mut s, mut ss) = (0.0, 0.0);
        for _ in 0..n {
            (x, l) = k.step(x, l, lp, &mut r);
            s += x;
            ss += x * x;
        }
        let mean = s / n as f64;
        let var = ss / n as f64 - mean * mean;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
        let rate = k.acceptance().rate();
        assert!((rate - 0.44).abs() < 0.1, "rate {rate}");
    }

    #[test]
    fn bivariate_normal_target() {
        let rho: f64 = 0.8;
        let det = 1.0 - rho * rho;
        let lp = |x: &[f64]| -0.5 * (x[0] * x[0] - 2.0 * rho * x[0] * x[1] + x[1] * x[1]) / det;
        let mut k = AdaptiveBlockRwm::new(2, 0.5);
        let mut r = rng::stream(4, 0);
        let mut x = vec![2.0, -2.0];
        let mut l = lp(&x);
        for _ in 0..10_000 {
            l = k.step(&mut x, l, lp, &mut r);
        }
        k.freeze();
        let n = 200_000;
        let mut m = [0.0; 2];
        let mut c = [0.0; 3];
        for _ in 0..n {
            l = k.step(&mut x, l, lp, &mut r);
            m[0] += x[0];
            m[1] += x[1];
            c[0] += x[0] * x[0];
            c[1] += x[0] * x[1];
            c[2] += x[1] * x[1];
        }
        let nf = n as f64;
        assert!((m[0] / nf).abs() < 0.05 && (m[1] / nf).abs() < 0.05);
        assert!((c[0] / nf - 1.0).abs() < 0.1 && (c[2] / nf - 1.0).abs() < 0.1);
        assert!((c[1] / nf - rho).abs() < 0.1);
        // learned proposal covariance should carry the target correlation
        let cv = k.covariance();
        assert!(cv[(0, 1)] / (cv[(0, 0)] * cv[(1, 1)]).sqrt() > 0.5);
    }

    #[test]
    fn one_dimensional_block_matches_scalar() {
        let lp = |x: f64| -0.5 * (x - 1.0).powi(2) / 4.0;
        let mut a = AdaptiveRwm::new(0.3);
        let mut b = AdaptiveBlockRwm::new(1, 0.3);
        let mut ra = rng::stream(9, 0);
        let mut rb = rng::stream(9, 0);
        let (mut xa, mut la) = (0.0, lp(0.0));
        let mut xb = [0.0];
        let mut lb = lp(0.0);
        for _ in 0..3_000 {
            (xa, la) = a.step(xa, la, lp, &mut ra);
            lb = b.step(&mut xb, lb, |v| lp(v[0]), &mut rb);
            assert_eq!(xa.to_bits(), xb[0].to_bits());
        }
        assert_eq!(a.scale().to_bits(), b.scale().to_bits());
        let _ = (la, lb);
    }
}
