//! Inverse-Wishart sampling and the conjugate covariance update.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

/// Draw from `IW(df, scale)` (mean `scale / (df - p - 1)`), via the Bartlett
/// decomposition of the matching Wishart on the precision.
///
/// Returns the draw and the number of jitter retries needed to make it
/// numerically positive definite.
pub fn sample_inverse_wishart<R: Rng>(df: f64, scale: &DMatrix<f64>, rng: &mut R) -> (DMatrix<f64>, u32) {
    let p = scale.nrows();
    assert!(df > p as f64 - 1.0, "inverse-Wishart df must exceed p - 1");
    let scale_inv = scale.clone().try_inverse().expect("scale matrix must be invertible");
    let l = scale_inv
        .cholesky()
        .expect("scale matrix must be positive definite")
        .l();
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(df - i as f64).expect("valid degrees of freedom");
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    let la = l * a;
    let w = &la * la.transpose();
    let mut sigma = w.try_inverse().unwrap_or_else(|| DMatrix::identity(p, p));
    sigma = (&sigma + sigma.transpose()) * 0.5;
    let mut retries = 0;
    while sigma.clone().cholesky().is_none() {
        retries += 1;
        let jitter = 1e-10 * 10f64.powi(retries as i32) * sigma.diagonal().abs().max().max(1e-300);
        for i in 0..p {
            sigma[(i, i)] += jitter;
        }
        if retries > 20 {
            break;
        }
    }
    (sigma, retries)
}

/// Conjugate update of a covariance matrix given zero-mean observations
/// stored row-wise in `obs` (`n` rows of length `p`): `IW(df + n, scale + sum x x')`.
pub fn conjugate_update<R: Rng>(obs: &[f64], p: usize, df: f64, scale: &DMatrix<f64>, rng: &mut R) -> (DMatrix<f64>, u32) {
    let n = obs.len() / p;
    let mut s = scale.clone();
    for row in obs.chunks(p) {
        for a in 0..p {
            for b in 0..p {
                s[(a, b)] += row[a] * row[b];
            }
        }
    }
    sample_inverse_wishart(df + n as f64, &s, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use statrs::distribution::{ContinuousCDF, Gamma};

    #[test]
    fn moments_match_closed_form() {
        let p = 2;
        let df = 14.0;
        let psi = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let mut r = rng::stream(11, 0);
        let n = 200_000;
        let mut mean = DMatrix::zeros(2, 2);
        let mut sq = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let (s, _) = sample_inverse_wishart(df, &psi, &mut r);
            mean += &s;
            sq += s.component_mul(&s);
        }
        mean /= n as f64;
        sq /= n as f64;
        let k = df - p as f64;
        for i in 0..2 {
            for j in 0..2 {
                let m = psi[(i, j)] / (k - 1.0);
                let v = ((k + 1.0) * psi[(i, j)].powi(2) + (k - 1.0) * psi[(i, i)] * psi[(j, j)])
                    / (k * (k - 1.0).powi(2) * (k - 3.0));
                let se = (v / n as f64).sqrt();
                assert!((mean[(i, j)] - m).abs() < 4.0 * se, "mean ({i},{j}) {} vs {m}", mean[(i, j)]);
                let var = sq[(i, j)] - mean[(i, j)].powi(2);
                assert!((var - v).abs() / v < 0.1, "var ({i},{j}) {var} vs {v}");
            }
        }
    }

    #[test]
    fn scalar_case_is_inverse_gamma() {
        // IW(df, psi) in one dimension is inverse-gamma(df / 2, psi / 2)
        let (df, psi) = (7.0, 3.0);
        let mut r = rng::stream(2, 0);
        let n = 100_000;
        let g = Gamma::new(df / 2.0, psi / 2.0).unwrap();
        // P(sigma2 <= x) = P(1 / sigma2 >= 1 / x)
        let x = 0.5;
        let want = 1.0 - g.cdf(1.0 / x);
        let hits = (0..n)
            .filter(|_| sample_inverse_wishart(df, &DMatrix::from_element(1, 1, psi), &mut r).0[(0, 0)] <= x)
            .count();
        let got = hits as f64 / n as f64;
        assert!((got - want).abs() < 4.0 * (want * (1.0 - want) / n as f64).sqrt(), "{got} vs {want}");
    }

    #[test]
    fn zero_observations_give_shifted_df() {
        // zero data leaves the scale at the prior and adds n to df
        let p = 2;
        let n_obs = 30;
        let obs = vec![0.0; n_obs * p];
        let prior_df = 3.0;
        let scale = DMatrix::identity(2, 2);
        let mut r1 = rng::stream(5, 0);
        let mut r2 = rng::stream(5, 0);
        for _ in 0..20 {
            let (a, _) = conjugate_update(&obs, p, prior_df, &scale, &mut r1);
            let (b, _) = sample_inverse_wishart(prior_df + n_obs as f64, &scale, &mut r2);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn posterior_mean_tracks_sample_covariance() {
        let truth = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.8]);
        let l = truth.clone().cholesky().unwrap().l();
        let mut r = rng::stream(8, 0);
        let n = 20_000;
        let mut obs = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let z = nalgebra::DVector::from_fn(2, |_, _| StandardNormal.sample(&mut r));
            let x = &l * z;
            obs.extend_from_slice(x.as_slice());
        }
        let mut mean = DMatrix::zeros(2, 2);
        for _ in 0..200 {
            mean += conjugate_update(&obs, 2, 3.0, &DMatrix::identity(2, 2), &mut r).0;
        }
        mean /= 200.0;
        assert!((mean - truth).abs().max() < 0.03);
    }
}
