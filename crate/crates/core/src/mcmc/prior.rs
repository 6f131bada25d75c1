//! Prior specification.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalPrior {
    pub mean: f64,
    pub sd: f64,
}

impl NormalPrior {
    pub const fn new(mean: f64, sd: f64) -> Self {
        Self { mean, sd }
    }

    #[inline]
    pub fn log_density(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sd;
        -0.5 * z * z
    }
}

impl Default for NormalPrior {
    fn default() -> Self {
        Self::new(0.0, 10.0)
    }
}

/// Prior on the random-intercept standard deviations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScalePrior {
    /// Half-normal on the sd, updated by random-walk Metropolis on `log sd`.
    HalfNormal { sd: f64 },
    /// Inverse-gamma on the variance, updated by its conjugate full conditional.
    InverseGammaVariance { shape: f64, rate: f64 },
}

impl ScalePrior {
    /// Log density of the sd itself (up to a constant).
    pub fn log_density_sd(&self, sd: f64) -> f64 {
        if !(sd > 0.0) {
            return f64::NEG_INFINITY;
        }
        match *self {
            ScalePrior::HalfNormal { sd: s } => -0.5 * (sd / s).powi(2),
            ScalePrior::InverseGammaVariance { shape, rate } => {
                let v = sd * sd;
                // density of v times |dv / dsd|
                -(shape + 1.0) * v.ln() - rate / v + sd.ln()
            }
        }
    }

    pub fn mean_sd(&self) -> f64 {
        match *self {
            ScalePrior::HalfNormal { sd } => sd * (2.0 / std::f64::consts::PI).sqrt(),
            ScalePrior::InverseGammaVariance { shape, rate } => {
                (rate.sqrt()) * statrs::function::gamma::gamma(shape - 0.5) / statrs::function::gamma::gamma(shape)
            }
        }
    }
}

impl Default for ScalePrior {
    fn default() -> Self {
        ScalePrior::HalfNormal { sd: 5.0 }
    }
}

/// Priors of every parameter class. `zeta` is uniform on `(0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSpec {
    pub alpha0: NormalPrior,
    pub alpha: NormalPrior,
    pub eta0: NormalPrior,
    pub eta: NormalPrior,
    pub rho_ar: NormalPrior,
    pub rho_di: NormalPrior,
    pub sigma: ScalePrior,
    /// Inverse-Wishart degrees of freedom; defaults to the number of diseases.
    pub cov_df: Option<f64>,
    /// Inverse-Wishart scale as a row-major list; defaults to the identity.
    pub cov_scale: Option<Vec<Vec<f64>>>,
    /// Initial presence probabilities of the non-baseline diseases; default 0.5.
    pub initial_presence: Option<Vec<f64>>,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            alpha0: NormalPrior::default(),
            alpha: NormalPrior::default(),
            eta0: NormalPrior::default(),
            eta: NormalPrior::default(),
            rho_ar: NormalPrior::default(),
            rho_di: NormalPrior::default(),
            sigma: ScalePrior::default(),
            cov_df: None,
            cov_scale: None,
            initial_presence: None,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("invalid prior: {0}")]
pub struct PriorError(pub String);

impl PriorSpec {
    pub fn cov_df(&self, n_diseases: usize) -> f64 {
        self.cov_df.unwrap_or(n_diseases as f64)
    }

    pub fn cov_scale(&self, m: usize) -> DMatrix<f64> {
        match &self.cov_scale {
            Some(rows) => DMatrix::from_fn(m, m, |r, c| rows[r][c]),
            None => DMatrix::identity(m, m),
        }
    }

    pub fn initial_presence(&self, m: usize) -> Vec<f64> {
        self.initial_presence.clone().unwrap_or_else(|| vec![0.5; m])
    }

    pub fn validate(&self, n_diseases: usize) -> Result<(), PriorError> {
        let m = n_diseases - 1;
        for (name, p) in [
            ("alpha0", self.alpha0),
            ("alpha", self.alpha),
            ("eta0", self.eta0),
            ("eta", self.eta),
            ("rho_ar", self.rho_ar),
            ("rho_di", self.rho_di),
        ] {
            if !(p.sd > 0.0 && p.sd.is_finite() && p.mean.is_finite()) {
                return Err(PriorError(format!("{name} needs a finite mean and positive sd")));
            }
        }
        match self.sigma {
            ScalePrior::HalfNormal { sd } if !(sd > 0.0) => return Err(PriorError("sigma half-normal sd must be positive".into())),
            ScalePrior::InverseGammaVariance { shape, rate } if !(shape > 0.0 && rate > 0.0) => {
                return Err(PriorError("sigma inverse-gamma shape and rate must be positive".into()))
            }
            _ => {}
        }
        let df = self.cov_df(n_diseases);
        if !(df > m as f64 - 1.0) {
            return Err(PriorError(format!("inverse-Wishart df {df} must exceed {}", m as f64 - 1.0)));
        }
        if let Some(rows) = &self.cov_scale {
            if rows.len() != m || rows.iter().any(|r| r.len() != m) {
                return Err(PriorError(format!("inverse-Wishart scale must be {m} x {m}")));
            }
            let s = self.cov_scale(m);
            if (&s - s.transpose()).abs().max() > 1e-12 || s.cholesky().is_none() {
                return Err(PriorError("inverse-Wishart scale must be symmetric positive definite".into()));
            }
        }
        if let Some(q) = &self.initial_presence {
            if q.len() != m || q.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(PriorError(format!("initial presence needs {m} probabilities in [0, 1]")));
            }
        }
        Ok(())
    }
}
