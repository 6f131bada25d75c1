//! Run configuration file.
//!
//! Precedence, lowest to highest: built-in defaults, the configuration file,
//! command-line flags. Relative paths are resolved against the directory of
//! the configuration file.

use std::path::{Path, PathBuf};

use msziarmn::data::ModelPart;
use msziarmn::mcmc::{PriorSpec, RunConfig};
use msziarmn::model::ModelVariant;
use msziarmn::simulate::Totals;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    #[serde(default = "default_variant")]
    pub variant: ModelVariant,
    pub output_dir: Option<PathBuf>,
    pub data: Option<DataFiles>,
    #[serde(default)]
    pub covariates: Vec<CovariateDecl>,
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default)]
    pub sampler: RunConfig,
    #[serde(default)]
    pub report: Report,
    pub simulate: Option<Simulation>,
}

fn default_variant() -> ModelVariant {
    ModelVariant::MsZiarmn
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    pub counts: PathBuf,
    pub population: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    /// Disease order; the first entry is the baseline. Defaults to file order.
    pub diseases: Option<Vec<String>>,
}

/// One covariate entering the `x` or `z` predictor of some non-baseline diseases.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateDecl {
    pub part: ModelPart,
    /// Non-baseline diseases receiving the covariate; all of them when empty.
    #[serde(default)]
    pub diseases: Vec<String>,
    pub source: Source,
    pub name: Option<String>,
    #[serde(default = "yes")]
    pub standardize: bool,
    /// One coefficient shared by every listed disease.
    #[serde(default)]
    pub shared: bool,
}

fn yes() -> bool {
    true
}

/// Where the covariate values come from. Builders default to the counts of
/// the disease receiving the covariate.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Source {
    External { column: String },
    NeighborPrevalence {
        of: Option<String>,
        #[serde(default)]
        include_self: bool,
    },
    LaggedLogCounts { of: Option<String> },
    CumulativeIncidenceDiff { of: Option<String> },
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct Report {
    /// Largest R-hat accepted under `--strict`.
    pub rhat_threshold: Option<f64>,
    /// Also report `exp` of log-scale coefficients.
    pub rate_ratios: bool,
    pub fitted: bool,
    pub curves: Vec<CurveDecl>,
}

impl Report {
    pub fn rhat_threshold(&self) -> f64 {
        self.rhat_threshold.unwrap_or(1.05)
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CurveDecl {
    pub disease: String,
    pub covariate: String,
    pub from: f64,
    pub to: f64,
    #[serde(default = "default_points")]
    pub points: usize,
    pub threshold: Option<f64>,
}

fn default_points() -> usize {
    50
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Simulation {
    pub diseases: Vec<String>,
    pub n_areas: usize,
    pub n_times: usize,
    #[serde(default)]
    pub totals: Totals,
    /// External covariates generated as independent standard normal series.
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub truth: Truth,
}

/// Generating parameters. Missing entries take neutral values; area
/// intercepts and random effects are drawn.
#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct Truth {
    pub zeta: Option<Vec<f64>>,
    pub alpha0: Option<Vec<f64>>,
    pub sigma: Option<Vec<f64>>,
    pub alpha: Option<Vec<f64>>,
    pub cov: Option<Vec<Vec<f64>>>,
    pub eta0: Option<Vec<f64>>,
    pub eta: Option<Vec<f64>>,
    pub rho_ar: Option<Vec<f64>>,
    pub rho_di: Option<Vec<Vec<f64>>>,
    pub initial_presence: Option<Vec<f64>>,
}

/// Values given on the command line.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub variant: Option<ModelVariant>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

/// A parsed configuration with paths resolved and overrides applied.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: Config,
    pub bytes: Vec<u8>,
}

impl Loaded {
    pub fn output_dir(&self) -> PathBuf {
        self.config.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}

pub fn load(path: &Path, overrides: &Overrides) -> Result<Loaded, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| CliError::Validation(format!("{}: not UTF-8", path.display())))?;
    let mut config = parse(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    config.resolve(&base);
    if let Some(v) = overrides.variant {
        config.variant = v;
    }
    if let Some(s) = overrides.seed {
        config.sampler.seed = s;
    }
    if let Some(d) = &overrides.output_dir {
        config.output_dir = Some(d.clone());
    }
    Ok(Loaded { config, bytes })
}

pub fn parse(text: &str) -> Result<Config, String> {
    let config: Config = toml::from_str(text).map_err(|e| e.to_string())?;
    if config.schema_version != SCHEMA_VERSION {
        return Err(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", config.schema_version));
    }
    Ok(config)
}

impl Config {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = &mut self.data {
            fix(&mut d.counts);
            for p in [&mut d.population, &mut d.adjacency, &mut d.covariates].into_iter().flatten() {
                fix(p);
            }
        }
        if let Some(o) = &mut self.output_dir {
            fix(o);
        }
    }

    pub fn data(&self) -> Result<&DataFiles, CliError> {
        self.data.as_ref().ok_or_else(|| CliError::Validation("configuration has no [data] section".into()))
    }

    pub fn simulation(&self) -> Result<&Simulation, CliError> {
        self.simulate.as_ref().ok_or_else(|| CliError::Validation("configuration has no [simulate] section".into()))
    }
}

impl DataFiles {
    /// Every referenced file with its role, in a fixed order.
    pub fn files(&self) -> Vec<(&'static str, &Path)> {
        let mut out = vec![("counts", self.counts.as_path())];
        for (role, p) in [("population", &self.population), ("adjacency", &self.adjacency), ("covariates", &self.covariates)] {
            if let Some(p) = p {
                out.push((role, p.as_path()));
            }
        }
        out
    }

    pub fn check_exist(&self) -> Result<(), CliError> {
        for (role, p) in self.files() {
            if !p.is_file() {
                return Err(CliError::Validation(format!("{role} file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = parse("schema_version = 1\n[data]\ncounts = \"y.csv\"\n").unwrap();
        assert_eq!(c.variant, ModelVariant::MsZiarmn);
        assert_eq!(c.sampler.chains, 3);
        assert!(c.covariates.is_empty());
    }

    #[test]
    fn unknown_keys_and_versions_rejected() {
        assert!(parse("schema_version = 1\nchains = 3\n").unwrap_err().contains("unknown field"));
        assert!(parse("schema_version = 1\n[sampler]\nchain = 3\n").unwrap_err().contains("unknown field"));
        assert!(parse("schema_version = 2\n").unwrap_err().contains("schema_version"));
        assert!(parse("variant = \"armn\"\n").is_err());
    }

    #[test]
    fn covariate_sources_parse() {
        let c = parse(
            r#"
schema_version = 1
[[covariates]]
part = "x"
source = { kind = "external", column = "temp" }
shared = true

[[covariates]]
part = "z"
diseases = ["zika"]
source = { kind = "neighbor-prevalence", include_self = true }
standardize = false
"#,
        )
        .unwrap();
        assert!(matches!(c.covariates[0].source, Source::External { .. }));
        assert!(c.covariates[0].standardize && c.covariates[0].shared);
        assert!(matches!(c.covariates[1].source, Source::NeighborPrevalence { of: None, include_self: true }));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut c = parse("schema_version = 1\noutput_dir = \"out\"\n[data]\ncounts = \"y.csv\"\n").unwrap();
        c.resolve(Path::new("/tmp/run"));
        assert_eq!(c.data.unwrap().counts, PathBuf::from("/tmp/run/y.csv"));
        assert_eq!(c.output_dir.unwrap(), PathBuf::from("/tmp/run/out"));
    }
}
