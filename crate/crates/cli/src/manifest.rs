//! Run manifest: what produced a directory of outputs.

use std::collections::BTreeMap;
use std::path::Path;

use msziarmn::mcmc::{PosteriorDraws, PriorSpec, RunConfig};
use msziarmn::model::ModelVariant;
use serde::{Deserialize, Serialize};

use crate::config::Loaded;
use crate::inputs::sha256;
use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainAdaptation {
    pub chain: usize,
    pub scales_at_burn_in: Vec<f64>,
    pub scales_final: Vec<f64>,
    pub init_attempts: u32,
    pub jitter_events: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub variant: ModelVariant,
    pub seed: u64,
    pub config_sha256: String,
    /// Hash of every input data file by role.
    pub data: BTreeMap<String, String>,
    pub sampler: RunConfig,
    pub prior: PriorSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adaptation: Vec<ChainAdaptation>,
    /// Hashes of generated data files (simulate only).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, loaded: &Loaded, variant: ModelVariant, data: BTreeMap<String, String>) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            variant,
            seed: loaded.config.sampler.seed,
            config_sha256: sha256(&loaded.bytes),
            data,
            sampler: loaded.config.sampler.clone(),
            prior: loaded.config.prior.clone(),
            adaptation: Vec::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn with_adaptation(mut self, draws: &PosteriorDraws) -> Self {
        self.adaptation = draws
            .chains
            .iter()
            .enumerate()
            .map(|(c, ch)| ChainAdaptation {
                chain: c + 1,
                scales_at_burn_in: ch.scales_at_burn_in.clone(),
                scales_final: ch.scales_final.clone(),
                init_attempts: ch.init_attempts,
                jitter_events: ch.jitter_events,
            })
            .collect();
        self
    }

    pub fn with_outputs(mut self, outputs: BTreeMap<String, String>) -> Self {
        self.outputs = outputs;
        self
    }
}

pub fn read(path: &Path) -> Result<Manifest, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}
