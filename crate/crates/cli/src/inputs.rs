//! Loading data files and assembling covariates into a model.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::path::Path;

use msziarmn::data::{
    self, AreaMetadata, CovariateBundle, CovariateSeries, DiseasePanel, ModelPart, PanelOrdering, SharingGroup, Slot,
    StandardizationRecord,
};
use msziarmn::model::{Model, ModelVariant};
use sha2::{Digest, Sha256};

use crate::config::{CovariateDecl, DataFiles, Source};
use crate::CliError;

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    Ok(sha256(&bytes))
}

pub fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn data_hashes(files: &DataFiles) -> Result<BTreeMap<String, String>, CliError> {
    files.files().into_iter().map(|(role, p)| Ok((role.to_string(), sha256_file(p)?))).collect()
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn data_err(path: &Path) -> impl Fn(data::DataError) -> CliError + '_ {
    move |e| CliError::Validation(format!("{}: {e}", path.display()))
}

pub struct Inputs {
    pub model: Model,
    pub hashes: BTreeMap<String, String>,
}

pub fn load(files: &DataFiles, decls: &[CovariateDecl], variant: ModelVariant) -> Result<Inputs, CliError> {
    files.check_exist()?;
    let hashes = data_hashes(files)?;
    let ordering = PanelOrdering { diseases: files.diseases.clone(), areas: None };
    let panel = data::load_panel(open(&files.counts)?, &ordering).map_err(data_err(&files.counts))?;

    let meta = match (&files.population, &files.adjacency) {
        (None, None) => None,
        (None, Some(_)) => return Err(CliError::Validation("an adjacency file needs a population file".into())),
        (Some(pop_path), adj) => {
            let (labels, pops) = data::load_population(open(pop_path)?).map_err(data_err(pop_path))?;
            let by_label: HashMap<&str, f64> = labels.iter().map(String::as_str).zip(pops).collect();
            let population = panel
                .area_labels()
                .iter()
                .map(|a| {
                    by_label.get(a.as_str()).copied().ok_or_else(|| {
                        CliError::Validation(format!("{}: no population for area `{a}`", pop_path.display()))
                    })
                })
                .collect::<Result<Vec<f64>, _>>()?;
            let meta = match adj {
                Some(adj_path) => data::load_adjacency(open(adj_path)?, panel.area_labels(), population).map_err(data_err(adj_path))?,
                None => AreaMetadata::new(vec![Vec::new(); panel.n_areas()], population).map_err(data_err(pop_path))?,
            };
            Some(meta)
        }
    };

    let external = match &files.covariates {
        Some(p) => data::load_covariates(open(p)?, &panel).map_err(data_err(p))?,
        None => BTreeMap::new(),
    };
    let lists = build_covariates(&panel, meta.as_ref(), &external, decls)?;
    let bundle = lists.into_bundle(&panel)?;
    let model = Model::new(panel, bundle, variant).map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(Inputs { model, hashes })
}

/// Prepared covariate columns per non-baseline disease with sharing groups.
pub struct CovariateLists {
    pub x: Vec<Vec<CovariateSeries>>,
    pub z: Vec<Vec<CovariateSeries>>,
    pub x_sharing: Vec<SharingGroup>,
    pub z_sharing: Vec<SharingGroup>,
    pub records: Vec<StandardizationRecord>,
}

impl CovariateLists {
    pub fn into_bundle(self, panel: &DiseasePanel) -> Result<CovariateBundle, CliError> {
        CovariateBundle::new(panel, self.x, self.z, &self.x_sharing, &self.z_sharing)
            .map(|b| b.with_standardization(self.records))
            .map_err(|e| CliError::Validation(e.to_string()))
    }
}

fn disease(panel: &DiseasePanel, name: &str) -> Result<usize, CliError> {
    panel.disease_index(name).ok_or_else(|| CliError::Validation(format!("unknown disease `{name}`")))
}

pub fn build_covariates(
    panel: &DiseasePanel,
    meta: Option<&AreaMetadata>,
    external: &BTreeMap<String, CovariateSeries>,
    decls: &[CovariateDecl],
) -> Result<CovariateLists, CliError> {
    let m = panel.n_diseases() - 1;
    let mut lists = CovariateLists {
        x: vec![Vec::new(); m],
        z: vec![Vec::new(); m],
        x_sharing: Vec::new(),
        z_sharing: Vec::new(),
        records: Vec::new(),
    };
    let need_meta = || meta.ok_or_else(|| CliError::Validation("this covariate needs population and adjacency files".into()));
    let invalid = |e: data::DataError| CliError::Validation(e.to_string());
    for decl in decls {
        let targets: Vec<usize> = if decl.diseases.is_empty() {
            (1..=m).collect()
        } else {
            decl.diseases.iter().map(|n| disease(panel, n)).collect::<Result<_, _>>()?
        };
        let mut members = Vec::new();
        for k in targets {
            if k == 0 {
                return Err(CliError::Validation(format!(
                    "the baseline disease `{}` has no covariates",
                    panel.disease_names()[0]
                )));
            }
            let source_of = |of: &Option<String>| of.as_deref().map_or(Ok(k), |n| disease(panel, n));
            let raw = match &decl.source {
                Source::External { column } => external
                    .get(column)
                    .cloned()
                    .ok_or_else(|| CliError::Validation(format!("covariate column `{column}` not found")))?,
                Source::NeighborPrevalence { of, include_self } => {
                    data::neighbor_prevalence(panel, need_meta()?, source_of(of)?, *include_self).map_err(invalid)?
                }
                Source::LaggedLogCounts { of } => data::lagged_log_counts(panel, source_of(of)?).map_err(invalid)?,
                Source::CumulativeIncidenceDiff { of } => {
                    data::cumulative_incidence_diff(panel, need_meta()?, source_of(of)?).map_err(invalid)?
                }
            };
            let name = decl.name.clone().unwrap_or_else(|| raw.name.clone());
            let mut series = raw.renamed(name);
            if decl.standardize {
                let (s, rec) = data::standardize(&series).map_err(invalid)?;
                lists.records.push(StandardizationRecord {
                    part: decl.part,
                    disease: panel.disease_names()[k].clone(),
                    covariate: s.name.clone(),
                    mean: rec.mean,
                    sd: rec.sd,
                });
                series = s;
            }
            let list = match decl.part {
                ModelPart::X => &mut lists.x[k - 1],
                ModelPart::Z => &mut lists.z[k - 1],
            };
            members.push(Slot { disease: k - 1, column: list.len() });
            list.push(series);
        }
        if decl.shared && members.len() > 1 {
            let group = SharingGroup { members };
            match decl.part {
                ModelPart::X => lists.x_sharing.push(group),
                ModelPart::Z => lists.z_sharing.push(group),
            }
        }
    }
    Ok(lists)
}
