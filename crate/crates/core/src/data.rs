//! Observed panels, area metadata and covariate construction.
//!
//! Indices are dense and zero-based throughout: disease `0` is the baseline,
//! areas run `0..N` and times `0..T`. Covariates exist only for times
//! `1..T` because the likelihood starts at the second time point; a
//! [`CovariateSeries`] therefore stores `N * (T - 1)` values.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label written into output metadata describing how covariates were scaled.
pub const SD_CONVENTION: &str = "sample standard deviation (n - 1) over all (area, time >= 2) cells";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("{file}: line {line}: {msg}")]
    Parse { file: String, line: u64, msg: String },
    #[error("missing cell (disease {disease}, area {area}, time {time}) [{labels}]")]
    MissingCell { disease: usize, area: usize, time: usize, labels: String },
    #[error("duplicate cell (disease {disease}, area {area}, time {time}) [{labels}]")]
    DuplicateCell { disease: usize, area: usize, time: usize, labels: String },
    #[error("negative count {value} at line {line} [{labels}]")]
    NegativeCount { line: u64, value: String, labels: String },
    #[error("panel shape invalid: {0}")]
    Shape(String),
    #[error("unknown {kind} label `{label}`")]
    UnknownLabel { kind: &'static str, label: String },
    #[error("adjacency invalid: {0}")]
    Adjacency(String),
    #[error("population invalid: {0}")]
    Population(String),
    #[error(
        "area {area} ({label}) has no neighbours; supply an adjacency that includes it, \
         build the covariate with self-inclusion enabled, or drop the covariate"
    )]
    IsolatedArea { area: usize, label: String },
    #[error("cumulative incidence difference against the baseline disease is identically zero")]
    BaselineDifference,
    #[error("covariate `{0}` is constant; it cannot be standardized")]
    ConstantCovariate(String),
    #[error("covariate `{name}` is missing value at (area {area}, time {time})")]
    MissingCovariate { name: String, area: usize, time: usize },
    #[error("covariate invalid: {0}")]
    Covariate(String),
}

/// Observed counts `y[k, i, t]` for `K` diseases, `N` areas and `T` times.
#[derive(Clone, Debug, PartialEq)]
pub struct DiseasePanel {
    disease_names: Vec<String>,
    area_labels: Vec<String>,
    time_labels: Vec<i64>,
    /// Cell-major layout: `counts[(i * T + t) * K + k]`.
    counts: Vec<u64>,
    totals: Vec<u64>,
}

impl DiseasePanel {
    /// Builds a panel from counts laid out as `counts[k][i][t]`.
    pub fn from_nested(
        disease_names: Vec<String>,
        area_labels: Vec<String>,
        time_labels: Vec<i64>,
        counts: &[Vec<Vec<u64>>],
    ) -> Result<Self, DataError> {
        let (k, n, t) = (disease_names.len(), area_labels.len(), time_labels.len());
        if counts.len() != k || counts.iter().any(|a| a.len() != n || a.iter().any(|s| s.len() != t)) {
            return Err(DataError::Shape(format!("expected {k} x {n} x {t} counts")));
        }
        let mut flat = vec![0u64; k * n * t];
        for (kk, by_area) in counts.iter().enumerate() {
            for (i, series) in by_area.iter().enumerate() {
                for (tt, &y) in series.iter().enumerate() {
                    flat[(i * t + tt) * k + kk] = y;
                }
            }
        }
        Self::from_cell_major(disease_names, area_labels, time_labels, flat)
    }

    /// Builds a panel from counts laid out as `counts[(i * T + t) * K + k]`.
    pub fn from_cell_major(
        disease_names: Vec<String>,
        area_labels: Vec<String>,
        time_labels: Vec<i64>,
        counts: Vec<u64>,
    ) -> Result<Self, DataError> {
        let (k, n, t) = (disease_names.len(), area_labels.len(), time_labels.len());
        if k < 2 {
            return Err(DataError::Shape(format!("need at least 2 diseases, got {k}")));
        }
        if n < 1 {
            return Err(DataError::Shape("need at least 1 area".into()));
        }
        if t < 2 {
            return Err(DataError::Shape(format!("need at least 2 time points, got {t}")));
        }
        if counts.len() != k * n * t {
            return Err(DataError::Shape(format!(
                "expected {} counts, got {}",
                k * n * t,
                counts.len()
            )));
        }
        check_unique("disease", &disease_names)?;
        check_unique("area", &area_labels)?;
        let totals = counts.chunks(k).map(|c| c.iter().sum()).collect();
        Ok(Self { disease_names, area_labels, time_labels, counts, totals })
    }

    /// Panel with generated labels (`d1..dK`, `a1..aN`, `1..T`).
    pub fn with_default_labels(n_diseases: usize, n_areas: usize, n_times: usize, counts: Vec<u64>) -> Result<Self, DataError> {
        Self::from_cell_major(
            (1..=n_diseases).map(|k| format!("d{k}")).collect(),
            (1..=n_areas).map(|i| format!("a{i}")).collect(),
            (1..=n_times as i64).collect(),
            counts,
        )
    }

    pub fn n_diseases(&self) -> usize {
        self.disease_names.len()
    }

    pub fn n_areas(&self) -> usize {
        self.area_labels.len()
    }

    pub fn n_times(&self) -> usize {
        self.time_labels.len()
    }

    pub fn disease_names(&self) -> &[String] {
        &self.disease_names
    }

    pub fn area_labels(&self) -> &[String] {
        &self.area_labels
    }

    pub fn time_labels(&self) -> &[i64] {
        &self.time_labels
    }

    pub fn disease_index(&self, name: &str) -> Option<usize> {
        self.disease_names.iter().position(|d| d == name)
    }

    pub fn count(&self, k: usize, i: usize, t: usize) -> u64 {
        self.counts[(i * self.n_times() + t) * self.n_diseases() + k]
    }

    /// All disease counts of one (area, time) cell.
    pub fn cell(&self, i: usize, t: usize) -> &[u64] {
        let k = self.n_diseases();
        let start = (i * self.n_times() + t) * k;
        &self.counts[start..start + k]
    }

    pub fn total(&self, i: usize, t: usize) -> u64 {
        self.totals[i * self.n_times() + t]
    }

    /// Raw cell-major counts.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Copy of the panel restricted to the listed areas, in the given order.
    pub fn select_areas(&self, areas: &[usize]) -> Result<Self, DataError> {
        let step = self.n_times() * self.n_diseases();
        let mut counts = Vec::with_capacity(areas.len() * step);
        let mut labels = Vec::with_capacity(areas.len());
        for &i in areas {
            counts.extend_from_slice(&self.counts[i * step..(i + 1) * step]);
            labels.push(self.area_labels[i].clone());
        }
        Self::from_cell_major(self.disease_names.clone(), labels, self.time_labels.clone(), counts)
    }
}

fn check_unique(kind: &str, labels: &[String]) -> Result<(), DataError> {
    let mut seen = HashMap::new();
    for l in labels {
        if seen.insert(l.as_str(), ()).is_some() {
            return Err(DataError::Shape(format!("duplicate {kind} label `{l}`")));
        }
    }
    Ok(())
}

/// Optional label orderings applied when loading a panel. Labels not listed
/// are rejected; when an ordering is absent, first appearance in the file wins.
#[derive(Clone, Debug, Default)]
pub struct PanelOrdering {
    pub diseases: Option<Vec<String>>,
    pub areas: Option<Vec<String>>,
}

struct LabelIndex {
    kind: &'static str,
    fixed: bool,
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelIndex {
    fn new(kind: &'static str, fixed: Option<&Vec<String>>) -> Self {
        let labels = fixed.cloned().unwrap_or_default();
        let index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Self { kind, fixed: fixed.is_some(), labels, index }
    }

    fn get_or_insert(&mut self, label: &str) -> Result<usize, DataError> {
        if let Some(&i) = self.index.get(label) {
            return Ok(i);
        }
        if self.fixed {
            return Err(DataError::UnknownLabel { kind: self.kind, label: label.to_string() });
        }
        self.labels.push(label.to_string());
        self.index.insert(label.to_string(), self.labels.len() - 1);
        Ok(self.labels.len() - 1)
    }
}

#[derive(Deserialize)]
struct CountRow {
    disease: String,
    area: String,
    time: i64,
    count: String,
}

/// Reads a long-format `disease,area,time,count` table into a validated panel.
pub fn load_panel<R: Read>(reader: R, ordering: &PanelOrdering) -> Result<DiseasePanel, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut diseases = LabelIndex::new("disease", ordering.diseases.as_ref());
    let mut areas = LabelIndex::new("area", ordering.areas.as_ref());
    let mut rows = Vec::new();
    for (n, rec) in rdr.deserialize::<CountRow>().enumerate() {
        let line = n as u64 + 2;
        let row = rec?;
        let labels = format!("{}, {}, {}", row.disease, row.area, row.time);
        let value: i64 = row.count.parse().map_err(|_| DataError::Parse {
            file: "counts".into(),
            line,
            msg: format!("count `{}` is not an integer", row.count),
        })?;
        if value < 0 {
            return Err(DataError::NegativeCount { line, value: row.count, labels });
        }
        let k = diseases.get_or_insert(&row.disease)?;
        let i = areas.get_or_insert(&row.area)?;
        rows.push((k, i, row.time, value as u64));
    }
    let mut times: Vec<i64> = rows.iter().map(|r| r.2).collect();
    times.sort_unstable();
    times.dedup();
    let t_index: HashMap<i64, usize> = times.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let (nk, nn, nt) = (diseases.labels.len(), areas.labels.len(), times.len());
    let mut counts: Vec<Option<u64>> = vec![None; nk * nn * nt];
    for (k, i, time, y) in rows {
        let t = t_index[&time];
        let slot = &mut counts[(i * nt + t) * nk + k];
        if slot.is_some() {
            return Err(DataError::DuplicateCell {
                disease: k + 1,
                area: i + 1,
                time: t + 1,
                labels: format!("{}, {}, {}", diseases.labels[k], areas.labels[i], time),
            });
        }
        *slot = Some(y);
    }
    for k in 0..nk {
        for i in 0..nn {
            for t in 0..nt {
                if counts[(i * nt + t) * nk + k].is_none() {
                    return Err(DataError::MissingCell {
                        disease: k + 1,
                        area: i + 1,
                        time: t + 1,
                        labels: format!("{}, {}, {}", diseases.labels[k], areas.labels[i], times[t]),
                    });
                }
            }
        }
    }
    DiseasePanel::from_cell_major(
        diseases.labels,
        areas.labels,
        times,
        counts.into_iter().map(|c| c.unwrap_or(0)).collect(),
    )
}

/// Writes the panel as `disease,area,time,count` sorted by disease, area, time.
pub fn write_panel<W: Write>(panel: &DiseasePanel, writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["disease", "area", "time", "count"])?;
    for k in 0..panel.n_diseases() {
        for i in 0..panel.n_areas() {
            for t in 0..panel.n_times() {
                w.write_record([
                    panel.disease_names[k].as_str(),
                    panel.area_labels[i].as_str(),
                    &panel.time_labels[t].to_string(),
                    &panel.count(k, i, t).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Neighbour sets and populations of the areas.
#[derive(Clone, Debug, PartialEq)]
pub struct AreaMetadata {
    neighbors: Vec<Vec<usize>>,
    population: Vec<f64>,
}

impl AreaMetadata {
    pub fn new(mut neighbors: Vec<Vec<usize>>, population: Vec<f64>) -> Result<Self, DataError> {
        let n = neighbors.len();
        if population.len() != n {
            return Err(DataError::Population(format!("{} populations for {n} areas", population.len())));
        }
        if let Some((i, p)) = population.iter().enumerate().find(|(_, p)| !(p.is_finite() && **p > 0.0)) {
            return Err(DataError::Population(format!("area {} has non-positive population {p}", i + 1)));
        }
        for ne in neighbors.iter_mut() {
            ne.sort_unstable();
            ne.dedup();
        }
        for (i, ne) in neighbors.iter().enumerate() {
            for &j in ne {
                if j >= n {
                    return Err(DataError::Adjacency(format!("area {} lists unknown neighbour {}", i + 1, j + 1)));
                }
                if j == i {
                    return Err(DataError::Adjacency(format!("area {} is listed as its own neighbour", i + 1)));
                }
                if neighbors[j].binary_search(&i).is_err() {
                    return Err(DataError::Adjacency(format!("edge {}-{} is not symmetric", i + 1, j + 1)));
                }
            }
        }
        Ok(Self { neighbors, population })
    }

    /// Builds symmetric neighbour sets from an undirected edge list.
    pub fn from_edges(population: Vec<f64>, edges: &[(usize, usize)]) -> Result<Self, DataError> {
        let n = population.len();
        let mut ne = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(DataError::Adjacency(format!("edge {}-{} out of range", a + 1, b + 1)));
            }
            if a == b {
                return Err(DataError::Adjacency(format!("self edge at area {}", a + 1)));
            }
            ne[a].push(b);
            ne[b].push(a);
        }
        Self::new(ne, population)
    }

    pub fn n_areas(&self) -> usize {
        self.population.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn population(&self, i: usize) -> f64 {
        self.population[i]
    }

    /// Undirected edge list with `a < b`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, ne) in self.neighbors.iter().enumerate() {
            out.extend(ne.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }

    /// Spatial-spread weight `1 / sum_{m in NE(i)} pop_m`.
    pub fn neighbor_weight(&self, i: usize) -> Option<f64> {
        let s: f64 = self.neighbors[i].iter().map(|&j| self.population[j]).sum();
        (s > 0.0).then(|| 1.0 / s)
    }

    /// Same metadata with areas relabelled so new area `a` is old `perm[a]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, DataError> {
        let mut inv = vec![0; perm.len()];
        for (a, &old) in perm.iter().enumerate() {
            inv[old] = a;
        }
        let neighbors = perm.iter().map(|&old| self.neighbors[old].iter().map(|&j| inv[j]).collect()).collect();
        let population = perm.iter().map(|&old| self.population[old]).collect();
        Self::new(neighbors, population)
    }
}

#[derive(Deserialize)]
struct PopRow {
    area: String,
    pop: f64,
}

#[derive(Deserialize)]
struct EdgeRow {
    area_a: String,
    area_b: String,
}

/// Reads `area,pop` rows; row order defines the dense area index.
pub fn load_population<R: Read>(reader: R) -> Result<(Vec<String>, Vec<f64>), DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut labels = Vec::new();
    let mut pops = Vec::new();
    for rec in rdr.deserialize::<PopRow>() {
        let row = rec?;
        labels.push(row.area);
        pops.push(row.pop);
    }
    check_unique("area", &labels)?;
    Ok((labels, pops))
}

/// Reads an `area_a,area_b` edge list against known area labels.
pub fn load_adjacency<R: Read>(reader: R, area_labels: &[String], population: Vec<f64>) -> Result<AreaMetadata, DataError> {
    let index: HashMap<&str, usize> = area_labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let lookup = |l: &str| {
        index.get(l).copied().ok_or_else(|| DataError::UnknownLabel { kind: "area", label: l.to_string() })
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut edges = Vec::new();
    for rec in rdr.deserialize::<EdgeRow>() {
        let row = rec?;
        edges.push((lookup(&row.area_a)?, lookup(&row.area_b)?));
    }
    AreaMetadata::from_edges(population, &edges)
}

pub fn write_population<W: Write>(labels: &[String], meta: &AreaMetadata, writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["area", "pop"])?;
    for (i, l) in labels.iter().enumerate() {
        w.write_record([l.as_str(), &meta.population(i).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_adjacency<W: Write>(labels: &[String], meta: &AreaMetadata, writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["area_a", "area_b"])?;
    for (a, b) in meta.edges() {
        w.write_record([labels[a].as_str(), labels[b].as_str()])?;
    }
    w.flush()?;
    Ok(())
}

/// A covariate defined on every area and every time `t >= 1` (zero-based).
#[derive(Clone, Debug, PartialEq)]
pub struct CovariateSeries {
    pub name: String,
    n_areas: usize,
    n_times: usize,
    values: Vec<f64>,
}

impl CovariateSeries {
    /// `values[i * (n_times - 1) + (t - 1)]` holds the value at area `i`, time `t`.
    pub fn new(name: impl Into<String>, n_areas: usize, n_times: usize, values: Vec<f64>) -> Result<Self, DataError> {
        let name = name.into();
        if n_times < 2 || values.len() != n_areas * (n_times - 1) {
            return Err(DataError::Covariate(format!("`{name}` has {} values for {n_areas} x {} cells", values.len(), n_times.saturating_sub(1))));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::MissingCovariate { name, area: pos / (n_times - 1) + 1, time: pos % (n_times - 1) + 2 });
        }
        Ok(Self { name, n_areas, n_times, values })
    }

    pub fn from_fn(name: impl Into<String>, n_areas: usize, n_times: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self, DataError> {
        let mut values = Vec::with_capacity(n_areas * (n_times.saturating_sub(1)));
        for i in 0..n_areas {
            for t in 1..n_times {
                values.push(f(i, t));
            }
        }
        Self::new(name, n_areas, n_times, values)
    }

    pub fn at(&self, i: usize, t: usize) -> f64 {
        debug_assert!(t >= 1);
        self.values[i * (self.n_times - 1) + t - 1]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_areas(&self) -> usize {
        self.n_areas
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

/// `log( sum_{j in NE(i)} y[k, j, t-1] / sum_{j in NE(i)} pop_j + 1 )`.
///
/// With `include_self`, area `i` is added to its own neighbour set.
pub fn neighbor_prevalence(
    panel: &DiseasePanel,
    meta: &AreaMetadata,
    k: usize,
    include_self: bool,
) -> Result<CovariateSeries, DataError> {
    let n = panel.n_areas();
    if meta.n_areas() != n {
        return Err(DataError::Adjacency(format!("metadata has {} areas, panel has {n}", meta.n_areas())));
    }
    let mut sets = Vec::with_capacity(n);
    for i in 0..n {
        let mut set = meta.neighbors(i).to_vec();
        if include_self {
            set.push(i);
        }
        if set.is_empty() {
            return Err(DataError::IsolatedArea { area: i + 1, label: panel.area_labels()[i].clone() });
        }
        sets.push(set);
    }
    let name = format!("nbr_prev[{}]", panel.disease_names()[k]);
    CovariateSeries::from_fn(name, n, panel.n_times(), |i, t| {
        let cases: u64 = sets[i].iter().map(|&j| panel.count(k, j, t - 1)).sum();
        let pop: f64 = sets[i].iter().map(|&j| meta.population(j)).sum();
        (cases as f64 / pop).ln_1p()
    })
}

/// `log(y[k, i, t-1] + 1)`.
pub fn lagged_log_counts(panel: &DiseasePanel, k: usize) -> Result<CovariateSeries, DataError> {
    let name = format!("lag_log[{}]", panel.disease_names()[k]);
    CovariateSeries::from_fn(name, panel.n_areas(), panel.n_times(), |i, t| {
        (panel.count(k, i, t - 1) as f64).ln_1p()
    })
}

/// `(sum_{s < t} y[k, i, s] - sum_{s < t} y[0, i, s]) / pop_i`.
pub fn cumulative_incidence_diff(
    panel: &DiseasePanel,
    meta: &AreaMetadata,
    k: usize,
) -> Result<CovariateSeries, DataError> {
    if k == 0 {
        return Err(DataError::BaselineDifference);
    }
    let (n, nt) = (panel.n_areas(), panel.n_times());
    let mut values = Vec::with_capacity(n * (nt - 1));
    for i in 0..n {
        let mut diff = 0i64;
        for t in 1..nt {
            diff += panel.count(k, i, t - 1) as i64 - panel.count(0, i, t - 1) as i64;
            values.push(diff as f64 / meta.population(i));
        }
    }
    CovariateSeries::new(format!("cum_inc_diff[{}]", panel.disease_names()[k]), n, nt, values)
}

/// Location and scale used to standardize a covariate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub sd: f64,
}

impl Standardization {
    pub fn apply(&self, raw: f64) -> f64 {
        (raw - self.mean) / self.sd
    }

    pub fn invert(&self, standardized: f64) -> f64 {
        standardized * self.sd + self.mean
    }
}

/// Centres and scales a series to sample mean 0 and sample sd 1.
pub fn standardize(series: &CovariateSeries) -> Result<(CovariateSeries, Standardization), DataError> {
    let v = series.values();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if !(sd > 1e-12 * mean.abs().max(1.0)) || !sd.is_finite() {
        return Err(DataError::ConstantCovariate(series.name.clone()));
    }
    let rec = Standardization { mean, sd };
    let values = v.iter().map(|&x| rec.apply(x)).collect();
    Ok((CovariateSeries::new(series.name.clone(), series.n_areas, series.n_times, values)?, rec))
}

#[derive(Deserialize)]
struct CovRow {
    name: String,
    area: String,
    time: i64,
    value: f64,
}

/// Reads long-format `name,area,time,value` covariates aligned to `panel`.
///
/// Rows at the first time point are accepted and ignored.
pub fn load_covariates<R: Read>(reader: R, panel: &DiseasePanel) -> Result<BTreeMap<String, CovariateSeries>, DataError> {
    let area_index: HashMap<&str, usize> =
        panel.area_labels().iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let time_index: HashMap<i64, usize> = panel.time_labels().iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let (n, nt) = (panel.n_areas(), panel.n_times());
    let mut raw: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    for (line, rec) in rdr.deserialize::<CovRow>().enumerate() {
        let row = rec?;
        let i = *area_index
            .get(row.area.as_str())
            .ok_or_else(|| DataError::UnknownLabel { kind: "area", label: row.area.clone() })?;
        let t = *time_index.get(&row.time).ok_or_else(|| DataError::Parse {
            file: "covariates".into(),
            line: line as u64 + 2,
            msg: format!("time {} not present in the count panel", row.time),
        })?;
        if t == 0 {
            continue;
        }
        let slot = &mut raw.entry(row.name.clone()).or_insert_with(|| vec![f64::NAN; n * (nt - 1)])[i * (nt - 1) + t - 1];
        if !slot.is_nan() {
            return Err(DataError::Parse {
                file: "covariates".into(),
                line: line as u64 + 2,
                msg: format!("duplicate value for `{}` at ({}, {})", row.name, row.area, row.time),
            });
        }
        *slot = row.value;
    }
    raw.into_iter()
        .map(|(name, values)| Ok((name.clone(), CovariateSeries::new(name, n, nt, values)?)))
        .collect()
}

pub fn write_covariates<W: Write>(panel: &DiseasePanel, series: &[&CovariateSeries], writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["name", "area", "time", "value"])?;
    for s in series {
        for i in 0..panel.n_areas() {
            for t in 1..panel.n_times() {
                w.write_record([
                    s.name.as_str(),
                    panel.area_labels()[i].as_str(),
                    &panel.time_labels()[t].to_string(),
                    &s.at(i, t).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Covariates of one disease for one model part, stored cell-major:
/// `values[(i * (T - 1) + t - 1) * n_cols + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix {
    n_areas: usize,
    n_times: usize,
    n_cols: usize,
    names: Vec<String>,
    values: Vec<f64>,
}

impl DesignMatrix {
    pub fn empty(n_areas: usize, n_times: usize) -> Self {
        Self { n_areas, n_times, n_cols: 0, names: Vec::new(), values: Vec::new() }
    }

    pub fn from_columns(n_areas: usize, n_times: usize, columns: &[CovariateSeries]) -> Result<Self, DataError> {
        let cells = n_areas * (n_times - 1);
        for c in columns {
            if c.n_areas != n_areas || c.n_times != n_times {
                return Err(DataError::Covariate(format!("`{}` does not match the panel shape", c.name)));
            }
        }
        let n_cols = columns.len();
        let mut values = vec![0.0; cells * n_cols];
        for (j, c) in columns.iter().enumerate() {
            for (cell, &v) in c.values.iter().enumerate() {
                values[cell * n_cols + j] = v;
            }
        }
        let mut names: Vec<String> = columns.iter().map(|c| c.name.clone()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(DataError::Covariate("duplicate covariate names within one disease".into()));
        }
        names.shrink_to_fit();
        Ok(Self { n_areas, n_times, n_cols, names, values })
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Covariate row at area `i`, time `t >= 1`.
    #[inline]
    pub fn row(&self, i: usize, t: usize) -> &[f64] {
        let start = (i * (self.n_times - 1) + t - 1) * self.n_cols;
        &self.values[start..start + self.n_cols]
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn select_areas(&self, areas: &[usize]) -> Self {
        let step = (self.n_times - 1) * self.n_cols;
        let mut values = Vec::with_capacity(areas.len() * step);
        for &i in areas {
            values.extend_from_slice(&self.values[i * step..(i + 1) * step]);
        }
        Self { n_areas: areas.len(), values, names: self.names.clone(), ..*self }
    }
}

/// Coefficient slot of one covariate: non-baseline disease `disease`
/// (0-based among diseases `1..K`) and column `column`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Slot {
    pub disease: usize,
    pub column: usize,
}

/// A set of covariate slots forced to share one coefficient.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharingGroup {
    pub members: Vec<Slot>,
}

/// Maps every covariate slot to a free coefficient index.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientLayout {
    slot_to_free: Vec<Vec<usize>>,
    free_names: Vec<String>,
    free_members: Vec<Vec<Slot>>,
}

impl CoefficientLayout {
    pub fn new(designs: &[DesignMatrix], disease_names: &[String], groups: &[SharingGroup]) -> Result<Self, DataError> {
        let mut group_of: BTreeMap<Slot, usize> = BTreeMap::new();
        for (g, group) in groups.iter().enumerate() {
            for s in &group.members {
                if s.disease >= designs.len() || s.column >= designs[s.disease].n_cols() {
                    return Err(DataError::Covariate(format!(
                        "sharing group {} references missing slot (disease {}, column {})",
                        g + 1,
                        s.disease + 2,
                        s.column + 1
                    )));
                }
                if group_of.insert(*s, g).is_some() {
                    return Err(DataError::Covariate(format!(
                        "slot (disease {}, column {}) appears in more than one sharing group",
                        s.disease + 2,
                        s.column + 1
                    )));
                }
            }
        }
        let mut group_free: HashMap<usize, usize> = HashMap::new();
        let mut slot_to_free = Vec::with_capacity(designs.len());
        let mut free_names = Vec::new();
        let mut free_members: Vec<Vec<Slot>> = Vec::new();
        for (d, design) in designs.iter().enumerate() {
            let mut row = Vec::with_capacity(design.n_cols());
            for c in 0..design.n_cols() {
                let slot = Slot { disease: d, column: c };
                let label = format!("{}:{}", disease_names[d], design.names()[c]);
                let free = match group_of.get(&slot) {
                    Some(g) => *group_free.entry(*g).or_insert_with(|| {
                        free_names.push(label.clone());
                        free_members.push(Vec::new());
                        free_names.len() - 1
                    }),
                    None => {
                        free_names.push(label);
                        free_members.push(Vec::new());
                        free_names.len() - 1
                    }
                };
                free_members[free].push(slot);
                row.push(free);
            }
            slot_to_free.push(row);
        }
        Ok(Self { slot_to_free, free_names, free_members })
    }

    pub fn n_free(&self) -> usize {
        self.free_names.len()
    }

    /// Free-coefficient indices for the columns of non-baseline disease `d`.
    #[inline]
    pub fn slots(&self, d: usize) -> &[usize] {
        &self.slot_to_free[d]
    }

    pub fn free_names(&self) -> &[String] {
        &self.free_names
    }

    pub fn members(&self, free: usize) -> &[Slot] {
        &self.free_members[free]
    }

    /// Expands free coefficients into the per-slot vector of disease `d`.
    pub fn expand(&self, d: usize, free: &[f64]) -> Vec<f64> {
        self.slot_to_free[d].iter().map(|&f| free[f]).collect()
    }
}

/// Which part of the model a covariate enters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelPart {
    /// Multinomial (relative-odds) predictor.
    X,
    /// Presence (Markov chain) predictor.
    Z,
}

impl fmt::Display for ModelPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelPart::X => "x",
            ModelPart::Z => "z",
        })
    }
}

/// Standardization applied to one covariate column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizationRecord {
    pub part: ModelPart,
    pub disease: String,
    pub covariate: String,
    pub mean: f64,
    pub sd: f64,
}

/// Design matrices for the multinomial (`x`) and presence (`z`) predictors of
/// every non-baseline disease, with coefficient sharing.
#[derive(Clone, Debug, PartialEq)]
pub struct CovariateBundle {
    pub x: Vec<DesignMatrix>,
    pub z: Vec<DesignMatrix>,
    pub x_layout: CoefficientLayout,
    pub z_layout: CoefficientLayout,
    pub standardization: Vec<StandardizationRecord>,
}

impl CovariateBundle {
    /// Bundle without covariates.
    pub fn empty(panel: &DiseasePanel) -> Self {
        let m = panel.n_diseases() - 1;
        Self::new(panel, vec![Vec::new(); m], vec![Vec::new(); m], &[], &[]).expect("empty bundle is valid")
    }

    /// Builds the bundle from already-prepared columns (one list per
    /// non-baseline disease).
    pub fn new(
        panel: &DiseasePanel,
        x: Vec<Vec<CovariateSeries>>,
        z: Vec<Vec<CovariateSeries>>,
        x_sharing: &[SharingGroup],
        z_sharing: &[SharingGroup],
    ) -> Result<Self, DataError> {
        let m = panel.n_diseases() - 1;
        if x.len() != m || z.len() != m {
            return Err(DataError::Covariate(format!("expected covariate lists for {m} non-baseline diseases")));
        }
        let (n, nt) = (panel.n_areas(), panel.n_times());
        let x: Vec<DesignMatrix> = x.iter().map(|c| DesignMatrix::from_columns(n, nt, c)).collect::<Result<_, _>>()?;
        let z: Vec<DesignMatrix> = z.iter().map(|c| DesignMatrix::from_columns(n, nt, c)).collect::<Result<_, _>>()?;
        let names = &panel.disease_names()[1..];
        let x_layout = CoefficientLayout::new(&x, names, x_sharing)?;
        let z_layout = CoefficientLayout::new(&z, names, z_sharing)?;
        Ok(Self { x, z, x_layout, z_layout, standardization: Vec::new() })
    }

    pub fn with_standardization(mut self, records: Vec<StandardizationRecord>) -> Self {
        self.standardization = records;
        self
    }

    pub fn select_areas(&self, areas: &[usize]) -> Self {
        Self {
            x: self.x.iter().map(|d| d.select_areas(areas)).collect(),
            z: self.z.iter().map(|d| d.select_areas(areas)).collect(),
            ..self.clone()
        }
    }

    pub fn standardization_for(&self, part: ModelPart, disease: &str, covariate: &str) -> Option<&StandardizationRecord> {
        self.standardization
            .iter()
            .find(|r| r.part == part && r.disease == disease && r.covariate == covariate)
    }
}
