//! The four batch commands.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use msziarmn::data::{self, CovariateSeries, DiseasePanel};
use msziarmn::io::{self as dio, DrawFiles};
use msziarmn::mcmc::{run_gibbs, PosteriorDraws, SamplerError};
use msziarmn::model::{Model, ModelVariant, ParameterState};
use msziarmn::par::Execution;
use msziarmn::posterior::{self, PosteriorError, Transform, WaicReport};
use msziarmn::rng;
use msziarmn::simulate::{self, SimulationDesign, SimulationError};
use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::config::{Loaded, Simulation, Source, Truth};
use crate::inputs::{self, build_covariates};
use crate::manifest::{self, Manifest};
use crate::CliError;

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn io_err(path: &Path) -> impl Fn(dio::IoError) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn write_with(dir: &Path, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<(), dio::IoError>) -> Result<(), CliError> {
    let path = dir.join(name);
    let mut w = create(&path)?;
    f(&mut w).map_err(io_err(&path))?;
    w.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_data(dir: &Path, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<(), data::DataError>) -> Result<(), CliError> {
    let path = dir.join(name);
    let mut w = create(&path)?;
    f(&mut w).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    w.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn make_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn sampler_error(e: SamplerError) -> CliError {
    match e {
        SamplerError::Config(_) | SamplerError::Prior(_) | SamplerError::Model(_) => CliError::Validation(e.to_string()),
        _ => CliError::Numerical(e.to_string()),
    }
}

fn posterior_error(e: PosteriorError) -> CliError {
    match e {
        PosteriorError::ZeroLikelihood { .. } | PosteriorError::Ffbs(_) => CliError::Numerical(e.to_string()),
        _ => CliError::Validation(e.to_string()),
    }
}

fn simulation_error(e: SimulationError) -> CliError {
    CliError::Validation(e.to_string())
}

// ---------------------------------------------------------------- simulate

#[derive(Serialize)]
struct NamedValue {
    name: String,
    value: f64,
}

#[derive(Serialize)]
struct AreaStates<'a> {
    area: &'a str,
    states: Vec<usize>,
}

#[derive(Serialize)]
struct TruthFile<'a> {
    variant: ModelVariant,
    parameters: Vec<NamedValue>,
    /// `phi[(area * (T - 1) + time - 1) * (K - 1) + disease]`, times from the second on.
    random_effects: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    states: Option<Vec<AreaStates<'a>>>,
}

fn check_len(name: &str, v: &[f64], want: usize) -> Result<(), CliError> {
    if v.len() != want {
        return Err(CliError::Validation(format!("truth.{name} has {} values, expected {want}", v.len())));
    }
    Ok(())
}

fn square(name: &str, rows: &[Vec<f64>], m: usize) -> Result<DMatrix<f64>, CliError> {
    if rows.len() != m || rows.iter().any(|r| r.len() != m) {
        return Err(CliError::Validation(format!("truth.{name} must be {m} x {m}")));
    }
    Ok(DMatrix::from_fn(m, m, |r, c| rows[r][c]))
}

fn truth_state(model: &Model, truth: &Truth, q_default: Option<&Vec<f64>>) -> Result<ParameterState, CliError> {
    let dims = model.dims();
    let m = dims.m();
    let mut p = ParameterState::neutral(dims);
    p.sigma = vec![0.5; m];
    p.cov = DMatrix::identity(m, m) * 0.25;
    let fill = |name: &str, src: &Option<Vec<f64>>, dst: &mut Vec<f64>| -> Result<(), CliError> {
        if let Some(v) = src {
            check_len(name, v, dst.len())?;
            dst.clone_from(v);
        }
        Ok(())
    };
    if let Some(z) = &truth.zeta {
        check_len("zeta", z, dims.n_diseases)?;
        if z.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
            return Err(CliError::Validation("truth.zeta must lie in (0, 1)".into()));
        }
        for (k, &v) in z.iter().enumerate() {
            p.set_zeta(k, v);
        }
    }
    fill("alpha0", &truth.alpha0, &mut p.alpha0)?;
    fill("sigma", &truth.sigma, &mut p.sigma)?;
    fill("alpha", &truth.alpha, &mut p.alpha)?;
    fill("eta0", &truth.eta0, &mut p.eta0)?;
    fill("eta", &truth.eta, &mut p.eta)?;
    fill("rho_ar", &truth.rho_ar, &mut p.rho_ar)?;
    fill("initial_presence", &truth.initial_presence.clone().or_else(|| q_default.cloned()), &mut p.initial_presence)?;
    if let Some(c) = &truth.cov {
        p.cov = square("cov", c, m)?;
    }
    if let Some(r) = &truth.rho_di {
        let mat = square("rho_di", r, m)?;
        for j in 0..m {
            for d in 0..m {
                p.rho_di[j * m + d] = if j == d { 0.0 } else { mat[(j, d)] };
            }
        }
    }
    p.check(dims).map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(p)
}

fn simulated_covariates(sim: &Simulation, seed: u64) -> Result<BTreeMap<String, CovariateSeries>, CliError> {
    let cells = sim.n_areas * sim.n_times.saturating_sub(1);
    sim.covariates
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let mut r = rng::stream(seed, 16 + c as u64);
            let values = (0..cells).map(|_| StandardNormal.sample(&mut r)).collect();
            let s = CovariateSeries::new(name.clone(), sim.n_areas, sim.n_times, values).map_err(|e| CliError::Validation(e.to_string()))?;
            Ok((name.clone(), s))
        })
        .collect()
}

pub fn simulate(loaded: &Loaded) -> Result<(), CliError> {
    let config = &loaded.config;
    let sim = config.simulation()?;
    let seed = config.sampler.seed;
    let variant = config.variant;
    if let Some(d) = config.covariates.iter().find(|d| !matches!(d.source, Source::External { .. })) {
        return Err(CliError::Validation(format!(
            "simulation supports external covariates only; `{}` is built from counts",
            d.name.as_deref().unwrap_or("covariate")
        )));
    }
    let (k, n, nt) = (sim.diseases.len(), sim.n_areas, sim.n_times);
    let areas: Vec<String> = (1..=n).map(|i| format!("a{i}")).collect();
    let times: Vec<i64> = (1..=nt as i64).collect();
    let blank = DiseasePanel::from_cell_major(sim.diseases.clone(), areas.clone(), times.clone(), vec![0; k * n * nt])
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let external = simulated_covariates(sim, seed)?;
    let lists = build_covariates(&blank, None, &external, &config.covariates)?;

    let mut design = SimulationDesign::new(k, n, nt);
    design.x = lists.x.clone();
    design.z = lists.z.clone();
    design.x_sharing = lists.x_sharing.clone();
    design.z_sharing = lists.z_sharing.clone();
    design.totals = sim.totals.clone();
    let skeleton = Model::new(blank.clone(), lists.into_bundle(&blank)?, variant).map_err(|e| CliError::Validation(e.to_string()))?;
    let mut truth = truth_state(&skeleton, &sim.truth, config.prior.initial_presence.as_ref())?;
    simulate::draw_area_intercepts(&mut truth, &mut rng::stream(seed, 2));
    let out = simulate::simulate_panel(&design, &truth, variant, &mut rng::stream(seed, 3)).map_err(simulation_error)?;
    let panel = DiseasePanel::from_cell_major(sim.diseases.clone(), areas, times, out.panel.counts().to_vec())
        .map_err(|e| CliError::Validation(e.to_string()))?;

    let dir = loaded.output_dir();
    make_dir(&dir)?;
    write_data(&dir, "counts.csv", |w| data::write_panel(&panel, w))?;
    if !external.is_empty() {
        let series: Vec<&CovariateSeries> = external.values().collect();
        write_data(&dir, "covariates.csv", |w| data::write_covariates(&panel, &series, w))?;
    }
    let model = skeleton;
    let parameters = model
        .parameter_ids(true, true)
        .iter()
        .map(|id| NamedValue { name: id.name(&model), value: id.get(&out.params) })
        .collect();
    let states = out.states.as_ref().map(|s| {
        panel
            .area_labels()
            .iter()
            .enumerate()
            .map(|(i, a)| AreaStates { area: a, states: (0..nt).map(|t| s.label(i, t)).collect() })
            .collect()
    });
    write_json(&dir, "truth.json", &TruthFile { variant, parameters, random_effects: &out.params.phi, states })?;
    fs::write(dir.join("fit.toml"), fit_config(loaded, !external.is_empty())?).map_err(|e| CliError::Io(e.to_string()))?;

    let mut hashes = BTreeMap::new();
    for name in ["counts.csv", "covariates.csv"] {
        let p = dir.join(name);
        if p.exists() {
            hashes.insert(name.trim_end_matches(".csv").to_string(), inputs::sha256_file(&p)?);
        }
    }
    let m = Manifest::new("simulate", loaded, variant, BTreeMap::new()).with_outputs(hashes);
    write_json(&dir, "manifest.json", &m)
}

/// Configuration that fits the simulated files: the original one with the
/// simulation section dropped and the data section pointing at the outputs.
fn fit_config(loaded: &Loaded, with_covariates: bool) -> Result<String, CliError> {
    let text = String::from_utf8_lossy(&loaded.bytes);
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Validation(e.to_string()))?;
    let sim = loaded.config.simulation()?;
    table.remove("simulate");
    table.remove("output_dir");
    let mut data = toml::Table::new();
    data.insert("counts".into(), "counts.csv".into());
    if with_covariates {
        data.insert("covariates".into(), "covariates.csv".into());
    }
    data.insert("diseases".into(), toml::Value::Array(sim.diseases.iter().map(|d| d.as_str().into()).collect()));
    table.insert("data".into(), data.into());
    table.insert("variant".into(), loaded.config.variant.to_string().into());
    table.insert("output_dir".into(), "fit".into());
    toml::to_string(&table).map_err(|e| CliError::Io(e.to_string()))
}

// ---------------------------------------------------------------- fit

#[derive(Serialize)]
struct DiagnosticRow<'a> {
    name: &'a str,
    rhat: Option<f64>,
    ess: Option<f64>,
    converged: bool,
}

#[derive(Serialize)]
struct PresenceRow<'a> {
    disease: &'a str,
    area: &'a str,
    time: i64,
    probability: f64,
}

#[derive(Serialize)]
struct FittedRow<'a> {
    disease: &'a str,
    area: &'a str,
    time: i64,
    observed: u64,
    mean: f64,
    lower: f64,
    median: f64,
    upper: f64,
}

#[derive(Serialize)]
struct LambdaBarRow<'a> {
    disease: &'a str,
    area: &'a str,
    mean: f64,
    lower: f64,
    upper: f64,
    excluded: usize,
}

#[derive(Serialize)]
struct CrossingRow<'a> {
    disease: &'a str,
    covariate: &'a str,
    threshold: f64,
    value: f64,
}

#[derive(Serialize)]
struct WaicSummary {
    lpdd: f64,
    pwaic: f64,
    waic: f64,
    n_draws: usize,
}

fn write_waic(dir: &Path, w: &WaicReport) -> Result<(), CliError> {
    write_json(dir, "waic.json", &WaicSummary { lpdd: w.lpdd, pwaic: w.pwaic, waic: w.waic, n_draws: w.n_draws })?;
    write_with(dir, "waic_cells.csv", |f| dio::write_rows(&w.cells, f))
}

fn set_threads(threads: Option<usize>, chains: usize) -> Result<(), CliError> {
    let n = threads.unwrap_or(chains).max(1);
    if threads == Some(0) {
        return Err(CliError::Validation("--threads must be at least 1".into()));
    }
    #[cfg(feature = "parallel")]
    {
        // a pool may already exist when several commands run in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let _ = n;
    Ok(())
}

pub fn fit(loaded: &Loaded, threads: Option<usize>, strict: bool) -> Result<(), CliError> {
    let config = &loaded.config;
    let data = config.data()?;
    set_threads(threads, config.sampler.chains)?;
    let inputs = inputs::load(data, &config.covariates, config.variant)?;
    let model = &inputs.model;
    let draws = run_gibbs(model, &config.prior, &config.sampler).map_err(sampler_error)?;

    let dir = loaded.output_dir();
    make_dir(&dir)?;
    write_with(&dir, "draws.csv", |w| dio::write_draws(model, &draws, w))?;
    let retain = config.sampler.retain;
    if retain.phi {
        write_with(&dir, "phi.csv", |w| dio::write_phi(model, &draws, w))?;
    }
    if retain.states && model.variant().has_states() {
        write_with(&dir, "states.csv", |w| dio::write_states(model, &draws, w))?;
    }
    if retain.cell_loglik {
        write_with(&dir, "cell_loglik.csv", |w| dio::write_cell_loglik(model, &draws, w))?;
    }
    write_with(&dir, "acceptance.csv", |w| dio::write_acceptance(&draws, w))?;
    if retain.phi || retain.cell_loglik {
        let w = posterior::waic(model, &draws, config.sampler.execution).map_err(posterior_error)?;
        write_waic(&dir, &w)?;
    }
    let not_converged = report(loaded, model, &draws, &dir)?;
    let m = Manifest::new("fit", loaded, model.variant(), inputs.hashes).with_adaptation(&draws);
    write_json(&dir, "manifest.json", &m)?;
    if strict && !not_converged.is_empty() {
        return Err(CliError::NotConverged(not_converged.join(", ")));
    }
    Ok(())
}

/// Writes the summary tables and returns the parameters whose R-hat exceeds the threshold.
fn report(loaded: &Loaded, model: &Model, draws: &PosteriorDraws, dir: &Path) -> Result<Vec<String>, CliError> {
    let config = &loaded.config;
    let ids = model.parameter_ids(true, false);
    let rows = posterior::summarize(model, draws, &ids, Transform::default()).map_err(posterior_error)?;
    write_with(dir, "summary.csv", |w| dio::write_rows(&rows, w))?;
    if config.report.rate_ratios {
        let rr = posterior::summarize(model, draws, &ids, Transform { exponentiate: true }).map_err(posterior_error)?;
        write_with(dir, "rate_ratios.csv", |w| dio::write_rows(&rr, w))?;
    }
    let threshold = config.report.rhat_threshold();
    let diag: Vec<DiagnosticRow> = rows
        .iter()
        .map(|r| DiagnosticRow {
            name: &r.name,
            rhat: r.rhat,
            ess: r.ess,
            converged: r.rhat.is_some_and(|v| v <= threshold),
        })
        .collect();
    write_with(dir, "diagnostics.csv", |w| dio::write_rows(&diag, w))?;
    let not_converged = diag.iter().filter(|d| !d.converged).map(|d| d.name.to_string()).collect();

    let panel = model.panel();
    let names = panel.disease_names();
    let areas = panel.area_labels();
    let times = panel.time_labels();
    let (m, n, nt) = (model.m(), panel.n_areas(), panel.n_times());
    let has_states = !model.variant().has_states() || draws.iter().all(|d| d.states.is_some());
    let has_phi = draws.iter().all(|d| !d.params.phi.is_empty());

    if has_states {
        let mut rows = Vec::with_capacity(m * n * nt);
        for d in 0..m {
            for i in 0..n {
                for t in 0..nt {
                    let probability = posterior::presence_probability(model, draws, d, i, t).map_err(posterior_error)?;
                    rows.push(PresenceRow { disease: &names[d + 1], area: &areas[i], time: times[t], probability });
                }
            }
        }
        write_with(dir, "presence.csv", |w| dio::write_rows(&rows, w))?;
    }
    if has_phi && has_states {
        let mut rows = Vec::with_capacity(m * n);
        for d in 0..m {
            for i in 0..n {
                let b = posterior::lambda_bar(model, draws, d, i).map_err(posterior_error)?;
                rows.push(LambdaBarRow { disease: &names[d + 1], area: &areas[i], mean: b.mean, lower: b.lower, upper: b.upper, excluded: b.excluded });
            }
        }
        write_with(dir, "lambda_bar.csv", |w| dio::write_rows(&rows, w))?;
    }
    if config.report.fitted && has_states {
        let mut r = rng::stream(config.sampler.seed, u64::MAX - 1);
        let mut rows = Vec::with_capacity(panel.n_diseases() * n * (nt - 1));
        let mut buf = vec![Vec::new(); panel.n_diseases()];
        for i in 0..n {
            for t in 1..nt {
                let sims = posterior::fitted_values(model, draws, i, t, &mut r).map_err(posterior_error)?;
                for (k, b) in buf.iter_mut().enumerate() {
                    *b = sims.iter().map(|s| s[k] as f64).collect();
                    let mean = b.iter().sum::<f64>() / b.len() as f64;
                    b.sort_by(f64::total_cmp);
                    rows.push(FittedRow {
                        disease: &names[k],
                        area: &areas[i],
                        time: times[t],
                        observed: panel.count(k, i, t),
                        mean,
                        lower: posterior::quantile(b, 0.025),
                        median: posterior::quantile(b, 0.5),
                        upper: posterior::quantile(b, 0.975),
                    });
                }
            }
        }
        rows.sort_by(|a, b| (a.disease, a.area).cmp(&(b.disease, b.area)).then(a.time.cmp(&b.time)));
        write_with(dir, "fitted.csv", |w| dio::write_rows(&rows, w))?;
    }
    let mut crossings = Vec::new();
    for c in &config.report.curves {
        let k = panel.disease_index(&c.disease).filter(|&k| k > 0).ok_or_else(|| {
            CliError::Validation(format!("response curve disease `{}` is not a non-baseline disease", c.disease))
        })?;
        if c.points < 2 || !(c.to > c.from) {
            return Err(CliError::Validation(format!("response curve for `{}` needs from < to and at least 2 points", c.covariate)));
        }
        let grid: Vec<f64> = (0..c.points).map(|j| c.from + (c.to - c.from) * j as f64 / (c.points - 1) as f64).collect();
        let curve = posterior::response_curve(model, draws, k - 1, &c.covariate, &grid).map_err(posterior_error)?;
        write_with(dir, &format!("curve_{}_{}.csv", c.disease, c.covariate), |w| dio::write_rows(&curve, w))?;
        if let Some(th) = c.threshold {
            for value in posterior::threshold_crossings(&curve, th) {
                crossings.push(CrossingRow { disease: &c.disease, covariate: &c.covariate, threshold: th, value });
            }
        }
    }
    if config.report.curves.iter().any(|c| c.threshold.is_some()) {
        write_with(dir, "crossings.csv", |w| dio::write_rows(&crossings, w))?;
    }
    Ok(not_converged)
}

// ---------------------------------------------------------------- waic / summarize

fn load_fit(loaded: &Loaded, draws_dir: &Path) -> Result<(Model, PosteriorDraws, Manifest), CliError> {
    let fit_manifest = manifest::read(&draws_dir.join("manifest.json"))?;
    let config = &loaded.config;
    let data = config.data()?;
    data.check_exist()?;
    let hashes = inputs::data_hashes(data)?;
    if hashes != fit_manifest.data {
        return Err(CliError::Validation(format!(
            "the data files differ from those the draws in {} were fitted to; refusing to continue",
            draws_dir.display()
        )));
    }
    let inputs = inputs::load(data, &config.covariates, fit_manifest.variant)?;
    let open = |name: &str| -> Result<Option<File>, CliError> {
        let p = draws_dir.join(name);
        if p.exists() {
            File::open(&p).map(Some).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
        } else {
            Ok(None)
        }
    };
    let scalars = open("draws.csv")?.ok_or_else(|| CliError::Validation(format!("no draws.csv in {}", draws_dir.display())))?;
    let files = DrawFiles { phi: open("phi.csv")?, states: open("states.csv")?, cell_loglik: open("cell_loglik.csv")? };
    let draws = dio::read_draws(&inputs.model, &fit_manifest.sampler, scalars, files)
        .map_err(|e| CliError::Validation(format!("{}: {e}", draws_dir.display())))?;
    if draws.n_draws() == 0 {
        return Err(CliError::Validation(format!("{} holds no draws", draws_dir.display())));
    }
    Ok((inputs.model, draws, fit_manifest))
}

fn report_dir(loaded: &Loaded, draws_dir: &Path, explicit: bool) -> PathBuf {
    if explicit {
        loaded.output_dir()
    } else {
        draws_dir.join("report")
    }
}

pub fn waic(loaded: &Loaded, draws_dir: &Path, explicit_out: bool, threads: Option<usize>) -> Result<(), CliError> {
    let (model, draws, fit_manifest) = load_fit(loaded, draws_dir)?;
    set_threads(threads, 1)?;
    let mode = Execution::Parallel;
    let has_phi = draws.iter().all(|d| !d.params.phi.is_empty());
    let w = if has_phi {
        posterior::waic_recomputed(&model, &draws, mode)
    } else {
        posterior::waic(&model, &draws, mode)
    }
    .map_err(posterior_error)?;
    let dir = report_dir(loaded, draws_dir, explicit_out);
    make_dir(&dir)?;
    write_waic(&dir, &w)?;
    let m = Manifest::new("waic", loaded, model.variant(), fit_manifest.data);
    write_json(&dir, "manifest.json", &m)
}

pub fn summarize(loaded: &Loaded, draws_dir: &Path, explicit_out: bool) -> Result<(), CliError> {
    let (model, draws, fit_manifest) = load_fit(loaded, draws_dir)?;
    let dir = report_dir(loaded, draws_dir, explicit_out);
    make_dir(&dir)?;
    report(loaded, &model, &draws, &dir)?;
    let m = Manifest::new("summarize", loaded, model.variant(), fit_manifest.data);
    write_json(&dir, "manifest.json", &m)
}
