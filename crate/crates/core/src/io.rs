//! CSV persistence of posterior draws.
//!
//! Scalars go to one file with a row per retained draw. Random effects, state
//! labels and per-cell log-likelihoods each get their own wide file with the
//! same `chain,iteration` key. Floats are written in their shortest
//! round-trip form so reading back reproduces the draws bit for bit.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::Serialize;
use thiserror::Error;

use crate::mcmc::gibbs::{ChainOutput, Draw, PosteriorDraws, RunConfig};
use crate::model::{Model, ParamId, ParameterState, StateSequence};

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn format_err(line: usize, msg: impl Into<String>) -> IoError {
    IoError::Format { line, msg: msg.into() }
}

/// Column names of the scalar draws file, after `chain,iteration`. The
/// mixing exponents are stored on the logit scale the sampler works on.
pub fn scalar_columns(model: &Model) -> Vec<String> {
    model.parameter_ids(true, true).iter().map(|id| column_name(model, *id)).collect()
}

fn column_name(model: &Model, id: ParamId) -> String {
    match id {
        ParamId::Zeta(_) => format!("logit_{}", id.name(model)),
        _ => id.name(model),
    }
}

fn stored_value(id: ParamId, p: &ParameterState) -> f64 {
    match id {
        ParamId::Zeta(k) => p.zeta_logit[k],
        _ => id.get(p),
    }
}

pub fn write_draws<W: Write>(model: &Model, draws: &PosteriorDraws, writer: W) -> Result<(), IoError> {
    let ids = model.parameter_ids(true, true);
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["chain".to_string(), "iteration".to_string()];
    header.extend(scalar_columns(model));
    w.write_record(&header)?;
    for (c, chain) in draws.chains.iter().enumerate() {
        for d in &chain.draws {
            let mut row = vec![(c + 1).to_string(), d.iteration.to_string()];
            row.extend(ids.iter().map(|&id| fmt(stored_value(id, &d.params))));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_wide<W: Write, F>(draws: &PosteriorDraws, header: Vec<String>, writer: W, mut values: F) -> Result<(), IoError>
where
    F: FnMut(&Draw) -> Option<Vec<String>>,
{
    let mut w = csv::Writer::from_writer(writer);
    let mut full = vec!["chain".to_string(), "iteration".to_string()];
    full.extend(header);
    w.write_record(&full)?;
    for (c, chain) in draws.chains.iter().enumerate() {
        for d in &chain.draws {
            if let Some(v) = values(d) {
                let mut row = vec![(c + 1).to_string(), d.iteration.to_string()];
                row.extend(v);
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn cell_names(model: &Model, prefix: &str, per_disease: bool) -> Vec<String> {
    let panel = model.panel();
    let names = panel.disease_names();
    let mut out = Vec::new();
    for a in panel.area_labels() {
        for t in panel.time_labels().iter().skip(1) {
            if per_disease {
                for d in names.iter().skip(1) {
                    out.push(format!("{prefix}[{d},{a},{t}]"));
                }
            } else {
                out.push(format!("{prefix}[{a},{t}]"));
            }
        }
    }
    out
}

pub fn write_phi<W: Write>(model: &Model, draws: &PosteriorDraws, writer: W) -> Result<(), IoError> {
    write_wide(draws, cell_names(model, "phi", true), writer, |d| {
        (!d.params.phi.is_empty()).then(|| d.params.phi.iter().map(|&v| fmt(v)).collect())
    })
}

/// State labels (`1..=2^(K-1)`) for every `(area, time)`, including `t = 0`.
pub fn write_states<W: Write>(model: &Model, draws: &PosteriorDraws, writer: W) -> Result<(), IoError> {
    let panel = model.panel();
    let mut header = Vec::new();
    for a in panel.area_labels() {
        for t in panel.time_labels() {
            header.push(format!("state[{a},{t}]"));
        }
    }
    write_wide(draws, header, writer, |d| d.states.as_ref().map(|s| s.codes().iter().map(|&c| (c + 1).to_string()).collect()))
}

pub fn write_cell_loglik<W: Write>(model: &Model, draws: &PosteriorDraws, writer: W) -> Result<(), IoError> {
    write_wide(draws, cell_names(model, "loglik", false), writer, |d| {
        d.cell_loglik.as_ref().map(|v| v.iter().map(|&x| fmt(x)).collect())
    })
}

type Keyed<T> = BTreeMap<(usize, usize), T>;

fn read_wide<R: Read, T, F>(reader: R, width: usize, mut parse: F) -> Result<Keyed<T>, IoError>
where
    F: FnMut(&[&str], usize) -> Result<T, IoError>,
{
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() != width + 2 {
        return Err(format_err(1, format!("expected {} columns, found {}", width + 2, headers.len())));
    }
    let mut out = BTreeMap::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let fields: Vec<&str> = rec.iter().collect();
        let chain: usize = fields[0].parse().map_err(|_| format_err(line, "bad chain"))?;
        let iter: usize = fields[1].parse().map_err(|_| format_err(line, "bad iteration"))?;
        out.insert((chain, iter), parse(&fields[2..], line)?);
    }
    Ok(out)
}

fn parse_floats(fields: &[&str], line: usize) -> Result<Vec<f64>, IoError> {
    fields.iter().map(|f| f.parse::<f64>().map_err(|_| format_err(line, format!("bad number {f:?}")))).collect()
}

/// Optional companion files for [`read_draws`].
#[derive(Default)]
pub struct DrawFiles<R> {
    pub phi: Option<R>,
    pub states: Option<R>,
    pub cell_loglik: Option<R>,
}

/// Reads draws written by [`write_draws`] and the companion writers.
pub fn read_draws<R: Read>(model: &Model, config: &RunConfig, scalars: R, files: DrawFiles<R>) -> Result<PosteriorDraws, IoError> {
    let ids: Vec<ParamId> = model.parameter_ids(true, true);
    let mut rdr = csv::Reader::from_reader(scalars);
    let headers = rdr.headers()?.clone();
    let want = scalar_columns(model);
    if headers.len() != want.len() + 2 || headers.iter().skip(2).zip(&want).any(|(a, b)| a != b) {
        return Err(format_err(1, "draws header does not match the model parameters"));
    }
    let dims = model.dims();
    let m = dims.m();
    let (n, nt) = (dims.n_areas, dims.n_times);
    let phi = files.phi.map(|r| read_wide(r, n * (nt - 1) * m, parse_floats)).transpose()?;
    let ll = files.cell_loglik.map(|r| read_wide(r, n * (nt - 1), parse_floats)).transpose()?;
    let states = files
        .states
        .map(|r| {
            read_wide(r, n * nt, |f, line| {
                let codes = f
                    .iter()
                    .map(|s| match s.parse::<u16>() {
                        Ok(l) if l >= 1 && (l as usize) <= 1 << m => Ok(l - 1),
                        _ => Err(format_err(line, format!("bad state label {s:?}"))),
                    })
                    .collect::<Result<Vec<u16>, _>>()?;
                StateSequence::from_codes(n, nt, m, codes).map_err(|e| format_err(line, e.to_string()))
            })
        })
        .transpose()?;

    let mut chains: Vec<ChainOutput> = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let fields: Vec<&str> = rec.iter().collect();
        let chain: usize = fields[0].parse().map_err(|_| format_err(line, "bad chain"))?;
        let iteration: usize = fields[1].parse().map_err(|_| format_err(line, "bad iteration"))?;
        if chain == 0 {
            return Err(format_err(line, "chains are numbered from 1"));
        }
        let values = parse_floats(&fields[2..], line)?;
        let mut p = ParameterState::neutral(dims);
        p.phi = Vec::new();
        for (id, v) in ids.iter().zip(values) {
            match id {
                ParamId::Zeta(k) => p.zeta_logit[*k] = v,
                _ => id.set(&mut p, v),
            }
        }
        if let Some(map) = &phi {
            p.phi = map.get(&(chain, iteration)).cloned().ok_or_else(|| format_err(line, "no matching random-effect row"))?;
        }
        let draw = Draw {
            iteration,
            params: p,
            states: states.as_ref().and_then(|s| s.get(&(chain, iteration)).cloned()),
            cell_loglik: ll.as_ref().and_then(|s| s.get(&(chain, iteration)).cloned()),
        };
        while chains.len() < chain {
            chains.push(ChainOutput::default());
        }
        chains[chain - 1].draws.push(draw);
    }
    Ok(PosteriorDraws { chains, config: config.clone() })
}

/// Writes any serializable rows as CSV with a header.
pub fn write_rows<W: Write, T: Serialize>(rows: &[T], writer: W) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct AcceptanceRow<'a> {
    chain: usize,
    kernel: &'a str,
    accepted: u64,
    proposed: u64,
    rate: Option<f64>,
}

pub fn write_acceptance<W: Write>(draws: &PosteriorDraws, writer: W) -> Result<(), IoError> {
    let mut rows = Vec::new();
    for (c, chain) in draws.chains.iter().enumerate() {
        for (k, a) in &chain.acceptance {
            rows.push(AcceptanceRow { chain: c + 1, kernel: k, accepted: a.accepted, proposed: a.proposed, rate: (a.proposed > 0).then(|| a.rate()) });
        }
    }
    write_rows(&rows, writer)
}
