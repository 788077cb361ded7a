//! Labeled (operating condition, optimal dispatch) datasets.
//!
//! File layout (JSON lines): one header object, then one sample per line:
//!
//! ```text
//! {"feeder_hash":"..","split_index":80,"n_samples":100,"n_buses":24,"dropped":0}
//! {"t":0,"y":{"pg":[..],"pc":[..],"qc":[..]},"z":[..],"objective":..,"status":"optimal","kkt":..,"slack":..}
//! ```

use std::io::{BufRead, Write};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{LcqpSolver, OperatingCondition, OpfError, OpfSolution, SolveStatus};
use crate::feeder::{build_sensitivities, FeederModel};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no operating conditions given")]
    NoProfiles,
    #[error("every sample was infeasible")]
    AllInfeasible,
    #[error("train fraction {fraction} leaves an empty split for {n} samples")]
    InvalidSplit { fraction: f64, n: usize },
    #[error(transparent)]
    Opf(#[from] OpfError),
    #[error("dataset line {line}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("dataset file is empty")]
    MissingHeader,
    #[error("header says {expected} samples, found {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub condition: OperatingCondition,
    pub solution: OpfSolution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub feeder_ref: String,
    /// Position of the first test sample.
    pub split_index: usize,
    pub dropped: usize,
}

impl Dataset {
    pub fn train(&self) -> &[Sample] {
        &self.samples[..self.split_index]
    }

    pub fn test(&self) -> &[Sample] {
        &self.samples[self.split_index..]
    }

    pub fn count_status(&self, status: SolveStatus) -> usize {
        self.samples.iter().filter(|s| s.solution.status == status).count()
    }
}

fn split_index(fraction: f64, n: usize) -> Result<usize, DatasetError> {
    let k = (fraction * n as f64).floor();
    if !(k >= 1.0 && (k as usize) < n) {
        return Err(DatasetError::InvalidSplit { fraction, n });
    }
    Ok(k as usize)
}

/// Solves the dispatch problem for every profile and splits chronologically.
///
/// Solves run in parallel; output order always follows the input order.
pub fn generate_dataset(
    model: &FeederModel,
    profiles: &[OperatingCondition],
    tol: f64,
    train_fraction: f64,
) -> Result<Dataset, DatasetError> {
    if profiles.is_empty() {
        return Err(DatasetError::NoProfiles);
    }
    let s = build_sensitivities(model);
    let solver = LcqpSolver::new(model, &s, tol)?;
    let solved: Vec<Result<OpfSolution, OpfError>> =
        profiles.par_iter().map(|oc| solver.solve(oc)).collect();

    let mut samples = Vec::with_capacity(profiles.len());
    let mut dropped = 0;
    for (oc, res) in profiles.iter().zip(solved) {
        match res {
            Ok(sol) if sol.status != SolveStatus::Infeasible => samples.push(Sample {
                condition: oc.clone(),
                solution: sol,
            }),
            Ok(_) | Err(OpfError::IterationLimit(_)) => dropped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    if dropped > 0 {
        warn!("dropped {dropped} infeasible samples out of {}", profiles.len());
    }
    if samples.is_empty() {
        return Err(DatasetError::AllInfeasible);
    }
    let split_index = split_index(train_fraction, samples.len())?;
    Ok(Dataset {
        samples,
        feeder_ref: model.content_hash(),
        split_index,
        dropped,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    feeder_hash: String,
    split_index: usize,
    n_samples: usize,
    n_buses: usize,
    dropped: usize,
}

#[derive(Serialize, Deserialize)]
struct Inputs {
    pg: Vec<f64>,
    pc: Vec<f64>,
    qc: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Line {
    t: usize,
    y: Inputs,
    z: Vec<f64>,
    objective: f64,
    status: SolveStatus,
    kkt: f64,
    slack: f64,
}

pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> Result<(), DatasetError> {
    let header = Header {
        feeder_hash: ds.feeder_ref.clone(),
        split_index: ds.split_index,
        n_samples: ds.samples.len(),
        n_buses: ds.samples.first().map_or(0, |s| s.condition.n()),
        dropped: ds.dropped,
    };
    serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
    writeln!(w)?;
    for s in &ds.samples {
        let line = Line {
            t: s.condition.t,
            y: Inputs {
                pg: s.condition.p_gen.clone(),
                pc: s.condition.p_load.clone(),
                qc: s.condition.q_load.clone(),
            },
            z: s.solution.q_gen.clone(),
            objective: s.solution.objective,
            status: s.solution.status,
            kkt: s.solution.kkt_residual,
            slack: s.solution.slack_used,
        };
        serde_json::to_writer(&mut w, &line).map_err(std::io::Error::from)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Dataset, DatasetError> {
    let mut lines = r.lines();
    let first = lines.next().ok_or(DatasetError::MissingHeader)??;
    let header: Header =
        serde_json::from_str(&first).map_err(|source| DatasetError::Parse { line: 1, source })?;
    let mut samples = Vec::with_capacity(header.n_samples);
    for (k, text) in lines.enumerate() {
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(&text)
            .map_err(|source| DatasetError::Parse { line: k + 2, source })?;
        samples.push(Sample {
            condition: OperatingCondition {
                t: l.t,
                p_gen: l.y.pg,
                p_load: l.y.pc,
                q_load: l.y.qc,
            },
            solution: OpfSolution {
                q_gen: l.z,
                objective: l.objective,
                kkt_residual: l.kkt,
                status: l.status,
                slack_used: l.slack,
            },
        });
    }
    if samples.len() != header.n_samples {
        return Err(DatasetError::CountMismatch {
            expected: header.n_samples,
            found: samples.len(),
        });
    }
    Ok(Dataset {
        samples,
        feeder_ref: header.feeder_hash,
        split_index: header.split_index,
        dropped: header.dropped,
    })
}
