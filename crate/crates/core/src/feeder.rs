//! Radial feeder descriptions and LinDistFlow voltage sensitivities.
//!
//! Voltages are per-unit magnitude deviations from the feeder head, linear in
//! the nodal injections: `v = R p + X q`, with injections counted positive
//! (generation) and consumption negative. There is no factor of two from the
//! squared-magnitude form.
//!
//! `R[i][j]` is the total resistance shared by the root-to-`i` and root-to-`j`
//! paths; `X` is built the same way from reactances.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Identifier of a bus as it appears in feeder files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BusId(pub u32);

impl fmt::Display for BusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum FeederError {
    #[error("failed to read feeder file {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed feeder file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("reference bus {0} is missing from the line list")]
    MissingReference(BusId),
    #[error("bus {0} is listed more than once")]
    DuplicateBus(BusId),
    #[error("line {from}-{to} is listed more than once")]
    DuplicateLine { from: BusId, to: BusId },
    #[error("line {from}-{to} closes a cycle")]
    CycleDetected { from: BusId, to: BusId },
    #[error("bus {0} is not connected to the reference bus")]
    DisconnectedBus(BusId),
    #[error("line {from}-{to} has nonpositive impedance (r={r}, x={x})")]
    NonPositiveImpedance { from: BusId, to: BusId, r: f64, x: f64 },
    #[error("bus {0} is referenced but not declared")]
    UnknownBus(BusId),
    #[error("bus {0} has a negative reactive limit")]
    NegativeQLimit(BusId),
    #[error("bus {0} has a negative nominal load")]
    NegativeLoad(BusId),
    #[error("voltage bounds must satisfy lower < 0 < upper, got ({lower}, {upper})")]
    InvalidVoltageBounds { lower: f64, upper: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSpec {
    pub from: BusId,
    pub to: BusId,
    pub r: f64,
    pub x: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerSpec {
    pub bus: BusId,
    pub q_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadSpec {
    pub bus: BusId,
    /// Nominal active demand in per-unit, scaled by the profile generator.
    pub p_nominal: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageBounds {
    pub lower: f64,
    pub upper: f64,
}

/// On-disk feeder description (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeederFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub reference: BusId,
    pub buses: Vec<BusId>,
    pub lines: Vec<LineSpec>,
    #[serde(default)]
    pub der: Vec<DerSpec>,
    #[serde(default)]
    pub loads: Vec<LoadSpec>,
    pub v_bounds: VoltageBounds,
}

/// A validated radial feeder. Immutable after construction.
#[derive(Debug, Clone)]
pub struct FeederModel {
    name: Option<String>,
    reference_id: BusId,
    bus_ids: Vec<BusId>,
    lines: Vec<LineSpec>,
    der_nodes: BTreeSet<BusId>,
    q_limits: Vec<f64>,
    nominal_load: Vec<f64>,
    load_buses: BTreeSet<BusId>,
    v_bounds: VoltageBounds,
    // Tree structure, indexed by bus position; `None` parent means the reference.
    parent: Vec<Option<usize>>,
    parent_line: Vec<usize>,
    der_indices: Vec<usize>,
}

/// Reads and validates a feeder file.
pub fn load_feeder(path: impl AsRef<Path>) -> Result<FeederModel, FeederError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| FeederError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: FeederFile = serde_json::from_str(&text)?;
    FeederModel::from_file(file)
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    /// Returns false if `a` and `b` were already joined.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra] = rb;
        true
    }
}

impl FeederModel {
    pub fn from_file(file: FeederFile) -> Result<Self, FeederError> {
        let VoltageBounds { lower, upper } = file.v_bounds;
        if !(lower < 0.0 && upper > 0.0) {
            return Err(FeederError::InvalidVoltageBounds { lower, upper });
        }

        let reference = file.reference;
        let mut seen = BTreeSet::new();
        for &b in &file.buses {
            if !seen.insert(b) {
                return Err(FeederError::DuplicateBus(b));
            }
        }
        seen.remove(&reference);
        let bus_ids: Vec<BusId> = seen.into_iter().collect();
        let index: HashMap<BusId, usize> =
            bus_ids.iter().enumerate().map(|(i, &b)| (b, i)).collect();
        let n = bus_ids.len();
        // Node n stands for the reference bus in the graph routines below.
        let node = |b: BusId| -> Result<usize, FeederError> {
            if b == reference {
                Ok(n)
            } else {
                index.get(&b).copied().ok_or(FeederError::UnknownBus(b))
            }
        };

        if !file
            .lines
            .iter()
            .any(|l| l.from == reference || l.to == reference)
        {
            return Err(FeederError::MissingReference(reference));
        }

        let mut pairs = BTreeSet::new();
        let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n + 1];
        for (k, l) in file.lines.iter().enumerate() {
            let (a, b) = (node(l.from)?, node(l.to)?);
            if !(l.r > 0.0 && l.x > 0.0) {
                return Err(FeederError::NonPositiveImpedance {
                    from: l.from,
                    to: l.to,
                    r: l.r,
                    x: l.x,
                });
            }
            if a == b {
                return Err(FeederError::CycleDetected {
                    from: l.from,
                    to: l.to,
                });
            }
            if !pairs.insert((a.min(b), a.max(b))) {
                return Err(FeederError::DuplicateLine {
                    from: l.from,
                    to: l.to,
                });
            }
            adjacency[a].push((b, k));
            adjacency[b].push((a, k));
        }

        let mut sets = DisjointSet::new(n + 1);
        for l in &file.lines {
            if !sets.union(node(l.from)?, node(l.to)?) {
                return Err(FeederError::CycleDetected {
                    from: l.from,
                    to: l.to,
                });
            }
        }

        let mut parent = vec![None; n];
        let mut parent_line = vec![usize::MAX; n];
        let mut visited = vec![false; n + 1];
        visited[n] = true;
        let mut queue = VecDeque::from([n]);
        while let Some(u) = queue.pop_front() {
            for &(v, k) in &adjacency[u] {
                if !visited[v] {
                    visited[v] = true;
                    parent[v] = (u != n).then_some(u);
                    parent_line[v] = k;
                    queue.push_back(v);
                }
            }
        }
        if let Some(i) = (0..n).find(|&i| !visited[i]) {
            return Err(FeederError::DisconnectedBus(bus_ids[i]));
        }

        let mut q_limits = vec![0.0; n];
        let mut der_nodes = BTreeSet::new();
        for d in &file.der {
            let i = index.get(&d.bus).copied().ok_or(FeederError::UnknownBus(d.bus))?;
            if !(d.q_max >= 0.0) {
                return Err(FeederError::NegativeQLimit(d.bus));
            }
            if !der_nodes.insert(d.bus) {
                return Err(FeederError::DuplicateBus(d.bus));
            }
            q_limits[i] = d.q_max;
        }
        let mut nominal_load = vec![0.0; n];
        let mut load_buses = BTreeSet::new();
        for l in &file.loads {
            let i = index.get(&l.bus).copied().ok_or(FeederError::UnknownBus(l.bus))?;
            if !(l.p_nominal >= 0.0) {
                return Err(FeederError::NegativeLoad(l.bus));
            }
            if !load_buses.insert(l.bus) {
                return Err(FeederError::DuplicateBus(l.bus));
            }
            nominal_load[i] = l.p_nominal;
        }
        let der_indices = der_nodes.iter().map(|b| index[b]).collect();

        Ok(Self {
            name: file.name,
            reference_id: reference,
            bus_ids,
            lines: file.lines,
            der_nodes,
            q_limits,
            nominal_load,
            load_buses,
            v_bounds: file.v_bounds,
            parent,
            parent_line,
            der_indices,
        })
    }

    /// Serializable form; buses, DER and loads come out in sorted order and
    /// each line is listed under its child bus, oriented away from the head.
    pub fn to_file(&self) -> FeederFile {
        let lines = (0..self.bus_ids.len())
            .map(|i| {
                let l = self.parent_line(i);
                let child = self.bus_ids[i];
                let from = if l.to == child { l.from } else { l.to };
                LineSpec { from, to: child, r: l.r, x: l.x }
            })
            .collect();
        FeederFile {
            name: self.name.clone(),
            reference: self.reference_id,
            buses: self.bus_ids.clone(),
            lines,
            der: self
                .der_indices
                .iter()
                .map(|&i| DerSpec {
                    bus: self.bus_ids[i],
                    q_max: self.q_limits[i],
                })
                .collect(),
            loads: self
                .load_buses
                .iter()
                .map(|&b| LoadSpec {
                    bus: b,
                    p_nominal: self.nominal_load[self.index_of(b).unwrap()],
                })
                .collect(),
            v_bounds: self.v_bounds,
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_vec(&self.to_file()).expect("feeder serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    /// Number of non-reference buses.
    pub fn n_buses(&self) -> usize {
        self.bus_ids.len()
    }

    pub fn bus_ids(&self) -> &[BusId] {
        &self.bus_ids
    }

    pub fn reference_id(&self) -> BusId {
        self.reference_id
    }

    pub fn lines(&self) -> &[LineSpec] {
        &self.lines
    }

    pub fn der_nodes(&self) -> &BTreeSet<BusId> {
        &self.der_nodes
    }

    /// Positions of DER buses in bus order.
    pub fn der_indices(&self) -> &[usize] {
        &self.der_indices
    }

    pub fn q_limits(&self) -> &[f64] {
        &self.q_limits
    }

    pub fn load_buses(&self) -> &BTreeSet<BusId> {
        &self.load_buses
    }

    pub fn nominal_load(&self) -> &[f64] {
        &self.nominal_load
    }

    pub fn v_bounds(&self) -> VoltageBounds {
        self.v_bounds
    }

    pub fn index_of(&self, bus: BusId) -> Option<usize> {
        self.bus_ids.binary_search(&bus).ok()
    }

    /// Parent position of each bus (`None` when the parent is the reference).
    pub fn parents(&self) -> &[Option<usize>] {
        &self.parent
    }

    /// The line connecting each bus to its parent.
    pub fn parent_line(&self, i: usize) -> &LineSpec {
        &self.lines[self.parent_line[i]]
    }
}

/// The `R` and `X` matrices of the LinDistFlow voltage model.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityPair {
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub bus_order: Vec<BusId>,
}

impl SensitivityPair {
    pub fn n(&self) -> usize {
        self.bus_order.len()
    }
}

pub fn build_sensitivities(model: &FeederModel) -> SensitivityPair {
    let n = model.n_buses();

    // Buses in an order where every parent precedes its children.
    let mut order = Vec::with_capacity(n);
    let mut children: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, p) in model.parent.iter().enumerate() {
        children.entry(*p).or_default().push(i);
    }
    let mut stack: Vec<usize> = children.get(&None).cloned().unwrap_or_default();
    while let Some(i) = stack.pop() {
        order.push(i);
        if let Some(c) = children.get(&Some(i)) {
            stack.extend(c);
        }
    }

    let mut cum_r = vec![0.0; n];
    let mut cum_x = vec![0.0; n];
    for &i in &order {
        let line = model.parent_line(i);
        let (base_r, base_x) = match model.parent[i] {
            Some(p) => (cum_r[p], cum_x[p]),
            None => (0.0, 0.0),
        };
        cum_r[i] = base_r + line.r;
        cum_x[i] = base_x + line.x;
    }

    let mut r = DMatrix::zeros(n, n);
    let mut x = DMatrix::zeros(n, n);
    let mut on_path = vec![false; n];
    for i in 0..n {
        let mut a = Some(i);
        while let Some(k) = a {
            on_path[k] = true;
            a = model.parent[k];
        }
        for j in 0..n {
            let mut b = Some(j);
            while let Some(k) = b {
                if on_path[k] {
                    break;
                }
                b = model.parent[k];
            }
            if let Some(common) = b {
                r[(i, j)] = cum_r[common];
                x[(i, j)] = cum_x[common];
            }
        }
        on_path.iter_mut().for_each(|f| *f = false);
    }

    SensitivityPair {
        r,
        x,
        bus_order: model.bus_ids.clone(),
    }
}

pub(crate) fn check_len(v: &[f64], expected: usize) -> Result<(), FeederError> {
    if v.len() == expected {
        Ok(())
    } else {
        Err(FeederError::DimensionMismatch {
            expected,
            got: v.len(),
        })
    }
}

pub(crate) fn mat_vec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (m * DVector::from_column_slice(v)).as_slice().to_vec()
}

/// `R p + X q`: per-unit voltage deviation from the feeder head.
pub fn voltage_deviation(
    s: &SensitivityPair,
    p: &[f64],
    q: &[f64],
) -> Result<Vec<f64>, FeederError> {
    check_len(p, s.n())?;
    check_len(q, s.n())?;
    let rp = mat_vec(&s.r, p);
    let xq = mat_vec(&s.x, q);
    Ok(rp.iter().zip(&xq).map(|(a, b)| a + b).collect())
}
