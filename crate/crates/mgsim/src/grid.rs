//! Static grid structure: buses, branches, converter and load placement,
//! the incidence matrices, and the built-in parameter tables.
//!
//! Everything here is immutable after construction and safe to share across
//! simulation workers.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::StateLayout;

/// Primary energy source behind a converter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConverterKind {
    Wind,
    Solar,
    Storage,
}

impl fmt::Display for ConverterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConverterKind::Wind => write!(f, "wind"),
            ConverterKind::Solar => write!(f, "solar"),
            ConverterKind::Storage => write!(f, "storage"),
        }
    }
}

/// Time-invariant per-converter constants: LC filter, coupling branch,
/// droop gains, PI gains, and power limits. SI units throughout (W, var,
/// V, Ohm, H, F, rad/s); droop gains are rad/s per W and V per var.
#[derive(Clone, Debug, PartialEq)]
pub struct ConverterParams {
    pub r_f: f64,
    pub l_f: f64,
    pub c_f: f64,
    pub r_c: f64,
    pub l_c: f64,
    pub omega_c: f64,
    pub k_p: f64,
    pub k_q: f64,
    pub k_pv: f64,
    pub k_iv: f64,
    pub k_pc: f64,
    pub k_ic: f64,
    /// Output-current feed-forward gain of the voltage loop.
    pub feed_forward: f64,
    pub omega_n: f64,
    pub omega_star: f64,
    pub p_max: f64,
    pub p_min: f64,
    pub q_max: f64,
    pub q_min: f64,
    pub kind: ConverterKind,
}

impl ConverterParams {
    pub fn is_storage(&self) -> bool {
        self.kind == ConverterKind::Storage
    }

    fn validate(&self, id: &str) -> Result<()> {
        let positive = [
            ("r_f", self.r_f),
            ("l_f", self.l_f),
            ("c_f", self.c_f),
            ("r_c", self.r_c),
            ("l_c", self.l_c),
            ("omega_c", self.omega_c),
            ("k_p", self.k_p),
            ("k_q", self.k_q),
            ("k_pv", self.k_pv),
            ("k_iv", self.k_iv),
            ("k_pc", self.k_pc),
            ("k_ic", self.k_ic),
        ];
        for (name, value) in positive {
            if !(value > 0.0) {
                return Err(Error::Topology(format!(
                    "converter {id}: {name} must be strictly positive, got {value}"
                )));
            }
        }
        if self.p_min > self.p_max {
            return Err(Error::Topology(format!(
                "converter {id}: p_min {} exceeds p_max {}",
                self.p_min, self.p_max
            )));
        }
        if self.q_min > self.q_max {
            return Err(Error::Topology(format!(
                "converter {id}: q_min {} exceeds q_max {}",
                self.q_min, self.q_max
            )));
        }
        // Storage is exactly the set of units able to absorb active power.
        let negative_floor = self.p_min < 0.0;
        if negative_floor != (self.kind == ConverterKind::Storage) {
            return Err(Error::Topology(format!(
                "converter {id}: kind {} is inconsistent with p_min = {} (storage <=> p_min < 0)",
                self.kind, self.p_min
            )));
        }
        Ok(())
    }
}

/// Series RL parameters of a line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchParams {
    pub r_b: f64,
    pub l_b: f64,
}

/// Series RL equivalent of a load; time-varying, one value per scenario point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadParams {
    pub r_l: f64,
    pub l_l: f64,
}

impl LoadParams {
    pub fn new(r_l: f64, l_l: f64) -> Result<Self> {
        if !(r_l > 0.0) || !(l_l > 0.0) {
            return Err(Error::Scenario(format!(
                "load impedance must be positive, got r_l = {r_l}, l_l = {l_l}"
            )));
        }
        Ok(LoadParams { r_l, l_l })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub from: u32,
    pub to: u32,
    pub params: BranchParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Converter {
    pub id: String,
    pub bus: u32,
    pub params: ConverterParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Load {
    pub id: String,
    pub bus: u32,
}

/// The microgrid's static structure.
#[derive(Clone, Debug, PartialEq)]
pub struct GridTopology {
    pub bus_ids: Vec<u32>,
    pub branches: Vec<Branch>,
    pub converters: Vec<Converter>,
    pub loads: Vec<Load>,
}

impl GridTopology {
    pub fn n_bus(&self) -> usize {
        self.bus_ids.len()
    }

    pub fn n_converter(&self) -> usize {
        self.converters.len()
    }

    pub fn n_load(&self) -> usize {
        self.loads.len()
    }

    pub fn n_branch(&self) -> usize {
        self.branches.len()
    }

    /// Position of a bus id in the canonical column order.
    pub fn bus_index(&self, bus: u32) -> Option<usize> {
        self.bus_ids.iter().position(|&b| b == bus)
    }

    pub fn converter_ids(&self) -> Vec<String> {
        self.converters.iter().map(|c| c.id.clone()).collect()
    }

    pub fn load_ids(&self) -> Vec<String> {
        self.loads.iter().map(|l| l.id.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bus_ids.is_empty() {
            return Err(Error::Topology("no buses defined".into()));
        }
        let mut seen = BTreeSet::new();
        for &b in &self.bus_ids {
            if !seen.insert(b) {
                return Err(Error::Topology(format!("duplicate bus id {b}")));
            }
        }
        for br in &self.branches {
            for bus in [br.from, br.to] {
                if self.bus_index(bus).is_none() {
                    return Err(Error::Topology(format!(
                        "branch {}-{} references undefined bus {bus}",
                        br.from, br.to
                    )));
                }
            }
            if br.from == br.to {
                return Err(Error::Topology(format!(
                    "branch {}-{} is a self-loop",
                    br.from, br.to
                )));
            }
            if !(br.params.r_b > 0.0) || !(br.params.l_b > 0.0) {
                return Err(Error::Topology(format!(
                    "branch {}-{}: r_b and l_b must be positive",
                    br.from, br.to
                )));
            }
        }
        self.check_connected()?;
        let mut conv_ids = BTreeSet::new();
        for c in &self.converters {
            if self.bus_index(c.bus).is_none() {
                return Err(Error::Topology(format!(
                    "converter {} references undefined bus {}",
                    c.id, c.bus
                )));
            }
            if !conv_ids.insert(c.id.clone()) {
                return Err(Error::Topology(format!("duplicate converter id {}", c.id)));
            }
            c.params.validate(&c.id)?;
        }
        let mut load_ids = BTreeSet::new();
        for l in &self.loads {
            if self.bus_index(l.bus).is_none() {
                return Err(Error::Topology(format!(
                    "load {} references undefined bus {}",
                    l.id, l.bus
                )));
            }
            if !load_ids.insert(l.id.clone()) {
                return Err(Error::Topology(format!("duplicate load id {}", l.id)));
            }
        }
        if self.converters.is_empty() {
            return Err(Error::Topology("grid must host at least one converter".into()));
        }
        Ok(())
    }

    fn check_connected(&self) -> Result<()> {
        let n = self.n_bus();
        if n <= 1 {
            return Ok(());
        }
        let mut adj = vec![Vec::new(); n];
        for br in &self.branches {
            let f = self.bus_index(br.from).unwrap();
            let t = self.bus_index(br.to).unwrap();
            adj[f].push(t);
            adj[t].push(f);
        }
        let mut visited = vec![false; n];
        let mut stack = vec![0usize];
        visited[0] = true;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !visited[w] {
                    visited[w] = true;
                    stack.push(w);
                }
            }
        }
        let unreachable: Vec<u32> = (0..n)
            .filter(|&i| !visited[i])
            .map(|i| self.bus_ids[i])
            .collect();
        if !unreachable.is_empty() {
            return Err(Error::Topology(format!(
                "branch graph is disconnected: buses {unreachable:?} are unreachable from bus {}",
                self.bus_ids[0]
            )));
        }
        Ok(())
    }

    /// Loads and validates a topology file (see the JSON schema in the README).
    pub fn from_file(path: &Path) -> Result<GridTopology> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path, message),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<GridTopology> {
        let file: TopologyFile = serde_json::from_str(text)
            .map_err(|e| Error::parse("<topology>", e.to_string()))?;
        let topo = file.into_topology()?;
        topo.validate()?;
        Ok(topo)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&TopologyFile::from_topology(self))
            .expect("topology serialization cannot fail")
    }

    /// The bundled default: the 32-bus islanded feeder (buses 2..33) with the
    /// 31 built-in lines, nine generators, and 23 loads on every remaining bus.
    pub fn default_33bus() -> GridTopology {
        let bus_ids: Vec<u32> = (2..=33).collect();
        let branches = LINE_TABLE
            .iter()
            .map(|&(from, to, r_b, l_b)| Branch {
                from,
                to,
                params: BranchParams { r_b, l_b },
            })
            .collect();
        let (gen_params, _) = default_parameters();
        let converters: Vec<Converter> = DEFAULT_PLACEMENT
            .iter()
            .zip(gen_params)
            .map(|(&(id, bus, _), params)| Converter {
                id: id.to_string(),
                bus,
                params,
            })
            .collect();
        let conv_buses: BTreeSet<u32> = converters.iter().map(|c| c.bus).collect();
        let loads = bus_ids
            .iter()
            .filter(|b| !conv_buses.contains(b))
            .enumerate()
            .map(|(j, &bus)| Load {
                id: format!("L{}", j + 1),
                bus,
            })
            .collect();
        GridTopology {
            bus_ids,
            branches,
            converters,
            loads,
        }
    }
}

/// Loads and validates a topology file.
pub fn load_topology(path: &Path) -> Result<GridTopology> {
    GridTopology::from_file(path)
}

/// Selection and incidence matrices of Kirchhoff's current law.
///
/// `e_c` and `e_l` have one unit entry per row selecting the attachment bus;
/// `e_b` carries +1 at the from-bus and -1 at the to-bus of each branch.
#[derive(Clone, Debug, PartialEq)]
pub struct IncidenceMatrices {
    pub e_c: DMatrix<f64>,
    pub e_l: DMatrix<f64>,
    pub e_b: DMatrix<f64>,
}

/// Builds the three incidence matrices; bus column order is `bus_ids` order.
pub fn build_incidence(topo: &GridTopology) -> IncidenceMatrices {
    let n_bus = topo.n_bus();
    let mut e_c = DMatrix::zeros(topo.n_converter(), n_bus);
    for (i, c) in topo.converters.iter().enumerate() {
        e_c[(i, topo.bus_index(c.bus).unwrap())] = 1.0;
    }
    let mut e_l = DMatrix::zeros(topo.n_load(), n_bus);
    for (j, l) in topo.loads.iter().enumerate() {
        e_l[(j, topo.bus_index(l.bus).unwrap())] = 1.0;
    }
    let mut e_b = DMatrix::zeros(topo.n_branch(), n_bus);
    for (k, br) in topo.branches.iter().enumerate() {
        e_b[(k, topo.bus_index(br.from).unwrap())] = 1.0;
        e_b[(k, topo.bus_index(br.to).unwrap())] = -1.0;
    }
    IncidenceMatrices { e_c, e_l, e_b }
}

/// Validated topology plus everything derived from it that does not depend
/// on time-varying parameters.
#[derive(Clone, Debug)]
pub struct Grid {
    pub topology: GridTopology,
    pub incidence: IncidenceMatrices,
    pub layout: StateLayout,
    /// Common nominal frequency of the network (rad/s).
    pub omega_n: f64,
    /// Bus index of each converter, load, and branch endpoint.
    pub conv_bus: Vec<usize>,
    pub load_bus: Vec<usize>,
    pub branch_from: Vec<usize>,
    pub branch_to: Vec<usize>,
    /// KCL residual map: `kcl * x` stacks the d-axis and q-axis current
    /// mismatches of every bus. The reduced ODE conserves it exactly.
    pub kcl: DMatrix<f64>,
    /// Orthonormal basis of the null space of `kcl` (the physically
    /// reachable subspace), dim x (dim - 2 n_bus).
    pub kcl_null: DMatrix<f64>,
}

impl Grid {
    pub fn new(topology: GridTopology) -> Result<Arc<Grid>> {
        topology.validate()?;
        let omega_n = topology.converters[0].params.omega_n;
        for c in &topology.converters {
            if c.params.omega_n != omega_n {
                return Err(Error::Topology(format!(
                    "converter {} has omega_n {} but the network frame uses {}",
                    c.id, c.params.omega_n, omega_n
                )));
            }
        }
        let incidence = build_incidence(&topology);
        let layout = StateLayout::new(
            topology.n_converter(),
            topology.n_load(),
            topology.n_branch(),
            topology.n_bus(),
        );
        let conv_bus = topology
            .converters
            .iter()
            .map(|c| topology.bus_index(c.bus).unwrap())
            .collect();
        let load_bus = topology
            .loads
            .iter()
            .map(|l| topology.bus_index(l.bus).unwrap())
            .collect();
        let branch_from = topology
            .branches
            .iter()
            .map(|b| topology.bus_index(b.from).unwrap())
            .collect();
        let branch_to = topology
            .branches
            .iter()
            .map(|b| topology.bus_index(b.to).unwrap())
            .collect();
        let kcl = kcl_matrix(&topology, &layout);
        let kcl_null = null_basis(&kcl)?;
        Ok(Arc::new(Grid {
            topology,
            incidence,
            layout,
            omega_n,
            conv_bus,
            load_bus,
            branch_from,
            branch_to,
            kcl,
            kcl_null,
        }))
    }

    /// Index of the reference converter (lowest id, ordered by length then
    /// lexicographically so G2 < G10).
    pub fn reference_converter(&self) -> usize {
        let mut best = 0usize;
        for i in 1..self.topology.n_converter() {
            let a = &self.topology.converters[i].id;
            let b = &self.topology.converters[best].id;
            if (a.len(), a.as_str()) < (b.len(), b.as_str()) {
                best = i;
            }
        }
        best
    }

    /// Human-readable labels for every state, in storage order.
    pub fn state_labels(&self) -> Vec<String> {
        let t = &self.topology;
        let mut labels = Vec::with_capacity(self.layout.dim());
        let conv_blocks = [
            "delta", "P", "Q", "phid", "phiq", "gammad", "gammaq", "ild", "ilq", "vod", "voq",
            "iod", "ioq",
        ];
        for block in conv_blocks {
            for c in &t.converters {
                labels.push(format!("{block}_{}", c.id));
            }
        }
        for axis in ["iLd", "iLq"] {
            for l in &t.loads {
                labels.push(format!("{axis}_{}", l.id));
            }
        }
        for axis in ["iBd", "iBq"] {
            for b in &t.branches {
                labels.push(format!("{axis}_{}_{}", b.from, b.to));
            }
        }
        labels
    }

    /// d-axis then q-axis bus voltage labels.
    pub fn bus_labels(&self) -> Vec<String> {
        let mut labels = Vec::with_capacity(2 * self.layout.n_bus);
        for axis in ["vBd", "vBq"] {
            for &b in &self.topology.bus_ids {
                labels.push(format!("{axis}_{b}"));
            }
        }
        labels
    }

    /// Per-bus KCL residual split into d and q axes, each of length n_bus.
    pub fn kcl_residual(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let r = &self.kcl * x;
        let n = self.layout.n_bus;
        (r.rows(0, n).into_owned(), r.rows(n, n).into_owned())
    }
}

fn kcl_matrix(topo: &GridTopology, layout: &StateLayout) -> DMatrix<f64> {
    let n_bus = layout.n_bus;
    let mut c = DMatrix::zeros(2 * n_bus, layout.dim());
    for (i, conv) in topo.converters.iter().enumerate() {
        let b = topo.bus_index(conv.bus).unwrap();
        c[(b, layout.i_od(i))] = 1.0;
        c[(n_bus + b, layout.i_oq(i))] = 1.0;
    }
    for (j, load) in topo.loads.iter().enumerate() {
        let b = topo.bus_index(load.bus).unwrap();
        c[(b, layout.load_i_d(j))] = -1.0;
        c[(n_bus + b, layout.load_i_q(j))] = -1.0;
    }
    for (k, br) in topo.branches.iter().enumerate() {
        let f = topo.bus_index(br.from).unwrap();
        let t = topo.bus_index(br.to).unwrap();
        c[(f, layout.branch_i_d(k))] = -1.0;
        c[(t, layout.branch_i_d(k))] = 1.0;
        c[(n_bus + f, layout.branch_i_q(k))] = -1.0;
        c[(n_bus + t, layout.branch_i_q(k))] = 1.0;
    }
    c
}

/// Orthonormal basis of ker(C) via the eigendecomposition of C^T C.
fn null_basis(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = c.transpose() * c;
    let eig = nalgebra::SymmetricEigen::new(gram);
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let tol = 1e-10 * max_ev.max(1.0);
    let cols: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i] <= tol)
        .collect();
    let expected = c.ncols() - c.nrows();
    if cols.len() != expected {
        return Err(Error::Assembly(format!(
            "KCL matrix null space has dimension {}, expected {}",
            cols.len(),
            expected
        )));
    }
    let mut basis = DMatrix::zeros(c.ncols(), cols.len());
    for (out_col, &in_col) in cols.iter().enumerate() {
        basis.set_column(out_col, &eig.eigenvectors.column(in_col));
    }
    Ok(basis)
}

// ---------------------------------------------------------------------------
// Built-in parameter tables
// ---------------------------------------------------------------------------

/// Generator ids of the built-in parameter set.
pub const GENERATOR_IDS: [&str; 9] = ["G1", "G2", "G3", "G4", "G5", "G6", "G7", "G8", "G9"];

// Columns shared by all nine generators.
const R_F: f64 = 0.1;
const L_F: f64 = 1.35e-3;
const C_F: f64 = 5e-5;
const R_C: f64 = 0.1;
const L_C: f64 = 1e-3;
const OMEGA_C: f64 = 15.705;
const K_PV: f64 = 0.05;
const K_IV: f64 = 390.0;
const K_PC: f64 = 10.5;
const K_IC: f64 = 16e3;
const FEED_FORWARD: f64 = 0.75;

/// Per-generator (k_p, k_q, p_max_mw, p_min_mw, q_max_mvar, q_min_mvar).
const GEN_ROWS: [(f64, f64, f64, f64, f64, f64); 9] = [
    (0.333e-6, 0.333e-5, 3.0, -3.0, 3.0, -3.0),
    (1.0e-6, 1.0e-5, 1.2, 0.0, 2.0, -2.0),
    (1.25e-6, 1.25e-5, 1.2, 0.0, 2.0, -2.0),
    (1.25e-6, 1.25e-5, 1.2, 0.0, 2.0, -2.0),
    (1.0e-6, 1.0e-5, 1.5, -1.5, 2.0, -2.0),
    (0.833e-6, 0.833e-5, 1.0, -1.0, 1.0, -1.0),
    (0.833e-6, 0.833e-5, 0.8, 0.0, 1.0, -1.0),
    (0.833e-6, 0.833e-5, 0.8, 0.0, 1.0, -1.0),
    (0.667e-6, 0.667e-5, 1.0, -1.0, 1.0, -1.0),
];

/// Built-in line set: (from bus, to bus, r_b in Ohm, l_b in H).
pub const LINE_TABLE: [(u32, u32, f64, f64); 31] = [
    (2, 3, 0.493, 0.000799),
    (3, 4, 0.366, 0.000593),
    (4, 5, 0.3811, 0.000618),
    (5, 6, 0.819, 0.00225),
    (6, 7, 0.1872, 0.00197),
    (7, 8, 0.7114, 0.000748),
    (8, 9, 1.03, 0.002355),
    (9, 10, 1.044, 0.002355),
    (10, 11, 0.1966, 0.000207),
    (11, 12, 0.3744, 0.000394),
    (12, 13, 1.468, 0.003676),
    (13, 14, 0.5416, 0.002269),
    (14, 15, 0.591, 0.001674),
    (15, 16, 0.7463, 0.001735),
    (16, 17, 1.289, 0.005478),
    (17, 18, 0.732, 0.001827),
    (2, 19, 0.164, 0.000498),
    (19, 20, 1.5042, 0.004314),
    (20, 21, 0.4095, 0.001523),
    (21, 22, 0.7089, 0.002984),
    (3, 23, 0.4512, 0.000981),
    (23, 24, 0.898, 0.002257),
    (24, 25, 0.896, 0.002232),
    (6, 26, 0.203, 0.000329),
    (26, 27, 0.2842, 0.000461),
    (27, 28, 1.059, 0.002972),
    (28, 29, 0.8042, 0.00223),
    (29, 30, 0.5075, 0.000823),
    (30, 31, 0.9744, 0.003065),
    (31, 32, 0.3105, 0.001152),
    (32, 33, 0.341, 0.001688),
];

/// Bundled generator placement. The source diagram pins neither buses nor
/// the wind/solar split, so this is a documented choice, overridable through
/// the topology file.
pub const DEFAULT_PLACEMENT: [(&str, u32, ConverterKind); 9] = [
    ("G1", 2, ConverterKind::Storage),
    ("G2", 6, ConverterKind::Wind),
    ("G3", 10, ConverterKind::Wind),
    ("G4", 14, ConverterKind::Wind),
    ("G5", 18, ConverterKind::Storage),
    ("G6", 22, ConverterKind::Storage),
    ("G7", 25, ConverterKind::Solar),
    ("G8", 29, ConverterKind::Solar),
    ("G9", 33, ConverterKind::Storage),
];

/// The built-in generator row G1..G9 (power limits converted MW -> W).
pub fn default_converter_params(index: usize) -> ConverterParams {
    let (k_p, k_q, p_max_mw, p_min_mw, q_max_mvar, q_min_mvar) = GEN_ROWS[index];
    let kind = DEFAULT_PLACEMENT[index].2;
    ConverterParams {
        r_f: R_F,
        l_f: L_F,
        c_f: C_F,
        r_c: R_C,
        l_c: L_C,
        omega_c: OMEGA_C,
        k_p,
        k_q,
        k_pv: K_PV,
        k_iv: K_IV,
        k_pc: K_PC,
        k_ic: K_IC,
        feed_forward: FEED_FORWARD,
        omega_n: 100.0 * PI,
        omega_star: 100.0 * PI,
        p_max: p_max_mw * 1e6,
        p_min: p_min_mw * 1e6,
        q_max: q_max_mvar * 1e6,
        q_min: q_min_mvar * 1e6,
        kind,
    }
}

/// The full built-in parameter set: nine generator rows and 31 line rows.
pub fn default_parameters() -> (Vec<ConverterParams>, Vec<BranchParams>) {
    let converters = (0..9).map(default_converter_params).collect();
    let branches = LINE_TABLE
        .iter()
        .map(|&(_, _, r_b, l_b)| BranchParams { r_b, l_b })
        .collect();
    (converters, branches)
}

// ---------------------------------------------------------------------------
// Topology file schema
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TopologyFile {
    buses: Vec<u32>,
    branches: Vec<BranchFile>,
    converters: Vec<ConverterFile>,
    loads: Vec<LoadFile>,
}

#[derive(Serialize, Deserialize)]
struct BranchFile {
    from: u32,
    to: u32,
    r_ohm: f64,
    l_henry: f64,
}

#[derive(Serialize, Deserialize)]
struct ConverterFile {
    id: String,
    bus: u32,
    kind: ConverterKind,
    params: ParamSpec,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ParamSpec {
    /// `"default:G3"` pulls the built-in row for G3.
    Reference(String),
    Inline(ParamsFile),
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    r_f_ohm: f64,
    l_f_henry: f64,
    c_f_farad: f64,
    r_c_ohm: f64,
    l_c_henry: f64,
    omega_c: f64,
    k_p: f64,
    k_q: f64,
    k_pv: f64,
    k_iv: f64,
    k_pc: f64,
    k_ic: f64,
    feed_forward: f64,
    omega_n: f64,
    omega_star: f64,
    p_max_w: f64,
    p_min_w: f64,
    q_max_var: f64,
    q_min_var: f64,
}

#[derive(Serialize, Deserialize)]
struct LoadFile {
    id: String,
    bus: u32,
}

impl TopologyFile {
    fn into_topology(self) -> Result<GridTopology> {
        let mut converters = Vec::with_capacity(self.converters.len());
        for c in self.converters {
            let mut params = match c.params {
                ParamSpec::Reference(ref name) => {
                    let row = name.strip_prefix("default:").ok_or_else(|| {
                        Error::parse(
                            "<topology>",
                            format!(
                                "converter {}: parameter reference {name:?} must look like \"default:G1\"",
                                c.id
                            ),
                        )
                    })?;
                    let idx = GENERATOR_IDS.iter().position(|&g| g == row).ok_or_else(|| {
                        Error::parse(
                            "<topology>",
                            format!("converter {}: unknown default parameter row {row:?}", c.id),
                        )
                    })?;
                    default_converter_params(idx)
                }
                ParamSpec::Inline(p) => ConverterParams {
                    r_f: p.r_f_ohm,
                    l_f: p.l_f_henry,
                    c_f: p.c_f_farad,
                    r_c: p.r_c_ohm,
                    l_c: p.l_c_henry,
                    omega_c: p.omega_c,
                    k_p: p.k_p,
                    k_q: p.k_q,
                    k_pv: p.k_pv,
                    k_iv: p.k_iv,
                    k_pc: p.k_pc,
                    k_ic: p.k_ic,
                    feed_forward: p.feed_forward,
                    omega_n: p.omega_n,
                    omega_star: p.omega_star,
                    p_max: p.p_max_w,
                    p_min: p.p_min_w,
                    q_max: p.q_max_var,
                    q_min: p.q_min_var,
                    kind: c.kind,
                },
            };
            params.kind = c.kind;
            converters.push(Converter {
                id: c.id,
                bus: c.bus,
                params,
            });
        }
        Ok(GridTopology {
            bus_ids: self.buses,
            branches: self
                .branches
                .into_iter()
                .map(|b| Branch {
                    from: b.from,
                    to: b.to,
                    params: BranchParams {
                        r_b: b.r_ohm,
                        l_b: b.l_henry,
                    },
                })
                .collect(),
            converters,
            loads: self
                .loads
                .into_iter()
                .map(|l| Load { id: l.id, bus: l.bus })
                .collect(),
        })
    }

    fn from_topology(topo: &GridTopology) -> TopologyFile {
        TopologyFile {
            buses: topo.bus_ids.clone(),
            branches: topo
                .branches
                .iter()
                .map(|b| BranchFile {
                    from: b.from,
                    to: b.to,
                    r_ohm: b.params.r_b,
                    l_henry: b.params.l_b,
                })
                .collect(),
            converters: topo
                .converters
                .iter()
                .map(|c| ConverterFile {
                    id: c.id.clone(),
                    bus: c.bus,
                    kind: c.params.kind,
                    params: ParamSpec::Inline(ParamsFile {
                        r_f_ohm: c.params.r_f,
                        l_f_henry: c.params.l_f,
                        c_f_farad: c.params.c_f,
                        r_c_ohm: c.params.r_c,
                        l_c_henry: c.params.l_c,
                        omega_c: c.params.omega_c,
                        k_p: c.params.k_p,
                        k_q: c.params.k_q,
                        k_pv: c.params.k_pv,
                        k_iv: c.params.k_iv,
                        k_pc: c.params.k_pc,
                        k_ic: c.params.k_ic,
                        feed_forward: c.params.feed_forward,
                        omega_n: c.params.omega_n,
                        omega_star: c.params.omega_star,
                        p_max_w: c.params.p_max,
                        p_min_w: c.params.p_min,
                        q_max_var: c.params.q_max,
                        q_min_var: c.params.q_min,
                    }),
                })
                .collect(),
            loads: topo
                .loads
                .iter()
                .map(|l| LoadFile {
                    id: l.id.clone(),
                    bus: l.bus,
                })
                .collect(),
        }
    }
}
