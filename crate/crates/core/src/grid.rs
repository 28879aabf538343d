//! Radial four-wire feeder model and the topology/impedance matrices that
//! make the network voltage drop linear in the nodal injection currents.

use std::collections::BTreeMap;

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One of the four conductors of a feeder section.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Conductor {
    PhaseA,
    PhaseB,
    PhaseC,
    Neutral,
}

impl Conductor {
    pub const ALL: [Conductor; 4] = [
        Conductor::PhaseA,
        Conductor::PhaseB,
        Conductor::PhaseC,
        Conductor::Neutral,
    ];

    pub fn index(self) -> usize {
        match self {
            Conductor::PhaseA => 0,
            Conductor::PhaseB => 1,
            Conductor::PhaseC => 2,
            Conductor::Neutral => 3,
        }
    }

    pub fn from_index(i: usize) -> Conductor {
        Conductor::ALL[i]
    }

    pub fn is_phase(self) -> bool {
        self != Conductor::Neutral
    }
}

/// A phase conductor (device attachment point).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        match self {
            Phase::A => 0,
            Phase::B => 1,
            Phase::C => 2,
        }
    }

    pub fn from_index(i: usize) -> Phase {
        Phase::ALL[i]
    }

    pub fn conductor(self) -> Conductor {
        Conductor::from_index(self.index())
    }

    /// Nominal phasor angle in radians (a = 0, b = -120 deg, c = +120 deg).
    pub fn angle(self) -> f64 {
        match self {
            Phase::A => 0.0,
            Phase::B => -2.0 * std::f64::consts::PI / 3.0,
            Phase::C => 2.0 * std::f64::consts::PI / 3.0,
        }
    }

    /// Unit phasor at the nominal angle.
    pub fn rotation(self) -> Complex64 {
        Complex64::from_polar(1.0, self.angle())
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::A => write!(f, "a"),
            Phase::B => write!(f, "b"),
            Phase::C => write!(f, "c"),
        }
    }
}

fn default_load() -> [f64; 3] {
    [0.0; 3]
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BusConfig {
    pub id: u32,
    /// Peak load allotment per phase, used by the synthetic profile generator.
    #[serde(default = "default_load")]
    pub load_kw_peak: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SectionConfig {
    pub from: u32,
    pub to: u32,
    pub length_km: f64,
    /// Self impedance per km as `[r, x]` in ohm/km.
    pub z_self: [f64; 2],
    /// Mutual impedance per km as `[r, x]` in ohm/km.
    pub z_mutual: [f64; 2],
    /// Ampacity per conductor; falls back to `limits.i_max_default_a`.
    #[serde(default)]
    pub i_max_a: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OltcConfig {
    /// Slack voltage magnitude per phase in p.u. (nominal angles assumed).
    pub v_slack: [f64; 3],
    pub dv_per_tap: f64,
    pub tap_min: i32,
    pub tap_max: i32,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LimitsConfig {
    pub v_min: f64,
    pub v_max: f64,
    pub v_neut_max: f64,
    pub vuf_max: f64,
    pub i_max_default_a: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PvConfig {
    pub bus: u32,
    pub phase: Phase,
    pub kw_peak: f64,
    pub q_min_kvar: f64,
    pub q_max_kvar: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BessConfig {
    pub bus: u32,
    pub phase: Phase,
    pub e_capa_kwh: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub e_start_kwh: f64,
    pub eta: f64,
    pub p_max_kw: f64,
    pub s_max_kva: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClConfig {
    pub bus: u32,
    pub phase: Phase,
    pub p_block_kw: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct DevicesConfig {
    #[serde(default)]
    pub pv: Vec<PvConfig>,
    #[serde(default)]
    pub bess: Vec<BessConfig>,
    #[serde(default)]
    pub cl: Vec<ClConfig>,
}

/// The feeder description document (JSON on disk).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeederConfig {
    /// Line-to-line base voltage in volts (descriptive).
    pub base_voltage_ll: f64,
    /// Phase-to-neutral voltage base in volts; all p.u. voltages use this.
    pub base_voltage_phase: f64,
    pub slack_bus: u32,
    pub transformer_ground_ohm: f64,
    pub buses: Vec<BusConfig>,
    pub sections: Vec<SectionConfig>,
    pub oltc: OltcConfig,
    pub limits: LimitsConfig,
    #[serde(default)]
    pub devices: DevicesConfig,
}

#[derive(Debug, Error)]
pub enum GridError {
    #[error("feeder document parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("topology error: {0}")]
    Topology(String),
    #[error("validation error: {0}")]
    Validation(String),
}

/// A non-fatal model check result; `validate_topology` reports these
/// instead of failing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FindingKind {
    DuplicateBus,
    UnknownBus,
    UnreachableBus,
    Cycle,
    LimitOrdering,
    NonPositiveValue,
    Device,
}

/// A validated four-conductor line section with absolute impedances.
#[derive(Debug, Clone)]
pub struct LineSection {
    pub from_bus: u32,
    pub to_bus: u32,
    pub length_km: f64,
    /// Absolute self impedance in ohm (per-km value times length).
    pub z_self: Complex64,
    /// Absolute mutual impedance in ohm.
    pub z_mutual: Complex64,
    pub i_max_a: f64,
}

impl LineSection {
    /// 4x4 section impedance block: `z_self` on the diagonal,
    /// `z_mutual` everywhere else.
    pub fn impedance_block(&self) -> Array2<Complex64> {
        let mut z = Array2::from_elem((4, 4), self.z_mutual);
        for d in 0..4 {
            z[(d, d)] = self.z_self;
        }
        z
    }

    /// Series resistance of one conductor in ohm.
    pub fn r_self(&self) -> f64 {
        self.z_self.re
    }
}

#[derive(Debug, Clone)]
pub struct OltcModel {
    /// Complex slack voltage per phase in p.u. (nominal angles).
    pub v_slack: [Complex64; 3],
    pub dv_per_tap: f64,
    pub tap_min: i32,
    pub tap_max: i32,
}

impl OltcModel {
    /// Slack phase voltage magnitude after applying a tap position.
    pub fn slack_magnitude(&self, phase: Phase, tap: i32) -> f64 {
        self.v_slack[phase.index()].norm() - self.dv_per_tap * tap as f64
    }

    pub fn tap_range(&self) -> impl Iterator<Item = i32> {
        self.tap_min..=self.tap_max
    }
}

#[derive(Debug, Clone)]
pub struct Limits {
    pub v_min: f64,
    pub v_max: f64,
    pub v_neut_max: f64,
    pub vuf_max: f64,
}

/// The validated physical grid: radial tree of four-wire sections rooted
/// at the slack bus. Immutable after construction.
#[derive(Debug, Clone)]
pub struct FeederModel {
    config: FeederConfig,
    sections: Vec<LineSection>,
    pub oltc: OltcModel,
    pub limits: Limits,
    /// Bus id -> position in `config.buses`.
    index: BTreeMap<u32, usize>,
    slack_idx: usize,
    /// Section indices on the slack->bus path, per bus.
    paths: Vec<Vec<usize>>,
}

impl FeederModel {
    pub fn n_buses(&self) -> usize {
        self.config.buses.len()
    }

    pub fn n_sections(&self) -> usize {
        self.sections.len()
    }

    pub fn sections(&self) -> &[LineSection] {
        &self.sections
    }

    pub fn buses(&self) -> &[BusConfig] {
        &self.config.buses
    }

    pub fn config(&self) -> &FeederConfig {
        &self.config
    }

    pub fn slack_index(&self) -> usize {
        self.slack_idx
    }

    pub fn bus_id(&self, idx: usize) -> u32 {
        self.config.buses[idx].id
    }

    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn base_voltage_phase(&self) -> f64 {
        self.config.base_voltage_phase
    }

    pub fn transformer_ground_ohm(&self) -> f64 {
        self.config.transformer_ground_ohm
    }

    /// Number of section hops between the slack and a bus.
    pub fn hop_depth(&self, bus_idx: usize) -> usize {
        self.paths[bus_idx].len()
    }

    pub fn path_sections(&self, bus_idx: usize) -> &[usize] {
        &self.paths[bus_idx]
    }

    pub fn section_i_max(&self, section_idx: usize) -> f64 {
        self.sections[section_idx].i_max_a
    }

    /// Non-slack bus positions in model order; these index the
    /// node-conductor columns of the topology matrices.
    pub fn node_buses(&self) -> Vec<usize> {
        (0..self.n_buses()).filter(|&b| b != self.slack_idx).collect()
    }
}

/// Parse and validate a feeder description document.
pub fn build_feeder_from_str(doc: &str) -> Result<FeederModel, GridError> {
    let config: FeederConfig = serde_json::from_str(doc)?;
    build_feeder(config)
}

/// Validate a parsed feeder description and assemble the model.
pub fn build_feeder(config: FeederConfig) -> Result<FeederModel, GridError> {
    let findings = validate_config(&config);
    if let Some(f) = findings.iter().find(|f| {
        matches!(
            f.kind,
            FindingKind::DuplicateBus | FindingKind::UnknownBus | FindingKind::UnreachableBus | FindingKind::Cycle
        )
    }) {
        return Err(GridError::Topology(f.message.clone()));
    }
    if let Some(f) = findings.first() {
        return Err(GridError::Validation(f.message.clone()));
    }

    let index: BTreeMap<u32, usize> = config
        .buses
        .iter()
        .enumerate()
        .map(|(i, b)| (b.id, i))
        .collect();
    let slack_idx = index[&config.slack_bus];

    let sections: Vec<LineSection> = config
        .sections
        .iter()
        .map(|s| LineSection {
            from_bus: s.from,
            to_bus: s.to,
            length_km: s.length_km,
            z_self: Complex64::new(s.z_self[0], s.z_self[1]) * s.length_km,
            z_mutual: Complex64::new(s.z_mutual[0], s.z_mutual[1]) * s.length_km,
            i_max_a: s.i_max_a.unwrap_or(config.limits.i_max_default_a),
        })
        .collect();

    // Orient the tree: BFS from the slack, recording each bus's parent section.
    let n = config.buses.len();
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n]; // (neighbour bus, section)
    for (si, s) in sections.iter().enumerate() {
        let a = index[&s.from_bus];
        let b = index[&s.to_bus];
        adj[a].push((b, si));
        adj[b].push((a, si));
    }
    let mut paths: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut visited = vec![false; n];
    let mut queue = std::collections::VecDeque::from([slack_idx]);
    visited[slack_idx] = true;
    while let Some(b) = queue.pop_front() {
        for &(nb, si) in &adj[b] {
            if !visited[nb] {
                visited[nb] = true;
                let mut p = paths[b].clone();
                p.push(si);
                paths[nb] = p;
                queue.push_back(nb);
            }
        }
    }

    let oltc = OltcModel {
        v_slack: [
            Complex64::from_polar(config.oltc.v_slack[0], Phase::A.angle()),
            Complex64::from_polar(config.oltc.v_slack[1], Phase::B.angle()),
            Complex64::from_polar(config.oltc.v_slack[2], Phase::C.angle()),
        ],
        dv_per_tap: config.oltc.dv_per_tap,
        tap_min: config.oltc.tap_min,
        tap_max: config.oltc.tap_max,
    };
    let limits = Limits {
        v_min: config.limits.v_min,
        v_max: config.limits.v_max,
        v_neut_max: config.limits.v_neut_max,
        vuf_max: config.limits.vuf_max,
    };

    Ok(FeederModel {
        config,
        sections,
        oltc,
        limits,
        index,
        slack_idx,
        paths,
    })
}

/// Check a feeder description against the model invariants, returning one
/// finding per violation (empty means valid).
pub fn validate_config(config: &FeederConfig) -> Vec<Finding> {
    let mut findings = Vec::new();
    let mut seen = BTreeMap::new();
    for b in &config.buses {
        if seen.insert(b.id, ()).is_some() {
            findings.push(Finding {
                kind: FindingKind::DuplicateBus,
                message: format!("duplicate bus id {}", b.id),
            });
        }
    }
    let known = |id: u32| seen.contains_key(&id);
    if !known(config.slack_bus) {
        findings.push(Finding {
            kind: FindingKind::UnknownBus,
            message: format!("slack bus {} is not declared", config.slack_bus),
        });
        return findings;
    }
    for s in &config.sections {
        for id in [s.from, s.to] {
            if !known(id) {
                findings.push(Finding {
                    kind: FindingKind::UnknownBus,
                    message: format!("section {}-{} references unknown bus {}", s.from, s.to, id),
                });
            }
        }
        if s.length_km <= 0.0 {
            findings.push(Finding {
                kind: FindingKind::NonPositiveValue,
                message: format!("section {}-{} has nonpositive length", s.from, s.to),
            });
        }
        if s.z_self[0] <= 0.0 {
            findings.push(Finding {
                kind: FindingKind::NonPositiveValue,
                message: format!("section {}-{} self impedance has nonpositive real part", s.from, s.to),
            });
        }
        if let Some(i) = s.i_max_a {
            if i <= 0.0 {
                findings.push(Finding {
                    kind: FindingKind::NonPositiveValue,
                    message: format!("section {}-{} has nonpositive ampacity", s.from, s.to),
                });
            }
        }
    }
    if !findings.iter().any(|f| f.kind == FindingKind::UnknownBus) {
        // Radiality: spanning tree rooted at the slack.
        let n = config.buses.len();
        let index: BTreeMap<u32, usize> = config.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for s in &config.sections {
            adj[index[&s.from]].push(index[&s.to]);
            adj[index[&s.to]].push(index[&s.from]);
        }
        let mut visited = vec![false; n];
        let mut queue = std::collections::VecDeque::from([index[&config.slack_bus]]);
        visited[index[&config.slack_bus]] = true;
        let mut reached = 1usize;
        while let Some(b) = queue.pop_front() {
            for &nb in &adj[b] {
                if !visited[nb] {
                    visited[nb] = true;
                    reached += 1;
                    queue.push_back(nb);
                }
            }
        }
        for (i, b) in config.buses.iter().enumerate() {
            if !visited[i] {
                findings.push(Finding {
                    kind: FindingKind::UnreachableBus,
                    message: format!("unreachable bus {}", b.id),
                });
            }
        }
        let reachable_edges = config
            .sections
            .iter()
            .filter(|s| visited[index[&s.from]] && visited[index[&s.to]])
            .count();
        if reachable_edges + 1 > reached {
            findings.push(Finding {
                kind: FindingKind::Cycle,
                message: format!(
                    "cycle detected: {} sections among {} reachable buses",
                    reachable_edges, reached
                ),
            });
        }
    }

    let lim = &config.limits;
    if lim.v_min >= lim.v_max {
        findings.push(Finding {
            kind: FindingKind::LimitOrdering,
            message: format!("limit ordering: v_min {} must be below v_max {}", lim.v_min, lim.v_max),
        });
    }
    for (name, v) in [
        ("v_min", lim.v_min),
        ("v_max", lim.v_max),
        ("v_neut_max", lim.v_neut_max),
        ("vuf_max", lim.vuf_max),
        ("i_max_default_a", lim.i_max_default_a),
        ("base_voltage_phase", config.base_voltage_phase),
        ("base_voltage_ll", config.base_voltage_ll),
    ] {
        if v <= 0.0 {
            findings.push(Finding {
                kind: FindingKind::NonPositiveValue,
                message: format!("limit {} must be strictly positive, got {}", name, v),
            });
        }
    }
    if config.transformer_ground_ohm < 0.0 {
        findings.push(Finding {
            kind: FindingKind::NonPositiveValue,
            message: "transformer grounding impedance must be nonnegative".into(),
        });
    }
    if config.oltc.tap_min > 0 || config.oltc.tap_max < 0 {
        findings.push(Finding {
            kind: FindingKind::NonPositiveValue,
            message: "OLTC tap range must contain zero".into(),
        });
    }
    if config.oltc.dv_per_tap <= 0.0 {
        findings.push(Finding {
            kind: FindingKind::NonPositiveValue,
            message: "OLTC dv_per_tap must be strictly positive".into(),
        });
    }
    for d in &config.devices.pv {
        if !known(d.bus) {
            findings.push(Finding {
                kind: FindingKind::Device,
                message: format!("pv unit references unknown bus {}", d.bus),
            });
        }
        if d.q_min_kvar > 0.0 || d.q_max_kvar < 0.0 {
            findings.push(Finding {
                kind: FindingKind::Device,
                message: format!("pv unit at bus {} must have q_min <= 0 <= q_max", d.bus),
            });
        }
    }
    for d in &config.devices.bess {
        if !known(d.bus) {
            findings.push(Finding {
                kind: FindingKind::Device,
                message: format!("bess unit references unknown bus {}", d.bus),
            });
        }
    }
    for d in &config.devices.cl {
        if !known(d.bus) {
            findings.push(Finding {
                kind: FindingKind::Device,
                message: format!("controllable load references unknown bus {}", d.bus),
            });
        }
    }
    findings
}

/// BIBC-style path matrix and the composed node drop matrix.
///
/// `path` is the 0/1 branch-conductor by node-conductor incidence: entry
/// (b, n) is 1 iff the injection at node-conductor n flows through branch
/// conductor b on its way to the slack. `drop_ohm` is
/// `path^T * blockdiag(Z_section) * path`: it maps nodal injection
/// currents (amps) directly to complex node voltage rises (volts).
#[derive(Debug, Clone)]
pub struct TopologyMatrices {
    pub path: Array2<f64>,
    pub drop_ohm: Array2<Complex64>,
    /// Non-slack bus indices in column-block order.
    pub node_buses: Vec<usize>,
    /// Column block position per bus index (None for slack).
    node_pos: Vec<Option<usize>>,
}

impl TopologyMatrices {
    /// Column for (bus, conductor); None for the slack bus.
    pub fn node_col(&self, bus_idx: usize, cond: Conductor) -> Option<usize> {
        self.node_pos[bus_idx].map(|p| p * 4 + cond.index())
    }

    pub fn branch_row(&self, section_idx: usize, cond: Conductor) -> usize {
        section_idx * 4 + cond.index()
    }

    pub fn n_node_cols(&self) -> usize {
        self.node_buses.len() * 4
    }
}

/// Build the path and drop matrices for a radial feeder.
pub fn build_topology_matrices(feeder: &FeederModel) -> TopologyMatrices {
    let node_buses = feeder.node_buses();
    let mut node_pos = vec![None; feeder.n_buses()];
    for (p, &b) in node_buses.iter().enumerate() {
        node_pos[b] = Some(p);
    }
    let n_cols = node_buses.len() * 4;
    let n_rows = feeder.n_sections() * 4;

    let mut path = Array2::zeros((n_rows, n_cols));
    for (p, &b) in node_buses.iter().enumerate() {
        for &si in feeder.path_sections(b) {
            for c in 0..4 {
                path[(si * 4 + c, p * 4 + c)] = 1.0;
            }
        }
    }

    // drop = path^T * blockdiag(Z) * path, accumulated per shared section.
    let mut drop_ohm = Array2::from_elem((n_cols, n_cols), Complex64::new(0.0, 0.0));
    for (si, section) in feeder.sections().iter().enumerate() {
        let z = section.impedance_block();
        let downstream: Vec<usize> = node_buses
            .iter()
            .enumerate()
            .filter(|(_, &b)| feeder.path_sections(b).contains(&si))
            .map(|(p, _)| p)
            .collect();
        for &pn in &downstream {
            for &pm in &downstream {
                for ci in 0..4 {
                    for cj in 0..4 {
                        drop_ohm[(pn * 4 + ci, pm * 4 + cj)] += z[(ci, cj)];
                    }
                }
            }
        }
    }

    TopologyMatrices {
        path,
        drop_ohm,
        node_buses,
        node_pos,
    }
}
