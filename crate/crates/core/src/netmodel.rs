//! Three-phase network description, per-unit normalisation and JSON ingestion.
//!
//! Network files are single JSON documents in physical units (kW, kvar, kVA,
//! ohm, volt, €/kWh). Everything held by [`NetworkSpec`] is per unit: powers
//! are divided by `base_kva` (applied per phase) and impedances by
//! `base_volt_ln² / (1000·base_kva)`. Bus voltage bounds are per unit in the
//! file as well.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_VMIN: f64 = 0.9;
pub const DEFAULT_VMAX: f64 = 1.1;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("cannot read network file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed network document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{element} references unknown bus \"{bus}\"")]
    UnknownBus { element: String, bus: String },
    #[error("duplicate bus identifier \"{0}\"")]
    DuplicateBus(String),
    #[error("network must have exactly one substation generator, found {0}")]
    Substation(usize),
    #[error("{element}: {field} must be positive (got {value})")]
    NonPositive {
        element: String,
        field: &'static str,
        value: f64,
    },
    #[error("{element}: {field} is not finite")]
    NonFinite { element: String, field: &'static str },
    #[error("{element}: lower bound {lo} exceeds upper bound {hi} for {field}")]
    Bounds {
        element: String,
        field: &'static str,
        lo: f64,
        hi: f64,
    },
    #[error("{0}: impedance matrix is not symmetric")]
    AsymmetricImpedance(String),
    #[error("{0}: impedance matrix is singular")]
    SingularImpedance(String),
    #[error("{element} connects bus \"{bus}\" to itself")]
    SelfLoop { element: String, bus: String },
    #[error("bus \"{0}\" is not connected to the substation")]
    Disconnected(String),
    #[error("invalid unbalance settings: {0}")]
    Unbalance(String),
    #[error("invalid per-unit base: {0}")]
    Base(String),
    #[error("{0}: a balanced generator needs all three phases with equal bounds")]
    Balanced(String),
}

/// Electrical phase of a three-phase network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Phase {
        Phase::ALL[i]
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::A => "a",
            Phase::B => "b",
            Phase::C => "c",
        };
        f.write_str(s)
    }
}

/// Base quantities of the per-unit system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerUnitBase {
    /// Power base applied to every phase quantity (kVA).
    pub base_kva: f64,
    /// Line-to-neutral voltage base (V).
    pub base_volt_ln: f64,
}

impl PerUnitBase {
    pub fn new(base_kva: f64, base_volt_ln: f64) -> Result<Self, NetworkError> {
        if !(base_kva.is_finite() && base_kva > 0.0) {
            return Err(NetworkError::Base(format!("base_kva = {base_kva}")));
        }
        if !(base_volt_ln.is_finite() && base_volt_ln > 0.0) {
            return Err(NetworkError::Base(format!("base_volt_ln = {base_volt_ln}")));
        }
        Ok(Self {
            base_kva,
            base_volt_ln,
        })
    }

    pub fn impedance_base_ohm(&self) -> f64 {
        self.base_volt_ln * self.base_volt_ln / (1000.0 * self.base_kva)
    }

    pub fn current_base_amp(&self) -> f64 {
        1000.0 * self.base_kva / self.base_volt_ln
    }

    /// kW, kvar or kVA to per unit.
    pub fn power_to_pu(&self, k: f64) -> f64 {
        k / self.base_kva
    }

    pub fn power_from_pu(&self, pu: f64) -> f64 {
        pu * self.base_kva
    }

    pub fn impedance_to_pu(&self, ohm: f64) -> f64 {
        ohm / self.impedance_base_ohm()
    }

    pub fn impedance_from_pu(&self, pu: f64) -> f64 {
        pu * self.impedance_base_ohm()
    }

    pub fn voltage_to_pu(&self, volt: f64) -> f64 {
        volt / self.base_volt_ln
    }

    pub fn voltage_from_pu(&self, pu: f64) -> f64 {
        pu * self.base_volt_ln
    }

    /// Converts a price in €/h per per-unit power into €/kWh.
    pub fn price_to_eur_per_kwh(&self, per_pu: f64) -> f64 {
        per_pu / self.base_kva
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BusSpec {
    pub id: String,
    pub vmin: f64,
    pub vmax: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineSpec {
    pub from: String,
    pub to: String,
    /// Kron-reduced series impedance (pu).
    pub z: [[Complex64; 3]; 3],
    /// Per-phase apparent power limit (pu).
    pub s_rating: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadSpec {
    pub bus: String,
    pub p: [f64; 3],
    pub q: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub id: String,
    pub bus: String,
    pub phases: BTreeSet<Phase>,
    pub pmin: [f64; 3],
    pub pmax: [f64; 3],
    pub qmin: [f64; 3],
    pub qmax: [f64; 3],
    /// Marginal cost (€/kWh).
    pub cost: f64,
    pub is_substation: bool,
    /// Three-phase unit whose phases share one P and one Q setpoint.
    pub balanced: bool,
}

impl GenSpec {
    /// Bounds with absent phases collapsed to zero.
    pub fn p_bounds(&self, phase: Phase) -> (f64, f64) {
        if self.phases.contains(&phase) {
            (self.pmin[phase.index()], self.pmax[phase.index()])
        } else {
            (0.0, 0.0)
        }
    }

    pub fn q_bounds(&self, phase: Phase) -> (f64, f64) {
        if self.phases.contains(&phase) {
            (self.qmin[phase.index()], self.qmax[phase.index()])
        } else {
            (0.0, 0.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnbalanceMode {
    #[default]
    None,
    Hard,
    Soft,
}

impl fmt::Display for UnbalanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            UnbalanceMode::None => "none",
            UnbalanceMode::Hard => "hard",
            UnbalanceMode::Soft => "soft",
        };
        f.write_str(s)
    }
}

/// What the soft-mode penalty is linear in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyBasis {
    /// `c·f` with `f = VUF²` in %².
    #[default]
    F,
    /// `c·VUF` in %, smoothed near zero.
    Vuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnbalanceConfig {
    pub mode: UnbalanceMode,
    /// Hard-mode VUF limit (%).
    pub vuf_limit: f64,
    /// Soft-mode weight (€/h per %², or per % with [`PenaltyBasis::Vuf`]).
    pub penalty_weight: f64,
    pub penalty_on: PenaltyBasis,
    /// Buses where the unbalance term applies.
    pub buses: Vec<String>,
}

impl Default for UnbalanceConfig {
    fn default() -> Self {
        Self {
            mode: UnbalanceMode::None,
            vuf_limit: 0.0,
            penalty_weight: 0.0,
            penalty_on: PenaltyBasis::F,
            buses: Vec::new(),
        }
    }
}

impl UnbalanceConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn hard(limit_pct: f64) -> Self {
        Self {
            mode: UnbalanceMode::Hard,
            vuf_limit: limit_pct,
            ..Self::default()
        }
    }

    pub fn soft(weight: f64) -> Self {
        Self {
            mode: UnbalanceMode::Soft,
            penalty_weight: weight,
            ..Self::default()
        }
    }

    /// Same mode and parameters, bus subset taken from `other`.
    pub fn with_buses_of(mut self, other: &UnbalanceConfig) -> Self {
        self.buses = other.buses.clone();
        self
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        match self.mode {
            UnbalanceMode::Hard if !(self.vuf_limit.is_finite() && self.vuf_limit > 0.0) => Err(
                NetworkError::Unbalance(format!("hard mode needs limit_pct > 0, got {}", self.vuf_limit)),
            ),
            UnbalanceMode::Soft if !(self.penalty_weight.is_finite() && self.penalty_weight >= 0.0) => {
                Err(NetworkError::Unbalance(format!(
                    "soft mode needs penalty >= 0, got {}",
                    self.penalty_weight
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Validated three-phase network in per unit. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub base: PerUnitBase,
    pub buses: Vec<BusSpec>,
    pub lines: Vec<LineSpec>,
    pub loads: Vec<LoadSpec>,
    pub generators: Vec<GenSpec>,
    pub substation_bus: String,
    pub unbalance: UnbalanceConfig,
}

impl NetworkSpec {
    pub fn bus_index(&self, id: &str) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn substation_index(&self) -> usize {
        self.bus_index(&self.substation_bus)
            .expect("validated network has its substation bus")
    }

    /// Per-bus, per-phase demand `P + jQ` (pu), summed over all loads.
    pub fn demand(&self) -> Vec<[Complex64; 3]> {
        let mut d = vec![[Complex64::new(0.0, 0.0); 3]; self.buses.len()];
        for load in &self.loads {
            let i = self.bus_index(&load.bus).unwrap();
            for ph in 0..3 {
                d[i][ph] += Complex64::new(load.p[ph], load.q[ph]);
            }
        }
        d
    }

    pub fn total_demand_kw(&self) -> [f64; 3] {
        let mut t = [0.0; 3];
        for load in &self.loads {
            for ph in 0..3 {
                t[ph] += self.base.power_from_pu(load.p[ph]);
            }
        }
        t
    }

    /// Buses adjacent to `bus` through a line.
    pub fn neighbours(&self, bus: &str) -> Vec<&str> {
        self.lines
            .iter()
            .filter_map(|l| {
                if l.from == bus {
                    Some(l.to.as_str())
                } else if l.to == bus {
                    Some(l.from.as_str())
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn is_radial(&self) -> bool {
        self.lines.len() + 1 == self.buses.len()
    }

    /// Number of lines on the path from each bus to the substation.
    pub fn hops_from_substation(&self) -> Vec<usize> {
        let idx: BTreeMap<&str, usize> = self
            .buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id.as_str(), i))
            .collect();
        let mut adj = vec![Vec::new(); self.buses.len()];
        for l in &self.lines {
            let (f, t) = (idx[l.from.as_str()], idx[l.to.as_str()]);
            adj[f].push(t);
            adj[t].push(f);
        }
        let mut hops = vec![usize::MAX; self.buses.len()];
        let s = self.substation_index();
        hops[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &w in &adj[u] {
                if hops[w] == usize::MAX {
                    hops[w] = hops[u] + 1;
                    queue.push_back(w);
                }
            }
        }
        hops
    }

    /// Copy of the network with a different unbalance configuration. An empty
    /// bus list in `cfg` keeps the current subset.
    pub fn with_unbalance(&self, cfg: UnbalanceConfig) -> Result<Self, NetworkError> {
        let mut net = self.clone();
        let buses = if cfg.buses.is_empty() {
            self.unbalance.buses.clone()
        } else {
            cfg.buses.clone()
        };
        net.unbalance = UnbalanceConfig { buses, ..cfg };
        net.validate()?;
        Ok(net)
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<(), NetworkError> {
        let mut ids = BTreeSet::new();
        for b in &self.buses {
            if !ids.insert(b.id.as_str()) {
                return Err(NetworkError::DuplicateBus(b.id.clone()));
            }
            let el = format!("bus \"{}\"", b.id);
            finite(&el, "vmin", b.vmin)?;
            finite(&el, "vmax", b.vmax)?;
            if b.vmin <= 0.0 {
                return Err(NetworkError::NonPositive {
                    element: el,
                    field: "vmin",
                    value: b.vmin,
                });
            }
            if b.vmin >= b.vmax {
                return Err(NetworkError::Bounds {
                    element: el,
                    field: "voltage",
                    lo: b.vmin,
                    hi: b.vmax,
                });
            }
        }
        let known = |element: String, bus: &str| {
            if ids.contains(bus) {
                Ok(())
            } else {
                Err(NetworkError::UnknownBus {
                    element,
                    bus: bus.to_string(),
                })
            }
        };
        for (k, l) in self.lines.iter().enumerate() {
            let el = format!("line {k} ({}-{})", l.from, l.to);
            known(el.clone(), &l.from)?;
            known(el.clone(), &l.to)?;
            if l.from == l.to {
                return Err(NetworkError::SelfLoop {
                    element: el,
                    bus: l.from.clone(),
                });
            }
            finite(&el, "s_rating", l.s_rating)?;
            if l.s_rating <= 0.0 {
                return Err(NetworkError::NonPositive {
                    element: el,
                    field: "s_rating",
                    value: l.s_rating,
                });
            }
            for r in 0..3 {
                for c in 0..3 {
                    finite(&el, "z", l.z[r][c].re)?;
                    finite(&el, "z", l.z[r][c].im)?;
                    let diff = l.z[r][c] - l.z[c][r];
                    if diff.norm() > 1e-12 * (1.0 + l.z[r][c].norm()) {
                        return Err(NetworkError::AsymmetricImpedance(el));
                    }
                }
                if l.z[r][r].re <= 0.0 {
                    return Err(NetworkError::NonPositive {
                        element: el,
                        field: "z diagonal resistance",
                        value: l.z[r][r].re,
                    });
                }
            }
            if crate::network::invert3(&l.z).is_none() {
                return Err(NetworkError::SingularImpedance(el));
            }
        }
        for (k, d) in self.loads.iter().enumerate() {
            let el = format!("load {k} at bus \"{}\"", d.bus);
            known(el.clone(), &d.bus)?;
            for ph in 0..3 {
                finite(&el, "p", d.p[ph])?;
                finite(&el, "q", d.q[ph])?;
            }
        }
        let mut n_sub = 0;
        for g in &self.generators {
            let el = format!("generator \"{}\"", g.id);
            known(el.clone(), &g.bus)?;
            finite(&el, "cost", g.cost)?;
            if g.cost < 0.0 {
                return Err(NetworkError::NonPositive {
                    element: el,
                    field: "cost",
                    value: g.cost,
                });
            }
            for ph in Phase::ALL {
                let i = ph.index();
                for (field, lo, hi) in [("p", g.pmin[i], g.pmax[i]), ("q", g.qmin[i], g.qmax[i])] {
                    finite(&el, field, lo)?;
                    finite(&el, field, hi)?;
                    if lo > hi {
                        return Err(NetworkError::Bounds {
                            element: el,
                            field,
                            lo,
                            hi,
                        });
                    }
                }
            }
            if g.balanced {
                let same = |v: &[f64; 3]| v[0] == v[1] && v[1] == v[2];
                if g.phases.len() != 3
                    || !same(&g.pmin)
                    || !same(&g.pmax)
                    || !same(&g.qmin)
                    || !same(&g.qmax)
                {
                    return Err(NetworkError::Balanced(el));
                }
            }
            if g.is_substation {
                n_sub += 1;
                if g.bus != self.substation_bus {
                    return Err(NetworkError::Substation(2));
                }
            }
        }
        if n_sub != 1 {
            return Err(NetworkError::Substation(n_sub));
        }
        known("substation".to_string(), &self.substation_bus)?;

        let hops = self.hops_from_substation();
        if let Some(i) = hops.iter().position(|&h| h == usize::MAX) {
            return Err(NetworkError::Disconnected(self.buses[i].id.clone()));
        }

        self.unbalance.validate()?;
        let mut seen = BTreeSet::new();
        for b in &self.unbalance.buses {
            known("unbalance bus subset".to_string(), b)?;
            if *b == self.substation_bus {
                return Err(NetworkError::Unbalance(
                    "the substation voltage is fixed and cannot carry an unbalance term".into(),
                ));
            }
            if !seen.insert(b.as_str()) {
                return Err(NetworkError::Unbalance(format!("bus \"{b}\" listed twice")));
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self, NetworkError> {
        let doc: NetworkDocument = serde_json::from_str(s)?;
        Self::from_document(&doc)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("network document serialises")
    }

    pub fn from_document(doc: &NetworkDocument) -> Result<Self, NetworkError> {
        let base = PerUnitBase::new(doc.base_kva, doc.base_volt_ln)?;
        let buses = doc
            .buses
            .iter()
            .map(|b| BusSpec {
                id: b.id.clone(),
                vmin: b.vmin.unwrap_or(DEFAULT_VMIN),
                vmax: b.vmax.unwrap_or(DEFAULT_VMAX),
            })
            .collect();
        let lines = doc
            .lines
            .iter()
            .map(|l| {
                let mut z = [[Complex64::new(0.0, 0.0); 3]; 3];
                for r in 0..3 {
                    for c in 0..3 {
                        z[r][c] = Complex64::new(
                            base.impedance_to_pu(l.z_real[r][c]),
                            base.impedance_to_pu(l.z_imag[r][c]),
                        );
                    }
                }
                LineSpec {
                    from: l.from.clone(),
                    to: l.to.clone(),
                    z,
                    s_rating: base.power_to_pu(l.s_rating),
                }
            })
            .collect();
        let loads = doc
            .loads
            .iter()
            .map(|d| LoadSpec {
                bus: d.bus.clone(),
                p: d.p.map(|x| base.power_to_pu(x)),
                q: d.q.map(|x| base.power_to_pu(x)),
            })
            .collect();
        let generators: Vec<GenSpec> = doc
            .gens
            .iter()
            .enumerate()
            .map(|(k, g)| GenSpec {
                id: g.id.clone().unwrap_or_else(|| format!("gen{k}")),
                bus: g.bus.clone(),
                phases: g.phases.iter().copied().collect(),
                pmin: g.pmin.map(|x| base.power_to_pu(x)),
                pmax: g.pmax.map(|x| base.power_to_pu(x)),
                qmin: g.qmin.map(|x| base.power_to_pu(x)),
                qmax: g.qmax.map(|x| base.power_to_pu(x)),
                cost: g.cost,
                is_substation: g.is_substation,
                balanced: g.balanced,
            })
            .collect();
        let subs: Vec<&GenSpec> = generators.iter().filter(|g| g.is_substation).collect();
        if subs.len() != 1 {
            return Err(NetworkError::Substation(subs.len()));
        }
        let substation_bus = subs[0].bus.clone();

        let unbalance = doc.unbalance.as_ref().map(UnbalanceDoc::to_config).unwrap_or_default();
        let mut net = NetworkSpec {
            base,
            buses,
            lines,
            loads,
            generators,
            substation_bus,
            unbalance,
        };
        if net.unbalance.buses.is_empty() {
            net.unbalance.buses = net
                .buses
                .iter()
                .filter(|b| b.id != net.substation_bus)
                .map(|b| b.id.clone())
                .collect();
        }
        net.validate()?;
        Ok(net)
    }

    pub fn to_document(&self) -> NetworkDocument {
        let b = &self.base;
        NetworkDocument {
            base_kva: b.base_kva,
            base_volt_ln: b.base_volt_ln,
            buses: self
                .buses
                .iter()
                .map(|x| BusDoc {
                    id: x.id.clone(),
                    vmin: Some(x.vmin),
                    vmax: Some(x.vmax),
                })
                .collect(),
            lines: self
                .lines
                .iter()
                .map(|l| LineDoc {
                    from: l.from.clone(),
                    to: l.to.clone(),
                    z_real: l.z.map(|row| row.map(|z| b.impedance_from_pu(z.re))),
                    z_imag: l.z.map(|row| row.map(|z| b.impedance_from_pu(z.im))),
                    s_rating: b.power_from_pu(l.s_rating),
                })
                .collect(),
            loads: self
                .loads
                .iter()
                .map(|d| LoadDoc {
                    bus: d.bus.clone(),
                    p: d.p.map(|x| b.power_from_pu(x)),
                    q: d.q.map(|x| b.power_from_pu(x)),
                })
                .collect(),
            gens: self
                .generators
                .iter()
                .map(|g| GenDoc {
                    id: Some(g.id.clone()),
                    bus: g.bus.clone(),
                    phases: g.phases.iter().copied().collect(),
                    pmin: g.pmin.map(|x| b.power_from_pu(x)),
                    pmax: g.pmax.map(|x| b.power_from_pu(x)),
                    qmin: g.qmin.map(|x| b.power_from_pu(x)),
                    qmax: g.qmax.map(|x| b.power_from_pu(x)),
                    cost: g.cost,
                    is_substation: g.is_substation,
                    balanced: g.balanced,
                })
                .collect(),
            unbalance: Some(UnbalanceDoc {
                mode: self.unbalance.mode,
                limit_pct: Some(self.unbalance.vuf_limit),
                penalty: Some(self.unbalance.penalty_weight),
                penalty_on: Some(self.unbalance.penalty_on),
                buses: self.unbalance.buses.clone(),
            }),
        }
    }
}

fn finite(element: &str, field: &'static str, x: f64) -> Result<(), NetworkError> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(NetworkError::NonFinite {
            element: element.to_string(),
            field,
        })
    }
}

/// Reads and validates a network file.
pub fn load_network(path: impl AsRef<Path>) -> Result<NetworkSpec, NetworkError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| NetworkError::Io {
        path: path.display().to_string(),
        source,
    })?;
    NetworkSpec::from_json_str(&text)
}

// On-disk schema, physical units.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDocument {
    pub base_kva: f64,
    pub base_volt_ln: f64,
    pub buses: Vec<BusDoc>,
    pub lines: Vec<LineDoc>,
    #[serde(default)]
    pub loads: Vec<LoadDoc>,
    pub gens: Vec<GenDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unbalance: Option<UnbalanceDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusDoc {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vmin: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vmax: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineDoc {
    pub from: String,
    pub to: String,
    pub z_real: [[f64; 3]; 3],
    pub z_imag: [[f64; 3]; 3],
    pub s_rating: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadDoc {
    pub bus: String,
    pub p: [f64; 3],
    pub q: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub bus: String,
    pub phases: Vec<Phase>,
    pub pmin: [f64; 3],
    pub pmax: [f64; 3],
    pub qmin: [f64; 3],
    pub qmax: [f64; 3],
    pub cost: f64,
    #[serde(default)]
    pub is_substation: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub balanced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnbalanceDoc {
    pub mode: UnbalanceMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit_pct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty_on: Option<PenaltyBasis>,
    #[serde(default)]
    pub buses: Vec<String>,
}

impl UnbalanceDoc {
    /// Missing parameters become zero; an empty bus list is left empty.
    pub fn to_config(&self) -> UnbalanceConfig {
        UnbalanceConfig {
            mode: self.mode,
            vuf_limit: self.limit_pct.unwrap_or(0.0),
            penalty_weight: self.penalty.unwrap_or(0.0),
            penalty_on: self.penalty_on.unwrap_or_default(),
            buses: self.buses.clone(),
        }
    }
}
