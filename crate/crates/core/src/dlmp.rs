//! Nodal prices from a solved OPF, their decomposition, and closed-form VUF
//! sensitivities.
//!
//! Stationarity with respect to the voltages ties the balance multipliers of
//! all non-substation buses to the remaining terms of the Lagrangian through
//! the square Jacobian `J = ∂(net outflow)/∂V`. Solving `Jᵀa = w` for each
//! group of terms `w` splits the price exactly:
//!
//! * substation balance terms give energy (the substation price on the same
//!   phase) plus loss (the rest);
//! * thermal terms give congestion;
//! * voltage-magnitude terms give the voltage-limit component;
//! * unbalance limit or penalty terms give the unbalance component.
//!
//! Prices are reported in €/kWh (€/kvarh): duals in €/h per unit divided by
//! the per-phase base power in kVA.

use nalgebra::{DMatrix, DVector, LU, Dyn};
use num_complex::Complex64;
use rayon::prelude::*;
use thiserror::Error;

use crate::ipsolver::OpfSolution;
use crate::netmodel::{NetworkSpec, Phase, UnbalanceMode};
use crate::network::Grid;
use crate::opf::{ConstraintKind, LineEnd, OpfError, OpfProblem};
use crate::powerflow::{self, Injections, OperatingPoint, PowerFlowError, FD_STEP};
use crate::sequence::{self, SequenceError};

/// Incident-current magnitude below which a sensitivity is undefined (pu).
pub const EPS_I: f64 = 1e-8;

/// Closed-form entries whose gap to the oracle exceeds this are flagged.
pub const FLAG_GAP: f64 = 0.25;

#[derive(Debug, Error)]
pub enum DlmpError {
    #[error("no prices for an unsuccessful solve (status: {0})")]
    Unsolved(String),
    #[error("outflow Jacobian is singular at the solved point")]
    Singular,
    #[error(transparent)]
    Eval(#[from] OpfError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PowerKind {
    Active,
    Reactive,
}

impl PowerKind {
    pub fn is_reactive(self) -> bool {
        self == PowerKind::Reactive
    }

    pub fn label(self) -> &'static str {
        match self {
            PowerKind::Active => "active",
            PowerKind::Reactive => "reactive",
        }
    }
}

/// Price and components at one bus, phase and power kind (€/kWh or €/kvarh).
#[derive(Debug, Clone, PartialEq)]
pub struct DlmpBreakdown {
    pub bus: String,
    pub bus_index: usize,
    pub phase: Phase,
    pub kind: PowerKind,
    pub total: f64,
    pub energy: f64,
    pub loss: f64,
    pub congestion: f64,
    pub voltage_limit: f64,
    pub unbalance: f64,
    pub residual: f64,
}

impl DlmpBreakdown {
    pub fn component_sum(&self) -> f64 {
        self.energy + self.loss + self.congestion + self.voltage_limit + self.unbalance
    }
}

/// Factorised transpose of the outflow Jacobian at one operating point.
pub struct PriceSystem {
    nv: usize,
    lu: LU<f64, Dyn, Dyn>,
    /// Gradient of each flow-definition power with respect to the voltages,
    /// indexed like the flow-definition rows.
    flow_grad: Vec<Vec<(usize, f64)>>,
    flow_base: usize,
}

impl PriceSystem {
    pub fn new(prob: &OpfProblem, x: &[f64]) -> Result<Self, DlmpError> {
        let grid = &prob.grid;
        let nv = grid.n_voltage_vars();
        let ev = prob.eval(x, &[], &[])?;
        let flow_base = 6 * grid.n_bus;
        let mut flow_grad = vec![Vec::new(); prob.eq_kinds.len() - flow_base];
        for &(r, c, v) in &ev.jac_eq {
            if r >= flow_base && c < nv {
                // Rows read `p − P(V)`, so ∇P is the negated entry.
                flow_grad[r - flow_base].push((c, -v));
            }
        }
        let mut jt = DMatrix::<f64>::zeros(nv, nv);
        for (l, br) in grid.branches.iter().enumerate() {
            for (end, bus) in [(LineEnd::From, br.from), (LineEnd::To, br.to)] {
                let Some(base) = grid.vvar(bus, 0) else { continue };
                for ph in 0..3 {
                    for reactive in [false, true] {
                        let row = base + 2 * ph + usize::from(reactive);
                        for &(c, v) in &flow_grad[prob.flow_row(l, end, ph, reactive) - flow_base] {
                            jt[(c, row)] += v;
                        }
                    }
                }
            }
        }
        let lu = jt.lu();
        if !lu.is_invertible() {
            return Err(DlmpError::Singular);
        }
        Ok(Self {
            nv,
            lu,
            flow_grad,
            flow_base,
        })
    }

    /// `−J⁻ᵀw`: the share of every non-substation balance multiplier explained
    /// by the stationarity terms `w` (gradient with respect to the voltages).
    pub fn attribute(&self, w: &[f64]) -> Result<Vec<f64>, DlmpError> {
        let a = self
            .lu
            .solve(&DVector::from_column_slice(&w[..self.nv]))
            .ok_or(DlmpError::Singular)?;
        Ok(a.iter().map(|v| -v).collect())
    }

    fn add_flow_grad(&self, w: &mut [f64], prob: &OpfProblem, line: usize, end: LineEnd, ph: usize, reactive: bool, k: f64) {
        for &(c, v) in &self.flow_grad[prob.flow_row(line, end, ph, reactive) - self.flow_base] {
            w[c] += k * v;
        }
    }
}

/// Unbalance component produced by weights `ρ_i` on `∇f_i` at the listed
/// buses, per non-substation voltage row (€/h per unit, unconverted).
pub fn unbalance_component(
    prob: &OpfProblem,
    system: &PriceSystem,
    x: &[f64],
    weights: &[(usize, f64)],
) -> Result<Vec<f64>, DlmpError> {
    let mut w = vec![0.0; system.nv];
    for &(bus, rho) in weights {
        let g = sequence::grad_f(&prob.phasors(x, bus))?.to_real();
        let base = prob.grid.vvar(bus, 0).expect("unbalance bus is not the substation");
        for k in 0..6 {
            w[base + k] += rho * g[k];
        }
    }
    system.attribute(&w)
}

/// Full price breakdown for every bus, phase and power kind.
pub fn decompose(sol: &OpfSolution, prob: &OpfProblem, net: &NetworkSpec) -> Result<Vec<DlmpBreakdown>, DlmpError> {
    if !sol.status.is_success() {
        return Err(DlmpError::Unsolved(sol.status.label().to_string()));
    }
    let grid = &prob.grid;
    let x = &sol.x;
    let nv = grid.n_voltage_vars();
    let system = PriceSystem::new(prob, x)?;
    let ev = prob.eval(x, &sol.lambda, &sol.z)?;
    let sub = grid.substation;
    let phi = |bus: usize, ph: usize, reactive: bool| sol.lambda[prob.balance_row(bus, Phase::from_index(ph), reactive)];

    // Substation balance terms.
    let mut w_sub = vec![0.0; nv];
    for &(l, is_from) in &grid.incident[sub] {
        let end = if is_from { LineEnd::From } else { LineEnd::To };
        for ph in 0..3 {
            for reactive in [false, true] {
                system.add_flow_grad(&mut w_sub, prob, l, end, ph, reactive, phi(sub, ph, reactive));
            }
        }
    }
    // Thermal, voltage and unbalance terms.
    let mut w_cong = vec![0.0; nv];
    let mut w_volt = vec![0.0; nv];
    let mut w_unb = vec![0.0; nv];
    for (r, kind) in prob.ineq_kinds.iter().enumerate() {
        if let ConstraintKind::Thermal { line, end, phase } = *kind {
            let e = usize::from(end == LineEnd::To);
            let p = x[prob.flow_p[line][e][phase.index()]];
            let q = x[prob.flow_q[line][e][phase.index()]];
            system.add_flow_grad(&mut w_cong, prob, line, end, phase.index(), false, 2.0 * sol.z[r] * p);
            system.add_flow_grad(&mut w_cong, prob, line, end, phase.index(), true, 2.0 * sol.z[r] * q);
        }
    }
    for &(r, c, v) in &ev.jac_ineq {
        if c >= nv {
            continue;
        }
        match prob.ineq_kinds[r] {
            ConstraintKind::VMagLo { .. } | ConstraintKind::VMagHi { .. } => w_volt[c] += sol.z[r] * v,
            ConstraintKind::VufLimit { .. } => w_unb[c] += sol.z[r] * v,
            _ => {}
        }
    }
    if prob.mode == UnbalanceMode::Soft {
        // The penalty is the only voltage-dependent part of the objective.
        for c in 0..nv {
            w_unb[c] += ev.grad[c];
        }
    }

    let sub_part = system.attribute(&w_sub)?;
    let cong = system.attribute(&w_cong)?;
    let volt = system.attribute(&w_volt)?;
    let unb = system.attribute(&w_unb)?;

    let to_kwh = |v: f64| net.base.price_to_eur_per_kwh(v);
    let mut out = Vec::with_capacity(6 * grid.n_bus);
    for (i, bus) in net.buses.iter().enumerate() {
        for ph in 0..3 {
            for kind in [PowerKind::Active, PowerKind::Reactive] {
                let reactive = kind.is_reactive();
                let total = to_kwh(phi(i, ph, reactive));
                let energy = to_kwh(phi(sub, ph, reactive));
                let mut b = DlmpBreakdown {
                    bus: bus.id.clone(),
                    bus_index: i,
                    phase: Phase::from_index(ph),
                    kind,
                    total,
                    energy,
                    loss: 0.0,
                    congestion: 0.0,
                    voltage_limit: 0.0,
                    unbalance: 0.0,
                    residual: 0.0,
                };
                if let Some(base) = grid.vvar(i, ph) {
                    let row = base + usize::from(reactive);
                    b.loss = to_kwh(sub_part[row]) - energy;
                    b.congestion = to_kwh(cong[row]);
                    b.voltage_limit = to_kwh(volt[row]);
                    b.unbalance = to_kwh(unb[row]);
                }
                b.residual = b.total - b.component_sum();
                out.push(b);
            }
        }
    }
    Ok(out)
}

/// Closed-form sensitivity value, or the reason it is undefined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sensitivity {
    Defined(f64),
    /// Incident current at or below [`EPS_I`]; carries its magnitude.
    Undefined { current: f64 },
}

impl Sensitivity {
    pub fn value(&self) -> Option<f64> {
        match *self {
            Sensitivity::Defined(v) => Some(v),
            Sensitivity::Undefined { .. } => None,
        }
    }
}

/// Real Jacobian of the six injected power components `(P, Q)` per phase
/// at `bus` with respect to that bus's `(x, y)` voltage parts, neighbouring
/// buses held fixed.
fn local_jacobian(grid: &Grid, v: &[[Complex64; 3]], bus: usize) -> DMatrix<f64> {
    let i = grid.incident_current(bus, v);
    let y = grid.incident_self_admittance(bus);
    let mut m = DMatrix::zeros(6, 6);
    for k in 0..3 {
        for c in 0..3 {
            let vy = v[bus][k] * y[k][c].conj();
            let mut ds_dx = vy;
            let mut ds_dy = -Complex64::i() * vy;
            if k == c {
                ds_dx += i[k].conj();
                ds_dy += Complex64::i() * i[k].conj();
            }
            m[(2 * k, 2 * c)] = ds_dx.re;
            m[(2 * k, 2 * c + 1)] = ds_dy.re;
            m[(2 * k + 1, 2 * c)] = ds_dx.im;
            m[(2 * k + 1, 2 * c + 1)] = ds_dy.im;
        }
    }
    m
}

/// Sensitivity of `f` at `bus` to extra demand on one phase (%² per unit).
///
/// The bus voltages move so that only the requested power component
/// changes, as given by the local Jacobian of the injected power; the
/// neighbouring buses stay put. Dropping the admittance and cross-phase
/// terms gives [`sensitivity_current_only`].
pub fn sensitivity_closed_form(
    grid: &Grid,
    point: &OperatingPoint,
    bus: usize,
    phase: Phase,
    kind: PowerKind,
) -> Result<Sensitivity, DlmpError> {
    let v = point.voltage_arrays();
    let current = grid.incident_current(bus, &v)[phase.index()].norm();
    if !(current > EPS_I) {
        return Ok(Sensitivity::Undefined { current });
    }
    let g = sequence::grad_f(&point.voltages[bus])?.phases;
    let mut rhs = DVector::zeros(6);
    rhs[2 * phase.index() + usize::from(kind.is_reactive())] = 1.0;
    let Some(d) = local_jacobian(grid, &v, bus).lu().solve(&rhs) else {
        return Ok(Sensitivity::Undefined { current });
    };
    let d_inj: f64 = (0..3).map(|c| g[c].re * d[2 * c] + g[c].im * d[2 * c + 1]).sum();
    if !d_inj.is_finite() {
        return Ok(Sensitivity::Undefined { current });
    }
    Ok(Sensitivity::Defined(-d_inj))
}

/// Sensitivity with the incident current held fixed while the phase voltage
/// moves: `dv = ΔS·ΣI/‖ΣI‖²`.
pub fn sensitivity_current_only(
    grid: &Grid,
    point: &OperatingPoint,
    bus: usize,
    phase: Phase,
    kind: PowerKind,
) -> Result<Sensitivity, DlmpError> {
    let v = point.voltage_arrays();
    let i = grid.incident_current(bus, &v)[phase.index()];
    if !(i.norm() > EPS_I) {
        return Ok(Sensitivity::Undefined { current: i.norm() });
    }
    let dir = match kind {
        PowerKind::Active => i,
        PowerKind::Reactive => Complex64::i() * i,
    };
    let g = sequence::grad_f(&point.voltages[bus])?.phases[phase.index()];
    Ok(Sensitivity::Defined(-(g * dir.conj()).re / dir.norm_sqr()))
}

/// `1/‖ΣI‖` at `(bus, phase)`, the factor that scales the current-only
/// projection; `None` when the current is below [`EPS_I`].
pub fn current_denominator(grid: &Grid, point: &OperatingPoint, bus: usize, phase: Phase) -> Option<f64> {
    let i = grid.incident_current(bus, &point.voltage_arrays())[phase.index()].norm();
    (i > EPS_I).then(|| 1.0 / i)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityEntry {
    pub bus: String,
    pub bus_index: usize,
    pub phase: Phase,
    pub kind: PowerKind,
    pub closed_form: Sensitivity,
    /// Central difference of `f` over ±[`FD_STEP`] of demand.
    pub finite_difference: f64,
    /// `|closed − fd| / |fd|`, `None` when undefined.
    pub rel_gap: Option<f64>,
    pub flagged: bool,
}

/// Central finite difference of `f` at `bus` with respect to demand.
pub fn fd_sensitivity(
    net: &NetworkSpec,
    injections: &Injections,
    point: &OperatingPoint,
    bus: usize,
    phase: Phase,
    kind: PowerKind,
) -> Result<f64, DlmpError> {
    let reactive = kind.is_reactive();
    let (_, up) = powerflow::perturb_and_resolve(net, injections, point, bus, phase, reactive, FD_STEP)?;
    let (_, down) = powerflow::perturb_and_resolve(net, injections, point, bus, phase, reactive, -FD_STEP)?;
    Ok((up - down) / (2.0 * FD_STEP))
}

/// Closed-form and oracle sensitivities for every non-substation bus, phase
/// and power kind. Perturbation solves run in parallel.
pub fn sensitivity_report(
    net: &NetworkSpec,
    point: &OperatingPoint,
    injections: &Injections,
) -> Result<Vec<SensitivityEntry>, DlmpError> {
    let grid = Grid::new(net);
    let mut keys = Vec::new();
    for bus in 0..grid.n_bus {
        if bus == grid.substation {
            continue;
        }
        for kind in [PowerKind::Active, PowerKind::Reactive] {
            for ph in Phase::ALL {
                keys.push((bus, ph, kind));
            }
        }
    }
    keys.par_iter()
        .map(|&(bus, phase, kind)| {
            let closed_form = sensitivity_closed_form(&grid, point, bus, phase, kind)?;
            let finite_difference = fd_sensitivity(net, injections, point, bus, phase, kind)?;
            let rel_gap = closed_form
                .value()
                .map(|c| (c - finite_difference).abs() / finite_difference.abs().max(f64::MIN_POSITIVE));
            Ok(SensitivityEntry {
                bus: net.buses[bus].id.clone(),
                bus_index: bus,
                phase,
                kind,
                closed_form,
                finite_difference,
                rel_gap,
                flagged: rel_gap.is_some_and(|g| g > FLAG_GAP),
            })
        })
        .collect()
}
