//! Three-phase unbalanced power flow with a balanced 1 pu slack at the
//! substation.
//!
//! Newton iteration on the current-injection mismatch
//! `Y·V − conj(S/V) = 0` in rectangular coordinates. Convergence is declared
//! on the power mismatch `|V·conj(Y·V) − S|∞`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

use crate::netmodel::{NetworkSpec, Phase, UnbalanceMode};
use crate::network::Grid;
use crate::sequence::{self, PhasorSet, SequenceError};

pub const TOL_PF: f64 = 1e-10;
pub const MAX_ITER: usize = 50;
/// Perturbation used by the finite-difference oracles (pu).
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerFlowError {
    #[error("power flow diverged after {iterations} iterations (mismatch {mismatch:e} pu)")]
    Diverged { iterations: usize, mismatch: f64 },
    #[error("singular power-flow Jacobian at iteration {0}")]
    Singular(usize),
    #[error("non-finite injection at bus {bus} phase {phase}")]
    BadInjection { bus: usize, phase: Phase },
    #[error(transparent)]
    Sequence(#[from] SequenceError),
}

/// Net complex power injected at each bus and phase (generation minus demand, pu).
/// The substation entry is ignored: the slack supplies whatever is needed.
#[derive(Debug, Clone, PartialEq)]
pub struct Injections(pub Vec<[Complex64; 3]>);

impl Injections {
    pub fn zero(n_bus: usize) -> Self {
        Self(vec![[Complex64::new(0.0, 0.0); 3]; n_bus])
    }

    /// Demand drawn by the loads plus each non-substation generator at its
    /// nominal set-point: zero-cost units at maximum active output, priced
    /// units at the point of their range closest to zero, reactive output at
    /// the point closest to zero.
    pub fn nominal(net: &NetworkSpec) -> Self {
        let mut inj: Vec<[Complex64; 3]> = net.demand().iter().map(|d| d.map(|s| -s)).collect();
        for g in net.generators.iter().filter(|g| !g.is_substation) {
            let i = net.bus_index(&g.bus).unwrap();
            for ph in Phase::ALL {
                let (pmin, pmax) = g.p_bounds(ph);
                let (qmin, qmax) = g.q_bounds(ph);
                let p = if g.cost == 0.0 { pmax } else { 0.0f64.clamp(pmin, pmax) };
                let q = 0.0f64.clamp(qmin, qmax);
                inj[i][ph.index()] += Complex64::new(p, q);
            }
        }
        Self(inj)
    }

    /// Adds `delta` of extra demand (active when `reactive` is false).
    pub fn add_demand(&mut self, bus: usize, phase: Phase, reactive: bool, delta: f64) {
        let d = if reactive {
            Complex64::new(0.0, delta)
        } else {
            Complex64::new(delta, 0.0)
        };
        self.0[bus][phase.index()] -= d;
    }
}

/// Solved power-flow state.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub voltages: Vec<PhasorSet>,
    /// Series current from the `from` end of each line, per phase.
    pub currents: Vec<[Complex64; 3]>,
    /// Complex power leaving the `from` end of each line.
    pub flow_from: Vec<[Complex64; 3]>,
    /// Complex power leaving the `to` end of each line.
    pub flow_to: Vec<[Complex64; 3]>,
    /// Total active losses (pu).
    pub losses: f64,
    pub iterations: usize,
    pub mismatch: f64,
}

impl OperatingPoint {
    pub fn from_voltages(grid: &Grid, v: &[[Complex64; 3]]) -> Self {
        let mut currents = Vec::with_capacity(grid.branches.len());
        let mut flow_from = Vec::with_capacity(grid.branches.len());
        let mut flow_to = Vec::with_capacity(grid.branches.len());
        let mut losses = 0.0;
        for b in 0..grid.branches.len() {
            currents.push(grid.branch_current(b, v));
            let (sf, st) = grid.branch_flows(b, v);
            losses += (0..3).map(|p| (sf[p] + st[p]).re).sum::<f64>();
            flow_from.push(sf);
            flow_to.push(st);
        }
        Self {
            voltages: v.iter().map(|x| PhasorSet::from_array(*x)).collect(),
            currents,
            flow_from,
            flow_to,
            losses,
            iterations: 0,
            mismatch: 0.0,
        }
    }

    pub fn voltage_arrays(&self) -> Vec<[Complex64; 3]> {
        self.voltages.iter().map(|v| v.as_array()).collect()
    }

    /// `f = VUF²` at a bus (%²).
    pub fn f_at(&self, bus: usize) -> Result<f64, SequenceError> {
        sequence::f_metric(&self.voltages[bus])
    }

    /// Highest VUF over all buses (%) and the bus index where it occurs.
    pub fn max_vuf(&self) -> Result<(f64, usize), SequenceError> {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, v) in self.voltages.iter().enumerate() {
            let u = sequence::vuf(v)?;
            if u > best.0 {
                best = (u, i);
            }
        }
        Ok(best)
    }

    /// Largest Kirchhoff current-law residual over non-substation buses,
    /// measured as a power mismatch against `injections`.
    pub fn kcl_residual(&self, grid: &Grid, injections: &Injections) -> f64 {
        let v = self.voltage_arrays();
        let mut worst: f64 = 0.0;
        for i in 0..grid.n_bus {
            if i == grid.substation {
                continue;
            }
            let out = grid.net_outflow(i, &v);
            for p in 0..3 {
                worst = worst.max((out[p] - injections.0[i][p]).norm());
            }
        }
        worst
    }
}

/// Solves the power flow from a flat start.
pub fn solve_pf(net: &NetworkSpec, injections: &Injections) -> Result<OperatingPoint, PowerFlowError> {
    solve_pf_from(net, injections, None)
}

/// Solves the power flow, optionally starting from a previous solution.
pub fn solve_pf_from(
    net: &NetworkSpec,
    injections: &Injections,
    start: Option<&OperatingPoint>,
) -> Result<OperatingPoint, PowerFlowError> {
    let grid = Grid::new(net);
    solve_on_grid(&grid, injections, start)
}

pub(crate) fn solve_on_grid(
    grid: &Grid,
    injections: &Injections,
    start: Option<&OperatingPoint>,
) -> Result<OperatingPoint, PowerFlowError> {
    for (i, s) in injections.0.iter().enumerate() {
        for (p, z) in s.iter().enumerate() {
            if !(z.re.is_finite() && z.im.is_finite()) {
                return Err(PowerFlowError::BadInjection {
                    bus: i,
                    phase: Phase::from_index(p),
                });
            }
        }
    }
    let mut v = match start {
        Some(op) => {
            let mut v = op.voltage_arrays();
            v[grid.substation] = grid.v_source;
            v
        }
        None => grid.flat_voltages(),
    };
    let n = grid.n_voltage_vars();
    if n == 0 {
        let mut op = OperatingPoint::from_voltages(grid, &v);
        op.mismatch = 0.0;
        return Ok(op);
    }

    let mut iterations = 0;
    loop {
        let mismatch = power_mismatch(grid, &v, injections);
        if mismatch < TOL_PF {
            let mut op = OperatingPoint::from_voltages(grid, &v);
            op.iterations = iterations;
            op.mismatch = mismatch;
            return Ok(op);
        }
        if iterations >= MAX_ITER || !mismatch.is_finite() {
            return Err(PowerFlowError::Diverged { iterations, mismatch });
        }

        let mut jac = DMatrix::<f64>::zeros(n, n);
        let mut rhs = DVector::<f64>::zeros(n);
        for i in 0..grid.n_bus {
            let Some(row_bus) = grid.slot[i] else { continue };
            let inc = grid.incident_current(i, &v);
            for p in 0..3 {
                let r = 2 * (3 * row_bus + p);
                let s = injections.0[i][p];
                let vi = v[i][p];
                // F = I_out(V) - conj(S / V)
                let f = inc[p] - (s / vi).conj();
                rhs[r] = -f.re;
                rhs[r + 1] = -f.im;
                // d conj(S/V) = c·conj(dV) with c = -conj(S)/conj(V)²
                let c = -s.conj() / (vi.conj() * vi.conj());
                jac[(r, r)] -= c.re;
                jac[(r, r + 1)] -= c.im;
                jac[(r + 1, r)] -= c.im;
                jac[(r + 1, r + 1)] += c.re;
            }
        }
        for br in &grid.branches {
            for (a, b, sign) in [(br.from, br.from, 1.0), (br.from, br.to, -1.0), (br.to, br.to, 1.0), (br.to, br.from, -1.0)] {
                let (Some(ra), Some(cb)) = (grid.slot[a], grid.slot[b]) else { continue };
                for p in 0..3 {
                    for q in 0..3 {
                        let y = sign * br.y[p][q];
                        let r = 2 * (3 * ra + p);
                        let c = 2 * (3 * cb + q);
                        jac[(r, c)] += y.re;
                        jac[(r, c + 1)] -= y.im;
                        jac[(r + 1, c)] += y.im;
                        jac[(r + 1, c + 1)] += y.re;
                    }
                }
            }
        }
        let dx = jac
            .lu()
            .solve(&rhs)
            .ok_or(PowerFlowError::Singular(iterations))?;
        for i in 0..grid.n_bus {
            let Some(k) = grid.slot[i] else { continue };
            for p in 0..3 {
                let o = 2 * (3 * k + p);
                v[i][p] += Complex64::new(dx[o], dx[o + 1]);
            }
        }
        iterations += 1;
    }
}

fn power_mismatch(grid: &Grid, v: &[[Complex64; 3]], injections: &Injections) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..grid.n_bus {
        if i == grid.substation {
            continue;
        }
        let out = grid.net_outflow(i, v);
        for p in 0..3 {
            worst = worst.max((out[p] - injections.0[i][p]).norm());
        }
    }
    worst
}

/// Re-solves with one extra demand increment at `(bus, phase)` and reports the
/// change of `f` at that bus.
pub fn perturb_and_resolve(
    net: &NetworkSpec,
    injections: &Injections,
    base: &OperatingPoint,
    bus: usize,
    phase: Phase,
    reactive: bool,
    delta: f64,
) -> Result<(OperatingPoint, f64), PowerFlowError> {
    let mut inj = injections.clone();
    inj.add_demand(bus, phase, reactive, delta);
    if delta == 0.0 {
        return Ok((base.clone(), 0.0));
    }
    let op = solve_pf_from(net, &inj, Some(base))?;
    let df = op.f_at(bus)? - base.f_at(bus)?;
    Ok((op, df))
}

/// Whether any unbalance-related term applies to this network configuration.
pub fn has_unbalance_terms(net: &NetworkSpec) -> bool {
    net.unbalance.mode != UnbalanceMode::None && !net.unbalance.buses.is_empty()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_bus(p: [f64; 3], q: [f64; 3]) -> NetworkSpec {
        let doc = format!(
            r#"{{
            "base_kva": 50, "base_volt_ln": 240,
            "buses": [{{"id": "src"}}, {{"id": "n1"}}],
            "lines": [{{"from": "src", "to": "n1",
                "z_real": [[0.12,0.04,0.04],[0.04,0.12,0.04],[0.04,0.04,0.12]],
                "z_imag": [[0.06,0.03,0.03],[0.03,0.06,0.03],[0.03,0.03,0.06]],
                "s_rating": 100}}],
            "loads": [{{"bus": "n1", "p": {p:?}, "q": {q:?}}}],
            "gens": [{{"bus": "src", "phases": ["a","b","c"], "pmin": [-100,-100,-100],
                "pmax": [100,100,100], "qmin": [-100,-100,-100], "qmax": [100,100,100],
                "cost": 1.0, "is_substation": true}}]
        }}"#
        );
        NetworkSpec::from_json_str(&doc).unwrap()
    }

    #[test]
    fn no_load_network_sits_at_source() {
        let net = two_bus([0.0; 3], [0.0; 3]);
        let op = solve_pf(&net, &Injections::nominal(&net)).unwrap();
        let src = PhasorSet::balanced(1.0, 0.0);
        for v in &op.voltages {
            for p in 0..3 {
                assert!((v.as_array()[p] - src.as_array()[p]).norm() < 1e-14);
            }
        }
        assert_eq!(op.losses, 0.0);
        assert!(op.flow_from[0].iter().all(|s| s.norm() == 0.0));
    }

    #[test]
    fn single_phase_load_obeys_ohms_law() {
        let net = two_bus([10.0, 0.0, 0.0], [3.0, 0.0, 0.0]);
        let grid = Grid::new(&net);
        let op = solve_pf(&net, &Injections::nominal(&net)).unwrap();
        let z = &net.lines[0].z;
        let i = op.currents[0];
        let drop: Vec<Complex64> = (0..3)
            .map(|p| op.voltages[0].as_array()[p] - op.voltages[1].as_array()[p])
            .collect();
        for p in 0..3 {
            let zi = z[p][0] * i[0] + z[p][1] * i[1] + z[p][2] * i[2];
            assert!((drop[p] - zi).norm() < 1e-10);
        }
        // Only phase a carries current.
        assert!(i[1].norm() < 1e-10 && i[2].norm() < 1e-10);
        assert!(op.kcl_residual(&grid, &Injections::nominal(&net)) < TOL_PF);
    }

    #[test]
    fn power_is_conserved() {
        let net = two_bus([10.0, 4.0, 7.0], [3.0, 1.0, 2.0]);
        let op = solve_pf(&net, &Injections::nominal(&net)).unwrap();
        let gen: f64 = op.flow_from[0].iter().map(|s| s.re).sum();
        let load: f64 = net.demand()[1].iter().map(|s| s.re).sum();
        assert_relative_eq!(gen, load + op.losses, epsilon = 1e-9);
        assert!(op.losses > 0.0);
    }

    #[test]
    fn zero_perturbation_changes_nothing() {
        let net = two_bus([10.0, 4.0, 7.0], [3.0, 1.0, 2.0]);
        let inj = Injections::nominal(&net);
        let op = solve_pf(&net, &inj).unwrap();
        let (_, df) = perturb_and_resolve(&net, &inj, &op, 1, Phase::B, false, 0.0).unwrap();
        assert_eq!(df, 0.0);
    }

    #[test]
    fn heavier_phase_load_increases_unbalance() {
        let net = two_bus([12.0, 4.0, 6.0], [3.0, 1.0, 1.5]);
        let inj = Injections::nominal(&net);
        let op = solve_pf(&net, &inj).unwrap();
        let (_, df) = perturb_and_resolve(&net, &inj, &op, 1, Phase::A, false, FD_STEP).unwrap();
        assert!(df > 0.0);
    }

    #[test]
    fn absurd_load_diverges_with_error() {
        let net = two_bus([4000.0, 0.0, 0.0], [0.0; 3]);
        let err = solve_pf(&net, &Injections::nominal(&net)).unwrap_err();
        assert!(matches!(err, PowerFlowError::Diverged { .. } | PowerFlowError::Singular(_)));
    }
}
