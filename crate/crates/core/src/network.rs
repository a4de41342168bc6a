//! Index-resolved view of a [`NetworkSpec`] shared by the power flow, the OPF
//! assembly and the price decomposition.
//!
//! Voltage unknowns exist for every non-substation bus and phase, stored in
//! rectangular form: the real part of `(bus k, phase φ)` sits at
//! `2·(3k + φ)` and the imaginary part right after it.

use num_complex::Complex64;

use crate::netmodel::NetworkSpec;
use crate::sequence::PhasorSet;

pub type Mat3 = [[Complex64; 3]; 3];

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Inverse of a 3×3 complex matrix, `None` when numerically singular.
pub fn invert3(m: &Mat3) -> Option<Mat3> {
    let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let c00 = cof(1, 2, 1, 2);
    let c01 = -cof(1, 2, 0, 2);
    let c02 = cof(1, 2, 0, 1);
    let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
    let scale = m.iter().flatten().map(|z| z.norm()).fold(0.0, f64::max);
    if !(det.norm() > 1e-14 * scale * scale * scale) {
        return None;
    }
    let adj = [
        [c00, -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
        [c01, cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
        [c02, -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
    ];
    let mut inv = [[ZERO; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            inv[r][c] = adj[r][c] / det;
        }
    }
    Some(inv)
}

pub fn mat_vec(m: &Mat3, v: &[Complex64; 3]) -> [Complex64; 3] {
    let mut out = [ZERO; 3];
    for r in 0..3 {
        out[r] = m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2];
    }
    out
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    /// Series admittance `Z⁻¹` (pu).
    pub y: Mat3,
    pub s_rating: f64,
}

#[derive(Debug, Clone)]
pub struct Grid {
    pub n_bus: usize,
    pub substation: usize,
    pub branches: Vec<Branch>,
    /// Position of each bus among the voltage unknowns (`None` for the substation).
    pub slot: Vec<Option<usize>>,
    /// Lines incident to each bus: `(branch index, true if the bus is the from end)`.
    pub incident: Vec<Vec<(usize, bool)>>,
    pub v_source: [Complex64; 3],
}

impl Grid {
    pub fn new(net: &NetworkSpec) -> Self {
        let n_bus = net.buses.len();
        let substation = net.substation_index();
        let branches: Vec<Branch> = net
            .lines
            .iter()
            .map(|l| Branch {
                from: net.bus_index(&l.from).unwrap(),
                to: net.bus_index(&l.to).unwrap(),
                y: invert3(&l.z).expect("validated line impedance is invertible"),
                s_rating: l.s_rating,
            })
            .collect();
        let mut slot = vec![None; n_bus];
        let mut k = 0;
        for (i, s) in slot.iter_mut().enumerate() {
            if i != substation {
                *s = Some(k);
                k += 1;
            }
        }
        let mut incident = vec![Vec::new(); n_bus];
        for (b, br) in branches.iter().enumerate() {
            incident[br.from].push((b, true));
            incident[br.to].push((b, false));
        }
        Self {
            n_bus,
            substation,
            branches,
            slot,
            incident,
            v_source: PhasorSet::balanced(1.0, 0.0).as_array(),
        }
    }

    /// Number of real voltage unknowns.
    pub fn n_voltage_vars(&self) -> usize {
        6 * (self.n_bus - 1)
    }

    /// Index of the real part of `(bus, phase)` among the voltage unknowns.
    pub fn vvar(&self, bus: usize, phase: usize) -> Option<usize> {
        self.slot[bus].map(|k| 2 * (3 * k + phase))
    }

    /// Flat voltage profile: every bus at the source phasors.
    pub fn flat_voltages(&self) -> Vec<[Complex64; 3]> {
        vec![self.v_source; self.n_bus]
    }

    pub fn voltages_from_vars(&self, x: &[f64]) -> Vec<[Complex64; 3]> {
        (0..self.n_bus)
            .map(|i| match self.slot[i] {
                None => self.v_source,
                Some(k) => {
                    let mut v = [ZERO; 3];
                    for (ph, vp) in v.iter_mut().enumerate() {
                        let o = 2 * (3 * k + ph);
                        *vp = Complex64::new(x[o], x[o + 1]);
                    }
                    v
                }
            })
            .collect()
    }

    pub fn vars_from_voltages(&self, v: &[[Complex64; 3]]) -> Vec<f64> {
        let mut x = vec![0.0; self.n_voltage_vars()];
        for i in 0..self.n_bus {
            if let Some(k) = self.slot[i] {
                for ph in 0..3 {
                    let o = 2 * (3 * k + ph);
                    x[o] = v[i][ph].re;
                    x[o + 1] = v[i][ph].im;
                }
            }
        }
        x
    }

    /// Series current leaving the from end of a branch.
    pub fn branch_current(&self, b: usize, v: &[[Complex64; 3]]) -> [Complex64; 3] {
        let br = &self.branches[b];
        let dv = [0, 1, 2].map(|p| v[br.from][p] - v[br.to][p]);
        mat_vec(&br.y, &dv)
    }

    /// Complex power leaving each end of a branch, `(from end, to end)`.
    pub fn branch_flows(&self, b: usize, v: &[[Complex64; 3]]) -> ([Complex64; 3], [Complex64; 3]) {
        let br = &self.branches[b];
        let i = self.branch_current(b, v);
        let sf = [0, 1, 2].map(|p| v[br.from][p] * i[p].conj());
        let st = [0, 1, 2].map(|p| v[br.to][p] * (-i[p]).conj());
        (sf, st)
    }

    /// Sum of currents leaving a bus through its lines, per phase.
    pub fn incident_current(&self, bus: usize, v: &[[Complex64; 3]]) -> [Complex64; 3] {
        let mut sum = [ZERO; 3];
        for &(b, is_from) in &self.incident[bus] {
            let i = self.branch_current(b, v);
            let sign = if is_from { 1.0 } else { -1.0 };
            for p in 0..3 {
                sum[p] += sign * i[p];
            }
        }
        sum
    }

    /// Sum over incident lines of the self-admittance seen from `bus`.
    pub fn incident_self_admittance(&self, bus: usize) -> Mat3 {
        let mut y = [[ZERO; 3]; 3];
        for &(b, _) in &self.incident[bus] {
            for r in 0..3 {
                for c in 0..3 {
                    y[r][c] += self.branches[b].y[r][c];
                }
            }
        }
        y
    }

    /// Complex power leaving a bus into the network, per phase.
    pub fn net_outflow(&self, bus: usize, v: &[[Complex64; 3]]) -> [Complex64; 3] {
        let i = self.incident_current(bus, v);
        [0, 1, 2].map(|p| v[bus][p] * i[p].conj())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_coupled_impedance() {
        let z: Mat3 = [
            [Complex64::new(0.3, 0.2), Complex64::new(0.1, 0.08), Complex64::new(0.09, 0.07)],
            [Complex64::new(0.1, 0.08), Complex64::new(0.31, 0.21), Complex64::new(0.1, 0.08)],
            [Complex64::new(0.09, 0.07), Complex64::new(0.1, 0.08), Complex64::new(0.29, 0.19)],
        ];
        let y = invert3(&z).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let mut s = ZERO;
                for k in 0..3 {
                    s += z[r][k] * y[k][c];
                }
                let expect = if r == c { 1.0 } else { 0.0 };
                assert!((s - Complex64::new(expect, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_matrix_detected() {
        let one = Complex64::new(1.0, 0.0);
        let z = [[one; 3]; 3];
        assert!(invert3(&z).is_none());
    }
}
