//! Symmetrical-component arithmetic on a single bus.
//!
//! The unbalance metric used throughout the crate is `f = VUF²`, expressed in
//! squared percent. [`vuf`] only takes the square root for reporting; the
//! optimisation layers work with [`f_metric`], [`grad_f`] and [`hess_f`].
//!
//! Gradients are returned as *real* gradients packed into complex numbers:
//! for a phase voltage `v = x + jy` the entry is `∂f/∂x + j ∂f/∂y`, which is
//! `2·conj(∂f/∂v)` in Wirtinger notation.

use num_complex::Complex64;
use thiserror::Error;

/// Positive-sequence magnitude below which VUF is undefined (per unit).
pub const EPS_POS: f64 = 1e-9;

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Percent-squared scaling applied to the raw ratio `|V-|²/|V+|²`.
const PCT2: f64 = 1e4;

/// The rotation operator `a = e^{j120°}`.
pub const ROT: Complex64 = Complex64 {
    re: -0.5,
    im: 0.866_025_403_784_438_6,
};

/// `a² = e^{-j120°}`.
pub const ROT2: Complex64 = Complex64 {
    re: -0.5,
    im: -0.866_025_403_784_438_6,
};

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum SequenceError {
    #[error("degenerate phasor set: positive-sequence magnitude {0:e} pu is below {EPS_POS:e}")]
    Degenerate(f64),
}

/// The three complex phase-to-neutral voltages of one bus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhasorSet {
    pub va: Complex64,
    pub vb: Complex64,
    pub vc: Complex64,
}

impl PhasorSet {
    pub fn new(va: Complex64, vb: Complex64, vc: Complex64) -> Self {
        Self { va, vb, vc }
    }

    pub fn from_array(v: [Complex64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    /// Phasors given as `(magnitude, angle in degrees)` pairs.
    pub fn from_polar_deg(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> Self {
        let p = |(m, d): (f64, f64)| Complex64::from_polar(m, d.to_radians());
        Self::new(p(a), p(b), p(c))
    }

    /// A positive-sequence set of magnitude `mag` with phase `a` at `angle_deg`.
    pub fn balanced(mag: f64, angle_deg: f64) -> Self {
        let va = Complex64::from_polar(mag, angle_deg.to_radians());
        Self::new(va, ROT2 * va, ROT * va)
    }

    pub fn as_array(&self) -> [Complex64; 3] {
        [self.va, self.vb, self.vc]
    }

    pub fn scale(&self, c: Complex64) -> Self {
        Self::new(c * self.va, c * self.vb, c * self.vc)
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// Line voltages `(v_ab, v_bc, v_ca)`.
    pub fn line_voltages(&self) -> (Complex64, Complex64, Complex64) {
        (self.va - self.vb, self.vb - self.vc, self.vc - self.va)
    }

    /// Line voltage between the two phases other than `phase`.
    pub fn opposite_line_voltage(&self, phase: usize) -> Complex64 {
        let (vab, vbc, vca) = self.line_voltages();
        match phase {
            0 => vbc,
            1 => vca,
            2 => vab,
            _ => panic!("phase index {phase} out of range"),
        }
    }

    // Unnormalised positive and negative sequence sums (3·V+ and 3·V-),
    // evaluated with compensated products so that the negative sequence of
    // a balanced set comes out at the rounding level of the inputs.
    fn pos_sum(&self) -> Complex64 {
        self.rotated_sum(1.0)
    }

    fn neg_sum(&self) -> Complex64 {
        self.rotated_sum(-1.0)
    }

    /// `va + a^k·vb + a^{-k}·vc` with `sign = ±1` selecting `k = ±1`.
    fn rotated_sum(&self, sign: f64) -> Complex64 {
        let s = sign * ROT.im;
        let (a, b, c) = (self.va, self.vb, self.vc);
        Complex64::new(
            dot2(&[1.0, -0.5, -0.5, -s, s], &[a.re, b.re, c.re, b.im, c.im]),
            dot2(&[1.0, -0.5, -0.5, s, -s], &[a.im, b.im, c.im, b.re, c.re]),
        )
    }
}

/// Dot product in twice the working precision (compensated `Dot2`).
fn dot2(a: &[f64], b: &[f64]) -> f64 {
    let two_prod = |x: f64, y: f64| {
        let p = x * y;
        (p, x.mul_add(y, -p))
    };
    let (mut p, mut err) = two_prod(a[0], b[0]);
    for (&x, &y) in a.iter().zip(b).skip(1) {
        let (h, r) = two_prod(x, y);
        let sum = p + h;
        let z = sum - p;
        err += (p - (sum - z)) + (h - z) + r;
        p = sum;
    }
    p + err
}

/// Positive- and negative-sequence components of a [`PhasorSet`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequencePair {
    pub v_pos: Complex64,
    pub v_neg: Complex64,
}

/// Fortescue transform restricted to the positive and negative sequences.
pub fn fortescue(v: &PhasorSet) -> SequencePair {
    SequencePair {
        v_pos: v.pos_sum() / 3.0,
        v_neg: v.neg_sum() / 3.0,
    }
}

fn checked_d(v: &PhasorSet) -> Result<f64, SequenceError> {
    let pos = v.pos_sum();
    if !(pos.norm() / 3.0 > EPS_POS) {
        return Err(SequenceError::Degenerate(pos.norm() / 3.0));
    }
    Ok(pos.norm_sqr())
}

/// Voltage unbalance factor in percent.
pub fn vuf(v: &PhasorSet) -> Result<f64, SequenceError> {
    checked_d(v)?;
    Ok(100.0 * v.neg_sum().norm() / v.pos_sum().norm())
}

/// Relaxed unbalance metric `f = VUF²` in squared percent.
pub fn f_metric(v: &PhasorSet) -> Result<f64, SequenceError> {
    let d = checked_d(v)?;
    Ok(PCT2 * v.neg_sum().norm_sqr() / d)
}

/// Real gradient of `f` with respect to each phase voltage, plus the shared
/// denominator `D = |va + a·vb + a²·vc|²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnbalanceGradient {
    pub d: f64,
    pub phases: [Complex64; 3],
}

impl UnbalanceGradient {
    /// `∂f/∂Re(v_φ)`, i.e. `√3·Im{conj(v_opp)·(v_ab² + v_bc² + v_ca²)}/D²`.
    pub fn real_part_derivative(&self, phase: usize) -> f64 {
        self.phases[phase].re
    }

    /// Gradient as a flat real vector `[x_a, y_a, x_b, y_b, x_c, y_c]`.
    pub fn to_real(&self) -> [f64; 6] {
        let g = &self.phases;
        [g[0].re, g[0].im, g[1].re, g[1].im, g[2].re, g[2].im]
    }
}

/// Closed-form gradient of `f` driven by the opposite line voltage of each
/// phase and the sum of squared line voltages (zero for balanced sets).
pub fn grad_f(v: &PhasorSet) -> Result<UnbalanceGradient, SequenceError> {
    let d = checked_d(v)?;
    let (vab, vbc, vca) = v.line_voltages();
    // v_ab² + v_bc² + v_ca², formed from the sequence sums so that it
    // vanishes without cancellation at balanced points.
    let lambda = 2.0 * v.pos_sum() * v.neg_sum();
    let scale = Complex64::new(0.0, -SQRT3 * PCT2 / (d * d));
    let g = |opp: Complex64| scale * opp.conj() * lambda;
    Ok(UnbalanceGradient {
        d,
        phases: [g(vbc), g(vca), g(vab)],
    })
}

/// Real 6×6 Hessian of `f` in the ordering `[x_a, y_a, x_b, y_b, x_c, y_c]`.
pub fn hess_f(v: &PhasorSet) -> Result<[[f64; 6]; 6], SequenceError> {
    let w = checked_d(v)?;
    let neg_c = [Complex64::new(1.0, 0.0), ROT2, ROT];
    let pos_c = [Complex64::new(1.0, 0.0), ROT, ROT2];
    let n = v.neg_sum();
    let p = v.pos_sum();
    let u = n.norm_sqr();

    // |c·v|² = vᴴ M v with M = conj(c) cᵀ; its real Hessian is
    // 2·[[Re M, -Im M], [Im M, Re M]] in interleaved ordering.
    let quad_hess = |c: &[Complex64; 3]| {
        let mut h = [[0.0; 6]; 6];
        for k in 0..3 {
            for l in 0..3 {
                let m = c[k].conj() * c[l];
                h[2 * k][2 * l] = 2.0 * m.re;
                h[2 * k][2 * l + 1] = -2.0 * m.im;
                h[2 * k + 1][2 * l] = 2.0 * m.im;
                h[2 * k + 1][2 * l + 1] = 2.0 * m.re;
            }
        }
        h
    };
    // Real gradient of |s|² where s = c·v: 2·s·conj(c_k) packed per phase.
    let quad_grad = |s: Complex64, c: &[Complex64; 3]| {
        let mut g = [0.0; 6];
        for k in 0..3 {
            let z = 2.0 * s * c[k].conj();
            g[2 * k] = z.re;
            g[2 * k + 1] = z.im;
        }
        g
    };
    let hu = quad_hess(&neg_c);
    let hw = quad_hess(&pos_c);
    let gu = quad_grad(n, &neg_c);
    let gw = quad_grad(p, &pos_c);

    let mut h = [[0.0; 6]; 6];
    for r in 0..6 {
        for c in 0..6 {
            h[r][c] = PCT2
                * (hu[r][c] / w
                    - (gu[r] * gw[c] + gw[r] * gu[c]) / (w * w)
                    - u * hw[r][c] / (w * w)
                    + 2.0 * u * gw[r] * gw[c] / (w * w * w));
        }
    }
    Ok(h)
}
