mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vudlmp_core::dlmp::{self, PowerKind};
use vudlmp_core::ipsolver::{self, SolverSettings};
use vudlmp_core::netmodel::{NetworkSpec, Phase, UnbalanceConfig, UnbalanceMode};
use vudlmp_core::opf::{ConstraintKind, OpfProblem, Output};

use common::{simple5, solve, Solved};

fn dense(triplets: &[(usize, usize, f64)], rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; cols]; rows];
    for &(r, c, v) in triplets {
        m[r][c] += v;
    }
    m
}

/// Lagrangian gradient `∇f + Jcᵀλ + Jhᵀz`.
fn lagrangian_grad(prob: &OpfProblem, x: &[f64], lambda: &[f64], z: &[f64]) -> Vec<f64> {
    let ev = prob.eval(x, lambda, z).unwrap();
    let mut g = ev.grad.clone();
    for &(r, c, v) in &ev.jac_eq {
        g[c] += lambda[r] * v;
    }
    for &(r, c, v) in &ev.jac_ineq {
        g[c] += z[r] * v;
    }
    g
}

/// Every first and second derivative of the problem against central
/// differences at a point near the optimum.
fn check_derivatives(s: &Solved, seed: u64) {
    let prob = &s.prob;
    let n = prob.n_vars();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = s.sol.x.iter().map(|v| v + rng.gen_range(-1e-3..1e-3)).collect();
    let lambda: Vec<f64> = s.sol.lambda.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
    let z: Vec<f64> = s.sol.z.iter().map(|_| rng.gen_range(0.0..1.0)).collect();
    let ev = prob.eval(&x, &lambda, &z).unwrap();
    let jeq = dense(&ev.jac_eq, ev.eq.len(), n);
    let jin = dense(&ev.jac_ineq, ev.ineq.len(), n);
    let hess = dense(&ev.hess, n, n);
    let h = 1e-6;
    for c in 0..n {
        let mut up = x.clone();
        let mut dn = x.clone();
        up[c] += h;
        dn[c] -= h;
        let eu = prob.eval(&up, &lambda, &z).unwrap();
        let ed = prob.eval(&dn, &lambda, &z).unwrap();
        let close = |analytic: f64, fd: f64, what: &str| {
            assert!(
                (analytic - fd).abs() <= 1e-6 * fd.abs().max(1.0),
                "{what} column {c} ({:?}): analytic {analytic} vs fd {fd}",
                prob.vars[c]
            );
        };
        close(ev.grad[c], (eu.objective - ed.objective) / (2.0 * h), "objective gradient");
        for r in 0..ev.eq.len() {
            close(jeq[r][c], (eu.eq[r] - ed.eq[r]) / (2.0 * h), "equality Jacobian");
        }
        for r in 0..ev.ineq.len() {
            close(jin[r][c], (eu.ineq[r] - ed.ineq[r]) / (2.0 * h), "inequality Jacobian");
        }
        let gu = lagrangian_grad(prob, &up, &lambda, &z);
        let gd = lagrangian_grad(prob, &dn, &lambda, &z);
        for r in 0..n {
            // The Hessian is stored as its lower triangle.
            let analytic = if r >= c { hess[r][c] } else { hess[c][r] };
            close(analytic, (gu[r] - gd[r]) / (2.0 * h), "Lagrangian Hessian");
        }
    }
}

fn modes() -> Vec<UnbalanceConfig> {
    vec![
        UnbalanceConfig::none(),
        UnbalanceConfig::hard(1.0),
        UnbalanceConfig::soft(3.0),
        UnbalanceConfig {
            penalty_on: vudlmp_core::netmodel::PenaltyBasis::Vuf,
            ..UnbalanceConfig::soft(1.0)
        },
    ]
}

#[test]
fn derivatives_match_finite_differences_with_a_balanced_unit() {
    let net = simple5();
    assert!(net.generators.iter().any(|g| g.balanced));
    for (k, cfg) in modes().into_iter().enumerate() {
        check_derivatives(&solve(&net, cfg), k as u64);
    }
}

#[test]
fn balanced_unit_shares_one_setpoint() {
    let s = solve(&simple5(), UnbalanceConfig::hard(1.0));
    let g = s.net.generators.iter().position(|g| g.balanced).unwrap();
    for outs in [&s.prob.pg[g], &s.prob.qg[g]] {
        let var = outs[0].var().expect("balanced unit is dispatchable");
        assert!(outs.iter().all(|o| o.var() == Some(var)));
    }
    let n_bound_rows = s
        .prob
        .ineq_kinds
        .iter()
        .filter(|k| matches!(k, ConstraintKind::PgHi { gen, .. } | ConstraintKind::PgLo { gen, .. } if *gen == g))
        .count();
    assert_eq!(n_bound_rows, 2);
}

#[test]
fn reported_residuals_survive_independent_evaluation() {
    let net = simple5();
    for cfg in modes() {
        let s = solve(&net, cfg.clone());
        assert!(s.sol.status.is_success(), "{:?}: {:?}", cfg.mode, s.sol.status);
        let r = ipsolver::kkt_residuals(&s.prob, &s.sol.x, &s.sol.lambda, &s.sol.z).unwrap();
        assert!(r.within(1e-6), "{:?}: {r:?}", cfg.mode);
        assert_eq!(r, s.sol.residuals);
    }
}

#[test]
fn complementary_slackness_holds_row_by_row() {
    for cfg in modes() {
        let s = solve(&simple5(), cfg);
        let ev = s.prob.eval(&s.sol.x, &s.sol.lambda, &s.sol.z).unwrap();
        for (r, (&h, &z)) in ev.ineq.iter().zip(&s.sol.z).enumerate() {
            assert!(z >= 0.0, "row {r} multiplier {z}");
            assert!(h <= 1e-6, "row {r} violated by {h}");
            assert!((h * z).abs() < 1e-6, "{}: h {h} z {z}", s.prob.ineq_kinds[r]);
        }
    }
}

#[test]
fn solves_are_bitwise_repeatable() {
    let net = simple5();
    for cfg in modes() {
        let a = solve(&net, cfg.clone());
        let b = solve(&net, cfg);
        assert_eq!(a.sol.iterations, b.sol.iterations);
        assert!(a.sol.x.iter().zip(&b.sol.x).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(a.sol.lambda.iter().zip(&b.sol.lambda).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

/// At a binding hard limit with multiplier ψ, the soft problem with weight ψ
/// on that bus alone has the same stationary point.
#[test]
fn hard_limit_and_its_multiplier_price_the_same_dispatch() {
    let net = simple5();
    let hard = solve(&net, UnbalanceConfig::hard(1.0));
    let (row, psi) = hard
        .prob
        .ineq_kinds
        .iter()
        .zip(&hard.sol.z)
        .enumerate()
        .filter(|(_, (k, _))| matches!(k, ConstraintKind::VufLimit { .. }))
        .map(|(r, (_, &z))| (r, z))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let ConstraintKind::VufLimit { bus } = hard.prob.ineq_kinds[row] else { unreachable!() };
    let binding = hard
        .prob
        .ineq_kinds
        .iter()
        .zip(&hard.sol.z)
        .filter(|(k, &z)| matches!(k, ConstraintKind::VufLimit { .. }) && z > 1e-6)
        .count();
    assert_eq!(binding, 1, "correspondence needs a single binding bus");
    assert!(psi > 0.0);

    let cfg = UnbalanceConfig {
        buses: vec![net.buses[bus].id.clone()],
        ..UnbalanceConfig::soft(psi)
    };
    let soft = solve(&net, cfg);
    assert!(soft.sol.status.is_success());
    let cost_h = hard.prob.generation_cost(&hard.sol.x);
    let cost_s = soft.prob.generation_cost(&soft.sol.x);
    assert!((cost_h - cost_s).abs() < 1e-5 * cost_h, "cost {cost_h} vs {cost_s}");
    let vh = hard.prob.operating_point(&hard.sol.x).max_vuf().unwrap().0;
    let vs = soft.prob.operating_point(&soft.sol.x).max_vuf().unwrap().0;
    assert!((vh - vs).abs() < 1e-4, "VUF {vh} vs {vs}");
    // Nodal prices agree too.
    for r in 0..6 * net.buses.len() {
        let (a, b) = (hard.sol.lambda[r], soft.sol.lambda[r]);
        assert!((a - b).abs() < 1e-4 * a.abs().max(1.0), "balance row {r}: {a} vs {b}");
    }
}

#[test]
fn zero_weight_matches_no_unbalance_treatment() {
    let net = simple5();
    let none = solve(&net, UnbalanceConfig::none());
    let zero = solve(&net, UnbalanceConfig::soft(0.0));
    assert_eq!(zero.prob.mode, UnbalanceMode::Soft);
    assert!((none.sol.objective - zero.sol.objective).abs() < 1e-6);
}

/// Radial chain of `n` load buses with uncoupled phases.
fn chain(loads: &[[f64; 3]]) -> NetworkSpec {
    let mut buses = vec![r#"{"id": "0"}"#.to_string()];
    let mut lines = Vec::new();
    let mut load_docs = Vec::new();
    for (k, p) in loads.iter().enumerate() {
        let id = k + 1;
        buses.push(format!(r#"{{"id": "{id}"}}"#));
        lines.push(format!(
            r#"{{"from": "{k}", "to": "{id}", "z_real": [[0.02,0,0],[0,0.02,0],[0,0,0.02]],
                "z_imag": [[0.015,0,0],[0,0.015,0],[0,0,0.015]], "s_rating": 500}}"#
        ));
        load_docs.push(format!(
            r#"{{"bus": "{id}", "p": [{}, {}, {}], "q": [{}, {}, {}]}}"#,
            p[0],
            p[1],
            p[2],
            0.3 * p[0],
            0.3 * p[1],
            0.3 * p[2]
        ));
    }
    let doc = format!(
        r#"{{"base_kva": 50, "base_volt_ln": 240, "buses": [{}], "lines": [{}], "loads": [{}],
            "gens": [{{"id": "grid", "bus": "0", "phases": ["a","b","c"],
                       "pmin": [-500,-500,-500], "pmax": [500,500,500],
                       "qmin": [-500,-500,-500], "qmax": [500,500,500],
                       "cost": 1.0, "is_substation": true}}]}}"#,
        buses.join(","),
        lines.join(","),
        load_docs.join(",")
    );
    NetworkSpec::from_json_str(&doc).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// With every bus a net load, the active price on each phase rises with
    /// the distance from the substation.
    #[test]
    fn prices_rise_away_from_the_substation(loads in prop::collection::vec(prop::array::uniform3(0.5f64..8.0), 2..6)) {
        let net = chain(&loads);
        let s = solve(&net, UnbalanceConfig::none());
        prop_assert!(s.sol.status.is_success());
        let prices = dlmp::decompose(&s.sol, &s.prob, &s.net).unwrap();
        let hops = net.hops_from_substation();
        for ph in Phase::ALL {
            let mut by_hop: Vec<(usize, f64)> = prices
                .iter()
                .filter(|b| b.kind == PowerKind::Active && b.phase == ph)
                .map(|b| (hops[b.bus_index], b.total))
                .collect();
            by_hop.sort_by_key(|&(h, _)| h);
            for w in by_hop.windows(2) {
                prop_assert!(w[1].1 >= w[0].1 - 1e-9, "phase {ph}: {:?}", by_hop);
            }
        }
    }
}

#[test]
fn fixed_outputs_are_constants() {
    let s = solve(&simple5(), UnbalanceConfig::none());
    for (g, gen) in s.net.generators.iter().enumerate() {
        for ph in Phase::ALL {
            let (lo, hi) = gen.p_bounds(ph);
            let out = s.prob.pg[g][ph.index()];
            assert_eq!(matches!(out, Output::Fixed(_)), lo == hi, "{} {ph}", gen.id);
        }
    }
}

#[test]
fn invalid_settings_are_refused() {
    let s = solve(&simple5(), UnbalanceConfig::none());
    let bad = SolverSettings {
        max_iter: 0,
        ..Default::default()
    };
    assert!(ipsolver::solve(&s.prob, None, &bad).is_err());
}
