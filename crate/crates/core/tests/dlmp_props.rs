mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vudlmp_core::dlmp::{self, PowerKind, Sensitivity};
use vudlmp_core::ipsolver::SolverSettings;
use vudlmp_core::netmodel::{NetworkSpec, Phase, UnbalanceConfig};
use vudlmp_core::network::Grid;
use vudlmp_core::powerflow::{self, Injections};

use common::{shadow_price_fd, simple5, solve, solve_with, two_bus};

fn configs() -> Vec<(&'static str, UnbalanceConfig)> {
    vec![
        ("none", UnbalanceConfig::none()),
        ("hard 1 %", UnbalanceConfig::hard(1.0)),
        ("hard 2 %", UnbalanceConfig::hard(2.0)),
        ("soft 1", UnbalanceConfig::soft(1.0)),
        ("soft 3", UnbalanceConfig::soft(3.0)),
    ]
}

#[test]
fn components_add_up_to_the_balance_multiplier() {
    for (name, cfg) in configs() {
        let s = solve(&simple5(), cfg);
        let prices = dlmp::decompose(&s.sol, &s.prob, &s.net).unwrap();
        assert_eq!(prices.len(), 6 * s.net.buses.len());
        for b in &prices {
            assert!(b.residual.abs() < 1e-6, "{name} {} {} {:?}: residual {}", b.bus, b.phase, b.kind, b.residual);
        }
    }
}

#[test]
fn energy_component_is_the_substation_price() {
    let s = solve(&simple5(), UnbalanceConfig::soft(1.0));
    let prices = dlmp::decompose(&s.sol, &s.prob, &s.net).unwrap();
    let sub = s.net.substation_index();
    for b in &prices {
        let at_sub = prices
            .iter()
            .find(|o| o.bus_index == sub && o.phase == b.phase && o.kind == b.kind)
            .unwrap();
        assert_eq!(b.energy, at_sub.total);
        if b.bus_index == sub {
            assert_eq!(b.component_sum(), b.total);
        }
    }
}

#[test]
fn unbalance_component_vanishes_without_an_active_unbalance_term() {
    for cfg in [UnbalanceConfig::none(), UnbalanceConfig::hard(2.0)] {
        let s = solve(&simple5(), cfg);
        let prices = dlmp::decompose(&s.sol, &s.prob, &s.net).unwrap();
        assert!(prices.iter().all(|b| b.unbalance.abs() < 1e-9));
    }
    let s = solve(&simple5(), UnbalanceConfig::soft(3.0));
    let prices = dlmp::decompose(&s.sol, &s.prob, &s.net).unwrap();
    assert!(prices.iter().any(|b| b.unbalance.abs() > 1e-6));
}

#[test]
fn balance_multipliers_price_marginal_demand() {
    let base = solve(&simple5(), UnbalanceConfig::none());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = base.net.buses.len();
    let mut checked = 0;
    for _ in 0..4 {
        let bus = rng.gen_range(0..n);
        let phase = Phase::from_index(rng.gen_range(0..3));
        for reactive in [false, true] {
            if let Some((fd, dual)) = shadow_price_fd(&base, bus, phase, reactive, 1e-4) {
                assert!((fd - dual).abs() <= 0.01 * dual.abs().max(1e-3), "bus {bus} {phase} q={reactive}: fd {fd} dual {dual}");
                checked += 1;
            }
        }
    }
    assert!(checked >= 4);
}

#[test]
fn unsolved_runs_have_no_prices() {
    let settings = SolverSettings {
        max_iter: 2,
        ..Default::default()
    };
    let s = solve_with(&simple5(), UnbalanceConfig::hard(1.0), &settings);
    assert!(!s.sol.status.is_success());
    assert!(matches!(
        dlmp::decompose(&s.sol, &s.prob, &s.net),
        Err(dlmp::DlmpError::Unsolved(_))
    ));
}

#[test]
fn two_bus_sensitivity_matches_resolving() {
    let net = two_bus();
    let inj = Injections::nominal(&net);
    let op = powerflow::solve_pf(&net, &inj).unwrap();
    let report = dlmp::sensitivity_report(&net, &op, &inj).unwrap();
    assert_eq!(report.len(), 6);
    for e in &report {
        let gap = e.rel_gap.expect("loaded bus has current");
        assert!(gap < 0.05, "{} {:?}: gap {gap}", e.phase, e.kind);
        assert!(!e.flagged);
    }
}

#[test]
fn sensitivity_signs_agree_on_the_five_bus_feeder() {
    let s = solve(&simple5(), UnbalanceConfig::none());
    let op = s.prob.operating_point(&s.sol.x);
    let inj = s.prob.injections(&s.sol.x);
    for e in dlmp::sensitivity_report(&s.net, &op, &inj).unwrap() {
        if let Sensitivity::Defined(c) = e.closed_form {
            assert_eq!(c.signum(), e.finite_difference.signum(), "{} {} {:?}", e.bus, e.phase, e.kind);
        }
    }
}

/// Feeder whose last bus carries no load, so no current reaches it.
const DEAD_END: &str = r#"{
    "base_kva": 50, "base_volt_ln": 240,
    "buses": [{"id": "src"}, {"id": "mid"}, {"id": "end"}],
    "lines": [{"from": "src", "to": "mid",
               "z_real": [[0.05,0.01,0.01],[0.01,0.05,0.01],[0.01,0.01,0.05]],
               "z_imag": [[0.04,0.02,0.02],[0.02,0.04,0.02],[0.02,0.02,0.04]],
               "s_rating": 100},
              {"from": "mid", "to": "end",
               "z_real": [[0.05,0.01,0.01],[0.01,0.05,0.01],[0.01,0.01,0.05]],
               "z_imag": [[0.04,0.02,0.02],[0.02,0.04,0.02],[0.02,0.02,0.04]],
               "s_rating": 100}],
    "loads": [{"bus": "mid", "p": [9, 3, 6], "q": [3, 1, 2]}],
    "gens": [{"id": "grid", "bus": "src", "phases": ["a","b","c"],
              "pmin": [-100,-100,-100], "pmax": [100,100,100],
              "qmin": [-100,-100,-100], "qmax": [100,100,100],
              "cost": 1.0, "is_substation": true}]
}"#;

#[test]
fn sensitivity_is_undefined_where_no_current_flows() {
    let net = NetworkSpec::from_json_str(DEAD_END).unwrap();
    let inj = Injections::nominal(&net);
    let op = powerflow::solve_pf(&net, &inj).unwrap();
    let grid = Grid::new(&net);
    let end = net.bus_index("end").unwrap();
    for kind in [PowerKind::Active, PowerKind::Reactive] {
        for ph in Phase::ALL {
            let s = dlmp::sensitivity_closed_form(&grid, &op, end, ph, kind).unwrap();
            assert!(matches!(s, Sensitivity::Undefined { current } if current <= dlmp::EPS_I), "{s:?}");
            assert!(dlmp::current_denominator(&grid, &op, end, ph).is_none());
        }
    }
    let report = dlmp::sensitivity_report(&net, &op, &inj).unwrap();
    let at_end: Vec<_> = report.iter().filter(|e| e.bus == "end").collect();
    assert_eq!(at_end.len(), 6);
    assert!(at_end.iter().all(|e| e.rel_gap.is_none() && !e.flagged));
    assert!(at_end.iter().all(|e| e.finite_difference.is_finite()));
}
