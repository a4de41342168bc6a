#![allow(dead_code)]

use std::path::PathBuf;

use vudlmp_core::ipsolver::{self, OpfSolution, SolverSettings};
use vudlmp_core::netmodel::{load_network, NetworkSpec, UnbalanceConfig};
use vudlmp_core::opf::{self, OpfProblem};
use vudlmp_core::powerflow::{self, Injections};

pub fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

pub fn simple5() -> NetworkSpec {
    load_network(data("simple5.net.json")).expect("simple5 loads")
}

pub fn eulv117() -> NetworkSpec {
    load_network(data("eulv117.net.json")).expect("eulv117 loads")
}

/// Two buses joined by a line with mutual coupling, unbalanced load.
pub const TWO_BUS_COUPLED: &str = r#"{
    "base_kva": 50, "base_volt_ln": 240,
    "buses": [{"id": "src"}, {"id": "load"}],
    "lines": [{"from": "src", "to": "load",
               "z_real": [[0.08,0.0225,0.0225],[0.0225,0.08,0.0225],[0.0225,0.0225,0.08]],
               "z_imag": [[0.065,0.0525,0.0525],[0.0525,0.065,0.0525],[0.0525,0.0525,0.065]],
               "s_rating": 100}],
    "loads": [{"bus": "load", "p": [12, 4, 8], "q": [4, 1, 2.5]}],
    "gens": [{"id": "grid", "bus": "src", "phases": ["a","b","c"],
              "pmin": [-100,-100,-100], "pmax": [100,100,100],
              "qmin": [-100,-100,-100], "qmax": [100,100,100],
              "cost": 1.0, "is_substation": true}]
}"#;

pub fn two_bus() -> NetworkSpec {
    NetworkSpec::from_json_str(TWO_BUS_COUPLED).expect("two-bus network parses")
}

pub struct Solved {
    pub net: NetworkSpec,
    pub prob: OpfProblem,
    pub sol: OpfSolution,
}

/// Warm-started OPF under `cfg`, keeping the network's bus subset when
/// `cfg` names none.
pub fn solve(net: &NetworkSpec, cfg: UnbalanceConfig) -> Solved {
    solve_with(net, cfg, &SolverSettings::default())
}

pub fn solve_with(net: &NetworkSpec, cfg: UnbalanceConfig, settings: &SolverSettings) -> Solved {
    let net = net.with_unbalance(cfg).expect("valid unbalance settings");
    let prob = opf::build_problem(&net).expect("problem builds");
    let warm = powerflow::solve_pf(&net, &Injections::nominal(&net)).ok();
    let sol = ipsolver::solve(&prob, warm.as_ref(), settings).expect("solver runs");
    Solved { net, prob, sol }
}

/// Inequality rows treated as active: multiplier above slack.
pub fn active_set(s: &Solved) -> Vec<usize> {
    let ev = s.prob.eval(&s.sol.x, &s.sol.lambda, &s.sol.z).expect("evaluates");
    ev.ineq
        .iter()
        .zip(&s.sol.z)
        .enumerate()
        .filter(|(_, (h, z))| **z > -**h)
        .map(|(r, _)| r)
        .collect()
}

/// Central difference of the optimal objective under `±eps` pu of extra
/// demand at `(bus, phase)`, next to the balance multiplier. `None` when
/// either perturbed solve changes the active set.
pub fn shadow_price_fd(
    base: &Solved,
    bus: usize,
    phase: vudlmp_core::netmodel::Phase,
    reactive: bool,
    eps: f64,
) -> Option<(f64, f64)> {
    let shifted = |delta: f64| {
        let mut net = base.net.clone();
        let mut extra = vudlmp_core::netmodel::LoadSpec {
            bus: net.buses[bus].id.clone(),
            p: [0.0; 3],
            q: [0.0; 3],
        };
        let slot = if reactive { &mut extra.q } else { &mut extra.p };
        slot[phase.index()] = delta;
        net.loads.push(extra);
        let cfg = net.unbalance.clone();
        solve(&net, cfg)
    };
    let up = shifted(eps);
    let down = shifted(-eps);
    assert!(up.sol.status.is_success() && down.sol.status.is_success());
    let reference = active_set(base);
    if active_set(&up) != reference || active_set(&down) != reference {
        return None;
    }
    let fd = (up.sol.objective - down.sol.objective) / (2.0 * eps);
    let dual = base.sol.lambda[base.prob.balance_row(bus, phase, reactive)];
    Some((fd, dual))
}
