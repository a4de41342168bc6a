//! Generates the bundled 117-node low-voltage feeder.
//!
//! Usage: `cargo run -p vudlmp-core --example gen_eulv117 -- [OUT]`.
//! `VUDLMP_SEED` selects the random stream (default 1). The unbalance bus
//! subset is picked from a mode-none OPF of the generated feeder.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vudlmp_core::ipsolver::{self, SolverSettings};
use vudlmp_core::netmodel::{BusDoc, GenDoc, LineDoc, LoadDoc, NetworkDocument, UnbalanceDoc};
use vudlmp_core::{opf, powerflow, NetworkSpec, Phase, UnbalanceMode};

const N_NODES: usize = 117;
const BACKBONE: usize = 24;
const MOTOR_BUSES: [usize; 3] = [9, 23, 40];
const MOTOR_KW: f64 = 18.0;
const MOTOR_PF: f64 = 0.88;
const LOAD_PF: f64 = 0.93;
const TOTAL_KW: f64 = 287.5;
const PHASE_SHARE: [f64; 3] = [0.383, 0.329, 0.288];
const SINGLE_PHASE_LOADS: [usize; 3] = [20, 17, 15];
const ROOFTOP_KVA: f64 = 7.5;
const ROOFTOP_PHASES: [usize; 3] = [4, 5, 5];
const SUBSET_SIZE: usize = 15;
/// Backbone hosts of the storage units and the solar plant.
const DER_BUSES: [usize; 3] = [4, BACKBONE, 10];

/// Kron-reduced cable data in ohm/km: (self R, self X, mutual R, mutual X).
const BACKBONE_CABLE: [f64; 4] = [0.14, 0.09, 0.04, 0.07];
const LATERAL_CABLE: [f64; 4] = [0.44, 0.14, 0.12, 0.10];

fn line(from: usize, to: usize, metres: f64, cable: [f64; 4], rating: f64) -> LineDoc {
    let km = metres / 1000.0;
    let fill = |s: f64, m: f64| {
        let mut z = [[m * km; 3]; 3];
        for (i, row) in z.iter_mut().enumerate() {
            row[i] = s * km;
        }
        z.map(|row| row.map(|x| (x * 1e6).round() / 1e6))
    };
    LineDoc {
        from: from.to_string(),
        to: to.to_string(),
        z_real: fill(cable[0], cable[2]),
        z_imag: fill(cable[1], cable[3]),
        s_rating: rating,
    }
}

/// `n` values in `[lo, hi]` summing to `total`.
fn spread(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64, total: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    for _ in 0..100 {
        let gap = total - v.iter().sum::<f64>();
        if gap.abs() < 1e-9 {
            break;
        }
        let free: Vec<usize> = (0..n)
            .filter(|&i| if gap > 0.0 { v[i] < hi } else { v[i] > lo })
            .collect();
        let step = gap / free.len() as f64;
        for i in free {
            v[i] = (v[i] + step).clamp(lo, hi);
        }
    }
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}

fn phase_gen(id: String, bus: usize, phase: usize, kw: f64) -> GenDoc {
    let mut pmax = [0.0; 3];
    pmax[phase] = kw;
    GenDoc {
        id: Some(id),
        bus: bus.to_string(),
        phases: vec![Phase::ALL[phase]],
        pmin: [0.0; 3],
        pmax,
        qmin: [0.0; 3],
        qmax: [0.0; 3],
        cost: 0.0,
        is_substation: false,
        balanced: false,
    }
}

fn three_phase_gen(id: &str, bus: usize, kva: f64, kvar: f64, cost: f64, balanced: bool) -> GenDoc {
    GenDoc {
        id: Some(id.to_string()),
        bus: bus.to_string(),
        phases: Phase::ALL.to_vec(),
        pmin: [0.0; 3],
        pmax: [kva / 3.0; 3],
        qmin: [-kvar / 3.0; 3],
        qmax: [kvar / 3.0; 3],
        cost,
        is_substation: false,
        balanced,
    }
}

fn build(seed: u64) -> NetworkDocument {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Node 0 is the substation; 1..=BACKBONE form the main cable and the
    // rest hang off it in laterals of two to six nodes.
    let mut lines = Vec::new();
    let mut parent = vec![usize::MAX; N_NODES];
    for k in 1..=BACKBONE {
        parent[k] = k - 1;
        lines.push(line(k - 1, k, rng.gen_range(25.0..45.0), BACKBONE_CABLE, 160.0));
    }
    let mut next = BACKBONE + 1;
    while next < N_NODES {
        let len = rng.gen_range(2..=6).min(N_NODES - next);
        let mut at = rng.gen_range(2..=BACKBONE);
        for _ in 0..len {
            parent[next] = at;
            lines.push(line(at, next, rng.gen_range(15.0..35.0), LATERAL_CABLE, 45.0));
            at = next;
            next += 1;
        }
    }
    let is_leaf = |k: usize| !parent.contains(&k);

    // Single-phase loads on lateral nodes, leaves first.
    let mut candidates: Vec<usize> = (BACKBONE + 1..N_NODES)
        .filter(|k| !MOTOR_BUSES.contains(k))
        .collect();
    candidates.shuffle(&mut rng);
    candidates.sort_by_key(|&k| !is_leaf(k));
    let n_single: usize = SINGLE_PHASE_LOADS.iter().sum();
    let load_buses = &candidates[..n_single];
    let tan = |pf: f64| (1.0 - pf * pf).sqrt() / pf;
    let mut loads = Vec::new();
    for &b in &MOTOR_BUSES {
        let p = MOTOR_KW / 3.0;
        let q = (p * tan(MOTOR_PF) * 1e4).round() / 1e4;
        loads.push((b, [p; 3], [q; 3]));
    }
    let mut order: Vec<usize> = Vec::new();
    for (ph, &n) in SINGLE_PHASE_LOADS.iter().enumerate() {
        order.extend(std::iter::repeat_n(ph, n));
    }
    order.shuffle(&mut rng);
    let mut by_phase: [Vec<usize>; 3] = Default::default();
    for (&b, &ph) in load_buses.iter().zip(&order) {
        by_phase[ph].push(b);
    }
    for ph in 0..3 {
        let total = TOTAL_KW * PHASE_SHARE[ph] - MOTOR_BUSES.len() as f64 * MOTOR_KW / 3.0;
        let kw = spread(&mut rng, by_phase[ph].len(), 3.5, 5.5, total);
        for (&b, p) in by_phase[ph].iter().zip(kw) {
            let mut pp = [0.0; 3];
            let mut qq = [0.0; 3];
            pp[ph] = p;
            qq[ph] = (p * tan(LOAD_PF) * 1e4).round() / 1e4;
            loads.push((b, pp, qq));
        }
    }
    loads.sort_by_key(|l| l.0);

    // Rooftop PV on single-phase load buses, each on its host's phase.
    let mut gens = vec![GenDoc {
        id: Some("substation".into()),
        bus: "0".into(),
        phases: Phase::ALL.to_vec(),
        pmin: [-400.0; 3],
        pmax: [400.0; 3],
        qmin: [-400.0; 3],
        qmax: [400.0; 3],
        cost: 1.0,
        is_substation: true,
        balanced: false,
    }];
    let [b1, b2, b3] = DER_BUSES;
    gens.push(three_phase_gen("der1", b1, 60.0, 54.0, 1.1, false));
    gens.push(three_phase_gen("der2", b2, 54.0, 30.0, 0.0, true));
    gens.push(three_phase_gen("der3", b3, 60.0, 54.0, 1.1, false));
    let mut pv = 0;
    for ph in 0..3 {
        let mut hosts = by_phase[ph].clone();
        hosts.shuffle(&mut rng);
        hosts.truncate(ROOFTOP_PHASES[ph]);
        hosts.sort();
        for b in hosts {
            pv += 1;
            gens.push(phase_gen(format!("pv{pv}"), b, ph, ROOFTOP_KVA));
        }
    }

    NetworkDocument {
        base_kva: 100.0,
        base_volt_ln: 230.0,
        buses: (0..N_NODES)
            .map(|k| BusDoc {
                id: k.to_string(),
                vmin: (k > 0).then_some(0.9),
                vmax: (k > 0).then_some(1.1),
            })
            .collect(),
        lines,
        loads: loads
            .into_iter()
            .map(|(b, p, q)| LoadDoc { bus: b.to_string(), p, q })
            .collect(),
        gens,
        unbalance: None,
    }
}

/// DER buses on the backbone, the motor buses, and the worst bus of each of
/// the worst laterals under a mode-none OPF.
fn pick_subset(doc: &NetworkDocument) -> Vec<String> {
    let net = NetworkSpec::from_document(doc).expect("generated feeder is valid");
    let prob = opf::build_problem(&net).expect("problem builds");
    let warm = powerflow::solve_pf(&net, &powerflow::Injections::nominal(&net)).expect("power flow converges");
    let sol = ipsolver::solve(&prob, Some(&warm), &SolverSettings::default()).expect("solver runs");
    assert!(sol.status.is_success(), "mode-none OPF failed: {:?}", sol.status);
    let point = prob.operating_point(&sol.x);

    let mut parent = vec![0; N_NODES];
    for l in &doc.lines {
        parent[l.to.parse::<usize>().unwrap()] = l.from.parse().unwrap();
    }
    let lateral_head = |mut k: usize| {
        while parent[k] > BACKBONE {
            k = parent[k];
        }
        k
    };
    let mut chosen: BTreeSet<usize> = MOTOR_BUSES.into_iter().collect();
    chosen.extend(DER_BUSES);
    let mut ranked: Vec<(f64, usize)> = (BACKBONE + 1..N_NODES)
        .map(|k| (point.f_at(k).expect("nondegenerate"), k))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut covered = BTreeSet::new();
    for (_, k) in ranked {
        if chosen.len() == SUBSET_SIZE {
            break;
        }
        if covered.insert(lateral_head(k)) {
            chosen.insert(k);
        }
    }
    let (worst, at) = point.max_vuf().expect("nondegenerate");
    eprintln!(
        "mode none: cost {:.3} EUR, losses {:.3} kW, max VUF {worst:.4} % at bus {at}",
        prob.generation_cost(&sol.x),
        prob.losses(&sol.x) * net.base.base_kva
    );
    chosen.into_iter().map(|k| k.to_string()).collect()
}

/// Puts every array holding only numbers (or quoted ids) on one line.
fn inline_number_arrays(json: &str) -> String {
    let mut out = String::with_capacity(json.len());
    let mut rest = json;
    while let Some(open) = rest.find('[') {
        out.push_str(&rest[..=open]);
        rest = &rest[open + 1..];
        let close = rest.find(']').unwrap_or(rest.len());
        let body = &rest[..close];
        if !body.contains(['[', '{']) {
            let items: Vec<&str> = body.split(',').map(str::trim).filter(|t| !t.is_empty()).collect();
            out.push_str(&items.join(", "));
            rest = &rest[close..];
        }
    }
    out.push_str(rest);
    out
}

fn main() {
    let seed = std::env::var("VUDLMP_SEED")
        .ok()
        .map(|s| s.parse().expect("VUDLMP_SEED must be an integer"))
        .unwrap_or(1);
    let out = std::env::args().nth(1).unwrap_or_else(|| "data/eulv117.net.json".into());
    let mut doc = build(seed);
    let subset = pick_subset(&doc);
    doc.unbalance = Some(UnbalanceDoc {
        mode: UnbalanceMode::None,
        limit_pct: None,
        penalty: None,
        penalty_on: None,
        buses: subset,
    });
    let json = serde_json::to_string_pretty(&doc).expect("document serializes");
    std::fs::write(&out, inline_number_arrays(&json) + "\n").expect("output is writable");
    eprintln!("wrote {out}");
}
