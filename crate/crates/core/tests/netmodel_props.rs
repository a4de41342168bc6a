mod common;

use proptest::prelude::*;
use serde_json::Value;
use vudlmp_core::netmodel::{NetworkError, NetworkSpec, PerUnitBase};

fn simple5_value() -> Value {
    let text = std::fs::read_to_string(common::data("simple5.net.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn parse(v: &Value) -> Result<NetworkSpec, NetworkError> {
    NetworkSpec::from_json_str(&v.to_string())
}

/// Numeric equality up to `tol` (relative), structural equality otherwise.
fn close(a: &Value, b: &Value, tol: f64) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0)
        }
        (Value::Array(x), Value::Array(y)) => x.len() == y.len() && x.iter().zip(y).all(|(p, q)| close(p, q, tol)),
        (Value::Object(x), Value::Object(y)) => {
            x.len() == y.len() && x.iter().all(|(k, p)| y.get(k).is_some_and(|q| close(p, q, tol)))
        }
        _ => a == b,
    }
}

const N_CORRUPTIONS: usize = 15;

/// Breaks one structural rule of a valid document.
fn corrupt(doc: &mut Value, kind: usize, pick: usize, amount: f64) {
    let n_bus = doc["buses"].as_array().unwrap().len();
    let n_line = doc["lines"].as_array().unwrap().len();
    let n_gen = doc["gens"].as_array().unwrap().len();
    let line = pick % n_line;
    let bus = 1 + pick % (n_bus - 1);
    match kind {
        0 => doc["base_kva"] = (-amount).into(),
        1 => doc["lines"][line]["to"] = "nowhere".into(),
        2 => {
            let dup = doc["buses"][bus].clone();
            doc["buses"].as_array_mut().unwrap().push(dup);
        }
        3 => doc["lines"][line]["to"] = doc["lines"][line]["from"].clone(),
        4 => doc["lines"][line]["s_rating"] = (-amount).into(),
        5 => {
            doc["buses"][bus]["vmin"] = 1.0.into();
            doc["buses"][bus]["vmax"] = (1.0 - amount.min(0.5)).into();
        }
        6 => doc["gens"][0]["is_substation"] = false.into(),
        7 => doc["lines"][line]["z_real"][0][1] = (amount + 1.0).into(),
        8 => {
            let g = pick % n_gen;
            doc["gens"][g]["pmin"][0] = (amount + 1000.0).into();
        }
        9 => doc["gens"][1]["pmax"][2] = (7.0 + amount).into(),
        10 => doc["unbalance"] = serde_json::json!({"mode": "soft", "penalty": 1.0, "buses": ["ghost"]}),
        11 => doc["lines"][line]["colour"] = "red".into(),
        12 => doc["buses"].as_array_mut().unwrap().push(serde_json::json!({"id": "island"})),
        13 => doc["unbalance"] = serde_json::json!({"mode": "hard", "limit_pct": -amount}),
        14 => {
            let zero = serde_json::json!([[0, 0, 0], [0, 0, 0], [0, 0, 0]]);
            doc["lines"][line]["z_real"] = zero.clone();
            doc["lines"][line]["z_imag"] = zero;
        }
        _ => unreachable!(),
    }
}

proptest! {
    #[test]
    fn corrupted_documents_are_rejected(kind in 0..N_CORRUPTIONS, pick in 0usize..64, amount in 0.01f64..50.0) {
        let mut doc = simple5_value();
        corrupt(&mut doc, kind, pick, amount);
        prop_assert!(parse(&doc).is_err(), "corruption {kind} accepted");
    }

    #[test]
    fn per_unit_round_trip(kva in 1.0f64..1e4, volt in 100.0f64..30e3, x in -1e4f64..1e4) {
        let b = PerUnitBase::new(kva, volt).unwrap();
        let tol = 1e-12 * x.abs().max(1.0);
        prop_assert!((b.power_from_pu(b.power_to_pu(x)) - x).abs() <= tol);
        prop_assert!((b.impedance_from_pu(b.impedance_to_pu(x)) - x).abs() <= tol);
        prop_assert!((b.voltage_from_pu(b.voltage_to_pu(x)) - x).abs() <= tol);
        // A price of one euro per hour per unit power is 1/kva €/kWh.
        prop_assert!((b.price_to_eur_per_kwh(x) * kva - x).abs() <= tol);
    }
}

#[test]
fn valid_document_parses() {
    assert!(parse(&simple5_value()).is_ok());
}

#[test]
fn bundled_networks_round_trip_through_the_schema() {
    for name in ["simple5.net.json", "eulv117.net.json"] {
        let net = vudlmp_core::load_network(common::data(name)).unwrap();
        let once: Value = serde_json::from_str(&net.to_json_string()).unwrap();
        let again = NetworkSpec::from_json_str(&once.to_string()).unwrap();
        let twice: Value = serde_json::from_str(&again.to_json_string()).unwrap();
        assert!(close(&once, &twice, 1e-12), "{name} drifted on a second round trip");
        let original: Value = serde_json::from_str(&std::fs::read_to_string(common::data(name)).unwrap()).unwrap();
        assert!(close(&original["lines"], &once["lines"], 1e-12), "{name} line data changed");
        assert!(close(&original["loads"], &once["loads"], 1e-12), "{name} load data changed");
        assert_eq!(net.buses.len(), again.buses.len());
        assert_eq!(net.generators.len(), again.generators.len());
        assert!(again.generators.iter().zip(&net.generators).all(|(a, b)| a.balanced == b.balanced));
    }
}

#[test]
fn balanced_generator_needs_equal_three_phase_bounds() {
    let mut doc = simple5_value();
    doc["gens"][1]["phases"] = serde_json::json!(["a", "b"]);
    assert!(matches!(parse(&doc), Err(NetworkError::Balanced(id)) if id.contains("pv3")));

    let mut doc = simple5_value();
    doc["gens"][1]["qmin"][1] = (-5.0).into();
    assert!(matches!(parse(&doc), Err(NetworkError::Balanced(_))));

    let mut doc = simple5_value();
    doc["gens"][1]["balanced"] = false.into();
    assert!(!parse(&doc).unwrap().generators[1].balanced);
}

#[test]
fn bundled_feeders_match_their_published_aggregates() {
    let s5 = common::simple5();
    let kw = s5.total_demand_kw();
    assert!((kw.iter().sum::<f64>() - 81.5).abs() < 1e-9);
    assert_eq!(s5.buses.len(), 6);
    assert!(s5.is_radial());

    let eu = common::eulv117();
    let kw = eu.total_demand_kw();
    let total: f64 = kw.iter().sum();
    // Loads are stored to four decimals.
    assert!((total - 287.5).abs() < 1e-3, "total {total}");
    for (share, want) in kw.iter().map(|p| p / total).zip([0.383, 0.329, 0.288]) {
        assert!((share - want).abs() < 1e-3, "phase share {share} vs {want}");
    }
    assert_eq!(eu.buses.len(), 117);
    assert_eq!(eu.unbalance.buses.len(), 15);
    assert!(eu.is_radial());
}
