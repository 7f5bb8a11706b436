//! Frozen-fixture regression: every stored reference value was produced by
//! the exact-chain oracle and reviewed once; the tests pin both the oracle
//! and the determinant route to those numbers.

use serde::Deserialize;
use tasep::multipoint::{joint_probability, ContourPlan, Observation, ObservationSet};
use tasep::simulate::ctmc_exact;
use tasep::symfunc::ParticleConfig;

#[derive(Deserialize)]
struct FixtureFile {
    version: u32,
    tolerance: f64,
    records: Vec<FixtureRecord>,
}

#[derive(Deserialize)]
struct FixtureRecord {
    initial: Initial,
    observation: Observation,
    value: f64,
    certificate: Certificate,
    oracle_id: String,
}

#[derive(Deserialize)]
struct Initial {
    kind: String,
    n: usize,
}

#[derive(Deserialize)]
struct Certificate {
    spatial_tail: f64,
    series_tail: f64,
}

fn load() -> FixtureFile {
    let text = include_str!("fixtures/oracle_regression.json");
    serde_json::from_str(text).unwrap()
}

fn config_for(initial: &Initial) -> ParticleConfig {
    match initial.kind.as_str() {
        "step" => ParticleConfig::step(initial.n),
        "flat" => ParticleConfig::flat(initial.n),
        other => panic!("unknown initial condition kind {other}"),
    }
}

#[test]
fn fixtures_match_live_oracle() {
    let fixtures = load();
    assert_eq!(fixtures.version, 1);
    for rec in &fixtures.records {
        assert_eq!(rec.oracle_id, "ctmc-uniformization");
        let y = config_for(&rec.initial);
        let obs = ObservationSet::new(vec![rec.observation]).unwrap();
        let live = ctmc_exact(&y, &obs, fixtures.tolerance).unwrap();
        let budget = rec.certificate.spatial_tail
            + rec.certificate.series_tail
            + live.certificate.total_error();
        assert!(
            (live.value - rec.value).abs() <= budget + 1e-14,
            "fixture drifted: {:?} {:?} live {} vs frozen {}",
            rec.initial.kind,
            rec.observation,
            live.value,
            rec.value
        );
    }
}

#[test]
fn determinant_route_matches_fixtures() {
    let fixtures = load();
    let plan = ContourPlan::default_for(1).unwrap();
    for rec in &fixtures.records {
        let y = config_for(&rec.initial);
        let obs = ObservationSet::new(vec![rec.observation]).unwrap();
        let p = joint_probability(&y, &obs, &plan).unwrap();
        let budget = 1e-6 + rec.certificate.spatial_tail + rec.certificate.series_tail;
        assert!(
            (p.value - rec.value).abs() < budget,
            "route gap for {:?} {:?}: {} vs {}",
            rec.initial.kind,
            rec.observation,
            p.value,
            rec.value
        );
    }
}

#[test]
fn blocked_pair_has_known_closed_form() {
    // the first fixture cell is analytically 1 - 2/e
    let fixtures = load();
    let rec = &fixtures.records[0];
    assert_eq!((rec.initial.kind.as_str(), rec.initial.n), ("step", 2));
    let exact = 1.0 - 2.0 * (-1.0f64).exp();
    assert!((rec.value - exact).abs() < 1e-9);
}
