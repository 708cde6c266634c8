use std::path::PathBuf;

use fogmesh_core::api::{handle, parse_deployment_info, parse_placement_request, ApiEnvelope, CLUSTER_DATA, DEPLOYMENT_INFO, PLACEMENT_REQUESTS};
use fogmesh_core::fabric::{ClusterData, TopologyConfig};
use fogmesh_core::placement::AlgorithmRegistry;
use fogmesh_core::simulation::{SimConfig, Simulation};
use fogmesh_core::workload::canned;

fn golden(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn pretty<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).unwrap() + "\n"
}

fn sim() -> Simulation {
    let mut s = Simulation::new(
        &SimConfig::distributed(TopologyConfig::testbed(), "v2", 1),
        &AlgorithmRegistry::with_defaults(),
    )
    .unwrap();
    s.seed_application(&canned("hcapp").unwrap());
    s
}

#[test]
fn placement_request_round_trips() {
    for name in ["api1_minimal.json", "api1_forwarded.json"] {
        let text = golden(name);
        let pr = parse_placement_request(&text).unwrap();
        assert_eq!(pretty(&pr), text, "{name}");
    }
}

#[test]
fn deployment_info_round_trips() {
    let text = golden("api3_deployment.json");
    let info = parse_deployment_info(&text).unwrap();
    assert_eq!(pretty(&info), text);
}

#[test]
fn cluster_data_matches_golden() {
    let text = golden("api2_fog1.json");
    let parsed: ClusterData = serde_json::from_str(&text).unwrap();
    assert_eq!(pretty(&parsed), text);
    let mut s = sim();
    let r = handle(&mut s, "fog1", &ApiEnvelope::get(CLUSTER_DATA, Some("fog1")));
    assert_eq!(r.status, 200);
    let live: ClusterData = serde_json::from_str(&r.body).unwrap();
    assert_eq!(pretty(&live), text);
}

#[test]
fn forwarded_request_accepted() {
    let mut s = sim();
    let r = handle(&mut s, "fog2", &ApiEnvelope::post(PLACEMENT_REQUESTS, Some("fog2"), golden("api1_forwarded.json")));
    assert_eq!(r.status, 202, "{}", r.body);
    assert!(r.body.contains("pr-7"));
}

#[test]
fn deployment_applies_once_and_refuses_full_nodes() {
    let mut s = sim();
    let body = golden("api3_deployment.json");
    let r = handle(&mut s, "fog2", &ApiEnvelope::post(DEPLOYMENT_INFO, Some("fog2"), body.clone()));
    assert_eq!((r.status, r.body.as_str()), (200, r#"{"applied":true}"#));
    assert!(s.mesh().table("fog2").unwrap().gateways.contains_key("hcapp"));
    let r = handle(&mut s, "fog2", &ApiEnvelope::post(DEPLOYMENT_INFO, Some("fog2"), body));
    assert_eq!((r.status, r.body.as_str()), (200, r#"{"applied":false}"#));

    let mut info = parse_deployment_info(&golden("api3_deployment.json")).unwrap();
    info.pr_id = "pr-8".into();
    info.instance_plans[0].cpu = 64.0;
    let r = handle(
        &mut s,
        "fog2",
        &ApiEnvelope::post(DEPLOYMENT_INFO, Some("fog2"), serde_json::to_string(&info).unwrap()),
    );
    assert_eq!(r.status, 409, "{}", r.body);
}

#[test]
fn malformed_deployment_rejected() {
    let mut s = sim();
    let r = handle(&mut s, "fog2", &ApiEnvelope::post(DEPLOYMENT_INFO, Some("fog2"), r#"{"targetCluster":"fog2"}"#));
    assert_eq!(r.status, 400);
}
