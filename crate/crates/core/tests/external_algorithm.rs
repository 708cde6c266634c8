//! Engines delegating placement to an HTTP service.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::routing::get;
use axum::{Json, Router};
use fogmesh_core::control_engine::CeConfig;
use fogmesh_core::fabric::TopologyConfig;
use fogmesh_core::placement::{place_v2, AlgorithmRegistry, PlacementInput, PlacementOutput};
use fogmesh_core::simulation::{PrStatus, SimConfig, Simulation};
use fogmesh_core::workload::canned;

/// Runs the reference horizontally scaled placement remotely.
async fn place(State(calls): State<Arc<AtomicUsize>>, Json(input): Json<PlacementInput>) -> Json<PlacementOutput> {
    calls.fetch_add(1, Ordering::SeqCst);
    let mut view = input.cluster_data[&input.local_cluster].clone();
    let mut out = PlacementOutput::default();
    for pr in &input.prs {
        let o = place_v2(pr, &input.app_info[&pr.application_id], &mut view);
        out.placements.extend(o.placements);
        out.completed_prs.extend(o.completed_prs);
        out.incomplete_prs.extend(o.incomplete_prs);
        out.ingress_bindings.extend(o.ingress_bindings);
    }
    Json(out)
}

async fn broken() -> (axum::http::StatusCode, &'static str) {
    (axum::http::StatusCode::OK, "{not json")
}

/// Serves the stub on a background runtime and returns its base address.
fn serve(router: Router) -> (SocketAddr, tokio::runtime::Runtime) {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    rt.spawn(async move { axum::serve(listener, router).await.unwrap() });
    (addr, rt)
}

fn sim_with_url(url: &str) -> Simulation {
    let mut cfg = SimConfig::distributed(TopologyConfig::testbed(), "v2", 1);
    cfg.engines = cfg
        .engines
        .into_iter()
        .map(|e| CeConfig {
            external_algo_url: Some(url.to_string()),
            external_timeout_ms: 2000,
            ..e
        })
        .collect();
    let mut sim = Simulation::new(&cfg, &AlgorithmRegistry::with_defaults()).unwrap();
    sim.seed_application(&canned("app2").unwrap());
    sim
}

#[test]
fn remote_algorithm_places_like_local_one() {
    let calls = Arc::new(AtomicUsize::new(0));
    let (addr, _rt) = serve(Router::new().route("/place", get(place)).with_state(calls.clone()));
    let mut remote = sim_with_url(&format!("http://{addr}/place"));
    let id = remote
        .submit(Some("fog1"), fogmesh_core::placement::PlacementRequest::new("", "app2", &["fog1"]))
        .unwrap();
    remote.run();
    assert_eq!(remote.timeline(&id).unwrap().status, PrStatus::Deployed);
    assert!(calls.load(Ordering::SeqCst) >= 1);

    let mut local = Simulation::new(
        &SimConfig::distributed(TopologyConfig::testbed(), "v2", 1),
        &AlgorithmRegistry::with_defaults(),
    )
    .unwrap();
    local.seed_application(&canned("app2").unwrap());
    local
        .submit(Some("fog1"), fogmesh_core::placement::PlacementRequest::new("", "app2", &["fog1"]))
        .unwrap();
    local.run();
    let nodes = |s: &Simulation| {
        let mut v: Vec<String> = s.mesh().instances().map(|i| format!("{}@{}/{}", i.ms_id, i.cluster, i.node)).collect();
        v.sort();
        v
    };
    assert_eq!(nodes(&remote), nodes(&local));
}

#[test]
fn malformed_remote_output_rejects_after_retry() {
    let (addr, _rt) = serve(Router::new().route("/place", get(broken)));
    let mut sim = sim_with_url(&format!("http://{addr}/place"));
    let id = sim
        .submit(Some("fog1"), fogmesh_core::placement::PlacementRequest::new("", "app2", &["fog1"]))
        .unwrap();
    sim.run();
    let t = sim.timeline(&id).unwrap();
    assert_eq!(t.status, PrStatus::Rejected);
    assert!(t.reason.as_deref().unwrap_or_default().contains("malformed"), "{:?}", t.reason);
}

#[test]
fn unreachable_service_rejects() {
    // nothing listens on the discard port
    let mut sim = sim_with_url("http://127.0.0.1:9/place");
    let id = sim
        .submit(Some("fog1"), fogmesh_core::placement::PlacementRequest::new("", "app2", &["fog1"]))
        .unwrap();
    sim.run();
    assert_eq!(sim.timeline(&id).unwrap().status, PrStatus::Rejected);
}
