//! HTTP front end. Handlers hand each call to a driver thread that owns the
//! simulation, so handlers never touch shared state and the blocking
//! external-algorithm client never runs on the async runtime.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::mpsc;
use std::thread;

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use fogmesh_core::api::{self, ApiEnvelope, ApiResponse, Method, CLUSTER_DATA, DEPLOYMENT_INFO, PLACEMENT_REQUESTS};
use fogmesh_core::simulation::Simulation;
use tokio::sync::oneshot;

type Call = (ApiEnvelope, oneshot::Sender<ApiResponse>);

#[derive(Clone)]
struct Driver(mpsc::Sender<Call>);

/// Owns the simulation. Every call runs the simulation until nothing is
/// left to do, so responses reflect settled state.
fn drive(mut sim: Simulation, local_cluster: String, calls: mpsc::Receiver<Call>) {
    for (req, reply) in calls {
        let resp = api::handle(&mut sim, &local_cluster, &req);
        sim.run();
        let _ = reply.send(resp);
    }
}

async fn dispatch(driver: &Driver, method: Method, path: String, headers: &HeaderMap, body: Bytes) -> Response {
    let headers: BTreeMap<String, String> = headers
        .iter()
        .filter_map(|(k, v)| Some((k.as_str().to_string(), v.to_str().ok()?.to_string())))
        .collect();
    let env = ApiEnvelope {
        method,
        path,
        headers,
        body: String::from_utf8_lossy(&body).into_owned(),
    };
    let (tx, rx) = oneshot::channel();
    if driver.0.send((env, tx)).is_err() {
        return (StatusCode::SERVICE_UNAVAILABLE, "simulation stopped").into_response();
    }
    match rx.await {
        Ok(r) => (
            StatusCode::from_u16(r.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            [("content-type", "application/json")],
            r.body,
        )
            .into_response(),
        Err(_) => (StatusCode::INTERNAL_SERVER_ERROR, "simulation failed").into_response(),
    }
}

async fn submit(State(d): State<Driver>, headers: HeaderMap, body: Bytes) -> Response {
    dispatch(&d, Method::Post, PLACEMENT_REQUESTS.into(), &headers, body).await
}

async fn status(State(d): State<Driver>, Path(id): Path<String>, headers: HeaderMap) -> Response {
    dispatch(&d, Method::Get, format!("{PLACEMENT_REQUESTS}/{id}"), &headers, Bytes::new()).await
}

async fn cluster_data(State(d): State<Driver>, headers: HeaderMap) -> Response {
    dispatch(&d, Method::Get, CLUSTER_DATA.into(), &headers, Bytes::new()).await
}

async fn deployment(State(d): State<Driver>, headers: HeaderMap, body: Bytes) -> Response {
    dispatch(&d, Method::Post, DEPLOYMENT_INFO.into(), &headers, body).await
}

pub fn router(sim: Simulation, local_cluster: String) -> Router {
    let (tx, rx) = mpsc::channel();
    thread::Builder::new()
        .name("simulation".into())
        .spawn(move || drive(sim, local_cluster, rx))
        .expect("spawn simulation thread");
    Router::new()
        .route(PLACEMENT_REQUESTS, post(submit))
        .route(&format!("{PLACEMENT_REQUESTS}/{{id}}"), get(status))
        .route(CLUSTER_DATA, get(cluster_data))
        .route(DEPLOYMENT_INFO, post(deployment))
        .with_state(Driver(tx))
}

pub fn serve(sim: Simulation, local_cluster: String, bind: SocketAddr) -> anyhow::Result<()> {
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(bind)
            .await
            .with_context(|| format!("binding {bind}"))?;
        let addr = listener.local_addr()?;
        // tests and scripts read the bound address from this line
        println!("listening on {addr}");
        log::info!("serving {local_cluster} on {addr}");
        axum::serve(listener, router(sim, local_cluster))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .context("serving")
    })
}
