//! The three control-engine APIs as transport-neutral request handling.
//! The HTTP service and in-process callers both go through [`handle`], so
//! the body schemas cannot drift apart.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::control_engine::CeError;
use crate::fabric::FabricError;
use crate::placement::PlacementRequest;
use crate::routing::{DeploymentInfo, RoutingError};
use crate::simulation::{SimError, Simulation};

pub const PLACEMENT_REQUESTS: &str = "/placement-requests";
pub const CLUSTER_DATA: &str = "/cluster-data";
pub const DEPLOYMENT_INFO: &str = "/deployment-info";
pub const CLUSTER_HEADER: &str = crate::routing::CLUSTER_HEADER;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Get,
    Post,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiEnvelope {
    pub method: Method,
    pub path: String,
    pub headers: BTreeMap<String, String>,
    pub body: String,
}

impl ApiEnvelope {
    pub fn get(path: &str, cluster: Option<&str>) -> Self {
        Self::new(Method::Get, path, cluster, String::new())
    }

    pub fn post(path: &str, cluster: Option<&str>, body: impl Into<String>) -> Self {
        Self::new(Method::Post, path, cluster, body.into())
    }

    fn new(method: Method, path: &str, cluster: Option<&str>, body: String) -> Self {
        let mut headers = BTreeMap::new();
        if let Some(c) = cluster {
            headers.insert(CLUSTER_HEADER.to_string(), c.to_string());
        }
        Self {
            method,
            path: path.to_string(),
            headers,
            body,
        }
    }

    /// Header lookup, case-insensitive on the name.
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Accepted {
    pub pr_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Applied {
    pub applied: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: u16,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn malformed(message: impl Into<String>) -> Self {
        Self {
            status: 400,
            code: "MalformedPR",
            message: message.into(),
        }
    }

    fn new(status: u16, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn into_response(self) -> ApiResponse {
        ApiResponse {
            status: self.status,
            body: serde_json::to_string(&ErrorBody {
                error: self.code.to_string(),
                message: self.message,
            })
            .expect("error body serializes"),
        }
    }
}

impl From<SimError> for ApiError {
    fn from(e: SimError) -> Self {
        let msg = e.to_string();
        match e {
            SimError::Engine(CeError::MalformedPr(_)) => Self::malformed(msg),
            SimError::Engine(CeError::UnknownCluster(_)) | SimError::Fabric(FabricError::UnknownCluster(_)) => {
                Self::new(404, "UnknownCluster", msg)
            }
            SimError::Engine(CeError::UnknownApplication(_)) => Self::new(404, "UnknownApplication", msg),
            SimError::Routing(RoutingError::UnknownCluster(_)) => Self::new(404, "UnknownCluster", msg),
            SimError::Routing(RoutingError::Rejected(_)) => Self::new(409, "StalePlacement", msg),
            SimError::Routing(RoutingError::WrongTarget { .. }) => Self::new(400, "WrongTarget", msg),
            _ => Self::new(500, "Internal", msg),
        }
    }
}

fn object(body: &str) -> Result<serde_json::Map<String, Value>, ApiError> {
    match serde_json::from_str::<Value>(body) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(ApiError::malformed("body must be a JSON object")),
        Err(e) => Err(ApiError::malformed(format!("body is not valid JSON: {e}"))),
    }
}

/// Parses an API 1 body. `applicationId` and a non-empty `entryClusters`
/// are required; everything else is optional.
pub fn parse_placement_request(body: &str) -> Result<PlacementRequest, ApiError> {
    let map = object(body)?;
    match map.get("applicationId") {
        Some(Value::String(s)) if !s.is_empty() => {}
        Some(_) => return Err(ApiError::malformed("`applicationId` must be a non-empty string")),
        None => return Err(ApiError::malformed("missing required field `applicationId`")),
    }
    match map.get("entryClusters") {
        Some(Value::Array(a)) if !a.is_empty() => {}
        Some(_) => return Err(ApiError::malformed("`entryClusters` must be a non-empty array")),
        None => return Err(ApiError::malformed("missing required field `entryClusters`")),
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| ApiError::malformed(e.to_string()))
}

/// Parses an API 3 body.
pub fn parse_deployment_info(body: &str) -> Result<DeploymentInfo, ApiError> {
    let map = object(body)?;
    for key in ["applicationId", "targetCluster"] {
        if !matches!(map.get(key), Some(Value::String(s)) if !s.is_empty()) {
            return Err(ApiError::new(400, "MalformedDeployment", format!("missing required field `{key}`")));
        }
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| ApiError::new(400, "MalformedDeployment", e.to_string()))
}

fn ok<T: Serialize>(status: u16, body: &T) -> ApiResponse {
    ApiResponse {
        status,
        body: serde_json::to_string(body).expect("response body serializes"),
    }
}

/// Serves one API call against the simulation. Requests without a
/// `cluster` header address `local_cluster`. Submissions are only queued;
/// the caller decides when to advance the simulation.
pub fn handle(sim: &mut Simulation, local_cluster: &str, req: &ApiEnvelope) -> ApiResponse {
    let cluster = req.header(CLUSTER_HEADER).unwrap_or(local_cluster).to_string();
    let path = req.path.split('?').next().unwrap_or_default().trim_end_matches('/');
    let result = match (req.method, path) {
        (Method::Post, PLACEMENT_REQUESTS) => parse_placement_request(&req.body)
            .and_then(|pr| sim.submit(Some(&cluster), pr).map_err(ApiError::from))
            .map(|pr_id| ok(202, &Accepted { pr_id })),
        (Method::Get, CLUSTER_DATA) => sim
            .cluster_data(&cluster)
            .map(|d| ok(200, &d))
            .map_err(ApiError::from),
        (Method::Post, DEPLOYMENT_INFO) => parse_deployment_info(&req.body).and_then(|info| {
            sim.deliver_deployment(&cluster, &info)
                .map(|applied| ok(200, &Applied { applied }))
                .map_err(ApiError::from)
        }),
        (Method::Get, p) if p.starts_with(PLACEMENT_REQUESTS) && p.len() > PLACEMENT_REQUESTS.len() + 1 => {
            let id = &p[PLACEMENT_REQUESTS.len() + 1..];
            sim.timeline(id)
                .map(|t| ok(200, t))
                .ok_or_else(|| ApiError::new(404, "UnknownPR", format!("no placement request `{id}`")))
        }
        (_, PLACEMENT_REQUESTS | CLUSTER_DATA | DEPLOYMENT_INFO) => {
            Err(ApiError::new(405, "MethodNotAllowed", format!("{:?} not allowed on {path}", req.method)))
        }
        _ => Err(ApiError::new(404, "NotFound", format!("no endpoint {path}"))),
    };
    result.unwrap_or_else(ApiError::into_response)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::TopologyConfig;
    use crate::placement::AlgorithmRegistry;
    use crate::simulation::SimConfig;
    use crate::workload::canned;

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
    fn minimal_submit_accepted() {
        let mut s = sim();
        let r = handle(
            &mut s,
            "fog1",
            &ApiEnvelope::post(PLACEMENT_REQUESTS, Some("fog1"), r#"{"applicationId":"hcapp","entryClusters":["fog1"]}"#),
        );
        assert_eq!(r.status, 202, "{}", r.body);
        let a: Accepted = serde_json::from_str(&r.body).unwrap();
        s.run();
        let r = handle(&mut s, "fog1", &ApiEnvelope::get(&format!("{PLACEMENT_REQUESTS}/{}", a.pr_id), None));
        assert_eq!(r.status, 200);
        assert!(r.body.contains("\"status\":\"deployed\""), "{}", r.body);
    }

    #[test]
    fn required_fields() {
        let mut s = sim();
        for body in [
            r#"{"applicationId":"hcapp"}"#,
            r#"{"entryClusters":["fog1"]}"#,
            r#"{"applicationId":"","entryClusters":["fog1"]}"#,
            r#"{"applicationId":"hcapp","entryClusters":[]}"#,
            r#"["hcapp"]"#,
            "not json",
        ] {
            let r = handle(&mut s, "fog1", &ApiEnvelope::post(PLACEMENT_REQUESTS, None, body));
            assert_eq!(r.status, 400, "{body}");
            assert!(r.body.contains("MalformedPR"));
        }
    }

    #[test]
    fn unknown_cluster_and_app() {
        let mut s = sim();
        let body = r#"{"applicationId":"hcapp","entryClusters":["fog1"]}"#;
        assert_eq!(handle(&mut s, "fog1", &ApiEnvelope::post(PLACEMENT_REQUESTS, Some("fog9"), body)).status, 404);
        let body = r#"{"applicationId":"other","entryClusters":["fog1"]}"#;
        assert_eq!(handle(&mut s, "fog1", &ApiEnvelope::post(PLACEMENT_REQUESTS, None, body)).status, 404);
        assert_eq!(handle(&mut s, "fog1", &ApiEnvelope::get(CLUSTER_DATA, Some("fog9"))).status, 404);
        assert_eq!(handle(&mut s, "fog1", &ApiEnvelope::get("/nope", None)).status, 404);
        assert_eq!(handle(&mut s, "fog1", &ApiEnvelope::get(DEPLOYMENT_INFO, None)).status, 405);
    }

    #[test]
    fn cluster_data_defaults_to_local() {
        let mut s = sim();
        let r = handle(&mut s, "fog2", &ApiEnvelope::get(CLUSTER_DATA, None));
        assert_eq!(r.status, 200);
        let d: crate::fabric::ClusterData = serde_json::from_str(&r.body).unwrap();
        assert_eq!(d.cluster, "fog2");
        assert_eq!(d.nodes.len(), 5);
    }

    #[test]
    fn header_name_case_insensitive() {
        let mut env = ApiEnvelope::get(CLUSTER_DATA, None);
        env.headers.insert("Cluster".into(), "fog3".into());
        assert_eq!(env.header("cluster"), Some("fog3"));
    }
}
