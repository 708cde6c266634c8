//! DAG application model: microservices, dataflows, composite services and
//! their data paths.
//!
//! Dataflow edges point from the consumer (caller) to the consumed
//! microservice. An application is well formed when that graph is acyclic
//! and every reference resolves.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppModelError {
    #[error("unknown microservice `{0}`")]
    UnknownMicroservice(String),
    #[error("unknown service `{0}`")]
    UnknownService(String),
    #[error("malformed application document: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Application {
    pub app_id: String,
    pub microservices: Vec<Microservice>,
    pub dataflows: Vec<DataFlow>,
    pub services: Vec<CompositeService>,
    /// Template keys per microservice, resolved against the template store.
    #[serde(default)]
    pub deployment_resources: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Microservice {
    pub ms_id: String,
    /// Cores per instance at the reference throughput.
    pub ref_cpu: f64,
    /// Bytes per instance at the reference throughput.
    pub ref_memory: u64,
    /// Requests per second one reference instance sustains.
    pub ref_throughput: f64,
    pub processing_time_ms: f64,
    #[serde(default)]
    pub image_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DataFlow {
    /// Consumer.
    pub source: String,
    /// Consumed.
    pub target: String,
    #[serde(default)]
    pub message_size: u64,
    #[serde(default)]
    pub bidirectional: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeRef {
    pub source: String,
    pub target: String,
}

impl EdgeRef {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
        }
    }
}

impl fmt::Display for EdgeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.source, self.target)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPath {
    pub edges: Vec<EdgeRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CompositeService {
    pub service_id: String,
    pub members: Vec<String>,
    #[serde(default)]
    pub data_paths: Vec<DataPath>,
    pub qos_parameters: QosRequirement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TierRestriction {
    FogOnly,
    CloudAllowed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct QosRequirement {
    pub latency_budget_ms: f64,
    pub required_throughput: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier_restriction: Option<TierRestriction>,
}

impl Application {
    pub fn from_json(text: &str) -> Result<Self, AppModelError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("application serializes")
    }

    pub fn microservice(&self, ms_id: &str) -> Option<&Microservice> {
        self.microservices.iter().find(|m| m.ms_id == ms_id)
    }

    pub fn service(&self, service_id: &str) -> Option<&CompositeService> {
        self.services.iter().find(|s| s.service_id == service_id)
    }

    pub fn flow(&self, source: &str, target: &str) -> Option<&DataFlow> {
        self.dataflows
            .iter()
            .find(|d| d.source == source && d.target == target)
    }

    /// DAG predecessors: microservices that invoke `ms_id`.
    pub fn consumers_of(&self, ms_id: &str) -> BTreeSet<&str> {
        self.dataflows
            .iter()
            .filter(|d| d.target == ms_id && d.source != ms_id)
            .map(|d| d.source.as_str())
            .collect()
    }

    pub fn consumed_by(&self, ms_id: &str) -> BTreeSet<&str> {
        self.dataflows
            .iter()
            .filter(|d| d.source == ms_id && d.target != ms_id)
            .map(|d| d.target.as_str())
            .collect()
    }

    /// Microservices nobody invokes; these are what ingress gateways expose.
    pub fn roots(&self) -> Vec<&str> {
        self.microservices
            .iter()
            .map(|m| m.ms_id.as_str())
            .filter(|id| self.consumers_of(id).is_empty())
            .collect()
    }

    /// Request rate a microservice must sustain: the sum of the required
    /// throughput of every composite service it participates in.
    pub fn demand(&self, ms_id: &str, overrides: &BTreeMap<String, QosRequirement>) -> f64 {
        self.services
            .iter()
            .filter(|s| s.members.iter().any(|m| m == ms_id))
            .map(|s| {
                overrides
                    .get(&s.service_id)
                    .unwrap_or(&s.qos_parameters)
                    .required_throughput
            })
            .sum()
    }

    pub fn fog_only(&self, ms_id: &str, overrides: &BTreeMap<String, QosRequirement>) -> bool {
        self.services
            .iter()
            .filter(|s| s.members.iter().any(|m| m == ms_id))
            .any(|s| {
                overrides
                    .get(&s.service_id)
                    .unwrap_or(&s.qos_parameters)
                    .tier_restriction
                    == Some(TierRestriction::FogOnly)
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyAppId,
    DuplicateMicroservice(String),
    InvalidMicroservice { ms_id: String, field: &'static str },
    SelfLoop(String),
    UnknownFlowEndpoint(EdgeRef),
    DuplicateFlow(EdgeRef),
    Cycle(Vec<String>),
    DuplicateService(String),
    UnknownMember { service_id: String, ms_id: String },
    PathEdgeNotInDataflows { service_id: String, edge: EdgeRef },
    PathEndpointNotMember { service_id: String, edge: EdgeRef },
    PathNotChained { service_id: String, edge: EdgeRef },
    InvalidQos { service_id: String, field: &'static str },
    UnknownResourceOwner(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyAppId => write!(f, "empty appId"),
            Violation::DuplicateMicroservice(m) => write!(f, "duplicate microservice {m}"),
            Violation::InvalidMicroservice { ms_id, field } => {
                write!(f, "microservice {ms_id}: invalid {field}")
            }
            Violation::SelfLoop(m) => write!(f, "self-loop on {m}"),
            Violation::UnknownFlowEndpoint(e) => write!(f, "dataflow {e} references unknown microservice"),
            Violation::DuplicateFlow(e) => write!(f, "duplicate dataflow {e}"),
            Violation::Cycle(ms) => write!(f, "cycle through {}", ms.join(", ")),
            Violation::DuplicateService(s) => write!(f, "duplicate service {s}"),
            Violation::UnknownMember { service_id, ms_id } => {
                write!(f, "service {service_id}: unknown member {ms_id}")
            }
            Violation::PathEdgeNotInDataflows { service_id, edge } => {
                write!(f, "service {service_id}: path edge {edge} is not a dataflow")
            }
            Violation::PathEndpointNotMember { service_id, edge } => {
                write!(f, "service {service_id}: path edge {edge} leaves the service")
            }
            Violation::PathNotChained { service_id, edge } => {
                write!(f, "service {service_id}: path edge {edge} does not chain")
            }
            Violation::InvalidQos { service_id, field } => {
                write!(f, "service {service_id}: invalid {field}")
            }
            Violation::UnknownResourceOwner(m) => {
                write!(f, "deployment resources for unknown microservice {m}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

fn positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

pub fn validate(app: &Application) -> ValidationReport {
    let mut out = Vec::new();
    if app.app_id.trim().is_empty() {
        out.push(Violation::EmptyAppId);
    }

    let mut ids = BTreeSet::new();
    for m in &app.microservices {
        if !ids.insert(m.ms_id.as_str()) {
            out.push(Violation::DuplicateMicroservice(m.ms_id.clone()));
        }
        let bad_field = if !positive(m.ref_cpu) {
            Some("refCpu")
        } else if m.ref_memory == 0 {
            Some("refMemory")
        } else if !positive(m.ref_throughput) {
            Some("refThroughput")
        } else if !(m.processing_time_ms.is_finite() && m.processing_time_ms >= 0.0) {
            Some("processingTimeMs")
        } else {
            None
        };
        if let Some(field) = bad_field {
            out.push(Violation::InvalidMicroservice {
                ms_id: m.ms_id.clone(),
                field,
            });
        }
    }

    let mut flows = BTreeSet::new();
    for d in &app.dataflows {
        let edge = EdgeRef::new(&d.source, &d.target);
        if d.source == d.target {
            out.push(Violation::SelfLoop(d.source.clone()));
        }
        if !ids.contains(d.source.as_str()) || !ids.contains(d.target.as_str()) {
            out.push(Violation::UnknownFlowEndpoint(edge.clone()));
        }
        if !flows.insert(edge.clone()) {
            out.push(Violation::DuplicateFlow(edge));
        }
    }

    let cyclic = cyclic_nodes(app);
    if !cyclic.is_empty() {
        out.push(Violation::Cycle(cyclic));
    }

    let mut service_ids = BTreeSet::new();
    for s in &app.services {
        if !service_ids.insert(s.service_id.as_str()) {
            out.push(Violation::DuplicateService(s.service_id.clone()));
        }
        let members: BTreeSet<&str> = s.members.iter().map(String::as_str).collect();
        for m in &s.members {
            if !ids.contains(m.as_str()) {
                out.push(Violation::UnknownMember {
                    service_id: s.service_id.clone(),
                    ms_id: m.clone(),
                });
            }
        }
        for path in &s.data_paths {
            let mut prev: Option<&EdgeRef> = None;
            for edge in &path.edges {
                if !flows.contains(edge) {
                    out.push(Violation::PathEdgeNotInDataflows {
                        service_id: s.service_id.clone(),
                        edge: edge.clone(),
                    });
                }
                if !members.contains(edge.source.as_str()) || !members.contains(edge.target.as_str()) {
                    out.push(Violation::PathEndpointNotMember {
                        service_id: s.service_id.clone(),
                        edge: edge.clone(),
                    });
                }
                if let Some(p) = prev {
                    if p.target != edge.source {
                        out.push(Violation::PathNotChained {
                            service_id: s.service_id.clone(),
                            edge: edge.clone(),
                        });
                    }
                }
                prev = Some(edge);
            }
        }
        let q = &s.qos_parameters;
        if !positive(q.latency_budget_ms) {
            out.push(Violation::InvalidQos {
                service_id: s.service_id.clone(),
                field: "latencyBudgetMs",
            });
        }
        if !positive(q.required_throughput) {
            out.push(Violation::InvalidQos {
                service_id: s.service_id.clone(),
                field: "requiredThroughput",
            });
        }
    }

    for owner in app.deployment_resources.keys() {
        if !ids.contains(owner.as_str()) {
            out.push(Violation::UnknownResourceOwner(owner.clone()));
        }
    }

    ValidationReport { violations: out }
}

/// Kahn's algorithm; whatever cannot be peeled off lies on or behind a cycle.
/// Self-loops are reported separately and ignored here.
fn cyclic_nodes(app: &Application) -> Vec<String> {
    let nodes: BTreeSet<&str> = app
        .microservices
        .iter()
        .map(|m| m.ms_id.as_str())
        .chain(app.dataflows.iter().flat_map(|d| [d.source.as_str(), d.target.as_str()]))
        .collect();
    let mut indegree: BTreeMap<&str, usize> = nodes.iter().map(|n| (*n, 0)).collect();
    let mut succ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let edges: BTreeSet<(&str, &str)> = app
        .dataflows
        .iter()
        .filter(|d| d.source != d.target)
        .map(|d| (d.source.as_str(), d.target.as_str()))
        .collect();
    for (s, t) in edges {
        *indegree.get_mut(t).unwrap() += 1;
        succ.entry(s).or_default().push(t);
    }
    let mut ready: VecDeque<&str> = indegree
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(n, _)| *n)
        .collect();
    while let Some(n) = ready.pop_front() {
        for t in succ.get(n).into_iter().flatten() {
            let d = indegree.get_mut(t).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.push_back(t);
            }
        }
        indegree.remove(n);
    }
    indegree.keys().map(|s| s.to_string()).collect()
}

/// Microservices not yet placed whose every consumer already is.
pub fn next_placeable(
    app: &Application,
    placed: &BTreeSet<String>,
) -> Result<BTreeSet<String>, AppModelError> {
    if let Some(unknown) = placed.iter().find(|p| app.microservice(p).is_none()) {
        return Err(AppModelError::UnknownMicroservice(unknown.clone()));
    }
    Ok(app
        .microservices
        .iter()
        .filter(|m| !placed.contains(&m.ms_id))
        .filter(|m| {
            app.consumers_of(&m.ms_id)
                .iter()
                .all(|c| placed.contains(*c))
        })
        .map(|m| m.ms_id.clone())
        .collect())
}

/// Data paths of a composite service. Declared paths are returned as-is;
/// otherwise every root-to-leaf walk over the member subgraph becomes one
/// path, which expands aggregator fan-out into prefix-sharing chains.
pub fn service_paths(app: &Application, service: &CompositeService) -> Vec<DataPath> {
    if !service.data_paths.is_empty() {
        return service.data_paths.clone();
    }
    let members: BTreeSet<&str> = service.members.iter().map(String::as_str).collect();
    let inner: Vec<&DataFlow> = app
        .dataflows
        .iter()
        .filter(|d| {
            d.source != d.target
                && members.contains(d.source.as_str())
                && members.contains(d.target.as_str())
        })
        .collect();
    let roots: Vec<&str> = members
        .iter()
        .copied()
        .filter(|m| !inner.iter().any(|d| d.target == *m))
        .collect();

    let mut paths = Vec::new();
    for root in roots {
        let mut stack = vec![(root, Vec::<EdgeRef>::new())];
        while let Some((at, prefix)) = stack.pop() {
            let next: Vec<&&DataFlow> = inner.iter().filter(|d| d.source == at).collect();
            if next.is_empty() {
                paths.push(DataPath { edges: prefix });
                continue;
            }
            // reversed so the pop order follows dataflow declaration order
            for d in next.into_iter().rev() {
                let mut p = prefix.clone();
                p.push(EdgeRef::new(&d.source, &d.target));
                stack.push((d.target.as_str(), p));
            }
        }
    }
    paths
}

/// Prefix-merged view of a service's data paths: one node per microservice
/// invocation, children invoked in parallel.
#[derive(Debug, Clone, PartialEq)]
pub struct InvocationNode {
    pub ms_id: String,
    pub children: Vec<InvocationNode>,
}

impl InvocationNode {
    pub fn count(&self) -> usize {
        1 + self.children.iter().map(InvocationNode::count).sum::<usize>()
    }
}

pub fn invocation_tree(app: &Application, service: &CompositeService) -> Option<InvocationNode> {
    let paths = service_paths(app, service);
    let root = match paths.iter().find_map(|p| p.edges.first()) {
        Some(e) => e.source.clone(),
        None => service.members.first()?.clone(),
    };
    let mut tree = InvocationNode {
        ms_id: root,
        children: Vec::new(),
    };
    for path in &paths {
        let mut node = &mut tree;
        for edge in &path.edges {
            let idx = match node.children.iter().position(|c| c.ms_id == edge.target) {
                Some(i) => i,
                None => {
                    node.children.push(InvocationNode {
                        ms_id: edge.target.clone(),
                        children: Vec::new(),
                    });
                    node.children.len() - 1
                }
            };
            node = &mut node.children[idx];
        }
    }
    Some(tree)
}
