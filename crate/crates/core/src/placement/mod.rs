//! Placement requests, algorithm outputs, instance sizing and the reference
//! latency-aware placement algorithms.

mod algorithms;
mod external;
mod registry;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::app_model::{AppModelError, Application, Microservice, QosRequirement};
use crate::fabric::{ClusterData, Tier, CPU_EPS};

pub use algorithms::{place_v1, place_v2, place_v3, VerticalDistributed, HorizontalDistributed, Centralised};
pub use external::ExternalAlgorithm;
pub use registry::{AlgorithmConstructor, AlgorithmRegistry};

#[derive(Debug, Error)]
pub enum PlacementError {
    #[error("unknown placement algorithm `{0}`")]
    UnknownAlgorithm(String),
    #[error("placement algorithm `{0}` already registered")]
    DuplicateName(String),
    #[error("no application metadata for `{0}`")]
    MetadataMissing(String),
    #[error("external placement service unreachable: {0}")]
    Unreachable(String),
    #[error("malformed placement output: {0}")]
    MalformedResponse(String),
    #[error(transparent)]
    AppModel(#[from] AppModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceStatus {
    #[default]
    Planned,
    Deployed,
}

/// One microservice instance bound to a node. Horizontal replicas landing
/// on the same node are merged into a single plan with their summed share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InstancePlan {
    #[serde(default)]
    pub pr_id: String,
    #[serde(default)]
    pub application_id: String,
    pub ms_id: String,
    pub cluster: String,
    pub node_name: String,
    pub cpu: f64,
    pub mem: u64,
    pub replica_index: u32,
    #[serde(default)]
    pub status: InstanceStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubsetWeight {
    pub cluster: String,
    pub node: String,
    pub weight: u32,
}

/// QoS overrides carried by a request. Per-dataflow entries are accepted but
/// do not influence placement.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct QosParameters {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub application: Option<QosRequirement>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub services: BTreeMap<String, QosRequirement>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dataflows: Vec<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PlacementRequest {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub pr_id: String,
    pub application_id: String,
    pub entry_clusters: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub placed_microservices: BTreeMap<String, Vec<InstancePlan>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub composition_only_placements: BTreeMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub load_balancing_completed: BTreeMap<String, bool>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub subset_weights: BTreeMap<String, Vec<SubsetWeight>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qos_parameters: Option<QosParameters>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub hop_count: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub visited_clusters: Vec<String>,
}

fn is_zero(n: &u32) -> bool {
    *n == 0
}

impl PlacementRequest {
    pub fn new(pr_id: impl Into<String>, app: impl Into<String>, entry: &[&str]) -> Self {
        Self {
            pr_id: pr_id.into(),
            application_id: app.into(),
            entry_clusters: entry.iter().map(|s| s.to_string()).collect(),
            placed_microservices: BTreeMap::new(),
            composition_only_placements: BTreeMap::new(),
            load_balancing_completed: BTreeMap::new(),
            subset_weights: BTreeMap::new(),
            qos_parameters: None,
            hop_count: 0,
            visited_clusters: Vec::new(),
        }
    }

    /// Effective per-service QoS after applying request overrides.
    pub fn qos_overrides(&self, app: &Application) -> BTreeMap<String, QosRequirement> {
        let mut out = BTreeMap::new();
        if let Some(q) = &self.qos_parameters {
            for s in &app.services {
                if let Some(r) = q.services.get(&s.service_id).or(q.application.as_ref()) {
                    out.insert(s.service_id.clone(), r.clone());
                }
            }
        }
        out
    }

    pub fn demand(&self, app: &Application, ms_id: &str) -> f64 {
        app.demand(ms_id, &self.qos_overrides(app))
    }

    pub fn plans(&self, ms_id: &str) -> &[InstancePlan] {
        self.placed_microservices
            .get(ms_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Microservices whose placed capacity covers their demand.
    pub fn fully_placed(&self, app: &Application) -> BTreeSet<String> {
        app.microservices
            .iter()
            .filter(|m| covers(m, self.demand(app, &m.ms_id), self.plans(&m.ms_id)))
            .map(|m| m.ms_id.clone())
            .collect()
    }

    pub fn is_complete(&self, app: &Application) -> bool {
        self.fully_placed(app).len() == app.microservices.len()
    }

    pub fn all_plans(&self) -> impl Iterator<Item = &InstancePlan> {
        self.placed_microservices.values().flatten()
    }

    pub fn merge_plans(&mut self, plans: impl IntoIterator<Item = InstancePlan>) {
        for p in plans {
            self.placed_microservices
                .entry(p.ms_id.clone())
                .or_default()
                .push(p);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct IngressBinding {
    pub application_id: String,
    pub cluster: String,
    pub bound: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PlacementOutput {
    pub placements: Vec<InstancePlan>,
    pub completed_prs: Vec<String>,
    pub incomplete_prs: Vec<PlacementRequest>,
    pub ingress_bindings: Vec<IngressBinding>,
    /// Requests no cluster in view could host.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected_prs: Vec<String>,
}

/// Everything an algorithm sees for one invocation. Also the request body of
/// the external-algorithm call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PlacementInput {
    pub local_cluster: String,
    pub prs: Vec<PlacementRequest>,
    pub app_info: BTreeMap<String, Application>,
    pub cluster_data: BTreeMap<String, ClusterData>,
}

pub trait PlacementAlgorithm: Send {
    fn name(&self) -> &str;
    fn generate_placement(&mut self, input: &PlacementInput) -> Result<PlacementOutput, PlacementError>;
}

// ---------------------------------------------------------------------------
// Sizing. Linear capacity model: one reference instance (ref_cpu, ref_memory)
// sustains ref_throughput requests per second.

pub fn required_instances(ms: &Microservice, demand: f64) -> (u32, (f64, u64)) {
    let ratio = demand / ms.ref_throughput;
    let count = ((ratio - 1e-9).ceil() as u32).max(1);
    (count, (ms.ref_cpu, ms.ref_memory))
}

pub fn vertical_allocation(ms: &Microservice, demand: f64) -> (f64, u64) {
    let factor = (demand / ms.ref_throughput).max(1.0);
    (ms.ref_cpu * factor, (ms.ref_memory as f64 * factor).ceil() as u64)
}

/// Requests per second the given instances sustain under the linear model.
pub fn served_throughput(ms: &Microservice, plans: &[InstancePlan]) -> f64 {
    plans
        .iter()
        .map(|p| p.cpu / ms.ref_cpu * ms.ref_throughput)
        .sum()
}

pub fn covers(ms: &Microservice, demand: f64, plans: &[InstancePlan]) -> bool {
    !plans.is_empty() && served_throughput(ms, plans) + 1e-9 * demand.max(1.0) >= demand
}

/// Reference-size units held by the plans, for horizontal scaling.
pub fn placed_units(ms: &Microservice, plans: &[InstancePlan]) -> u32 {
    plans
        .iter()
        .map(|p| (p.cpu / ms.ref_cpu).round() as u32)
        .sum()
}

/// Most free CPU first; ties go to the lexicographically smallest name.
pub fn select_node(cluster: &ClusterData, cpu: f64, mem: u64) -> Option<String> {
    cluster
        .nodes
        .iter()
        .filter(|n| n.fits(cpu, mem))
        .fold(None::<&crate::fabric::NodeData>, |best, n| match best {
            Some(b) if b.free_cpu() > n.free_cpu() + CPU_EPS => Some(b),
            Some(b) if (b.free_cpu() - n.free_cpu()).abs() <= CPU_EPS && b.node_name < n.node_name => Some(b),
            _ => Some(n),
        })
        .map(|n| n.node_name.clone())
}

pub(crate) fn reserve_in_view(cluster: &mut ClusterData, node: &str, cpu: f64, mem: u64) {
    let n = cluster.node_mut(node).expect("selected node exists in view");
    n.allocated_cpu += cpu;
    n.allocated_memory += mem;
}

pub(crate) fn tier_allows(app: &Application, pr: &PlacementRequest, ms_id: &str, tier: Tier) -> bool {
    tier == Tier::Fog || !app.fog_only(ms_id, &pr.qos_overrides(app))
}

/// Integer WRR weights proportional to instance capacity. Exact small ratios
/// (1:2:1, 1:2:3) are kept exact; otherwise percentages are rounded.
pub fn derive_subset_weights(plans: &[InstancePlan]) -> Vec<SubsetWeight> {
    let mut per_subset: BTreeMap<(String, String), f64> = BTreeMap::new();
    for p in plans {
        *per_subset
            .entry((p.cluster.clone(), p.node_name.clone()))
            .or_default() += p.cpu;
    }
    if per_subset.is_empty() {
        return Vec::new();
    }
    let caps: Vec<f64> = per_subset.values().copied().collect();
    let min = caps.iter().copied().fold(f64::INFINITY, f64::min);
    let total: f64 = caps.iter().sum();

    let exact = (1..=100u32).find_map(|d| {
        let scaled: Vec<f64> = caps.iter().map(|c| c / min * d as f64).collect();
        scaled
            .iter()
            .all(|s| (s - s.round()).abs() < 1e-6 && s.round() <= 1000.0)
            .then(|| scaled.iter().map(|s| s.round() as u32).collect::<Vec<_>>())
    });
    let weights = match exact {
        Some(mut w) => {
            let g = w.iter().copied().fold(0, gcd);
            w.iter_mut().for_each(|x| *x /= g);
            w
        }
        None => caps
            .iter()
            .map(|c| ((100.0 * c / total).round() as u32).max(1))
            .collect(),
    };
    per_subset
        .into_keys()
        .zip(weights)
        .map(|((cluster, node), weight)| SubsetWeight { cluster, node, weight })
        .collect()
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Checks an algorithm's output against its input: every placement names a
/// known request, microservice and node, and per-node totals stay within
/// the free capacity the algorithm was shown.
pub fn validate_output(input: &PlacementInput, output: &PlacementOutput) -> Result<(), PlacementError> {
    let prs: BTreeMap<&str, &PlacementRequest> =
        input.prs.iter().map(|p| (p.pr_id.as_str(), p)).collect();
    let mut per_node: BTreeMap<(&str, &str), (f64, u64)> = BTreeMap::new();
    for p in &output.placements {
        let pr = prs
            .get(p.pr_id.as_str())
            .ok_or_else(|| PlacementError::MalformedResponse(format!("unknown request {}", p.pr_id)))?;
        let app = input
            .app_info
            .get(&pr.application_id)
            .ok_or_else(|| PlacementError::MetadataMissing(pr.application_id.clone()))?;
        if app.microservice(&p.ms_id).is_none() {
            return Err(PlacementError::MalformedResponse(format!(
                "unknown microservice {} for {}",
                p.ms_id, pr.application_id
            )));
        }
        let cluster = input.cluster_data.get(&p.cluster).ok_or_else(|| {
            PlacementError::MalformedResponse(format!("unknown cluster {}", p.cluster))
        })?;
        if cluster.node(&p.node_name).is_none() {
            return Err(PlacementError::MalformedResponse(format!(
                "unknown node {} in {}",
                p.node_name, p.cluster
            )));
        }
        if !(p.cpu > 0.0) || p.mem == 0 {
            return Err(PlacementError::MalformedResponse(format!(
                "non-positive allocation for {}",
                p.ms_id
            )));
        }
        let e = per_node.entry((&p.cluster, &p.node_name)).or_default();
        e.0 += p.cpu;
        e.1 += p.mem;
    }
    for ((cluster, node), (cpu, mem)) in per_node {
        let n = input.cluster_data[cluster].node(node).unwrap();
        if !n.fits(cpu, mem) {
            return Err(PlacementError::MalformedResponse(format!(
                "placements overcommit {node}"
            )));
        }
    }
    for id in output
        .completed_prs
        .iter()
        .chain(output.incomplete_prs.iter().map(|p| &p.pr_id))
        .chain(output.rejected_prs.iter())
    {
        if !prs.contains_key(id.as_str()) {
            return Err(PlacementError::MalformedResponse(format!("unknown request {id}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::{NodeData, GIB};

    fn ms(tp: f64) -> Microservice {
        Microservice {
            ms_id: "m".into(),
            ref_cpu: 0.5,
            ref_memory: GIB / 2,
            ref_throughput: tp,
            processing_time_ms: 1.0,
            image_ref: String::new(),
        }
    }

    #[test]
    fn instance_counts() {
        assert_eq!(required_instances(&ms(10.0), 10.0), (1, (0.5, GIB / 2)));
        assert_eq!(required_instances(&ms(10.0), 25.0).0, 3);
        assert_eq!(required_instances(&ms(10.0), 1.0).0, 1);
        // float noise must not push an exact multiple up a step
        assert_eq!(required_instances(&ms(0.1), 0.3).0, 3);
    }

    #[test]
    fn vertical_sizing() {
        let m = ms(10.0);
        assert_eq!(vertical_allocation(&m, 10.0), (0.5, GIB / 2));
        assert_eq!(vertical_allocation(&m, 20.0), (1.0, GIB));
        assert_eq!(vertical_allocation(&m, 5.0), (0.5, GIB / 2));
    }

    fn plan(cluster: &str, node: &str, cpu: f64) -> InstancePlan {
        InstancePlan {
            pr_id: "pr".into(),
            application_id: "a".into(),
            ms_id: "m".into(),
            cluster: cluster.into(),
            node_name: node.into(),
            cpu,
            mem: 1,
            replica_index: 0,
            status: InstanceStatus::Planned,
        }
    }

    #[test]
    fn weights_exact_ratios() {
        let w = derive_subset_weights(&[
            plan("fog1", "fog1-worker3", 0.5),
            plan("fog2", "fog2-worker1", 1.0),
            plan("fog2", "fog2-worker2", 0.5),
        ]);
        let ws: Vec<u32> = w.iter().map(|s| s.weight).collect();
        assert_eq!(ws, vec![1, 2, 1]);

        let w = derive_subset_weights(&[
            plan("fog1", "a", 0.25),
            plan("fog2", "b", 0.5),
            plan("fog2", "c", 0.75),
        ]);
        assert_eq!(w.iter().map(|s| s.weight).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn weights_inexact_fall_back_to_percent() {
        let w = derive_subset_weights(&[plan("c", "a", 1.0), plan("c", "b", std::f64::consts::PI)]);
        assert_eq!(w.iter().map(|s| s.weight).collect::<Vec<_>>(), vec![24, 76]);
    }

    #[test]
    fn weights_merge_same_node() {
        let w = derive_subset_weights(&[plan("c", "a", 0.5), plan("c", "a", 0.5), plan("c", "b", 0.5)]);
        assert_eq!(w.iter().map(|s| s.weight).collect::<Vec<_>>(), vec![2, 1]);
    }

    fn node(name: &str, total: f64, alloc: f64) -> NodeData {
        NodeData {
            node_name: name.into(),
            total_cpu: total,
            total_memory: 8 * GIB,
            usage_cpu: 0.0,
            usage_memory: 0,
            allocated_cpu: alloc,
            allocated_memory: 0,
        }
    }

    #[test]
    fn worst_fit_with_name_tiebreak() {
        let c = ClusterData {
            cluster: "c".into(),
            tier: Tier::Fog,
            region: "fog".into(),
            zone: "c".into(),
            nodes: vec![node("b", 4.0, 1.0), node("a", 3.0, 0.0), node("z", 2.0, 0.0)],
            adjacent_fog_clusters: vec![],
            adjacent_cloud_clusters: vec![],
        };
        assert_eq!(select_node(&c, 1.0, 1).as_deref(), Some("a"));
        assert_eq!(select_node(&c, 3.5, 1), None);
    }
}
