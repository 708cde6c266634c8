//! Simulated service-mesh state: per-cluster routing tables, deployment of
//! instance and service records, weighted round-robin selection, header
//! routing between control engines and locality-aware failover.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fabric::{AllocationTicket, Fabric, FabricError};
use crate::placement::{InstancePlan, SubsetWeight};

/// Header carrying the destination cluster on control-engine calls.
pub const CLUSTER_HEADER: &str = "cluster";

#[derive(Debug, Error, PartialEq)]
pub enum RoutingError {
    #[error("unknown cluster `{0}`")]
    UnknownCluster(String),
    #[error("deployment info for `{info}` delivered to `{cluster}`")]
    WrongTarget { cluster: String, info: String },
    #[error("fabric rejected deployment: {0}")]
    Rejected(FabricError),
    #[error("cluster {cluster} cannot resolve {service}")]
    Unresolvable { cluster: String, service: String },
    #[error("no healthy replica of {0}")]
    AllReplicasDown(String),
    #[error("no subset matches header value `{0}`")]
    NoSubsetMatch(String),
}

/// Key for per-microservice routing state.
pub fn service_key(app_id: &str, ms_id: &str) -> String {
    format!("{app_id}/{ms_id}")
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubsetLabel {
    pub cluster: String,
    pub node: String,
}

impl SubsetLabel {
    pub fn new(cluster: impl Into<String>, node: impl Into<String>) -> Self {
        Self {
            cluster: cluster.into(),
            node: node.into(),
        }
    }
}

impl std::fmt::Display for SubsetLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.cluster, self.node)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LbUpdate {
    pub ms_id: String,
    pub subsets: Vec<SubsetWeight>,
}

/// Per-cluster deployment payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeploymentInfo {
    #[serde(default)]
    pub pr_id: String,
    pub application_id: String,
    pub target_cluster: String,
    #[serde(default)]
    pub instance_plans: Vec<InstancePlan>,
    #[serde(default)]
    pub entry_cluster: bool,
    /// Root microservices exposed through the gateway when `entry_cluster`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gateway_microservices: Vec<String>,
    #[serde(default)]
    pub lb_updates: Vec<LbUpdate>,
    #[serde(default, rename = "additionalMForSLevel")]
    pub additional_m_for_s_level: Vec<String>,
}

impl DeploymentInfo {
    pub fn new(pr_id: &str, app_id: &str, target: &str) -> Self {
        Self {
            pr_id: pr_id.into(),
            application_id: app_id.into(),
            target_cluster: target.into(),
            instance_plans: Vec::new(),
            entry_cluster: false,
            gateway_microservices: Vec::new(),
            lb_updates: Vec::new(),
            additional_m_for_s_level: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.instance_plans.is_empty()
            && !self.entry_cluster
            && self.lb_updates.is_empty()
            && self.additional_m_for_s_level.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InstanceRecord {
    pub application_id: String,
    pub ms_id: String,
    pub cluster: String,
    pub node: String,
    pub cpu: f64,
    pub mem: u64,
    pub healthy: bool,
    pub pr_ids: BTreeSet<String>,
    #[serde(skip)]
    tickets: Vec<AllocationTicket>,
}

impl InstanceRecord {
    pub fn label(&self) -> SubsetLabel {
        SubsetLabel::new(&self.cluster, &self.node)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "kind")]
pub enum HeaderMatch {
    Equals { name: String, value: String },
    Absent { name: String },
    Any,
}

impl HeaderMatch {
    fn matches(&self, headers: &BTreeMap<String, String>) -> bool {
        match self {
            HeaderMatch::Equals { name, value } => headers.get(name) == Some(value),
            HeaderMatch::Absent { name } => !headers.contains_key(name),
            HeaderMatch::Any => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Destination {
    Subset(String),
    Weighted(Vec<SubsetWeight>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RouteRule {
    #[serde(rename = "match")]
    pub matcher: HeaderMatch,
    pub destination: Destination,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SubsetPolicy {
    pub cluster: String,
    pub node: String,
    pub weight: u32,
    pub region: String,
    pub zone: String,
}

impl SubsetPolicy {
    pub fn label(&self) -> SubsetLabel {
        SubsetLabel::new(&self.cluster, &self.node)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RoutingTable {
    pub cluster: String,
    pub service_entries: BTreeMap<String, BTreeSet<SubsetLabel>>,
    pub route_rules: BTreeMap<String, Vec<RouteRule>>,
    pub subset_policies: BTreeMap<String, Vec<SubsetPolicy>>,
    /// app id -> exposed root microservices
    pub gateways: BTreeMap<String, Vec<String>>,
    pub east_west_links: BTreeSet<String>,
    pub instances: BTreeMap<String, InstanceRecord>,
    /// Routing of control-engine calls by the `cluster` header.
    pub control_routes: Vec<RouteRule>,
    #[serde(skip)]
    applied: Vec<DeploymentInfo>,
}

impl RoutingTable {
    pub fn can_resolve(&self, key: &str) -> bool {
        self.service_entries.contains_key(key)
            && self.route_rules.contains_key(key)
            && self.subset_policies.contains_key(key)
    }

    /// Destination control engine for a call arriving with `headers`.
    pub fn route_by_header(&self, headers: &BTreeMap<String, String>) -> Result<String, RoutingError> {
        for rule in &self.control_routes {
            if rule.matcher.matches(headers) {
                if let Destination::Subset(s) = &rule.destination {
                    return Ok(s.clone());
                }
            }
        }
        Err(RoutingError::NoSubsetMatch(
            headers.get(CLUSTER_HEADER).cloned().unwrap_or_default(),
        ))
    }
}

fn instance_key(app: &str, ms: &str, node: &str) -> String {
    format!("{app}/{ms}@{node}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AppliedRecord {
    pub cluster: String,
    pub instances: Vec<String>,
    pub noop: bool,
}

/// Smooth weighted round-robin (current-weight method). Each pick adds every
/// weight to its running counter, takes the largest counter (earliest listed
/// wins ties) and subtracts the weight total from it.
#[derive(Debug, Clone)]
pub struct SmoothWrr<K: Ord> {
    current: BTreeMap<K, i64>,
}

impl<K: Ord + Clone> Default for SmoothWrr<K> {
    fn default() -> Self {
        Self::new()
    }
}

impl<K: Ord + Clone> SmoothWrr<K> {
    pub fn new() -> Self {
        Self {
            current: BTreeMap::new(),
        }
    }

    pub fn next(&mut self, items: &[(K, u32)]) -> Option<K> {
        let live: Vec<&(K, u32)> = items.iter().filter(|(_, w)| *w > 0).collect();
        if live.is_empty() {
            return None;
        }
        self.current.retain(|k, _| live.iter().any(|(l, _)| l == k));
        let total: i64 = live.iter().map(|(_, w)| *w as i64).sum();
        let mut best: Option<(&K, i64)> = None;
        for (k, w) in &live {
            let c = self.current.entry(k.clone()).or_insert(0);
            *c += *w as i64;
            if best.map_or(true, |(_, b)| *c > b) {
                best = Some((k, *c));
            }
        }
        let pick = best.expect("non-empty").0.clone();
        *self.current.get_mut(&pick).expect("present") -= total;
        Some(pick)
    }
}

/// Something issuing a call inside the mesh.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Caller {
    Gateway { cluster: String, app: String },
    Instance { cluster: String, node: String, app: String, ms: String },
}

impl Caller {
    pub fn cluster(&self) -> &str {
        match self {
            Caller::Gateway { cluster, .. } | Caller::Instance { cluster, .. } => cluster,
        }
    }

    fn key(&self) -> String {
        match self {
            Caller::Gateway { cluster, app } => format!("gw:{cluster}:{app}"),
            Caller::Instance { cluster, node, app, ms } => format!("{cluster}:{}", instance_key(app, ms, node)),
        }
    }
}

/// Replica selection preferring the caller's zone, then its region, then
/// anything else; nearest by path latency within a tier.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FailoverPolicy {
    pub health: BTreeMap<String, bool>,
}

impl FailoverPolicy {
    pub fn is_healthy(&self, cluster: &str) -> bool {
        self.health.get(cluster).copied().unwrap_or(true)
    }

    pub fn set_health(&mut self, cluster: &str, healthy: bool) {
        self.health.insert(cluster.to_string(), healthy);
    }

    pub fn select(&self, fabric: &Fabric, what: &str, from: &str, candidates: &[String]) -> Result<String, RoutingError> {
        let origin = fabric
            .cluster(from)
            .map_err(|_| RoutingError::UnknownCluster(from.to_string()))?;
        candidates
            .iter()
            .filter(|c| self.is_healthy(c))
            .filter_map(|c| {
                let cl = fabric.cluster(c).ok()?;
                let tier = if cl.zone == origin.zone {
                    0
                } else if cl.region == origin.region {
                    1
                } else {
                    2
                };
                Some((tier, fabric.path_latency(from, c).unwrap_or(f64::INFINITY), c))
            })
            .min_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(b.2)))
            .map(|(_, _, c)| c.clone())
            .ok_or_else(|| RoutingError::AllReplicasDown(what.to_string()))
    }
}

/// Routing tables of the whole federation plus the WRR counters.
#[derive(Debug, Clone, Default)]
pub struct Mesh {
    tables: BTreeMap<String, RoutingTable>,
    wrr: BTreeMap<(String, String), SmoothWrr<SubsetLabel>>,
}

impl Mesh {
    /// Empty tables with east-west links along fabric adjacency and one
    /// control route per cluster, falling back to the local engine.
    pub fn new(fabric: &Fabric) -> Self {
        let names = fabric.cluster_names();
        let mut tables = BTreeMap::new();
        for c in fabric.clusters() {
            let mut control_routes: Vec<RouteRule> = names
                .iter()
                .map(|n| RouteRule {
                    matcher: HeaderMatch::Equals {
                        name: CLUSTER_HEADER.into(),
                        value: n.clone(),
                    },
                    destination: Destination::Subset(n.clone()),
                })
                .collect();
            control_routes.push(RouteRule {
                matcher: HeaderMatch::Absent {
                    name: CLUSTER_HEADER.into(),
                },
                destination: Destination::Subset(c.name.clone()),
            });
            tables.insert(
                c.name.clone(),
                RoutingTable {
                    cluster: c.name.clone(),
                    east_west_links: c.adjacent_fog.iter().chain(&c.adjacent_cloud).cloned().collect(),
                    control_routes,
                    ..Default::default()
                },
            );
        }
        // links are symmetric even when adjacency is declared one way
        let pairs: Vec<(String, String)> = tables
            .values()
            .flat_map(|t| t.east_west_links.iter().map(|l| (l.clone(), t.cluster.clone())))
            .collect();
        for (a, b) in pairs {
            if let Some(t) = tables.get_mut(&a) {
                t.east_west_links.insert(b);
            }
        }
        Self {
            tables,
            wrr: BTreeMap::new(),
        }
    }

    pub fn table(&self, cluster: &str) -> Option<&RoutingTable> {
        self.tables.get(cluster)
    }

    pub fn tables(&self) -> impl Iterator<Item = &RoutingTable> {
        self.tables.values()
    }

    pub fn instances(&self) -> impl Iterator<Item = &InstanceRecord> {
        self.tables.values().flat_map(|t| t.instances.values())
    }

    pub fn instances_of<'a>(&'a self, app: &'a str, ms: &'a str) -> impl Iterator<Item = &'a InstanceRecord> + 'a {
        self.instances()
            .filter(move |i| i.application_id == app && i.ms_id == ms)
    }

    pub fn set_instance_health(&mut self, app: &str, ms: &str, label: &SubsetLabel, healthy: bool) -> bool {
        match self
            .tables
            .get_mut(&label.cluster)
            .and_then(|t| t.instances.get_mut(&instance_key(app, ms, &label.node)))
        {
            Some(i) => {
                i.healthy = healthy;
                true
            }
            None => false,
        }
    }

    /// Deterministic text dump with stable key order.
    pub fn dump(&self) -> String {
        serde_json::to_string_pretty(&self.tables).expect("routing tables serialize")
    }

    /// Applies a deployment payload on `cluster`. Instances consume fabric
    /// capacity; if any plan does not fit, nothing is applied. Delivering the
    /// same payload twice is a no-op.
    pub fn apply_deployment(
        &mut self,
        fabric: &mut Fabric,
        cluster: &str,
        info: &DeploymentInfo,
    ) -> Result<AppliedRecord, RoutingError> {
        let table = self
            .tables
            .get(cluster)
            .ok_or_else(|| RoutingError::UnknownCluster(cluster.to_string()))?;
        let wrong = |what: &str| RoutingError::WrongTarget {
            cluster: cluster.to_string(),
            info: what.to_string(),
        };
        if info.target_cluster != cluster {
            return Err(wrong(&info.target_cluster));
        }
        if table.applied.contains(info) {
            return Ok(AppliedRecord {
                cluster: cluster.to_string(),
                instances: Vec::new(),
                noop: true,
            });
        }
        if let Some(p) = info.instance_plans.iter().find(|p| p.cluster != cluster) {
            return Err(wrong(&p.cluster));
        }

        let mut tickets = Vec::new();
        for p in &info.instance_plans {
            match fabric.allocate(cluster, &p.node_name, p.cpu, p.mem) {
                Ok(t) => tickets.push(t),
                Err(e) => {
                    for t in &tickets {
                        fabric.release(t).expect("ticket just issued");
                    }
                    return Err(RoutingError::Rejected(e));
                }
            }
        }

        let (region, zone) = {
            let c = fabric.cluster(cluster).expect("table implies cluster");
            (c.region.clone(), c.zone.clone())
        };
        let table = self.tables.get_mut(cluster).expect("checked above");
        let app = &info.application_id;
        let mut created = Vec::new();
        for (p, t) in info.instance_plans.iter().zip(tickets) {
            let key = instance_key(app, &p.ms_id, &p.node_name);
            let rec = table.instances.entry(key.clone()).or_insert_with(|| InstanceRecord {
                application_id: app.clone(),
                ms_id: p.ms_id.clone(),
                cluster: cluster.to_string(),
                node: p.node_name.clone(),
                cpu: 0.0,
                mem: 0,
                healthy: true,
                pr_ids: BTreeSet::new(),
                tickets: Vec::new(),
            });
            rec.cpu += p.cpu;
            rec.mem += p.mem;
            rec.pr_ids.insert(p.pr_id.clone());
            rec.tickets.push(t);
            table
                .service_entries
                .entry(service_key(app, &p.ms_id))
                .or_default()
                .insert(SubsetLabel::new(cluster, &p.node_name));
            created.push(key);
        }
        for ms in &info.additional_m_for_s_level {
            table.service_entries.entry(service_key(app, ms)).or_default();
        }
        for u in &info.lb_updates {
            let key = service_key(app, &u.ms_id);
            let policies: Vec<SubsetPolicy> = u
                .subsets
                .iter()
                .map(|s| {
                    let (region, zone) = match fabric.cluster(&s.cluster) {
                        Ok(c) => (c.region.clone(), c.zone.clone()),
                        Err(_) => (region.clone(), zone.clone()),
                    };
                    SubsetPolicy {
                        cluster: s.cluster.clone(),
                        node: s.node.clone(),
                        weight: s.weight,
                        region,
                        zone,
                    }
                })
                .collect();
            table
                .service_entries
                .entry(key.clone())
                .or_default()
                .extend(policies.iter().map(SubsetPolicy::label));
            table.route_rules.insert(
                key.clone(),
                vec![RouteRule {
                    matcher: HeaderMatch::Any,
                    destination: Destination::Weighted(u.subsets.clone()),
                }],
            );
            table.subset_policies.insert(key, policies);
        }
        if info.entry_cluster {
            let gw = table.gateways.entry(app.clone()).or_default();
            for m in &info.gateway_microservices {
                if !gw.contains(m) {
                    gw.push(m.clone());
                }
            }
        }
        table.applied.push(info.clone());
        Ok(AppliedRecord {
            cluster: cluster.to_string(),
            instances: created,
            noop: false,
        })
    }

    fn reachable(&self, from: &str, to: &str, key: &str) -> bool {
        let Some(t) = self.tables.get(from) else { return false };
        if from == to || t.east_west_links.contains(to) {
            return true;
        }
        t.east_west_links.iter().any(|relay| {
            self.tables.get(relay).is_some_and(|r| {
                r.east_west_links.contains(to) && r.service_entries.contains_key(key)
            })
        })
    }

    /// Next instance of `target_ms` for `caller`, by smooth WRR over the
    /// healthy, reachable subsets known to the caller's cluster.
    pub fn resolve_next(&mut self, caller: &Caller, app: &str, target_ms: &str) -> Result<SubsetLabel, RoutingError> {
        let cluster = caller.cluster();
        let key = service_key(app, target_ms);
        let table = self
            .tables
            .get(cluster)
            .ok_or_else(|| RoutingError::UnknownCluster(cluster.to_string()))?;
        let unresolvable = || RoutingError::Unresolvable {
            cluster: cluster.to_string(),
            service: key.clone(),
        };
        if !table.can_resolve(&key) {
            return Err(unresolvable());
        }
        let weighted = table.route_rules[&key]
            .iter()
            .find_map(|r| match (&r.matcher, &r.destination) {
                (HeaderMatch::Any, Destination::Weighted(w)) => Some(w),
                _ => None,
            })
            .ok_or_else(unresolvable)?;
        let entries = &table.service_entries[&key];
        let mut items = Vec::new();
        let mut any_reachable = false;
        for s in weighted {
            let label = SubsetLabel::new(&s.cluster, &s.node);
            if !entries.contains(&label) || !self.reachable(cluster, &s.cluster, &key) {
                continue;
            }
            any_reachable = true;
            let healthy = self
                .tables
                .get(&s.cluster)
                .and_then(|t| t.instances.get(&instance_key(app, target_ms, &s.node)))
                .is_some_and(|i| i.healthy);
            if healthy {
                items.push((label, s.weight));
            }
        }
        if !any_reachable {
            return Err(unresolvable());
        }
        self.wrr
            .entry((caller.key(), key.clone()))
            .or_default()
            .next(&items)
            .ok_or(RoutingError::AllReplicasDown(key))
    }

    /// Serving cluster for `ms` as seen from `from_cluster`, using instance
    /// health: a cluster counts as healthy while it has a healthy instance.
    pub fn failover_select(&self, fabric: &Fabric, app: &str, ms: &str, from_cluster: &str) -> Result<String, RoutingError> {
        let mut policy = FailoverPolicy::default();
        let mut clusters = Vec::new();
        for i in self.instances_of(app, ms) {
            if !clusters.contains(&i.cluster) {
                clusters.push(i.cluster.clone());
                policy.set_health(&i.cluster, false);
            }
            if i.healthy {
                policy.set_health(&i.cluster, true);
            }
        }
        policy.select(fabric, &service_key(app, ms), from_cluster, &clusters)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::TopologyConfig;
    use crate::placement::InstanceStatus;
    use proptest::prelude::*;

    fn fabric() -> Fabric {
        TopologyConfig::testbed().build().unwrap()
    }

    fn plan(cluster: &str, node: &str, ms: &str, cpu: f64) -> InstancePlan {
        InstancePlan {
            pr_id: "pr1".into(),
            application_id: "app".into(),
            ms_id: ms.into(),
            cluster: cluster.into(),
            node_name: node.into(),
            cpu,
            mem: 1 << 28,
            replica_index: 0,
            status: InstanceStatus::Planned,
        }
    }

    fn lb(ms: &str, subsets: &[(&str, &str, u32)]) -> LbUpdate {
        LbUpdate {
            ms_id: ms.into(),
            subsets: subsets
                .iter()
                .map(|(c, n, w)| SubsetWeight {
                    cluster: (*c).into(),
                    node: (*n).into(),
                    weight: *w,
                })
                .collect(),
        }
    }

    #[test]
    fn wrr_121_schedule() {
        let mut w = SmoothWrr::new();
        let items = [("a", 1), ("b", 2), ("c", 1)];
        let seq: Vec<_> = (0..8).map(|_| w.next(&items).unwrap()).collect();
        assert_eq!(seq, ["b", "a", "c", "b", "b", "a", "c", "b"]);
    }

    #[test]
    fn wrr_single_and_empty() {
        let mut w = SmoothWrr::new();
        for _ in 0..5 {
            assert_eq!(w.next(&[("x", 3)]), Some("x"));
        }
        assert_eq!(w.next(&[("x", 0)]), None);
        assert_eq!(SmoothWrr::<&str>::new().next(&[]), None);
    }

    fn deploy_a2m2(mesh: &mut Mesh, f: &mut Fabric) {
        let mut fog1 = DeploymentInfo::new("pr1", "app", "fog1");
        fog1.instance_plans = vec![plan("fog1", "fog1-worker3", "m2", 0.5), plan("fog1", "fog1-worker2", "m1", 1.0)];
        fog1.entry_cluster = true;
        fog1.gateway_microservices = vec!["m1".into()];
        let subsets = lb("m2", &[("fog1", "fog1-worker3", 1), ("fog2", "fog2-worker1", 2), ("fog2", "fog2-worker2", 1)]);
        fog1.lb_updates = vec![subsets.clone(), lb("m1", &[("fog1", "fog1-worker2", 1)])];
        let mut fog2 = DeploymentInfo::new("pr1", "app", "fog2");
        fog2.instance_plans = vec![plan("fog2", "fog2-worker1", "m2", 1.0), plan("fog2", "fog2-worker2", "m2", 0.5)];
        fog2.lb_updates = vec![subsets];
        mesh.apply_deployment(f, "fog1", &fog1).unwrap();
        mesh.apply_deployment(f, "fog2", &fog2).unwrap();
    }

    #[test]
    fn apply_then_resolve_split() {
        let mut f = fabric();
        let mut mesh = Mesh::new(&f);
        deploy_a2m2(&mut mesh, &mut f);
        assert_eq!(f.node("fog2", "fog2-worker1").unwrap().allocated_cpu, 1.0);
        let caller = Caller::Instance {
            cluster: "fog1".into(),
            node: "fog1-worker2".into(),
            app: "app".into(),
            ms: "m1".into(),
        };
        let mut counts: BTreeMap<SubsetLabel, u32> = BTreeMap::new();
        for _ in 0..400 {
            *counts.entry(mesh.resolve_next(&caller, "app", "m2").unwrap()).or_default() += 1;
        }
        assert_eq!(counts.values().copied().collect::<Vec<_>>(), vec![100, 200, 100]);
        let gw = Caller::Gateway {
            cluster: "fog1".into(),
            app: "app".into(),
        };
        assert_eq!(mesh.resolve_next(&gw, "app", "m1").unwrap(), SubsetLabel::new("fog1", "fog1-worker2"));
        assert_eq!(mesh.table("fog1").unwrap().gateways["app"], vec!["m1"]);
    }

    #[test]
    fn reapply_is_noop() {
        let mut f = fabric();
        let mut mesh = Mesh::new(&f);
        let mut info = DeploymentInfo::new("pr1", "app", "fog1");
        info.instance_plans = vec![plan("fog1", "fog1-worker1", "m1", 1.0)];
        assert!(!mesh.apply_deployment(&mut f, "fog1", &info).unwrap().noop);
        let dump = mesh.dump();
        let cpu = f.node("fog1", "fog1-worker1").unwrap().allocated_cpu;
        assert!(mesh.apply_deployment(&mut f, "fog1", &info).unwrap().noop);
        assert_eq!(mesh.dump(), dump);
        assert_eq!(f.node("fog1", "fog1-worker1").unwrap().allocated_cpu, cpu);
    }

    #[test]
    fn missing_node_or_full_node_rejected_atomically() {
        let mut f = fabric();
        let mut mesh = Mesh::new(&f);
        let mut info = DeploymentInfo::new("pr1", "app", "fog1");
        info.instance_plans = vec![plan("fog1", "fog1-worker1", "m1", 1.0), plan("fog1", "fog1-worker9", "m2", 1.0)];
        assert!(matches!(
            mesh.apply_deployment(&mut f, "fog1", &info),
            Err(RoutingError::Rejected(FabricError::UnknownNode { .. }))
        ));
        assert_eq!(f.node("fog1", "fog1-worker1").unwrap().allocated_cpu, 0.0);
        info.instance_plans = vec![plan("fog1", "fog1-worker1", "m1", 5.0)];
        assert!(matches!(
            mesh.apply_deployment(&mut f, "fog1", &info),
            Err(RoutingError::Rejected(FabricError::InsufficientResources { .. }))
        ));
        assert!(mesh.table("fog1").unwrap().instances.is_empty());
        let other = DeploymentInfo::new("pr1", "app", "fog2");
        assert!(matches!(
            mesh.apply_deployment(&mut f, "fog1", &other),
            Err(RoutingError::WrongTarget { .. })
        ));
    }

    #[test]
    fn unresolvable_without_service_level_records() {
        let mut f = fabric();
        let mut mesh = Mesh::new(&f);
        deploy_a2m2(&mut mesh, &mut f);
        let caller = Caller::Instance {
            cluster: "fog3".into(),
            node: "fog3-server".into(),
            app: "app".into(),
            ms: "m1".into(),
        };
        assert!(matches!(
            mesh.resolve_next(&caller, "app", "m2"),
            Err(RoutingError::Unresolvable { .. })
        ));
    }

    #[test]
    fn non_adjacent_needs_relay_records() {
        let mut f = fabric();
        let mut mesh = Mesh::new(&f);
        let mut fog3 = DeploymentInfo::new("pr1", "app", "fog3");
        fog3.instance_plans = vec![plan("fog3", "fog3-server", "m2", 0.5)];
        let update = lb("m2", &[("fog3", "fog3-server", 1)]);
        fog3.lb_updates = vec![update.clone()];
        mesh.apply_deployment(&mut f, "fog3", &fog3).unwrap();
        let mut fog1 = DeploymentInfo::new("pr1", "app", "fog1");
        fog1.lb_updates = vec![update.clone()];
        mesh.apply_deployment(&mut f, "fog1", &fog1).unwrap();
        let caller = Caller::Gateway {
            cluster: "fog1".into(),
            app: "app".into(),
        };
        assert!(matches!(
            mesh.resolve_next(&caller, "app", "m2"),
            Err(RoutingError::Unresolvable { .. })
        ));
        let mut fog2 = DeploymentInfo::new("pr1", "app", "fog2");
        fog2.additional_m_for_s_level = vec!["m2".into()];
        fog2.lb_updates = vec![update];
        mesh.apply_deployment(&mut f, "fog2", &fog2).unwrap();
        assert_eq!(mesh.resolve_next(&caller, "app", "m2").unwrap().cluster, "fog3");
    }

    #[test]
    fn header_routing() {
        let mesh = Mesh::new(&fabric());
        let t = mesh.table("fog1").unwrap();
        let h = |v: &str| BTreeMap::from([(CLUSTER_HEADER.to_string(), v.to_string())]);
        assert_eq!(t.route_by_header(&h("fog2")).unwrap(), "fog2");
        assert_eq!(t.route_by_header(&BTreeMap::new()).unwrap(), "fog1");
        assert_eq!(t.route_by_header(&h("fog9")), Err(RoutingError::NoSubsetMatch("fog9".into())));
    }

    #[test]
    fn failover_tiers() {
        let f = fabric();
        let all: Vec<String> = ["fog1", "fog2", "fog3", "cloud1"].iter().map(|s| s.to_string()).collect();
        let mut p = FailoverPolicy::default();
        assert_eq!(p.select(&f, "store", "fog1", &all).unwrap(), "fog1");
        p.set_health("fog1", false);
        assert_eq!(p.select(&f, "store", "fog1", &all).unwrap(), "fog2");
        p.set_health("fog2", false);
        // fog3 is still in the fog region
        assert_eq!(p.select(&f, "store", "fog1", &all).unwrap(), "fog3");
        p.set_health("fog3", false);
        assert_eq!(p.select(&f, "store", "fog1", &all).unwrap(), "cloud1");
        p.set_health("cloud1", false);
        assert!(matches!(p.select(&f, "store", "fog1", &all), Err(RoutingError::AllReplicasDown(_))));
    }

    #[test]
    fn instance_failover_via_mesh() {
        let mut f = fabric();
        let mut mesh = Mesh::new(&f);
        deploy_a2m2(&mut mesh, &mut f);
        assert_eq!(mesh.failover_select(&f, "app", "m2", "fog1").unwrap(), "fog1");
        mesh.set_instance_health("app", "m2", &SubsetLabel::new("fog1", "fog1-worker3"), false);
        assert_eq!(mesh.failover_select(&f, "app", "m2", "fog1").unwrap(), "fog2");
    }

    #[test]
    fn unhealthy_subsets_skipped() {
        let mut f = fabric();
        let mut mesh = Mesh::new(&f);
        deploy_a2m2(&mut mesh, &mut f);
        let caller = Caller::Gateway {
            cluster: "fog1".into(),
            app: "app".into(),
        };
        let down = SubsetLabel::new("fog2", "fog2-worker1");
        mesh.set_instance_health("app", "m2", &down, false);
        for _ in 0..20 {
            assert_ne!(mesh.resolve_next(&caller, "app", "m2").unwrap(), down);
        }
        for l in [SubsetLabel::new("fog1", "fog1-worker3"), SubsetLabel::new("fog2", "fog2-worker2")] {
            mesh.set_instance_health("app", "m2", &l, false);
        }
        assert!(matches!(
            mesh.resolve_next(&caller, "app", "m2"),
            Err(RoutingError::AllReplicasDown(_))
        ));
    }

    #[test]
    fn deployment_info_wire_names() {
        let mut info = DeploymentInfo::new("pr1", "app", "fog1");
        info.additional_m_for_s_level = vec!["m3".into()];
        let v = serde_json::to_value(&info).unwrap();
        for k in ["prId", "applicationId", "targetCluster", "instancePlans", "entryCluster", "lbUpdates", "additionalMForSLevel"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }

    proptest! {
        #[test]
        fn wrr_period_counts_match_weights(weights in proptest::collection::vec(1u32..=10, 1..=5)) {
            let items: Vec<(usize, u32)> = weights.iter().copied().enumerate().collect();
            let total: u32 = weights.iter().sum();
            let mut w = SmoothWrr::new();
            let mut counts = vec![0u32; weights.len()];
            for _ in 0..total {
                counts[w.next(&items).unwrap()] += 1;
            }
            prop_assert_eq!(counts, weights);
        }
    }
}
