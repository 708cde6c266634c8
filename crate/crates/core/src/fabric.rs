//! Simulated federated infrastructure: clusters, nodes, capacities and the
//! inter-cluster latency matrix, plus resource accounting.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for fractional-core comparisons.
pub const CPU_EPS: f64 = 1e-9;

pub const GIB: u64 = 1 << 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FabricError {
    #[error("insufficient resources on {node}: requested {cpu} cores / {mem} bytes, free {free_cpu} cores / {free_mem} bytes")]
    InsufficientResources {
        node: String,
        cpu: f64,
        mem: u64,
        free_cpu: f64,
        free_mem: u64,
    },
    #[error("allocation request must be positive")]
    InvalidRequest,
    #[error("unknown cluster `{0}`")]
    UnknownCluster(String),
    #[error("unknown node `{node}` in cluster `{cluster}`")]
    UnknownNode { cluster: String, node: String },
    #[error("ticket {0} does not belong to this node or was already released")]
    UnknownTicket(u64),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Fog,
    Cloud,
}

impl Tier {
    pub fn region(self) -> &'static str {
        match self {
            Tier::Fog => "fog",
            Tier::Cloud => "cloud",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NodeState {
    pub node_name: String,
    pub cluster: String,
    pub capacity_cpu: f64,
    pub capacity_mem: u64,
    pub allocated_cpu: f64,
    pub allocated_mem: u64,
    pub usage_cpu: f64,
    pub usage_mem: u64,
    #[serde(skip)]
    reserved: (f64, u64),
    #[serde(skip)]
    live: BTreeMap<u64, (f64, u64)>,
    #[serde(skip)]
    next_ticket: u64,
}

/// Receipt for a reservation; hand it back to `release`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AllocationTicket {
    pub id: u64,
    pub cluster: String,
    pub node_name: String,
    pub cpu: f64,
    pub mem: u64,
}

impl NodeState {
    pub fn new(cluster: impl Into<String>, node_name: impl Into<String>, cpu: f64, mem: u64) -> Self {
        Self {
            node_name: node_name.into(),
            cluster: cluster.into(),
            capacity_cpu: cpu,
            capacity_mem: mem,
            allocated_cpu: 0.0,
            allocated_mem: 0,
            usage_cpu: 0.0,
            usage_mem: 0,
            reserved: (0.0, 0),
            live: BTreeMap::new(),
            next_ticket: 0,
        }
    }

    pub fn free_cpu(&self) -> f64 {
        (self.capacity_cpu - self.allocated_cpu).max(0.0)
    }

    pub fn free_mem(&self) -> u64 {
        self.capacity_mem.saturating_sub(self.allocated_mem)
    }

    pub fn fits(&self, cpu: f64, mem: u64) -> bool {
        self.allocated_cpu + cpu <= self.capacity_cpu + CPU_EPS
            && self.allocated_mem.saturating_add(mem) <= self.capacity_mem
    }

    pub fn allocate(&mut self, cpu: f64, mem: u64) -> Result<AllocationTicket, FabricError> {
        if !(cpu.is_finite() && cpu > 0.0) || mem == 0 {
            return Err(FabricError::InvalidRequest);
        }
        if !self.fits(cpu, mem) {
            return Err(FabricError::InsufficientResources {
                node: self.node_name.clone(),
                cpu,
                mem,
                free_cpu: self.free_cpu(),
                free_mem: self.free_mem(),
            });
        }
        let id = self.next_ticket;
        self.next_ticket += 1;
        self.live.insert(id, (cpu, mem));
        self.recompute();
        Ok(AllocationTicket {
            id,
            cluster: self.cluster.clone(),
            node_name: self.node_name.clone(),
            cpu,
            mem,
        })
    }

    pub fn release(&mut self, ticket: &AllocationTicket) -> Result<(), FabricError> {
        if ticket.node_name != self.node_name || ticket.cluster != self.cluster {
            return Err(FabricError::UnknownTicket(ticket.id));
        }
        self.live
            .remove(&ticket.id)
            .ok_or(FabricError::UnknownTicket(ticket.id))?;
        self.recompute();
        Ok(())
    }

    /// Capacity held outside the ticket system (system pods and the like).
    pub fn reserve(&mut self, cpu: f64, mem: u64) {
        self.reserved = (cpu, mem);
        self.recompute();
    }

    // Summed from scratch so repeated add/release never drifts.
    fn recompute(&mut self) {
        self.allocated_cpu = self.reserved.0 + self.live.values().map(|(c, _)| c).sum::<f64>();
        self.allocated_mem = self.reserved.1 + self.live.values().map(|(_, m)| m).sum::<u64>();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Cluster {
    pub name: String,
    pub tier: Tier,
    pub region: String,
    pub zone: String,
    pub nodes: Vec<NodeState>,
    pub adjacent_fog: Vec<String>,
    pub adjacent_cloud: Vec<String>,
    pub deployment_delay_ms: f64,
}

impl Cluster {
    pub fn node(&self, name: &str) -> Option<&NodeState> {
        self.nodes.iter().find(|n| n.node_name == name)
    }

    pub fn node_mut(&mut self, name: &str) -> Option<&mut NodeState> {
        self.nodes.iter_mut().find(|n| n.node_name == name)
    }

    pub fn free_cpu(&self) -> f64 {
        self.nodes.iter().map(NodeState::free_cpu).sum()
    }
}

/// Per-node entry of the cluster-data document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NodeData {
    pub node_name: String,
    pub total_cpu: f64,
    /// Bytes.
    pub total_memory: u64,
    pub usage_cpu: f64,
    pub usage_memory: u64,
    pub allocated_cpu: f64,
    pub allocated_memory: u64,
}

impl NodeData {
    pub fn free_cpu(&self) -> f64 {
        (self.total_cpu - self.allocated_cpu).max(0.0)
    }

    pub fn free_memory(&self) -> u64 {
        self.total_memory.saturating_sub(self.allocated_memory)
    }

    pub fn fits(&self, cpu: f64, mem: u64) -> bool {
        self.allocated_cpu + cpu <= self.total_cpu + CPU_EPS
            && self.allocated_memory.saturating_add(mem) <= self.total_memory
    }
}

/// Resource availability of one cluster plus its adjacency, as served by the
/// cluster-data endpoint and consumed by placement algorithms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClusterData {
    pub cluster: String,
    pub tier: Tier,
    pub region: String,
    pub zone: String,
    pub nodes: Vec<NodeData>,
    pub adjacent_fog_clusters: Vec<String>,
    pub adjacent_cloud_clusters: Vec<String>,
}

impl ClusterData {
    pub fn node(&self, name: &str) -> Option<&NodeData> {
        self.nodes.iter().find(|n| n.node_name == name)
    }

    pub fn node_mut(&mut self, name: &str) -> Option<&mut NodeData> {
        self.nodes.iter_mut().find(|n| n.node_name == name)
    }

    pub fn has_free_capacity(&self) -> bool {
        self.nodes
            .iter()
            .any(|n| n.free_cpu() > CPU_EPS && n.free_memory() > 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fabric {
    clusters: BTreeMap<String, Cluster>,
    latency_ms: BTreeMap<(String, String), f64>,
    ingress_latency_ms: BTreeMap<String, f64>,
}

impl Fabric {
    pub fn cluster(&self, name: &str) -> Result<&Cluster, FabricError> {
        self.clusters
            .get(name)
            .ok_or_else(|| FabricError::UnknownCluster(name.to_string()))
    }

    pub fn cluster_mut(&mut self, name: &str) -> Result<&mut Cluster, FabricError> {
        self.clusters
            .get_mut(name)
            .ok_or_else(|| FabricError::UnknownCluster(name.to_string()))
    }

    pub fn clusters(&self) -> impl Iterator<Item = &Cluster> {
        self.clusters.values()
    }

    pub fn cluster_names(&self) -> Vec<String> {
        self.clusters.keys().cloned().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.clusters.contains_key(name)
    }

    pub fn node(&self, cluster: &str, node: &str) -> Result<&NodeState, FabricError> {
        self.cluster(cluster)?
            .node(node)
            .ok_or_else(|| FabricError::UnknownNode {
                cluster: cluster.to_string(),
                node: node.to_string(),
            })
    }

    pub fn node_mut(&mut self, cluster: &str, node: &str) -> Result<&mut NodeState, FabricError> {
        self.cluster_mut(cluster)?
            .node_mut(node)
            .ok_or_else(|| FabricError::UnknownNode {
                cluster: cluster.to_string(),
                node: node.to_string(),
            })
    }

    pub fn allocate(
        &mut self,
        cluster: &str,
        node: &str,
        cpu: f64,
        mem: u64,
    ) -> Result<AllocationTicket, FabricError> {
        self.node_mut(cluster, node)?.allocate(cpu, mem)
    }

    pub fn release(&mut self, ticket: &AllocationTicket) -> Result<(), FabricError> {
        self.node_mut(&ticket.cluster, &ticket.node_name)?.release(ticket)
    }

    pub fn set_usage(&mut self, cluster: &str, node: &str, cpu: f64, mem: u64) -> Result<(), FabricError> {
        let n = self.node_mut(cluster, node)?;
        n.usage_cpu = cpu.clamp(0.0, n.capacity_cpu);
        n.usage_mem = mem.min(n.capacity_mem);
        Ok(())
    }

    pub fn cluster_snapshot(&self, cluster: &str) -> Result<ClusterData, FabricError> {
        let c = self.cluster(cluster)?;
        Ok(ClusterData {
            cluster: c.name.clone(),
            tier: c.tier,
            region: c.region.clone(),
            zone: c.zone.clone(),
            nodes: c
                .nodes
                .iter()
                .map(|n| NodeData {
                    node_name: n.node_name.clone(),
                    total_cpu: n.capacity_cpu,
                    total_memory: n.capacity_mem,
                    usage_cpu: n.usage_cpu,
                    usage_memory: n.usage_mem,
                    allocated_cpu: n.allocated_cpu,
                    allocated_memory: n.allocated_mem,
                })
                .collect(),
            adjacent_fog_clusters: c.adjacent_fog.clone(),
            adjacent_cloud_clusters: c.adjacent_cloud.clone(),
        })
    }

    pub fn path_latency(&self, a: &str, b: &str) -> Result<f64, FabricError> {
        self.cluster(a)?;
        self.cluster(b)?;
        Ok(self.latency_ms[&(a.to_string(), b.to_string())])
    }

    pub fn ingress_latency(&self, cluster: &str) -> Result<f64, FabricError> {
        self.cluster(cluster)?;
        Ok(self.ingress_latency_ms.get(cluster).copied().unwrap_or(0.0))
    }

    pub fn set_latency(&mut self, a: &str, b: &str, ms: f64) -> Result<(), FabricError> {
        self.cluster(a)?;
        self.cluster(b)?;
        self.latency_ms.insert((a.to_string(), b.to_string()), ms);
        self.latency_ms.insert((b.to_string(), a.to_string()), ms);
        self.check()
    }

    /// Latency settings in effect, for reporting alongside results.
    pub fn latency_report(&self) -> BTreeMap<String, f64> {
        self.latency_ms
            .iter()
            .filter(|((a, b), _)| a <= b)
            .map(|((a, b), v)| (format!("{a}<->{b}"), *v))
            .chain(
                self.ingress_latency_ms
                    .iter()
                    .map(|(c, v)| (format!("ingress:{c}"), *v)),
            )
            .collect()
    }

    /// Shortest adjacency walk between two clusters, fog hops preferred.
    /// Returns the clusters strictly between `from` and `to`.
    pub fn intermediate_clusters(&self, from: &str, to: &str) -> Vec<String> {
        if from == to {
            return Vec::new();
        }
        let mut prev: BTreeMap<String, String> = BTreeMap::new();
        let mut seen = BTreeSet::from([from.to_string()]);
        let mut frontier = std::collections::VecDeque::from([from.to_string()]);
        while let Some(at) = frontier.pop_front() {
            if at == to {
                break;
            }
            let Ok(c) = self.cluster(&at) else { continue };
            for n in c.adjacent_fog.iter().chain(c.adjacent_cloud.iter()) {
                if seen.insert(n.clone()) {
                    prev.insert(n.clone(), at.clone());
                    frontier.push_back(n.clone());
                }
            }
        }
        let mut path = Vec::new();
        let mut at = to.to_string();
        while let Some(p) = prev.get(&at) {
            if p == from {
                break;
            }
            path.push(p.clone());
            at = p.clone();
        }
        path.reverse();
        path
    }

    fn check(&self) -> Result<(), FabricError> {
        let mut zones = BTreeSet::new();
        for c in self.clusters.values() {
            if c.region != c.tier.region() {
                return Err(FabricError::InvalidTopology(format!(
                    "cluster {} of tier {:?} must be in region {}",
                    c.name,
                    c.tier,
                    c.tier.region()
                )));
            }
            if !zones.insert(c.zone.clone()) {
                return Err(FabricError::InvalidTopology(format!("zone {} reused", c.zone)));
            }
            for adj in c.adjacent_fog.iter().chain(&c.adjacent_cloud) {
                if !self.clusters.contains_key(adj) {
                    return Err(FabricError::InvalidTopology(format!(
                        "cluster {} lists unknown neighbour {adj}",
                        c.name
                    )));
                }
            }
            for adj in &c.adjacent_fog {
                if self.clusters[adj].tier != Tier::Fog {
                    return Err(FabricError::InvalidTopology(format!("{adj} is not a fog cluster")));
                }
            }
            for adj in &c.adjacent_cloud {
                if self.clusters[adj].tier != Tier::Cloud {
                    return Err(FabricError::InvalidTopology(format!("{adj} is not a cloud cluster")));
                }
            }
        }
        for a in self.clusters.keys() {
            let diag = self.latency_ms.get(&(a.clone(), a.clone())).copied().ok_or_else(|| {
                FabricError::InvalidTopology(format!("missing intra-cluster latency for {a}"))
            })?;
            for b in self.clusters.keys() {
                let ab = self.latency_ms.get(&(a.clone(), b.clone())).copied();
                let ba = self.latency_ms.get(&(b.clone(), a.clone())).copied();
                match (ab, ba) {
                    (Some(x), Some(y)) if x == y && x >= 0.0 && x.is_finite() => {
                        if a != b && x < diag {
                            return Err(FabricError::InvalidTopology(format!(
                                "latency {a}<->{b} below intra-cluster latency of {a}"
                            )));
                        }
                    }
                    _ => {
                        return Err(FabricError::InvalidTopology(format!(
                            "latency {a}<->{b} missing, negative or asymmetric"
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Configuration document

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NodeConfig {
    pub name: String,
    pub cpu: f64,
    /// Bytes.
    pub memory: u64,
    /// Capacity already taken by system workloads before any placement.
    #[serde(default)]
    pub reserved_cpu: f64,
    #[serde(default)]
    pub reserved_memory: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClusterConfig {
    pub name: String,
    pub tier: Tier,
    pub region: String,
    pub zone: String,
    #[serde(default)]
    pub nodes: Vec<NodeConfig>,
    #[serde(default)]
    pub adjacent_fog: Vec<String>,
    #[serde(default)]
    pub adjacent_cloud: Vec<String>,
    #[serde(default)]
    pub deployment_delay_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LatencyDefaults {
    pub intra: f64,
    pub fog_fog: f64,
    pub fog_cloud: f64,
    pub cloud_cloud: f64,
    pub ingress: f64,
}

impl Default for LatencyDefaults {
    fn default() -> Self {
        Self {
            intra: 1.0,
            fog_fog: 5.0,
            fog_cloud: 50.0,
            cloud_cloud: 50.0,
            ingress: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TopologyConfig {
    pub clusters: Vec<ClusterConfig>,
    #[serde(default)]
    pub default_latency_ms: LatencyDefaults,
    /// Sparse overrides; each entry applies symmetrically.
    #[serde(default)]
    pub latency_ms: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub ingress_latency_ms: BTreeMap<String, f64>,
}

impl TopologyConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn build(&self) -> Result<Fabric, FabricError> {
        let mut clusters = BTreeMap::new();
        for c in &self.clusters {
            let nodes = c
                .nodes
                .iter()
                .map(|n| {
                    let mut st = NodeState::new(&c.name, &n.name, n.cpu, n.memory);
                    if n.reserved_cpu > n.cpu || n.reserved_memory > n.memory {
                        return Err(FabricError::InvalidTopology(format!(
                            "node {} reserves more than its capacity",
                            n.name
                        )));
                    }
                    st.reserve(n.reserved_cpu, n.reserved_memory);
                    Ok(st)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let cluster = Cluster {
                name: c.name.clone(),
                tier: c.tier,
                region: c.region.clone(),
                zone: c.zone.clone(),
                nodes,
                adjacent_fog: c.adjacent_fog.clone(),
                adjacent_cloud: c.adjacent_cloud.clone(),
                deployment_delay_ms: c.deployment_delay_ms,
            };
            if clusters.insert(c.name.clone(), cluster).is_some() {
                return Err(FabricError::InvalidTopology(format!("duplicate cluster {}", c.name)));
            }
        }

        let d = self.default_latency_ms;
        let mut latency = BTreeMap::new();
        for a in clusters.values() {
            for b in clusters.values() {
                let v = if a.name == b.name {
                    d.intra
                } else {
                    match (a.tier, b.tier) {
                        (Tier::Fog, Tier::Fog) => d.fog_fog,
                        (Tier::Cloud, Tier::Cloud) => d.cloud_cloud,
                        _ => d.fog_cloud,
                    }
                };
                latency.insert((a.name.clone(), b.name.clone()), v);
            }
        }
        for (a, row) in &self.latency_ms {
            for (b, v) in row {
                if !clusters.contains_key(a) || !clusters.contains_key(b) {
                    return Err(FabricError::InvalidTopology(format!(
                        "latency entry {a}<->{b} names an unknown cluster"
                    )));
                }
                latency.insert((a.clone(), b.clone()), *v);
                latency.insert((b.clone(), a.clone()), *v);
            }
        }
        let ingress = clusters
            .keys()
            .map(|c| {
                (
                    c.clone(),
                    self.ingress_latency_ms.get(c).copied().unwrap_or(d.ingress),
                )
            })
            .collect();

        let fabric = Fabric {
            clusters,
            latency_ms: latency,
            ingress_latency_ms: ingress,
        };
        fabric.check()?;
        Ok(fabric)
    }

    /// Three fog clusters and one cloud cluster with the node capacities of
    /// the reference testbed. fog1 and fog3 each neighbour fog2; every fog
    /// cluster reaches cloud1.
    pub fn testbed() -> Self {
        fn node(name: &str, cpu: f64, gib: u64) -> NodeConfig {
            NodeConfig {
                name: name.into(),
                cpu,
                memory: gib * GIB,
                reserved_cpu: 0.0,
                reserved_memory: 0,
            }
        }
        fn fog(name: &str, nodes: Vec<NodeConfig>, fog: &[&str], delay: f64) -> ClusterConfig {
            ClusterConfig {
                name: name.into(),
                tier: Tier::Fog,
                region: "fog".into(),
                zone: name.into(),
                nodes,
                adjacent_fog: fog.iter().map(|s| s.to_string()).collect(),
                adjacent_cloud: vec!["cloud1".into()],
                deployment_delay_ms: delay,
            }
        }
        TopologyConfig {
            clusters: vec![
                fog(
                    "fog1",
                    vec![
                        node("fog1-control-node", 3.0, 6),
                        node("fog1-worker1", 4.0, 9),
                        node("fog1-worker2", 5.0, 16),
                        node("fog1-worker3", 3.0, 8),
                    ],
                    &["fog2"],
                    400.0,
                ),
                fog(
                    "fog2",
                    vec![
                        node("fog2-control-node", 3.0, 6),
                        node("fog2-worker1", 3.0, 9),
                        node("fog2-worker2", 2.0, 6),
                        node("fog2-worker3", 4.0, 12),
                        node("fog2-worker4", 4.0, 8),
                    ],
                    &["fog1", "fog3"],
                    400.0,
                ),
                fog(
                    "fog3",
                    vec![
                        node("fog3-server", 3.0, 6),
                        node("fog3-agent0", 2.0, 4),
                        node("fog3-agent1", 2.0, 4),
                    ],
                    &["fog2"],
                    250.0,
                ),
                ClusterConfig {
                    name: "cloud1".into(),
                    tier: Tier::Cloud,
                    region: "cloud".into(),
                    zone: "cloud1".into(),
                    nodes: vec![
                        node("cloud1-control-node", 8.0, 14),
                        node("cloud1-worker1", 8.0, 14),
                    ],
                    adjacent_fog: vec!["fog1".into(), "fog2".into(), "fog3".into()],
                    adjacent_cloud: vec![],
                    deployment_delay_ms: 400.0,
                },
            ],
            default_latency_ms: LatencyDefaults::default(),
            latency_ms: BTreeMap::new(),
            ingress_latency_ms: BTreeMap::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn testbed() -> Fabric {
        TopologyConfig::testbed().build().unwrap()
    }

    #[test]
    fn allocate_within_capacity() {
        let mut n = NodeState::new("c", "n", 4.0, 8 * GIB);
        n.allocate(3.0, GIB).unwrap();
        assert_eq!(n.allocated_cpu, 3.0);
    }

    #[test]
    fn allocate_over_capacity_fails() {
        let mut n = NodeState::new("c", "n", 4.0, 8 * GIB);
        n.allocate(3.0, GIB).unwrap();
        assert!(matches!(
            n.allocate(2.0, GIB),
            Err(FabricError::InsufficientResources { .. })
        ));
        assert_eq!(n.allocated_cpu, 3.0);
    }

    #[test]
    fn fog1_worker1_fills_exactly() {
        let mut f = testbed();
        f.allocate("fog1", "fog1-worker1", 4.0, GIB).unwrap();
        let n = f.node("fog1", "fog1-worker1").unwrap();
        assert_eq!(n.free_cpu(), 0.0);
        assert_eq!(n.capacity_mem, 9 * GIB);
    }

    #[test]
    fn non_positive_request_rejected() {
        let mut n = NodeState::new("c", "n", 4.0, GIB);
        assert_eq!(n.allocate(0.0, 1), Err(FabricError::InvalidRequest));
        assert_eq!(n.allocate(1.0, 0), Err(FabricError::InvalidRequest));
    }

    #[test]
    fn snapshot_reports_nodes_and_adjacency() {
        let mut f = testbed();
        let snap = f.cluster_snapshot("fog1").unwrap();
        assert_eq!(snap.nodes.len(), 4);
        assert_eq!(snap.adjacent_fog_clusters, vec!["fog2"]);
        assert_eq!(snap.adjacent_cloud_clusters, vec!["cloud1"]);
        assert_eq!(snap, f.cluster_snapshot("fog1").unwrap());

        f.allocate("fog1", "fog1-worker2", 3.0, GIB).unwrap();
        let after = f.cluster_snapshot("fog1").unwrap();
        assert_eq!(after.node("fog1-worker2").unwrap().allocated_cpu, 3.0);
        assert!(matches!(
            f.cluster_snapshot("fog9"),
            Err(FabricError::UnknownCluster(_))
        ));
    }

    #[test]
    fn empty_cluster_snapshot() {
        let mut cfg = TopologyConfig::testbed();
        cfg.clusters[2].nodes.clear();
        let f = cfg.build().unwrap();
        let snap = f.cluster_snapshot("fog3").unwrap();
        assert!(snap.nodes.is_empty());
        assert_eq!(snap.adjacent_fog_clusters, vec!["fog2"]);
    }

    #[test]
    fn latency_defaults_and_symmetry() {
        let f = testbed();
        assert_eq!(f.path_latency("fog1", "fog1").unwrap(), 1.0);
        assert_eq!(f.path_latency("fog1", "cloud1").unwrap(), 50.0);
        assert_eq!(
            f.path_latency("fog2", "fog1").unwrap(),
            f.path_latency("fog1", "fog2").unwrap()
        );
        assert!(f.path_latency("fog1", "mars").is_err());
    }

    #[test]
    fn latency_override_is_symmetric() {
        let mut cfg = TopologyConfig::testbed();
        cfg.latency_ms
            .entry("fog1".into())
            .or_default()
            .insert("cloud1".into(), 80.0);
        let f = cfg.build().unwrap();
        assert_eq!(f.path_latency("cloud1", "fog1").unwrap(), 80.0);
    }

    #[test]
    fn invalid_topologies_rejected() {
        let mut cfg = TopologyConfig::testbed();
        cfg.clusters[0].region = "cloud".into();
        assert!(cfg.build().is_err());

        let mut cfg = TopologyConfig::testbed();
        cfg.clusters[1].zone = "fog1".into();
        assert!(cfg.build().is_err());

        let mut cfg = TopologyConfig::testbed();
        cfg.default_latency_ms.intra = 10.0;
        assert!(cfg.build().is_err());
    }

    #[test]
    fn intermediate_clusters_prefer_fog() {
        let f = testbed();
        assert_eq!(f.intermediate_clusters("fog1", "fog3"), vec!["fog2"]);
        assert!(f.intermediate_clusters("fog1", "fog2").is_empty());
        assert!(f.intermediate_clusters("fog1", "cloud1").is_empty());
    }

    #[derive(Debug, Clone)]
    enum Op {
        Alloc(f64, u64),
        Release(usize),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (1u32..=16, 1u64..=4).prop_map(|(q, m)| Op::Alloc(q as f64 * 0.25, m * GIB / 4)),
            any::<usize>().prop_map(Op::Release),
        ]
    }

    proptest! {
        #[test]
        fn allocate_release_conserves(ops in proptest::collection::vec(op(), 1..60)) {
            let mut n = NodeState::new("c", "n", 4.0, 4 * GIB);
            let mut tickets: Vec<AllocationTicket> = Vec::new();
            for o in ops {
                match o {
                    Op::Alloc(c, m) => {
                        let before = (n.allocated_cpu, n.allocated_mem);
                        match n.allocate(c, m) {
                            Ok(t) => tickets.push(t),
                            Err(_) => prop_assert_eq!(before, (n.allocated_cpu, n.allocated_mem)),
                        }
                    }
                    Op::Release(i) if !tickets.is_empty() => {
                        let t = tickets.remove(i % tickets.len());
                        n.release(&t).unwrap();
                        prop_assert!(n.release(&t).is_err());
                    }
                    Op::Release(_) => {}
                }
                prop_assert!(n.allocated_cpu >= 0.0 && n.allocated_cpu <= n.capacity_cpu + CPU_EPS);
                prop_assert!(n.allocated_mem <= n.capacity_mem);
                let live: f64 = tickets.iter().map(|t| t.cpu).sum();
                prop_assert!((live - n.allocated_cpu).abs() < 1e-6);
            }
            for t in tickets.drain(..) {
                n.release(&t).unwrap();
            }
            prop_assert_eq!(n.allocated_cpu, 0.0);
            prop_assert_eq!(n.allocated_mem, 0);
        }
    }
}
