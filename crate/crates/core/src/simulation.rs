//! Deterministic discrete-event core. One [`Simulation`] owns the fabric,
//! the mesh, the stores and every control engine, and advances a simulated
//! millisecond clock through an ordered event queue.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::app_model::{invocation_tree, Application, InvocationNode};
use crate::control_engine::{
    check_pr, Action, CeConfig, CeContext, CeError, ControlEngine, OperationMode, PlacementMode, ProcessingTrace,
    Timing,
};
use crate::fabric::{ClusterData, Fabric, FabricError, TopologyConfig};
use crate::placement::{AlgorithmRegistry, PlacementRequest};
use crate::routing::{service_key, Caller, DeploymentInfo, Mesh, RoutingError, SubsetLabel};
use crate::stores::{StoreConfig, StoreError, Stores};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Engine(#[from] CeError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error("unknown service `{0}`")]
    UnknownService(String),
    #[error("{0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Event queue

struct Entry<E> {
    at: f64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.at.total_cmp(&self.at).then(other.seq.cmp(&self.seq))
    }
}

/// Events ordered by (time, insertion sequence).
pub struct EventQueue<E> {
    heap: BinaryHeap<Entry<E>>,
    seq: u64,
    clock: f64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self {
            heap: BinaryHeap::new(),
            seq: 0,
            clock: 0.0,
        }
    }

    pub fn now(&self) -> f64 {
        self.clock
    }

    /// Schedules `event` at `at`; times in the past are moved to now.
    pub fn push(&mut self, at: f64, event: E) {
        debug_assert!(!at.is_nan(), "event time is NaN");
        let at = if at < self.clock { self.clock } else { at };
        self.heap.push(Entry {
            at,
            seq: self.seq,
            event,
        });
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<(f64, E)> {
        let e = self.heap.pop()?;
        self.clock = e.at;
        Some((e.at, e.event))
    }

    /// Moves the clock forward to `t` without running anything.
    pub fn advance(&mut self, t: f64) {
        debug_assert!(self.peek_time().is_none_or(|n| n >= t), "events pending before {t}");
        self.clock = self.clock.max(t);
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.at)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrStatus {
    Pending,
    Deployed,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PrTimeline {
    pub pr_id: String,
    pub application_id: String,
    pub submitted_at: f64,
    pub placement_start: Option<f64>,
    pub placement_end: Option<f64>,
    pub terminal_at: Option<f64>,
    pub status: PrStatus,
    pub hops: u32,
    pub reason: Option<String>,
    #[serde(skip)]
    complete: bool,
    #[serde(skip)]
    outstanding: u32,
    #[serde(skip)]
    last_ready: f64,
}

impl PrTimeline {
    pub fn deployment_time(&self) -> Option<f64> {
        self.terminal_at.map(|t| t - self.submitted_at)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Sample {
    pub service: String,
    pub request_id: u64,
    pub response_ms: Option<f64>,
    pub serving_instances: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StoreAccess {
    pub label: String,
    pub store: String,
    pub from: String,
    pub served_by: String,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricsSink {
    pub scenario: String,
    pub seed: u64,
    pub samples: Vec<Sample>,
    /// service key -> subset label -> requests served
    pub instance_counts: BTreeMap<String, BTreeMap<String, u64>>,
    pub timelines: BTreeMap<String, PrTimeline>,
    pub store_accesses: Vec<StoreAccess>,
    pub lb_dispatches: BTreeMap<String, u32>,
    pub traces: Vec<ProcessingTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ServiceStats {
    pub requests: usize,
    pub failed: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Summary {
    pub scenario: String,
    pub seed: u64,
    pub services: BTreeMap<String, ServiceStats>,
    pub instance_shares: BTreeMap<String, BTreeMap<String, f64>>,
    pub timelines: Vec<PrTimeline>,
    pub total_completion_ms: Option<f64>,
    pub store_accesses: Vec<StoreAccess>,
    pub lb_dispatches: BTreeMap<String, u32>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl MetricsSink {
    pub fn service_stats(&self, service: &str) -> Option<ServiceStats> {
        let mut ok: Vec<f64> = Vec::new();
        let mut failed = 0;
        let mut requests = 0;
        for s in self.samples.iter().filter(|s| s.service == service) {
            requests += 1;
            match s.response_ms {
                Some(r) => ok.push(r),
                None => failed += 1,
            }
        }
        if requests == 0 {
            return None;
        }
        ok.sort_by(f64::total_cmp);
        Some(ServiceStats {
            requests,
            failed,
            mean_ms: if ok.is_empty() { f64::NAN } else { ok.iter().sum::<f64>() / ok.len() as f64 },
            p50_ms: percentile(&ok, 50.0),
            p95_ms: percentile(&ok, 95.0),
        })
    }

    pub fn shares(&self, key: &str) -> BTreeMap<String, f64> {
        let Some(counts) = self.instance_counts.get(key) else {
            return BTreeMap::new();
        };
        let total: u64 = counts.values().sum();
        counts
            .iter()
            .map(|(k, v)| (k.clone(), *v as f64 / total.max(1) as f64))
            .collect()
    }

    /// Last terminal time minus first submission, over all requests.
    pub fn total_completion(&self) -> Option<f64> {
        let first = self.timelines.values().map(|t| t.submitted_at).min_by(f64::total_cmp)?;
        let last = self
            .timelines
            .values()
            .map(|t| t.terminal_at)
            .try_fold(f64::NEG_INFINITY, |m, t| t.map(|t| m.max(t)))?;
        Some(last - first)
    }

    pub fn summary(&self) -> Summary {
        let services: BTreeSet<&String> = self.samples.iter().map(|s| &s.service).collect();
        Summary {
            scenario: self.scenario.clone(),
            seed: self.seed,
            services: services
                .into_iter()
                .filter_map(|s| Some((s.clone(), self.service_stats(s)?)))
                .collect(),
            instance_shares: self.instance_counts.keys().map(|k| (k.clone(), self.shares(k))).collect(),
            timelines: self.timelines.values().cloned().collect(),
            total_completion_ms: self.total_completion(),
            store_accesses: self.store_accesses.clone(),
            lb_dispatches: self.lb_dispatches.clone(),
            extra: BTreeMap::new(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["scenario", "seed", "service", "request_id", "response_ms", "serving_instances"])?;
        for s in &self.samples {
            w.write_record([
                self.scenario.as_str(),
                &self.seed.to_string(),
                &s.service,
                &s.request_id.to_string(),
                &s.response_ms.map_or_else(|| "failed".to_string(), |r| format!("{r:.3}")),
                &s.serving_instances,
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `samples.csv` and `summary.json` under `dir`.
    pub fn export(&self, dir: &Path, extra: BTreeMap<String, serde_json::Value>) -> Result<(), SimError> {
        std::fs::create_dir_all(dir)?;
        let f = std::fs::File::create(dir.join("samples.csv"))?;
        self.write_csv(f).map_err(|e| SimError::Io(std::io::Error::other(e)))?;
        let mut summary = self.summary();
        summary.extra = extra;
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&summary).expect("summary serializes"),
        )?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Simulation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Fault {
    StoreReplica { cluster: String, healthy: bool },
    Instance { app: String, ms: String, cluster: String, node: String, healthy: bool },
    /// Whether the cluster's engine answers cluster-data queries.
    Engine { cluster: String, reachable: bool },
    /// Capacity taken by workloads outside the simulation.
    Background { cluster: String, node: String, cpu: f64, memory: u64 },
}

#[derive(Debug)]
enum Event {
    Submit { cluster: String, pr: PlacementRequest },
    TryStart { cluster: String },
    WorkerFree { cluster: String },
    Tick { cluster: String },
    Arrive { cluster: String, origin: String, info: DeploymentInfo },
    Apply { cluster: String, origin: String, info: DeploymentInfo },
    Ready { pr_id: String },
    Refused { origin: String, pr_id: String, cluster: String },
    Fault(Fault),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct SimConfig {
    pub scenario: String,
    pub seed: u64,
    pub topology: TopologyConfig,
    pub engines: Vec<CeConfig>,
    pub stores: StoreConfig,
    pub timing: Timing,
    /// Serialization delay per message byte, per direction.
    pub ms_per_byte: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            scenario: "default".into(),
            seed: 0,
            topology: TopologyConfig::testbed(),
            engines: Vec::new(),
            stores: StoreConfig::default(),
            timing: Timing::default(),
            ms_per_byte: 0.0,
        }
    }
}

impl SimConfig {
    /// One engine per cluster, all distributed, running `algorithm`.
    pub fn distributed(topology: TopologyConfig, algorithm: &str, seed: u64) -> Self {
        let engines = topology
            .clusters
            .iter()
            .map(|c| CeConfig {
                algorithm_name: algorithm.into(),
                rng_seed: seed,
                ..CeConfig::for_cluster(&c.name)
            })
            .collect();
        Self {
            seed,
            topology,
            engines,
            ..Default::default()
        }
    }

    /// A primary engine on `primary` running `algorithm`, secondaries elsewhere.
    pub fn centralised(topology: TopologyConfig, primary: &str, algorithm: &str, seed: u64) -> Self {
        let engines = topology
            .clusters
            .iter()
            .map(|c| CeConfig {
                operation_mode: if c.name == primary {
                    OperationMode::CentralisedPrimary
                } else {
                    OperationMode::CentralisedSecondary
                },
                algorithm_name: algorithm.into(),
                primary_cluster: Some(primary.into()),
                rng_seed: seed,
                ..CeConfig::for_cluster(&c.name)
            })
            .collect();
        Self {
            seed,
            topology,
            engines,
            ..Default::default()
        }
    }
}

pub struct Simulation {
    fabric: Fabric,
    mesh: Mesh,
    stores: Stores,
    engines: BTreeMap<String, ControlEngine>,
    queue: EventQueue<Event>,
    timing: Timing,
    ms_per_byte: f64,
    unreachable: BTreeSet<String>,
    start_pending: BTreeSet<String>,
    ticking: BTreeSet<String>,
    final_prs: BTreeMap<String, PlacementRequest>,
    servers: BTreeMap<String, f64>,
    next_pr: u64,
    next_request: u64,
    metrics: MetricsSink,
}

impl std::fmt::Debug for Simulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulation")
            .field("now", &self.queue.now())
            .field("engines", &self.engines.keys().collect::<Vec<_>>())
            .finish()
    }
}

fn primary_of(engines: &BTreeMap<String, ControlEngine>) -> Option<String> {
    engines
        .values()
        .find(|e| e.config().operation_mode == OperationMode::CentralisedPrimary)
        .map(|e| e.cluster().to_string())
}

impl Simulation {
    pub fn new(cfg: &SimConfig, registry: &AlgorithmRegistry) -> Result<Self, SimError> {
        let fabric = cfg.topology.build()?;
        let mut engines = BTreeMap::new();
        for e in &cfg.engines {
            if !fabric.contains(&e.cluster_name) {
                return Err(CeError::UnknownCluster(e.cluster_name.clone()).into());
            }
            if engines.contains_key(&e.cluster_name) {
                return Err(SimError::Config(format!("two engines for cluster {}", e.cluster_name)));
            }
            engines.insert(e.cluster_name.clone(), ControlEngine::new(e.clone(), registry)?);
        }
        let primaries = cfg
            .engines
            .iter()
            .filter(|e| e.operation_mode == OperationMode::CentralisedPrimary)
            .count();
        let centralised = cfg.engines.iter().any(|e| e.operation_mode != OperationMode::Distributed);
        if centralised && primaries != 1 {
            return Err(SimError::Config(format!(
                "centralised operation needs exactly one primary engine, found {primaries}"
            )));
        }
        Ok(Self {
            mesh: Mesh::new(&fabric),
            stores: Stores::new(&fabric, &cfg.stores)?,
            fabric,
            engines,
            queue: EventQueue::new(),
            timing: cfg.timing.clone(),
            ms_per_byte: cfg.ms_per_byte,
            unreachable: BTreeSet::new(),
            start_pending: BTreeSet::new(),
            ticking: BTreeSet::new(),
            final_prs: BTreeMap::new(),
            servers: BTreeMap::new(),
            next_pr: 1,
            next_request: 0,
            metrics: MetricsSink {
                scenario: cfg.scenario.clone(),
                seed: cfg.seed,
                ..Default::default()
            },
        })
    }

    pub fn now(&self) -> f64 {
        self.queue.now()
    }

    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn stores(&self) -> &Stores {
        &self.stores
    }

    pub fn stores_mut(&mut self) -> &mut Stores {
        &mut self.stores
    }

    pub fn metrics(&self) -> &MetricsSink {
        &self.metrics
    }

    pub fn engine(&self, cluster: &str) -> Option<&ControlEngine> {
        self.engines.get(cluster)
    }

    pub fn timeline(&self, pr_id: &str) -> Option<&PrTimeline> {
        self.metrics.timelines.get(pr_id)
    }

    pub fn seed_application(&mut self, app: &Application) {
        self.stores.seed_application(app);
    }

    pub fn cluster_data(&self, cluster: &str) -> Result<ClusterData, SimError> {
        Ok(self.fabric.cluster_snapshot(cluster)?)
    }

    /// The application as currently held by the metadata master.
    pub fn application(&self, app_id: &str) -> Option<Application> {
        self.stores
            .metadata
            .version_at(self.stores.metadata.master(), app_id)?;
        let mut s = self.stores.metadata.clone();
        s.set_health(&s.master().to_string(), true);
        let master = s.master().to_string();
        s.get(&self.fabric, app_id, &master, f64::INFINITY).ok().map(|r| r.value)
    }

    /// Validates and schedules a user submission arriving at `at`. The
    /// `cluster` header picks the receiving engine; without it the first
    /// entry cluster receives the request.
    pub fn submit_at(&mut self, at: f64, cluster_header: Option<&str>, mut pr: PlacementRequest) -> Result<String, SimError> {
        check_pr(&pr, &self.fabric)?;
        let cluster = cluster_header
            .map(str::to_string)
            .unwrap_or_else(|| pr.entry_clusters[0].clone());
        if !self.engines.contains_key(&cluster) {
            return Err(CeError::UnknownCluster(cluster).into());
        }
        if self.application(&pr.application_id).is_none() {
            return Err(CeError::UnknownApplication(pr.application_id.clone()).into());
        }
        if pr.pr_id.is_empty() {
            while self.metrics.timelines.contains_key(&format!("pr-{}", self.next_pr)) {
                self.next_pr += 1;
            }
            pr.pr_id = format!("pr-{}", self.next_pr);
            self.next_pr += 1;
        }
        if self.metrics.timelines.contains_key(&pr.pr_id) {
            return Err(CeError::MalformedPr(format!("duplicate prId {}", pr.pr_id)).into());
        }
        let at = at.max(self.now());
        self.metrics.timelines.insert(
            pr.pr_id.clone(),
            PrTimeline {
                pr_id: pr.pr_id.clone(),
                application_id: pr.application_id.clone(),
                submitted_at: at,
                placement_start: None,
                placement_end: None,
                terminal_at: None,
                status: PrStatus::Pending,
                hops: 0,
                reason: None,
                complete: false,
                outstanding: 0,
                last_ready: at,
            },
        );
        let id = pr.pr_id.clone();
        self.queue.push(at, Event::Submit { cluster, pr });
        Ok(id)
    }

    pub fn submit(&mut self, cluster_header: Option<&str>, pr: PlacementRequest) -> Result<String, SimError> {
        self.submit_at(self.now(), cluster_header, pr)
    }

    pub fn schedule_fault(&mut self, at: f64, fault: Fault) {
        self.queue.push(at, Event::Fault(fault));
    }

    /// Applies a deployment payload immediately, as delivered through the
    /// deployment endpoint.
    pub fn deliver_deployment(&mut self, cluster: &str, info: &DeploymentInfo) -> Result<bool, SimError> {
        let rec = self.mesh.apply_deployment(&mut self.fabric, cluster, info)?;
        Ok(!rec.noop)
    }

    pub fn is_quiescent(&self) -> bool {
        self.queue.is_empty()
    }

    /// Runs until no events remain.
    pub fn run(&mut self) {
        while let Some((now, ev)) = self.queue.pop() {
            self.handle(now, ev);
        }
    }

    /// Runs events up to and including `until`, then sets the clock to
    /// `until`.
    pub fn run_until(&mut self, until: f64) {
        while self.queue.peek_time().is_some_and(|t| t <= until) {
            let (now, ev) = self.queue.pop().expect("peeked");
            self.handle(now, ev);
        }
        self.queue.advance(until);
    }

    fn pending_work(&self) -> bool {
        self.metrics.timelines.values().any(|t| t.status == PrStatus::Pending)
    }

    fn handle(&mut self, now: f64, ev: Event) {
        match ev {
            Event::Submit { cluster, pr } => self.on_submit(now, cluster, pr),
            Event::TryStart { cluster } => {
                self.start_pending.remove(&cluster);
                self.try_start(now, &cluster);
            }
            Event::WorkerFree { cluster } => {
                let event_driven = self
                    .engines
                    .get(&cluster)
                    .is_some_and(|e| e.config().placement_mode == PlacementMode::EventDriven);
                if event_driven {
                    self.try_start(now, &cluster);
                }
            }
            Event::Tick { cluster } => {
                self.try_start(now, &cluster);
                let period = match self.engines[&cluster].config().placement_mode {
                    PlacementMode::Periodic { period_ms } => period_ms,
                    PlacementMode::EventDriven => return,
                };
                if self.pending_work() || self.engines[&cluster].queued() > 0 {
                    self.queue.push(now + period, Event::Tick { cluster });
                } else {
                    self.ticking.remove(&cluster);
                }
            }
            Event::Arrive { cluster, origin, info } => {
                let mut fetch = 0.0;
                if !info.instance_plans.is_empty() || info.entry_cluster {
                    if let Some(app) = self.application(&info.application_id) {
                        let ms: Vec<String> = info
                            .instance_plans
                            .iter()
                            .map(|p| p.ms_id.clone())
                            .collect::<BTreeSet<_>>()
                            .into_iter()
                            .collect();
                        match self
                            .stores
                            .get_templates(&self.fabric, &app, &ms, info.entry_cluster, &cluster, now)
                        {
                            Ok(b) => fetch = b.latency_ms,
                            Err(e) => {
                                self.settle(&origin, &info.pr_id, &cluster);
                                self.reject(now, &info.pr_id, format!("deployment templates on {cluster}: {e}"));
                                self.ready(now, &info.pr_id);
                                return;
                            }
                        }
                    }
                }
                self.queue.push(now + fetch, Event::Apply { cluster, origin, info });
            }
            Event::Apply { cluster, origin, info } => self.on_apply(now, cluster, origin, info),
            Event::Ready { pr_id } => self.ready(now, &pr_id),
            Event::Refused { origin, pr_id, cluster } => {
                let Some(pr) = self.final_prs.remove(&pr_id) else {
                    self.reject(now, &pr_id, format!("deployment refused on {cluster}"));
                    return;
                };
                let requeued = self
                    .engines
                    .get_mut(&origin)
                    .is_some_and(|e| e.deployment_refused(pr, &cluster));
                if requeued {
                    if let Some(t) = self.metrics.timelines.get_mut(&pr_id) {
                        t.complete = false;
                    }
                    self.kick(now, &origin);
                } else {
                    self.reject(now, &pr_id, format!("deployment refused on {cluster}"));
                }
            }
            Event::Fault(f) => self.on_fault(f),
        }
    }

    fn on_fault(&mut self, f: Fault) {
        match f {
            Fault::StoreReplica { cluster, healthy } => self.stores.set_replica_health(&cluster, healthy),
            Fault::Instance { app, ms, cluster, node, healthy } => {
                if !self.mesh.set_instance_health(&app, &ms, &SubsetLabel::new(&cluster, &node), healthy) {
                    log::warn!("fault names unknown instance {app}/{ms} on {cluster}/{node}");
                }
            }
            Fault::Engine { cluster, reachable } => {
                if reachable {
                    self.unreachable.remove(&cluster);
                } else {
                    self.unreachable.insert(cluster);
                }
            }
            Fault::Background { cluster, node, cpu, memory } => {
                if let Err(e) = self.fabric.allocate(&cluster, &node, cpu, memory) {
                    log::warn!("background load on {cluster}/{node} not applied: {e}");
                }
            }
        }
    }

    fn on_submit(&mut self, now: f64, cluster: String, pr: PlacementRequest) {
        let Some(engine) = self.engines.get_mut(&cluster) else {
            self.reject(now, &pr.pr_id, format!("no engine on {cluster}"));
            return;
        };
        if !engine.config().runs_placement() {
            // secondaries hand user requests to the primary
            match primary_of(&self.engines) {
                Some(p) => {
                    let at = now + self.timing.delivery(&self.fabric, &cluster, &p);
                    self.queue.push(at, Event::Submit { cluster: p, pr });
                }
                None => self.reject(now, &pr.pr_id, "no primary engine".into()),
            }
            return;
        }
        engine.enqueue(pr);
        self.kick(now, &cluster);
    }

    fn kick(&mut self, now: f64, cluster: &str) {
        let Some(engine) = self.engines.get(cluster) else { return };
        match engine.config().placement_mode {
            PlacementMode::EventDriven => {
                if self.start_pending.insert(cluster.to_string()) {
                    self.queue.push(now, Event::TryStart { cluster: cluster.to_string() });
                }
            }
            PlacementMode::Periodic { period_ms } => {
                if self.ticking.insert(cluster.to_string()) {
                    // ticks fall on multiples of the period
                    let next = (now / period_ms).floor() * period_ms + period_ms;
                    self.queue.push(next, Event::Tick { cluster: cluster.to_string() });
                }
            }
        }
    }

    fn try_start(&mut self, now: f64, cluster: &str) {
        let Some(engine) = self.engines.get_mut(cluster) else { return };
        if engine.is_busy(now) || engine.queued() == 0 {
            return;
        }
        let batch = engine.take_batch();
        for pr in &batch {
            if let Some(t) = self.metrics.timelines.get_mut(&pr.pr_id) {
                t.placement_start.get_or_insert(now);
                t.hops = t.hops.max(pr.hop_count);
            }
        }
        let mut ctx = CeContext {
            now,
            fabric: &self.fabric,
            stores: &mut self.stores,
            timing: &self.timing,
            unreachable: &self.unreachable,
        };
        let processed = engine.process(&mut ctx, batch);
        for (app, ms) in &processed.lb_dispatched {
            *self.metrics.lb_dispatches.entry(service_key(app, ms)).or_default() += 1;
        }
        self.metrics.traces.push(processed.trace);
        let me = cluster.to_string();
        for a in processed.actions {
            match a {
                Action::DeployLocal { info, apply_at } => {
                    self.outstanding(&info.pr_id, 1);
                    self.queue.push(
                        apply_at,
                        Event::Apply {
                            cluster: me.clone(),
                            origin: me.clone(),
                            info,
                        },
                    );
                }
                Action::Send { info, arrive_at } => {
                    self.outstanding(&info.pr_id, 1);
                    self.queue.push(
                        arrive_at,
                        Event::Arrive {
                            cluster: info.target_cluster.clone(),
                            origin: me.clone(),
                            info,
                        },
                    );
                }
                Action::Forward { pr, to, arrive_at } => {
                    if let Some(t) = self.metrics.timelines.get_mut(&pr.pr_id) {
                        t.hops = t.hops.max(pr.hop_count);
                    }
                    self.queue.push(arrive_at, Event::Submit { cluster: to, pr });
                }
                Action::Requeue { pr } => {
                    self.engines.get_mut(&me).expect("engine").requeue_front(pr);
                }
                Action::Reject { pr_id, reason, at } => self.reject(at, &pr_id, reason),
                Action::Complete { pr, at } => {
                    if let Some(t) = self.metrics.timelines.get_mut(&pr.pr_id) {
                        t.complete = true;
                        t.placement_end = Some(at);
                        t.last_ready = t.last_ready.max(at);
                    }
                    let id = pr.pr_id.clone();
                    self.final_prs.insert(id.clone(), pr);
                    self.check_done(&id);
                }
            }
        }
        self.queue.push(processed.busy_until, Event::WorkerFree { cluster: me });
    }

    fn outstanding(&mut self, pr_id: &str, delta: i32) {
        if let Some(t) = self.metrics.timelines.get_mut(pr_id) {
            t.outstanding = (t.outstanding as i32 + delta).max(0) as u32;
        }
    }

    fn settle(&mut self, origin: &str, pr_id: &str, cluster: &str) {
        if let Some(e) = self.engines.get_mut(origin) {
            e.settle_in_flight(pr_id, cluster);
        }
    }

    fn on_apply(&mut self, now: f64, cluster: String, origin: String, info: DeploymentInfo) {
        self.settle(&origin, &info.pr_id, &cluster);
        match self.mesh.apply_deployment(&mut self.fabric, &cluster, &info) {
            Ok(rec) => {
                let delay = if rec.instances.is_empty() {
                    0.0
                } else {
                    self.fabric.cluster(&cluster).map_or(0.0, |c| c.deployment_delay_ms)
                };
                self.queue.push(now + delay, Event::Ready { pr_id: info.pr_id });
            }
            Err(e) => {
                log::warn!("{cluster}: deployment of {} refused: {e}", info.pr_id);
                self.outstanding(&info.pr_id, -1);
                let at = now + self.timing.delivery(&self.fabric, &cluster, &origin);
                self.queue.push(
                    at,
                    Event::Refused {
                        origin,
                        pr_id: info.pr_id,
                        cluster,
                    },
                );
            }
        }
    }

    fn ready(&mut self, now: f64, pr_id: &str) {
        if let Some(t) = self.metrics.timelines.get_mut(pr_id) {
            t.outstanding = t.outstanding.saturating_sub(1);
            t.last_ready = t.last_ready.max(now);
        }
        self.check_done(pr_id);
    }

    fn check_done(&mut self, pr_id: &str) {
        if let Some(t) = self.metrics.timelines.get_mut(pr_id) {
            if t.status == PrStatus::Pending && t.complete && t.outstanding == 0 {
                t.status = PrStatus::Deployed;
                t.terminal_at = Some(t.last_ready);
            }
        }
    }

    fn reject(&mut self, at: f64, pr_id: &str, reason: String) {
        if let Some(t) = self.metrics.timelines.get_mut(pr_id) {
            if t.status == PrStatus::Pending {
                t.status = PrStatus::Rejected;
                t.terminal_at = Some(at);
                t.reason = Some(reason);
            }
        }
    }

    /// Deployment time of a request in a terminal state.
    pub fn measure_deployment_time(&self, pr_id: &str) -> Option<f64> {
        self.metrics.timelines.get(pr_id)?.deployment_time()
    }

    /// Reads application metadata and templates for `app_id` from `from`
    /// and records both accesses under `label`.
    pub fn probe_stores(&mut self, label: &str, app_id: &str, from: &str) -> Result<(f64, f64), SimError> {
        let now = self.now();
        let read = self.stores.get_application(&self.fabric, app_id, from, now)?;
        let ms: Vec<String> = read.value.microservices.iter().map(|m| m.ms_id.clone()).collect();
        let served = self.stores.templates.serving_replica(&self.fabric, from)?;
        let batch = self.stores.get_templates(&self.fabric, &read.value, &ms, false, from, now)?;
        self.metrics.store_accesses.push(StoreAccess {
            label: label.into(),
            store: "metadata".into(),
            from: from.into(),
            served_by: read.served_by.clone(),
            latency_ms: read.latency_ms,
        });
        self.metrics.store_accesses.push(StoreAccess {
            label: label.into(),
            store: "templates".into(),
            from: from.into(),
            served_by: served,
            latency_ms: batch.latency_ms,
        });
        Ok((read.latency_ms, batch.latency_ms))
    }

    /// Replays `n_requests` of one service entering at `entry_cluster`.
    pub fn replay_traffic(
        &mut self,
        app_id: &str,
        service_id: &str,
        n_requests: usize,
        entry_cluster: &str,
    ) -> Result<Vec<Sample>, SimError> {
        self.replay_mix(app_id, &[(service_id.to_string(), n_requests)], entry_cluster, 1.0)
    }

    /// Replays several services of one application concurrently. Requests
    /// of each service arrive evenly spaced at `load` times the service's
    /// required rate, split evenly over the clusters exposing the
    /// application.
    pub fn replay_mix(
        &mut self,
        app_id: &str,
        services: &[(String, usize)],
        entry_cluster: &str,
        load: f64,
    ) -> Result<Vec<Sample>, SimError> {
        if !(load > 0.0 && load.is_finite()) {
            return Err(SimError::Config(format!("traffic load must be positive, got {load}")));
        }
        let app = self
            .application(app_id)
            .ok_or_else(|| CeError::UnknownApplication(app_id.to_string()))?;
        let gateways = self
            .mesh
            .tables()
            .filter(|t| t.gateways.contains_key(app_id))
            .count()
            .max(1);
        let t0 = self.now();
        let mut arrivals: Vec<(f64, usize, usize)> = Vec::new();
        let mut trees: Vec<(String, InvocationNode)> = Vec::new();
        for (si, (sid, n)) in services.iter().enumerate() {
            let s = app.service(sid).ok_or_else(|| SimError::UnknownService(sid.clone()))?;
            let tree = invocation_tree(&app, s).ok_or_else(|| SimError::UnknownService(sid.clone()))?;
            let rate = load * s.qos_parameters.required_throughput / gateways as f64;
            let gap = 1000.0 / rate;
            arrivals.extend((0..*n).map(|k| (t0 + k as f64 * gap, si, k)));
            trees.push((sid.clone(), tree));
        }
        arrivals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let ingress = self.fabric.ingress_latency(entry_cluster)?;
        let has_gateway = self
            .mesh
            .table(entry_cluster)
            .is_some_and(|t| t.gateways.contains_key(app_id));
        let mut out = Vec::with_capacity(arrivals.len());
        for (t, si, _) in arrivals {
            let (sid, tree) = &trees[si];
            let id = self.next_request;
            self.next_request += 1;
            let gw = Caller::Gateway {
                cluster: entry_cluster.to_string(),
                app: app_id.to_string(),
            };
            let mut visited = Vec::new();
            let result = if has_gateway {
                self.visit(&app, &gw, tree, t + ingress, false, 0, &mut visited)
            } else {
                Err(RoutingError::Unresolvable {
                    cluster: entry_cluster.to_string(),
                    service: app_id.to_string(),
                })
            };
            let sample = Sample {
                service: format!("{app_id}/{sid}"),
                request_id: id,
                response_ms: result.ok().map(|end| end - t),
                serving_instances: visited.join(";"),
            };
            out.push(sample.clone());
            self.metrics.samples.push(sample);
        }
        Ok(out)
    }

    /// Walks one invocation subtree. Returns when the reply is back at the
    /// caller.
    #[allow(clippy::too_many_arguments)]
    fn visit(
        &mut self,
        app: &Application,
        caller: &Caller,
        node: &InvocationNode,
        sent_at: f64,
        bidirectional: bool,
        message_size: u64,
        visited: &mut Vec<String>,
    ) -> Result<f64, RoutingError> {
        let target = self.mesh.resolve_next(caller, &app.app_id, &node.ms_id)?;
        let hop = self
            .fabric
            .path_latency(caller.cluster(), &target.cluster)
            .unwrap_or(f64::INFINITY)
            + message_size as f64 * self.ms_per_byte;
        let key = service_key(&app.app_id, &node.ms_id);
        *self
            .metrics
            .instance_counts
            .entry(key.clone())
            .or_default()
            .entry(target.to_string())
            .or_default() += 1;
        visited.push(format!("{}@{}", node.ms_id, target));

        let ms = app.microservice(&node.ms_id).expect("tree from app");
        let capacity_units = self
            .mesh
            .table(&target.cluster)
            .and_then(|t| {
                t.instances
                    .values()
                    .find(|i| i.application_id == app.app_id && i.ms_id == node.ms_id && i.node == target.node)
            })
            .map_or(1.0, |i| i.cpu / ms.ref_cpu);
        let occupancy = 1000.0 / (capacity_units * ms.ref_throughput);
        let server = format!("{key}@{target}");
        let arrive = sent_at + hop;
        let free = self.servers.get(&server).copied().unwrap_or(f64::NEG_INFINITY);
        let start = arrive.max(free);
        self.servers.insert(server, start + occupancy);
        let processed = start + ms.processing_time_ms;

        let me = Caller::Instance {
            cluster: target.cluster.clone(),
            node: target.node.clone(),
            app: app.app_id.clone(),
            ms: node.ms_id.clone(),
        };
        let mut done = processed;
        for child in &node.children {
            let flow = app.flow(&node.ms_id, &child.ms_id).expect("tree edges are flows");
            let back = self.visit(app, &me, child, processed, flow.bidirectional, flow.message_size, visited)?;
            done = done.max(back);
        }
        Ok(if bidirectional { done + hop } else { done })
    }
}
