//! Per-cluster control engine: request intake, the three-step processing
//! pipeline (data retrieval, algorithm run, deployment), forwarding of
//! incomplete requests and load-balancing readiness tracking.
//!
//! A control engine does not own a clock. `process` runs one batch at the
//! simulated instant it is handed, works out when each step would finish,
//! and returns the resulting deliveries as [`Action`]s for the caller to
//! schedule.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::app_model::Application;
use crate::fabric::{ClusterData, Fabric};
use crate::placement::{
    derive_subset_weights, placed_units, required_instances, validate_output, AlgorithmRegistry,
    ExternalAlgorithm, InstancePlan, PlacementAlgorithm, PlacementError, PlacementInput, PlacementOutput,
    PlacementRequest,
};
pub use crate::routing::{DeploymentInfo, LbUpdate};
use crate::stores::Stores;

#[derive(Debug, Error)]
pub enum CeError {
    #[error("unknown cluster `{0}`")]
    UnknownCluster(String),
    #[error("unknown application `{0}`")]
    UnknownApplication(String),
    #[error("malformed placement request: {0}")]
    MalformedPr(String),
    #[error("no forwarding target from {0}")]
    NoForwardTarget(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Placement(#[from] PlacementError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperationMode {
    Distributed,
    CentralisedPrimary,
    CentralisedSecondary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum PlacementMode {
    EventDriven,
    Periodic {
        #[serde(default = "default_period", rename = "periodMs")]
        period_ms: f64,
    },
}

fn default_period() -> f64 {
    1000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Batching {
    Batch,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForwardingPolicy {
    #[serde(rename = "fp1-random-fog", alias = "fp1")]
    RandomFog,
    #[serde(rename = "fp2-cloud", alias = "fp2")]
    Cloud,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct CeConfig {
    pub cluster_name: String,
    pub operation_mode: OperationMode,
    pub placement_mode: PlacementMode,
    pub batching: Batching,
    pub algorithm_name: String,
    pub forwarding_policy: ForwardingPolicy,
    pub lb_policy_name: String,
    pub external_algo_url: Option<String>,
    pub external_timeout_ms: u64,
    /// Cluster of the primary engine, for secondaries to hand requests to.
    pub primary_cluster: Option<String>,
    pub rng_seed: u64,
}

impl Default for CeConfig {
    fn default() -> Self {
        Self {
            cluster_name: String::new(),
            operation_mode: OperationMode::Distributed,
            placement_mode: PlacementMode::EventDriven,
            batching: Batching::Batch,
            algorithm_name: "v2".into(),
            forwarding_policy: ForwardingPolicy::RandomFog,
            lb_policy_name: "wrr".into(),
            external_algo_url: None,
            external_timeout_ms: 5000,
            primary_cluster: None,
            rng_seed: 0,
        }
    }
}

fn parse_enum<T: for<'de> Deserialize<'de>>(key: &str, value: &str) -> Result<T, CeError> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| CeError::Config(format!("{key}: unrecognised value `{value}`")))
}

impl CeConfig {
    pub fn for_cluster(name: &str) -> Self {
        Self {
            cluster_name: name.into(),
            ..Default::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, CeError> {
        toml::from_str(text).map_err(|e| CeError::Config(crate::scenario::describe_toml_error(text, &e)))
    }

    pub fn from_file(path: &Path) -> Result<Self, CeError> {
        let text = std::fs::read_to_string(path).map_err(|e| CeError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CeError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `FOGMESH_*` overrides from `vars`.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<(), CeError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (k, v) in vars {
            let (k, v) = (k.as_ref(), v.as_ref());
            match k {
                "FOGMESH_CLUSTER" => self.cluster_name = v.to_string(),
                "FOGMESH_MODE" => self.operation_mode = parse_enum(k, v)?,
                "FOGMESH_BATCHING" => self.batching = parse_enum(k, v)?,
                "FOGMESH_ALGORITHM" => self.algorithm_name = v.to_string(),
                "FOGMESH_FORWARDING" => self.forwarding_policy = parse_enum(k, v)?,
                "FOGMESH_EXTERNAL_ALGO_URL" => self.external_algo_url = Some(v.to_string()),
                "FOGMESH_PRIMARY" => self.primary_cluster = Some(v.to_string()),
                "FOGMESH_SEED" => {
                    self.rng_seed = v
                        .parse()
                        .map_err(|_| CeError::Config(format!("{k}: not an integer: `{v}`")))?
                }
                "FOGMESH_PERIOD_MS" => {
                    let period_ms = v
                        .parse()
                        .map_err(|_| CeError::Config(format!("{k}: not a number: `{v}`")))?;
                    self.placement_mode = PlacementMode::Periodic { period_ms };
                }
                "FOGMESH_EVENT_DRIVEN" => self.placement_mode = PlacementMode::EventDriven,
                _ => {}
            }
        }
        Ok(())
    }

    pub fn runs_placement(&self) -> bool {
        self.operation_mode != OperationMode::CentralisedSecondary
    }
}

/// Simulated costs of control-plane work, in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct Timing {
    /// Server-side handling time of any control-engine API call.
    pub api_service_ms: f64,
    pub local_data_ms: f64,
    pub algorithm_base_ms: f64,
    /// Charged per placed instance per cluster in the algorithm's view.
    pub algorithm_per_placement_ms: f64,
    /// Worker time to issue the deployment of one local instance.
    pub deploy_command_ms: f64,
    pub api2_timeout_ms: f64,
}

impl Default for Timing {
    fn default() -> Self {
        Self {
            api_service_ms: 1.0,
            local_data_ms: 1.0,
            algorithm_base_ms: 2.0,
            algorithm_per_placement_ms: 0.5,
            deploy_command_ms: 1.0,
            api2_timeout_ms: 1000.0,
        }
    }
}

impl Timing {
    pub fn rtt(&self, fabric: &Fabric, a: &str, b: &str) -> f64 {
        2.0 * fabric.path_latency(a, b).unwrap_or(f64::INFINITY) + self.api_service_ms
    }

    /// One-way delivery of an API call, including server handling.
    pub fn delivery(&self, fabric: &Fabric, a: &str, b: &str) -> f64 {
        fabric.path_latency(a, b).unwrap_or(f64::INFINITY) + self.api_service_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Step {
    #[serde(rename = "1.1")]
    ClusterData,
    #[serde(rename = "1.2")]
    Metadata,
    #[serde(rename = "2")]
    Algorithm,
    #[serde(rename = "3")]
    Deployment,
}

impl Step {
    pub fn label(self) -> &'static str {
        match self {
            Step::ClusterData => "1.1",
            Step::Metadata => "1.2",
            Step::Algorithm => "2",
            Step::Deployment => "3",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TraceEvent {
    pub step: Step,
    pub start: f64,
    pub end: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Dispatch {
    pub pr_id: String,
    pub target: String,
    pub send_at: f64,
    pub arrive_at: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Collection {
    pub round_trips: BTreeMap<String, f64>,
    pub timed_out: Vec<String>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProcessingTrace {
    pub cluster: String,
    pub pr_ids: Vec<String>,
    pub events: Vec<TraceEvent>,
    pub collection: Option<Collection>,
    /// Start of local deployment and when its instances are ready.
    pub local_deployment: Option<(f64, f64)>,
    pub dispatches: Vec<Dispatch>,
}

impl ProcessingTrace {
    pub fn start(&self) -> f64 {
        self.events.first().map_or(0.0, |e| e.start)
    }

    pub fn end(&self) -> f64 {
        self.events.last().map_or(0.0, |e| e.end)
    }

    pub fn steps(&self) -> Vec<Step> {
        self.events.iter().map(|e| e.step).collect()
    }
}

/// What the caller must deliver after a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    /// Apply on the engine's own cluster at `apply_at`.
    DeployLocal { info: DeploymentInfo, apply_at: f64 },
    /// Send a deployment payload to another cluster.
    Send { info: DeploymentInfo, arrive_at: f64 },
    Forward { pr: PlacementRequest, to: String, arrive_at: f64 },
    Requeue { pr: PlacementRequest },
    Reject { pr_id: String, reason: String, at: f64 },
    Complete { pr: PlacementRequest, at: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Processed {
    pub trace: ProcessingTrace,
    pub actions: Vec<Action>,
    pub busy_until: f64,
    /// (application, microservice) pairs whose load-balancing updates went out.
    pub lb_dispatched: Vec<(String, String)>,
}

pub struct CeContext<'a> {
    pub now: f64,
    pub fabric: &'a Fabric,
    pub stores: &'a mut Stores,
    pub timing: &'a Timing,
    /// Clusters whose engines do not answer cluster-data queries.
    pub unreachable: &'a BTreeSet<String>,
}

// ---------------------------------------------------------------------------
// Forwarding

pub fn linked(fabric: &Fabric, a: &str, b: &str) -> bool {
    let adj = |x: &str, y: &str| {
        fabric
            .cluster(x)
            .is_ok_and(|c| c.adjacent_fog.iter().chain(&c.adjacent_cloud).any(|n| n == y))
    };
    a == b || adj(a, b) || adj(b, a)
}

/// Picks the next cluster for an incomplete request and records the hop.
/// The random-fog policy falls back to the cloud once every fog neighbour
/// has been visited.
pub fn forward_pr(
    pr: &mut PlacementRequest,
    policy: ForwardingPolicy,
    fabric: &Fabric,
    current: &str,
    rng: &mut ChaCha8Rng,
) -> Result<String, CeError> {
    let here = fabric
        .cluster(current)
        .map_err(|_| CeError::UnknownCluster(current.to_string()))?;
    let visited = |c: &String| pr.visited_clusters.contains(c) || c == current;
    let fog: Vec<&String> = here.adjacent_fog.iter().filter(|c| !visited(c)).collect();
    let cloud = here.adjacent_cloud.iter().find(|c| !visited(c));
    let dest = match policy {
        ForwardingPolicy::RandomFog => fog.choose(rng).map(|c| (*c).clone()).or_else(|| cloud.cloned()),
        ForwardingPolicy::Cloud => cloud.cloned(),
    }
    .ok_or_else(|| CeError::NoForwardTarget(current.to_string()))?;
    if !pr.visited_clusters.iter().any(|c| c == current) {
        pr.visited_clusters.push(current.to_string());
    }
    pr.hop_count += 1;
    Ok(dest)
}

// ---------------------------------------------------------------------------
// Load-balancing readiness

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LbEntry {
    pub expected_instances: u32,
    pub placed_instances: u32,
    pub consumer_ms_ids: Vec<String>,
    pub consumers_placed: bool,
    pub dispatched: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbDispatch {
    pub ms_id: String,
    pub subsets: Vec<crate::placement::SubsetWeight>,
    /// Receiving clusters; `true` marks composition-only clusters.
    pub targets: BTreeMap<String, bool>,
}

/// Readiness bookkeeping per (application, microservice).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LbTracker {
    pub entries: BTreeMap<(String, String), LbEntry>,
}

fn hosting(pr: &PlacementRequest, ms: &str) -> BTreeSet<String> {
    pr.plans(ms).iter().map(|p| p.cluster.clone()).collect()
}

/// Updates the tracker from `pr` and returns the load-balancing updates
/// that became ready. A microservice is ready once all its instances and
/// all its consumers are placed; roots count their entry clusters as
/// consumers. Marks dispatched microservices in the request.
pub fn track_lb(tracker: &mut LbTracker, pr: &mut PlacementRequest, app: &Application, fabric: &Fabric) -> Vec<LbDispatch> {
    let placed = pr.fully_placed(app);
    let mut out = Vec::new();
    for m in &app.microservices {
        let ms = &m.ms_id;
        let consumers: Vec<String> = app.consumers_of(ms).into_iter().map(String::from).collect();
        let (expected, _) = required_instances(m, pr.demand(app, ms));
        let entry = tracker
            .entries
            .entry((app.app_id.clone(), ms.clone()))
            .or_insert_with(|| LbEntry {
                expected_instances: expected,
                placed_instances: 0,
                consumer_ms_ids: consumers.clone(),
                consumers_placed: false,
                dispatched: false,
            });
        entry.placed_instances = placed_units(m, pr.plans(ms)).max(pr.plans(ms).len() as u32);
        entry.consumers_placed = consumers.iter().all(|c| placed.contains(c));
        let done = pr.load_balancing_completed.get(ms).copied().unwrap_or(false);
        if entry.dispatched || done || !placed.contains(ms) || !entry.consumers_placed {
            continue;
        }
        let hosts = hosting(pr, ms);
        let mut callers: BTreeSet<String> = consumers.iter().flat_map(|c| hosting(pr, c)).collect();
        if consumers.is_empty() {
            callers.extend(pr.entry_clusters.iter().cloned());
        }
        let mut targets: BTreeMap<String, bool> = hosts.iter().chain(&callers).map(|c| (c.clone(), false)).collect();
        let mut relays = BTreeSet::new();
        for c in &callers {
            for h in &hosts {
                if !linked(fabric, c, h) {
                    relays.extend(fabric.intermediate_clusters(c, h));
                }
            }
        }
        for r in &relays {
            targets.entry(r.clone()).or_insert(true);
        }
        if !relays.is_empty() {
            pr.composition_only_placements
                .insert(ms.clone(), relays.into_iter().collect());
        }
        let subsets = derive_subset_weights(pr.plans(ms));
        pr.subset_weights.insert(ms.clone(), subsets.clone());
        pr.load_balancing_completed.insert(ms.clone(), true);
        entry.dispatched = true;
        out.push(LbDispatch {
            ms_id: ms.clone(),
            subsets,
            targets,
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Intake validation

pub fn check_pr(pr: &PlacementRequest, fabric: &Fabric) -> Result<(), CeError> {
    if pr.application_id.trim().is_empty() {
        return Err(CeError::MalformedPr("applicationId is required".into()));
    }
    if pr.entry_clusters.is_empty() {
        return Err(CeError::MalformedPr("entryClusters must name at least one cluster".into()));
    }
    if let Some(c) = pr.entry_clusters.iter().find(|c| !fabric.contains(c)) {
        return Err(CeError::UnknownCluster(c.clone()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// The engine

pub struct ControlEngine {
    config: CeConfig,
    algorithm: Option<Box<dyn PlacementAlgorithm>>,
    queue: VecDeque<PlacementRequest>,
    rng: ChaCha8Rng,
    tracker: LbTracker,
    /// Plans sent to other clusters and not yet applied there.
    in_flight: Vec<InstancePlan>,
    attempts: BTreeMap<String, u32>,
    busy_until: Option<f64>,
    traces: Vec<ProcessingTrace>,
}

impl std::fmt::Debug for ControlEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlEngine")
            .field("config", &self.config)
            .field("queued", &self.queue.len())
            .finish()
    }
}

/// Retry limit for requests whose processing failed.
pub const MAX_RETRIES: u32 = 1;

impl ControlEngine {
    pub fn new(config: CeConfig, registry: &AlgorithmRegistry) -> Result<Self, CeError> {
        let algorithm: Option<Box<dyn PlacementAlgorithm>> = if !config.runs_placement() {
            None
        } else if let Some(url) = &config.external_algo_url {
            Some(Box::new(ExternalAlgorithm::new(
                url.clone(),
                Duration::from_millis(config.external_timeout_ms),
            )?))
        } else {
            Some(registry.resolve(&config.algorithm_name)?)
        };
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            config,
            algorithm,
            queue: VecDeque::new(),
            tracker: LbTracker::default(),
            in_flight: Vec::new(),
            attempts: BTreeMap::new(),
            busy_until: None,
            traces: Vec::new(),
        })
    }

    pub fn config(&self) -> &CeConfig {
        &self.config
    }

    pub fn cluster(&self) -> &str {
        &self.config.cluster_name
    }

    pub fn enqueue(&mut self, pr: PlacementRequest) {
        self.queue.push_back(pr);
    }

    pub fn requeue_front(&mut self, pr: PlacementRequest) {
        self.queue.push_front(pr);
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    pub fn is_busy(&self, now: f64) -> bool {
        self.busy_until.is_some_and(|t| t > now)
    }

    pub fn traces(&self) -> &[ProcessingTrace] {
        &self.traces
    }

    pub fn tracker(&self) -> &LbTracker {
        &self.tracker
    }

    /// Drops in-flight plans of `pr_id` on `cluster` once applied or refused.
    pub fn settle_in_flight(&mut self, pr_id: &str, cluster: &str) {
        self.in_flight.retain(|p| !(p.pr_id == pr_id && p.cluster == cluster));
    }

    /// Removes the next batch from the queue.
    pub fn take_batch(&mut self) -> Vec<PlacementRequest> {
        match self.config.batching {
            Batching::Batch => self.queue.drain(..).collect(),
            Batching::Sequential => self.queue.pop_front().into_iter().collect(),
        }
    }

    fn snapshot(&self, fabric: &Fabric, cluster: &str) -> Option<ClusterData> {
        let mut data = fabric.cluster_snapshot(cluster).ok()?;
        for p in self.in_flight.iter().filter(|p| p.cluster == cluster) {
            if let Some(n) = data.node_mut(&p.node_name) {
                n.allocated_cpu += p.cpu;
                n.allocated_memory += p.mem;
            }
        }
        Some(data)
    }

    fn retry_or_reject(&mut self, pr: PlacementRequest, reason: String, at: f64, actions: &mut Vec<Action>) {
        let n = self.attempts.entry(pr.pr_id.clone()).or_insert(0);
        if *n < MAX_RETRIES {
            *n += 1;
            log::warn!("{}: re-queueing {} after failure: {reason}", self.config.cluster_name, pr.pr_id);
            actions.push(Action::Requeue { pr });
        } else {
            log::warn!("{}: rejecting {}: {reason}", self.config.cluster_name, pr.pr_id);
            actions.push(Action::Reject {
                pr_id: pr.pr_id,
                reason,
                at,
            });
        }
    }

    /// Re-queues a request whose deployment was refused, or rejects it
    /// when its retry is spent. Returns true when re-queued.
    pub fn deployment_refused(&mut self, mut pr: PlacementRequest, failed_cluster: &str) -> bool {
        let n = self.attempts.entry(pr.pr_id.clone()).or_insert(0);
        if *n >= MAX_RETRIES {
            return false;
        }
        *n += 1;
        let affected: Vec<String> = pr
            .placed_microservices
            .iter()
            .filter(|(_, plans)| plans.iter().any(|p| p.cluster == failed_cluster))
            .map(|(ms, _)| ms.clone())
            .collect();
        for ms in &affected {
            if let Some(plans) = pr.placed_microservices.get_mut(ms) {
                plans.retain(|p| p.cluster != failed_cluster);
            }
            pr.load_balancing_completed.remove(ms);
            self.tracker.entries.remove(&(pr.application_id.clone(), ms.clone()));
        }
        self.queue.push_front(pr);
        true
    }

    /// Runs one batch through the pipeline starting at `ctx.now`.
    pub fn process(&mut self, ctx: &mut CeContext<'_>, batch: Vec<PlacementRequest>) -> Processed {
        let now = ctx.now;
        let me = self.config.cluster_name.clone();
        let timing = ctx.timing;
        let fabric = ctx.fabric;
        let mut actions = Vec::new();
        let mut trace = ProcessingTrace {
            cluster: me.clone(),
            pr_ids: batch.iter().map(|p| p.pr_id.clone()).collect(),
            events: Vec::new(),
            collection: None,
            local_deployment: None,
            dispatches: Vec::new(),
        };

        // step 1.1: cluster data
        let mut view = BTreeMap::new();
        if let Some(local) = self.snapshot(fabric, &me) {
            view.insert(me.clone(), local);
        }
        let mut t = now + timing.local_data_ms;
        if self.config.operation_mode == OperationMode::CentralisedPrimary {
            let mut coll = Collection::default();
            for c in fabric.cluster_names().into_iter().filter(|c| *c != me) {
                if ctx.unreachable.contains(&c) {
                    log::warn!("{me}: cluster data request to {c} timed out; excluded from view");
                    coll.wall_ms = coll.wall_ms.max(timing.api2_timeout_ms);
                    coll.timed_out.push(c);
                    continue;
                }
                let rtt = timing.rtt(fabric, &me, &c);
                coll.wall_ms = coll.wall_ms.max(rtt);
                coll.round_trips.insert(c.clone(), rtt);
                if let Some(d) = self.snapshot(fabric, &c) {
                    view.insert(c, d);
                }
            }
            t += coll.wall_ms;
            trace.collection = Some(coll);
        }
        trace.events.push(TraceEvent {
            step: Step::ClusterData,
            start: now,
            end: t,
            detail: format!("{} clusters", view.len()),
        });

        // step 1.2: application metadata, one concurrent read per application
        let mut apps: BTreeMap<String, Application> = BTreeMap::new();
        let mut meta_ms: f64 = 0.0;
        let mut ready = Vec::new();
        let mut failed_meta = Vec::new();
        for pr in batch {
            if !apps.contains_key(&pr.application_id) {
                match ctx.stores.get_application(fabric, &pr.application_id, &me, t) {
                    Ok(read) => {
                        meta_ms = meta_ms.max(read.latency_ms);
                        apps.insert(pr.application_id.clone(), read.value);
                    }
                    Err(e) => {
                        failed_meta.push((pr, e.to_string()));
                        continue;
                    }
                }
            }
            ready.push(pr);
        }
        let t2 = t + meta_ms;
        trace.events.push(TraceEvent {
            step: Step::Metadata,
            start: t,
            end: t2,
            detail: format!("{} applications", apps.len()),
        });
        for (pr, reason) in failed_meta {
            self.retry_or_reject(pr, reason, t2, &mut actions);
        }

        // step 2: algorithm
        for pr in &mut ready {
            if !pr.visited_clusters.contains(&me) {
                pr.visited_clusters.push(me.clone());
            }
        }
        let input = PlacementInput {
            local_cluster: me.clone(),
            prs: ready,
            app_info: apps,
            cluster_data: view,
        };
        let result = match self.algorithm.as_mut() {
            _ if input.prs.is_empty() => Ok(PlacementOutput::default()),
            None => Err(PlacementError::UnknownAlgorithm(format!("{me} does not run placement"))),
            Some(a) => a
                .generate_placement(&input)
                .and_then(|out| validate_output(&input, &out).map(|_| out)),
        };
        let out = match result {
            Ok(out) => out,
            Err(e) => {
                let t3 = t2 + timing.algorithm_base_ms;
                trace.events.push(TraceEvent {
                    step: Step::Algorithm,
                    start: t2,
                    end: t3,
                    detail: format!("failed: {e}"),
                });
                trace.events.push(TraceEvent {
                    step: Step::Deployment,
                    start: t3,
                    end: t3,
                    detail: "skipped".into(),
                });
                for pr in input.prs {
                    self.retry_or_reject(pr, e.to_string(), t3, &mut actions);
                }
                return self.finish(trace, actions, t3, Vec::new());
            }
        };
        let t3 = t2
            + timing.algorithm_base_ms
            + timing.algorithm_per_placement_ms * out.placements.len() as f64 * input.cluster_data.len() as f64;
        trace.events.push(TraceEvent {
            step: Step::Algorithm,
            start: t2,
            end: t3,
            detail: format!("{} placements", out.placements.len()),
        });

        // step 3: deployment info, forwarding, dispatch
        let mut by_id: BTreeMap<String, PlacementRequest> =
            input.prs.iter().map(|p| (p.pr_id.clone(), p.clone())).collect();
        for inc in &out.incomplete_prs {
            by_id.insert(inc.pr_id.clone(), inc.clone());
        }
        let incomplete: BTreeSet<String> = out.incomplete_prs.iter().map(|p| p.pr_id.clone()).collect();
        for p in &out.placements {
            if incomplete.contains(&p.pr_id) {
                continue;
            }
            if let Some(pr) = by_id.get_mut(&p.pr_id) {
                pr.merge_plans([p.clone()]);
            }
        }

        let mut infos: BTreeMap<(String, String), DeploymentInfo> = BTreeMap::new();
        fn info<'m>(
            infos: &'m mut BTreeMap<(String, String), DeploymentInfo>,
            pr: &PlacementRequest,
            cluster: &str,
        ) -> &'m mut DeploymentInfo {
            infos
                .entry((pr.pr_id.clone(), cluster.to_string()))
                .or_insert_with(|| DeploymentInfo::new(&pr.pr_id, &pr.application_id, cluster))
        }
        for p in &out.placements {
            if let Some(pr) = by_id.get(&p.pr_id) {
                info(&mut infos, pr, &p.cluster).instance_plans.push(p.clone());
            }
        }
        for b in &out.ingress_bindings {
            let Some(pr) = by_id.values().find(|p| p.application_id == b.application_id && p.entry_clusters.contains(&b.cluster))
            else {
                continue;
            };
            let roots: Vec<String> = input.app_info[&pr.application_id].roots().into_iter().map(String::from).collect();
            let i = info(&mut infos, pr, &b.cluster);
            i.entry_cluster = true;
            i.gateway_microservices = roots;
        }
        let ids: Vec<String> = by_id.keys().cloned().collect();
        let mut lb_dispatched = Vec::new();
        for id in &ids {
            if out.rejected_prs.contains(id) {
                continue;
            }
            let pr = by_id.get_mut(id).expect("listed");
            let app = &input.app_info[&pr.application_id];
            for d in track_lb(&mut self.tracker, pr, app, fabric) {
                lb_dispatched.push((pr.application_id.clone(), d.ms_id.clone()));
                for (cluster, relay) in &d.targets {
                    let i = info(&mut infos, pr, cluster);
                    i.lb_updates.push(LbUpdate {
                        ms_id: d.ms_id.clone(),
                        subsets: d.subsets.clone(),
                    });
                    if *relay {
                        i.additional_m_for_s_level.push(d.ms_id.clone());
                    }
                }
            }
        }

        // local deployment: fetch templates once per request, then apply
        let mut fetch_ms = 0.0;
        let mut local_instances = 0usize;
        let mut refused = BTreeSet::new();
        for ((pr_id, cluster), i) in &infos {
            if *cluster != me || (i.instance_plans.is_empty() && !i.entry_cluster) {
                continue;
            }
            let app = &input.app_info[&i.application_id];
            let ms: Vec<String> = i
                .instance_plans
                .iter()
                .map(|p| p.ms_id.clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            match ctx.stores.get_templates(fabric, app, &ms, i.entry_cluster, &me, t3 + fetch_ms) {
                Ok(b) => fetch_ms += b.latency_ms,
                Err(e) => {
                    refused.insert(pr_id.clone());
                    actions.push(Action::Reject {
                        pr_id: pr_id.clone(),
                        reason: format!("deployment templates: {e}"),
                        at: t3,
                    });
                }
            }
            local_instances += i.instance_plans.len();
        }
        let deploy_start = t3 + fetch_ms;
        let busy_until = deploy_start + timing.deploy_command_ms * local_instances as f64;
        let delay = fabric.cluster(&me).map_or(0.0, |c| c.deployment_delay_ms);
        if local_instances > 0 {
            trace.local_deployment = Some((deploy_start, deploy_start + delay));
        }
        for ((pr_id, cluster), i) in infos {
            if refused.contains(&pr_id) {
                continue;
            }
            if cluster == me {
                actions.push(Action::DeployLocal {
                    info: i,
                    apply_at: deploy_start,
                });
            } else {
                let arrive_at = t3 + timing.delivery(fabric, &me, &cluster);
                trace.dispatches.push(Dispatch {
                    pr_id: pr_id.clone(),
                    target: cluster.clone(),
                    send_at: t3,
                    arrive_at,
                });
                self.in_flight.extend(i.instance_plans.iter().cloned());
                actions.push(Action::Send { info: i, arrive_at });
            }
        }

        for id in ids {
            if refused.contains(&id) {
                continue;
            }
            let mut pr = by_id.remove(&id).expect("listed");
            if out.rejected_prs.contains(&id) {
                self.retry_or_reject(pr, "no cluster in view can host the request".into(), t3, &mut actions);
            } else if incomplete.contains(&id) {
                match forward_pr(&mut pr, self.config.forwarding_policy, fabric, &me, &mut self.rng) {
                    Ok(to) => {
                        let arrive_at = t3 + timing.delivery(fabric, &me, &to);
                        actions.push(Action::Forward { pr, to, arrive_at });
                    }
                    Err(e) => actions.push(Action::Reject {
                        pr_id: id,
                        reason: e.to_string(),
                        at: t3,
                    }),
                }
            } else if out.completed_prs.contains(&id) {
                actions.push(Action::Complete { pr, at: t3 });
            } else {
                self.retry_or_reject(pr, "algorithm did not report the request".into(), t3, &mut actions);
            }
        }
        trace.events.push(TraceEvent {
            step: Step::Deployment,
            start: t3,
            end: busy_until,
            detail: format!("{local_instances} local instances, {} dispatches", trace.dispatches.len()),
        });
        self.finish(trace, actions, busy_until, lb_dispatched)
    }

    fn finish(
        &mut self,
        trace: ProcessingTrace,
        actions: Vec<Action>,
        busy_until: f64,
        lb_dispatched: Vec<(String, String)>,
    ) -> Processed {
        self.busy_until = Some(busy_until);
        self.traces.push(trace.clone());
        Processed {
            trace,
            actions,
            busy_until,
            lb_dispatched,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::TopologyConfig;
    use crate::stores::StoreConfig;
    use crate::workload::canned;

    struct World {
        fabric: Fabric,
        stores: Stores,
        timing: Timing,
        down: BTreeSet<String>,
    }

    fn world() -> World {
        let fabric = TopologyConfig::testbed().build().unwrap();
        let mut stores = Stores::new(&fabric, &StoreConfig::default()).unwrap();
        stores.seed_application(&canned("hcapp").unwrap());
        stores.seed_application(&canned("app2").unwrap());
        World {
            fabric,
            stores,
            timing: Timing::default(),
            down: BTreeSet::new(),
        }
    }

    fn run(ce: &mut ControlEngine, w: &mut World, batch: Vec<PlacementRequest>) -> Processed {
        let mut ctx = CeContext {
            now: 0.0,
            fabric: &w.fabric,
            stores: &mut w.stores,
            timing: &w.timing,
            unreachable: &w.down,
        };
        ce.process(&mut ctx, batch)
    }

    fn engine(cluster: &str, mode: OperationMode, algo: &str) -> ControlEngine {
        let cfg = CeConfig {
            operation_mode: mode,
            algorithm_name: algo.into(),
            ..CeConfig::for_cluster(cluster)
        };
        ControlEngine::new(cfg, &AlgorithmRegistry::with_defaults()).unwrap()
    }

    #[test]
    fn trace_steps_in_order() {
        let mut w = world();
        let mut ce = engine("fog1", OperationMode::Distributed, "v2");
        let p = run(&mut ce, &mut w, vec![PlacementRequest::new("pr1", "hcapp", &["fog1"])]);
        assert_eq!(p.trace.steps(), vec![Step::ClusterData, Step::Metadata, Step::Algorithm, Step::Deployment]);
        let ev = &p.trace.events;
        assert!(ev.windows(2).all(|w| w[0].end <= w[1].start + 1e-9));
    }

    #[test]
    fn primary_collection_is_max_of_round_trips() {
        let mut w = world();
        let mut ce = engine("cloud1", OperationMode::CentralisedPrimary, "v3");
        let p = run(&mut ce, &mut w, vec![PlacementRequest::new("pr1", "app2", &["fog1"])]);
        let c = p.trace.collection.clone().unwrap();
        assert_eq!(c.round_trips.len(), 3);
        assert_eq!(c.wall_ms, 101.0);
        assert!(p.actions.iter().any(|a| matches!(a, Action::Send { .. })));
        let (start, ready) = p.trace.local_deployment.unwrap_or((p.trace.end(), p.trace.end()));
        for d in &p.trace.dispatches {
            assert!(start <= d.arrive_at && d.send_at <= ready);
        }
    }

    #[test]
    fn unreachable_cluster_excluded() {
        let mut w = world();
        w.down.insert("fog3".into());
        let mut ce = engine("cloud1", OperationMode::CentralisedPrimary, "v3");
        let p = run(&mut ce, &mut w, vec![PlacementRequest::new("pr1", "app2", &["fog1"])]);
        let c = p.trace.collection.unwrap();
        assert_eq!(c.timed_out, vec!["fog3"]);
        assert_eq!(c.round_trips.len(), 2);
    }

    #[test]
    fn empty_batch_is_noop() {
        let mut w = world();
        let mut ce = engine("fog1", OperationMode::Distributed, "v2");
        let p = run(&mut ce, &mut w, vec![]);
        assert!(p.actions.is_empty());
        assert_eq!(p.trace.steps().len(), 4);
    }

    #[test]
    fn unknown_app_requeued_then_rejected() {
        let mut w = world();
        let mut ce = engine("fog1", OperationMode::Distributed, "v2");
        let p = run(&mut ce, &mut w, vec![PlacementRequest::new("pr1", "nope", &["fog1"])]);
        let Action::Requeue { pr } = &p.actions[0] else { panic!("{:?}", p.actions) };
        let p = run(&mut ce, &mut w, vec![pr.clone()]);
        assert!(matches!(&p.actions[0], Action::Reject { .. }));
    }

    #[test]
    fn fp2_goes_to_cloud() {
        let f = TopologyConfig::testbed().build().unwrap();
        let mut pr = PlacementRequest::new("pr1", "app2", &["fog1"]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(forward_pr(&mut pr, ForwardingPolicy::Cloud, &f, "fog1", &mut rng).unwrap(), "cloud1");
        assert_eq!(pr.hop_count, 1);
        assert_eq!(pr.visited_clusters, vec!["fog1"]);
    }

    #[test]
    fn fp1_never_revisits_and_falls_back() {
        let f = TopologyConfig::testbed().build().unwrap();
        let mut pr = PlacementRequest::new("pr1", "app2", &["fog1"]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(forward_pr(&mut pr, ForwardingPolicy::RandomFog, &f, "fog1", &mut rng).unwrap(), "fog2");
        assert_eq!(forward_pr(&mut pr, ForwardingPolicy::RandomFog, &f, "fog2", &mut rng).unwrap(), "fog3");
        assert_eq!(forward_pr(&mut pr, ForwardingPolicy::RandomFog, &f, "fog3", &mut rng).unwrap(), "cloud1");
        assert!(matches!(
            forward_pr(&mut pr, ForwardingPolicy::RandomFog, &f, "cloud1", &mut rng),
            Err(CeError::NoForwardTarget(_))
        ));
        assert_eq!(pr.visited_clusters, vec!["fog1", "fog2", "fog3"]);
        assert_eq!(pr.hop_count, 3);
    }

    #[test]
    fn fp1_seeded_choice_repeats() {
        let mut cfg = TopologyConfig::testbed();
        cfg.clusters[1].adjacent_fog = vec!["fog1".into(), "fog3".into()];
        let f = cfg.build().unwrap();
        let pick = |seed| {
            let mut pr = PlacementRequest::new("pr1", "app2", &["fog2"]);
            forward_pr(&mut pr, ForwardingPolicy::RandomFog, &f, "fog2", &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
        };
        assert_eq!(pick(7), pick(7));
    }

    #[test]
    fn no_neighbours_no_target() {
        let mut cfg = TopologyConfig::testbed();
        cfg.clusters.retain(|c| c.name == "fog1");
        cfg.clusters[0].adjacent_fog.clear();
        cfg.clusters[0].adjacent_cloud.clear();
        let f = cfg.build().unwrap();
        let mut pr = PlacementRequest::new("pr1", "app2", &["fog1"]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(forward_pr(&mut pr, ForwardingPolicy::RandomFog, &f, "fog1", &mut rng).is_err());
    }

    fn plan(ms: &str, cluster: &str, node: &str, cpu: f64) -> InstancePlan {
        InstancePlan {
            pr_id: "pr1".into(),
            application_id: "app2".into(),
            ms_id: ms.into(),
            cluster: cluster.into(),
            node_name: node.into(),
            cpu,
            mem: 1,
            replica_index: 0,
            status: Default::default(),
        }
    }

    #[test]
    fn lb_waits_for_instances_and_consumers() {
        let f = TopologyConfig::testbed().build().unwrap();
        let app = canned("app2").unwrap();
        let mut tracker = LbTracker::default();
        let mut pr = PlacementRequest::new("pr1", "app2", &["fog1"]);
        let unit = app.microservice("a2m2").unwrap().ref_cpu;
        let (need, _) = required_instances(app.microservice("a2m2").unwrap(), pr.demand(&app, "a2m2"));
        assert!(need >= 2);
        pr.merge_plans([plan("a2m2", "fog1", "fog1-worker3", unit)]);
        assert!(track_lb(&mut tracker, &mut pr, &app, &f).is_empty());
        let a1 = app.microservice("a2m1").unwrap();
        let (n1, (c1, _)) = required_instances(a1, pr.demand(&app, "a2m1"));
        pr.merge_plans([plan("a2m1", "fog1", "fog1-worker2", c1 * n1 as f64)]);
        let d = track_lb(&mut tracker, &mut pr, &app, &f);
        // root is ready with its entry cluster as consumer; a2m2 still short
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].ms_id, "a2m1");
        assert_eq!(d[0].targets.keys().collect::<Vec<_>>(), vec!["fog1"]);
        pr.merge_plans([plan("a2m2", "fog2", "fog2-worker1", unit * (need - 1) as f64)]);
        let d = track_lb(&mut tracker, &mut pr, &app, &f);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].ms_id, "a2m2");
        assert_eq!(d[0].targets.keys().collect::<Vec<_>>(), vec!["fog1", "fog2"]);
        assert!(track_lb(&mut tracker, &mut pr, &app, &f).is_empty());
    }

    #[test]
    fn relay_clusters_become_composition_only() {
        let f = TopologyConfig::testbed().build().unwrap();
        let app = canned("hcapp").unwrap();
        let mut tracker = LbTracker::default();
        let mut pr = PlacementRequest::new("pr1", "hcapp", &["fog1"]);
        for m in &app.microservices {
            let (n, (c, _)) = required_instances(m, pr.demand(&app, &m.ms_id));
            let cluster = if m.ms_id == "hcm1" { "fog1" } else { "fog3" };
            let mut p = plan(&m.ms_id, cluster, "n", c * n as f64);
            p.application_id = "hcapp".into();
            pr.merge_plans([p]);
        }
        let d = track_lb(&mut tracker, &mut pr, &app, &f);
        let hcm2 = d.iter().find(|x| x.ms_id == "hcm2").unwrap();
        assert_eq!(hcm2.targets.get("fog2"), Some(&true));
        assert_eq!(pr.composition_only_placements["hcm2"], vec!["fog2"]);
    }

    #[test]
    fn config_from_toml_and_env() {
        let mut cfg = CeConfig::from_toml(
            "clusterName = \"fog1\"\noperationMode = \"centralised-primary\"\nbatching = \"sequential\"\nforwardingPolicy = \"fp2\"\n\n[placementMode]\nkind = \"periodic\"\nperiodMs = 500.0\n",
        )
        .unwrap();
        assert_eq!(cfg.operation_mode, OperationMode::CentralisedPrimary);
        assert_eq!(cfg.forwarding_policy, ForwardingPolicy::Cloud);
        assert_eq!(cfg.placement_mode, PlacementMode::Periodic { period_ms: 500.0 });
        cfg.apply_env([("FOGMESH_CLUSTER", "fog2"), ("FOGMESH_SEED", "9"), ("FOGMESH_MODE", "distributed"), ("HOME", "/")])
            .unwrap();
        assert_eq!(cfg.cluster_name, "fog2");
        assert_eq!(cfg.rng_seed, 9);
        assert_eq!(cfg.operation_mode, OperationMode::Distributed);
        assert!(cfg.apply_env([("FOGMESH_MODE", "sideways")]).is_err());
        let err = CeConfig::from_toml("clusterName = \"fog1\"\nbatching = 3\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
