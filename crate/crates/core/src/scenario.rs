//! Scenario files: topology, engines, seed data and scripted submissions,
//! faults and traffic.
//!
//! A file holds one or more `[[scenario]]` tables, each run on a fresh
//! simulation, plus optional `[[comparison]]` tables relating the mean
//! response times of two scenarios.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::app_model::Application;
use crate::control_engine::{Batching, CeConfig, ForwardingPolicy, OperationMode, PlacementMode, Timing};
use crate::fabric::{NodeConfig, TopologyConfig};
use crate::placement::{AlgorithmRegistry, PlacementRequest};
use crate::simulation::{Fault, PrStatus, SimConfig, SimError, Simulation, Summary};
use crate::stores::StoreConfig;
use crate::workload::{canned, generate, GeneratorSpec, Pattern};

const MIB: u64 = 1 << 20;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("scenario `{scenario}`: {message}")]
    Invalid { scenario: String, message: String },
    #[error("scenario `{scenario}`: {source}")]
    Sim {
        scenario: String,
        #[source]
        source: SimError,
    },
}

/// `line N, column M: message` for a TOML parse error.
pub fn describe_toml_error(text: &str, err: &toml::de::Error) -> String {
    match err.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
            format!("line {line}, column {col}: {}", err.message())
        }
        None => err.message().to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(rename = "scenario")]
    pub scenarios: Vec<ScenarioSpec>,
    #[serde(default, rename = "comparison")]
    pub comparisons: Vec<Comparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ScenarioSpec {
    pub id: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub topology: TopologySpec,
    #[serde(default)]
    pub engines: EngineSpec,
    #[serde(default)]
    pub stores: StoreConfig,
    #[serde(default)]
    pub timing: Timing,
    #[serde(default)]
    pub ms_per_byte: f64,
    /// Directory of application and template documents to seed, relative
    /// to the scenario file.
    #[serde(default)]
    pub seed_data: Option<PathBuf>,
    /// Canned applications to seed.
    #[serde(default)]
    pub apps: Vec<String>,
    #[serde(default)]
    pub workload: Vec<WorkloadSpec>,
    #[serde(default)]
    pub submit: Vec<SubmitSpec>,
    #[serde(default)]
    pub fault: Vec<FaultSpec>,
    #[serde(default)]
    pub traffic: Vec<TrafficSpec>,
    #[serde(default)]
    pub probe: Vec<ProbeSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Capacity {
    pub cpu: f64,
    pub memory_mib: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct TopologySpec {
    /// Built-in topology; `testbed` when neither preset nor file is given.
    pub preset: Option<String>,
    /// JSON topology document, relative to the scenario file.
    pub file: Option<PathBuf>,
    /// Capacity left free on a node by workloads outside the simulation.
    #[serde(default)]
    pub free: BTreeMap<String, Capacity>,
    /// Capacity taken on a node by workloads outside the simulation.
    #[serde(default)]
    pub reserve: BTreeMap<String, Capacity>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Distributed,
    Centralised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct EngineSpec {
    pub mode: Mode,
    pub primary: String,
    pub algorithm: String,
    pub forwarding: ForwardingPolicy,
    pub placement_mode: PlacementMode,
    pub batching: Batching,
    pub external_algo_url: Option<String>,
    /// Full per-cluster settings replacing the generated ones.
    #[serde(rename = "engine")]
    pub overrides: Vec<CeConfig>,
}

impl Default for EngineSpec {
    fn default() -> Self {
        Self {
            mode: Mode::Distributed,
            primary: "cloud1".into(),
            algorithm: "v2".into(),
            forwarding: ForwardingPolicy::RandomFog,
            placement_mode: PlacementMode::EventDriven,
            batching: Batching::Batch,
            external_algo_url: None,
            overrides: Vec::new(),
        }
    }
}

/// A family of generated applications named `<prefix>-1 .. <prefix>-count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct WorkloadSpec {
    pub prefix: String,
    pub count: usize,
    pub pattern: Pattern,
    #[serde(default)]
    pub seed: u64,
    pub ref_cpu: Option<(f64, f64)>,
    pub ref_memory_mib: Option<(u64, u64)>,
    pub ref_throughput: Option<(f64, f64)>,
    pub required_throughput: Option<(f64, f64)>,
    pub processing_time_ms: Option<(f64, f64)>,
}

impl WorkloadSpec {
    pub fn app_ids(&self) -> Vec<String> {
        (1..=self.count).map(|i| format!("{}-{i}", self.prefix)).collect()
    }

    pub fn generate(&self) -> Result<Vec<Application>, crate::workload::WorkloadError> {
        self.app_ids()
            .into_iter()
            .enumerate()
            .map(|(i, id)| {
                let mut spec = GeneratorSpec::new(id, self.pattern.clone(), self.seed.wrapping_add(i as u64));
                if let Some(r) = self.ref_cpu {
                    spec.ref_cpu = r;
                }
                if let Some((lo, hi)) = self.ref_memory_mib {
                    spec.ref_memory = (lo * MIB, hi * MIB);
                }
                if let Some(r) = self.ref_throughput {
                    spec.ref_throughput = r;
                }
                if let Some(r) = self.required_throughput {
                    spec.required_throughput = r;
                }
                if let Some(r) = self.processing_time_ms {
                    spec.processing_time_ms = r;
                }
                generate(&spec)
            })
            .collect()
    }
}

fn default_expect() -> PrStatus {
    PrStatus::Deployed
}

/// Timed placement requests. `app` submits one request; `workload` submits
/// one per generated application, spreading them over `entry` in turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SubmitSpec {
    #[serde(default)]
    pub at: f64,
    pub app: Option<String>,
    pub workload: Option<String>,
    pub entry: Vec<String>,
    /// Receiving engine; defaults to the request's entry cluster.
    pub cluster: Option<String>,
    #[serde(default = "default_expect")]
    pub expect: PrStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FaultSpec {
    pub at: f64,
    #[serde(flatten)]
    pub fault: Fault,
}

/// Request replay. Without `service`, `requests` are split over the
/// application's services in proportion to their required throughput.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct TrafficSpec {
    /// Start time; after all placement activity settles when absent.
    pub at: Option<f64>,
    pub app: String,
    pub service: Option<String>,
    pub requests: usize,
    pub entry: String,
    /// Offered rate as a fraction of the services' required throughput.
    #[serde(default = "full_load")]
    pub load: f64,
}

fn full_load() -> f64 {
    1.0
}

/// A timed read of an application's metadata and templates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ProbeSpec {
    pub at: Option<f64>,
    pub label: String,
    pub app: String,
    pub from: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Comparison {
    pub name: String,
    pub app: String,
    pub baseline: String,
    pub candidate: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PlacedMicroservice {
    pub nodes: Vec<String>,
    pub clusters: Vec<String>,
    /// Reference units per node, reduced, e.g. `1:2:1`.
    pub ratio: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScenarioOutcome {
    pub id: String,
    pub placements: BTreeMap<String, BTreeMap<String, PlacedMicroservice>>,
    /// Throughput-weighted mean response time per application.
    pub app_means: BTreeMap<String, f64>,
    pub unexpected: Vec<String>,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ComparisonOutcome {
    pub name: String,
    pub baseline_ms: f64,
    pub candidate_ms: f64,
    pub improvement_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Report {
    pub scenarios: Vec<ScenarioOutcome>,
    pub comparisons: Vec<ComparisonOutcome>,
}

impl Report {
    pub fn scenario(&self, id: &str) -> Option<&ScenarioOutcome> {
        self.scenarios.iter().find(|s| s.id == id)
    }

    pub fn comparison(&self, name: &str) -> Option<&ComparisonOutcome> {
        self.comparisons.iter().find(|c| c.name == name)
    }

    /// True when every request ended the way its script expected.
    pub fn as_expected(&self) -> bool {
        self.scenarios.iter().all(|s| s.unexpected.is_empty())
    }
}

impl ScenarioFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ScenarioError> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| ScenarioError::Parse {
            path: path.to_path_buf(),
            message: describe_toml_error(text, &e),
        })?;
        if file.scenarios.is_empty() {
            return Err(ScenarioError::Parse {
                path: path.to_path_buf(),
                message: "no [[scenario]] tables".into(),
            });
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn node_mut<'a>(topo: &'a mut TopologyConfig, name: &str) -> Option<&'a mut NodeConfig> {
    topo.clusters
        .iter_mut()
        .flat_map(|c| c.nodes.iter_mut())
        .find(|n| n.name == name)
}

fn invalid(spec: &ScenarioSpec, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        scenario: spec.id.clone(),
        message: message.into(),
    }
}

impl ScenarioSpec {
    pub fn topology(&self, base: &Path) -> Result<TopologyConfig, ScenarioError> {
        let mut topo = match (&self.topology.preset, &self.topology.file) {
            (Some(_), Some(_)) => return Err(invalid(self, "topology takes either preset or file")),
            (None, Some(file)) => {
                let path = base.join(file);
                let text = std::fs::read_to_string(&path).map_err(|source| ScenarioError::Io {
                    path: path.clone(),
                    source,
                })?;
                TopologyConfig::from_json(&text).map_err(|e| ScenarioError::Parse {
                    path,
                    message: format!("line {}, column {}: {e}", e.line(), e.column()),
                })?
            }
            (Some(p), None) if p == "testbed" => TopologyConfig::testbed(),
            (Some(p), None) => return Err(invalid(self, format!("unknown topology preset `{p}`"))),
            (None, None) => TopologyConfig::testbed(),
        };
        for (name, cap) in &self.topology.free {
            let n = node_mut(&mut topo, name).ok_or_else(|| invalid(self, format!("unknown node `{name}`")))?;
            let mem = cap.memory_mib * MIB;
            if cap.cpu > n.cpu || mem > n.memory || cap.cpu < 0.0 {
                return Err(invalid(self, format!("node `{name}` cannot have more free than its capacity")));
            }
            n.reserved_cpu = n.cpu - cap.cpu;
            n.reserved_memory = n.memory - mem;
        }
        for (name, cap) in &self.topology.reserve {
            let n = node_mut(&mut topo, name).ok_or_else(|| invalid(self, format!("unknown node `{name}`")))?;
            n.reserved_cpu += cap.cpu;
            n.reserved_memory += cap.memory_mib * MIB;
        }
        Ok(topo)
    }

    fn engines(&self, topo: &TopologyConfig) -> Vec<CeConfig> {
        let e = &self.engines;
        topo.clusters
            .iter()
            .map(|c| {
                if let Some(o) = e.overrides.iter().find(|o| o.cluster_name == c.name) {
                    return o.clone();
                }
                let operation_mode = match (e.mode, c.name == e.primary) {
                    (Mode::Distributed, _) => OperationMode::Distributed,
                    (Mode::Centralised, true) => OperationMode::CentralisedPrimary,
                    (Mode::Centralised, false) => OperationMode::CentralisedSecondary,
                };
                CeConfig {
                    operation_mode,
                    placement_mode: e.placement_mode,
                    batching: e.batching,
                    algorithm_name: e.algorithm.clone(),
                    forwarding_policy: e.forwarding,
                    external_algo_url: e.external_algo_url.clone(),
                    primary_cluster: (e.mode == Mode::Centralised).then(|| e.primary.clone()),
                    rng_seed: self.seed,
                    ..CeConfig::for_cluster(&c.name)
                }
            })
            .collect()
    }

    /// Simulation settings for this scenario. Relative paths resolve
    /// against `base`.
    pub fn sim_config(&self, base: &Path) -> Result<SimConfig, ScenarioError> {
        let topology = self.topology(base)?;
        Ok(SimConfig {
            scenario: self.id.clone(),
            seed: self.seed,
            engines: self.engines(&topology),
            topology,
            stores: self.stores.clone(),
            timing: self.timing.clone(),
            ms_per_byte: self.ms_per_byte,
        })
    }

    /// Builds and seeds the simulation without running anything.
    pub fn build(&self, base: &Path, registry: &AlgorithmRegistry) -> Result<(Simulation, BTreeMap<String, Application>), ScenarioError> {
        let sim_err = |source| ScenarioError::Sim {
            scenario: self.id.clone(),
            source,
        };
        let mut sim = Simulation::new(&self.sim_config(base)?, registry).map_err(sim_err)?;
        let mut apps = BTreeMap::new();
        if let Some(dir) = &self.seed_data {
            let ids = sim
                .stores_mut()
                .seed_from_dir(&base.join(dir))
                .map_err(|e| sim_err(e.into()))?;
            for id in ids {
                if let Some(app) = sim.application(&id) {
                    apps.insert(id, app);
                }
            }
        }
        for name in &self.apps {
            let app = canned(name).map_err(|e| invalid(self, e.to_string()))?;
            sim.seed_application(&app);
            apps.insert(app.app_id.clone(), app);
        }
        for w in &self.workload {
            for app in w.generate().map_err(|e| invalid(self, e.to_string()))? {
                sim.seed_application(&app);
                apps.insert(app.app_id.clone(), app);
            }
        }
        Ok((sim, apps))
    }

    /// Runs the scenario to quiescence. With `out_dir`, per-scenario
    /// metrics land in `out_dir/<id>/`.
    pub fn run(&self, base: &Path, registry: &AlgorithmRegistry, out_dir: Option<&Path>) -> Result<ScenarioOutcome, ScenarioError> {
        let sim_err = |source| ScenarioError::Sim {
            scenario: self.id.clone(),
            source,
        };
        let (mut sim, apps) = self.build(base, registry)?;

        let mut expected: Vec<(String, PrStatus)> = Vec::new();
        for s in &self.submit {
            if s.entry.is_empty() {
                return Err(invalid(self, "submit needs at least one entry cluster"));
            }
            let targets: Vec<(String, Vec<String>)> = match (&s.app, &s.workload) {
                (Some(app), None) => vec![(app.clone(), s.entry.clone())],
                (None, Some(w)) => {
                    let w = self
                        .workload
                        .iter()
                        .find(|x| &x.prefix == w)
                        .ok_or_else(|| invalid(self, format!("unknown workload `{w}`")))?;
                    w.app_ids()
                        .into_iter()
                        .enumerate()
                        .map(|(i, id)| (id, vec![s.entry[i % s.entry.len()].clone()]))
                        .collect()
                }
                _ => return Err(invalid(self, "submit takes exactly one of app or workload")),
            };
            for (app, entry) in targets {
                let entry_refs: Vec<&str> = entry.iter().map(String::as_str).collect();
                let pr = PlacementRequest::new("", app, &entry_refs);
                let header = s.cluster.clone().unwrap_or_else(|| entry[0].clone());
                let id = sim.submit_at(s.at, Some(&header), pr).map_err(sim_err)?;
                expected.push((id, s.expect));
            }
        }
        for f in &self.fault {
            sim.schedule_fault(f.at, f.fault.clone());
        }

        enum Step<'a> {
            Traffic(&'a TrafficSpec),
            Probe(&'a ProbeSpec),
        }
        let mut timed: Vec<(f64, Step)> = Vec::new();
        let mut settled: Vec<Step> = Vec::new();
        for t in &self.traffic {
            match t.at {
                Some(at) => timed.push((at, Step::Traffic(t))),
                None => settled.push(Step::Traffic(t)),
            }
        }
        for p in &self.probe {
            match p.at {
                Some(at) => timed.push((at, Step::Probe(p))),
                None => settled.push(Step::Probe(p)),
            }
        }
        timed.sort_by(|a, b| a.0.total_cmp(&b.0));

        let execute = |sim: &mut Simulation, step: &Step| -> Result<(), ScenarioError> {
            match step {
                Step::Traffic(t) => {
                    let app = apps
                        .get(&t.app)
                        .ok_or_else(|| invalid(self, format!("traffic for unknown app `{}`", t.app)))?;
                    let mix = traffic_mix(app, t.service.as_deref(), t.requests)
                        .ok_or_else(|| invalid(self, format!("unknown service in traffic for `{}`", t.app)))?;
                    sim.replay_mix(&t.app, &mix, &t.entry, t.load).map_err(sim_err)?;
                }
                Step::Probe(p) => {
                    sim.probe_stores(&p.label, &p.app, &p.from).map_err(sim_err)?;
                }
            }
            Ok(())
        };
        for (at, step) in &timed {
            sim.run_until(*at);
            execute(&mut sim, step)?;
        }
        sim.run();
        for step in &settled {
            execute(&mut sim, step)?;
        }

        let unexpected = expected
            .iter()
            .filter_map(|(id, want)| {
                let t = sim.timeline(id)?;
                (t.status != *want).then(|| {
                    format!(
                        "{id} ({}): expected {want:?}, ended {:?}{}",
                        t.application_id,
                        t.status,
                        t.reason.as_ref().map(|r| format!(": {r}")).unwrap_or_default()
                    )
                })
            })
            .collect();
        let outcome = ScenarioOutcome {
            id: self.id.clone(),
            placements: placements(&sim, &apps),
            app_means: apps
                .values()
                .filter_map(|a| Some((a.app_id.clone(), app_mean(&sim, a)?)))
                .collect(),
            unexpected,
            summary: sim.metrics().summary(),
        };
        if let Some(dir) = out_dir {
            let dir = dir.join(&self.id);
            let io = |source| ScenarioError::Io {
                path: dir.clone(),
                source,
            };
            sim.metrics().export(&dir, BTreeMap::new()).map_err(sim_err)?;
            std::fs::write(
                dir.join("placements.json"),
                serde_json::to_string_pretty(&outcome.placements).expect("serializes"),
            )
            .map_err(io)?;
            std::fs::write(dir.join("mesh.json"), sim.mesh().dump()).map_err(io)?;
            if !sim.metrics().store_accesses.is_empty() {
                let mut w = csv::Writer::from_path(dir.join("store_latency.csv"))
                    .map_err(|e| io(std::io::Error::other(e)))?;
                for a in &sim.metrics().store_accesses {
                    w.serialize(a).map_err(|e| io(std::io::Error::other(e)))?;
                }
                w.flush().map_err(io)?;
            }
        }
        Ok(outcome)
    }
}

fn traffic_mix(app: &Application, service: Option<&str>, requests: usize) -> Option<Vec<(String, usize)>> {
    if let Some(s) = service {
        app.service(s)?;
        return Some(vec![(s.to_string(), requests)]);
    }
    let total: f64 = app.services.iter().map(|s| s.qos_parameters.required_throughput).sum();
    Some(
        app.services
            .iter()
            .map(|s| {
                let share = s.qos_parameters.required_throughput / total;
                (s.service_id.clone(), (requests as f64 * share).round() as usize)
            })
            .collect(),
    )
}

/// Mean response time over an application's services, weighted by their
/// required throughput.
pub fn app_mean(sim: &Simulation, app: &Application) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for s in &app.services {
        let stats = sim.metrics().service_stats(&format!("{}/{}", app.app_id, s.service_id))?;
        if stats.mean_ms.is_nan() {
            return None;
        }
        num += stats.mean_ms * s.qos_parameters.required_throughput;
        den += s.qos_parameters.required_throughput;
    }
    (den > 0.0).then(|| num / den)
}

/// Deployed instances per application and microservice.
pub fn placements(sim: &Simulation, apps: &BTreeMap<String, Application>) -> BTreeMap<String, BTreeMap<String, PlacedMicroservice>> {
    let mut out: BTreeMap<String, BTreeMap<String, Vec<(String, String, f64)>>> = BTreeMap::new();
    for i in sim.mesh().instances() {
        out.entry(i.application_id.clone())
            .or_default()
            .entry(i.ms_id.clone())
            .or_default()
            .push((i.cluster.clone(), i.node.clone(), i.cpu));
    }
    out.into_iter()
        .map(|(app_id, per_ms)| {
            let app = apps.get(&app_id);
            let per_ms = per_ms
                .into_iter()
                .map(|(ms_id, mut inst)| {
                    inst.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));
                    let ref_cpu = app.and_then(|a| a.microservice(&ms_id)).map_or(1.0, |m| m.ref_cpu);
                    let units: Vec<u64> = inst.iter().map(|i| (i.2 / ref_cpu).round().max(1.0) as u64).collect();
                    let g = units.iter().copied().fold(0, gcd).max(1);
                    let mut clusters: Vec<String> = inst.iter().map(|i| i.0.clone()).collect();
                    clusters.dedup();
                    (
                        ms_id,
                        PlacedMicroservice {
                            nodes: inst.iter().map(|i| i.1.clone()).collect(),
                            clusters,
                            ratio: units.iter().map(|u| (u / g).to_string()).collect::<Vec<_>>().join(":"),
                        },
                    )
                })
                .collect();
            (app_id, per_ms)
        })
        .collect()
}

/// Runs every scenario in a file and evaluates its comparisons.
pub fn run_file(path: &Path, registry: &AlgorithmRegistry, out_dir: Option<&Path>) -> Result<Report, ScenarioError> {
    let file = ScenarioFile::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    run_scenarios(&file, base, registry, out_dir)
}

pub fn run_scenarios(file: &ScenarioFile, base: &Path, registry: &AlgorithmRegistry, out_dir: Option<&Path>) -> Result<Report, ScenarioError> {
    let mut scenarios = Vec::new();
    for s in &file.scenarios {
        if scenarios.iter().any(|o: &ScenarioOutcome| o.id == s.id) {
            return Err(invalid(s, "duplicate scenario id"));
        }
        scenarios.push(s.run(base, registry, out_dir)?);
    }
    let mut comparisons = Vec::new();
    for c in &file.comparisons {
        let mean = |id: &str| -> Result<f64, ScenarioError> {
            scenarios
                .iter()
                .find(|s| s.id == id)
                .and_then(|s| s.app_means.get(&c.app).copied())
                .ok_or_else(|| ScenarioError::Invalid {
                    scenario: id.to_string(),
                    message: format!("comparison `{}` has no response times for `{}`", c.name, c.app),
                })
        };
        let (b, k) = (mean(&c.baseline)?, mean(&c.candidate)?);
        comparisons.push(ComparisonOutcome {
            name: c.name.clone(),
            baseline_ms: b,
            candidate_ms: k,
            improvement_pct: 100.0 * (b - k) / b,
        });
    }
    let report = Report { scenarios, comparisons };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|source| ScenarioError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let brief = serde_json::json!({
            "scenarios": report.scenarios.iter().map(|s| serde_json::json!({
                "id": s.id,
                "appMeans": s.app_means,
                "totalCompletionMs": s.summary.total_completion_ms,
                "unexpected": s.unexpected,
            })).collect::<Vec<_>>(),
            "comparisons": report.comparisons,
        });
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&brief).expect("serializes")).map_err(
            |source| ScenarioError::Io {
                path: dir.join("report.json"),
                source,
            },
        )?;
    }
    Ok(report)
}
