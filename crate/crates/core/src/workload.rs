//! Mock application generator and the two canned example applications.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::app_model::{Application, CompositeService, DataFlow, DataPath, EdgeRef, Microservice, QosRequirement};

const MIB: u64 = 1 << 20;

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("unknown canned application `{0}`")]
    UnknownApplication(String),
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
}

/// One step of a hybrid recipe, applied to the current tail microservice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "stage", content = "n")]
pub enum Stage {
    /// Append a chain of `n` microservices behind the tail.
    Chain(usize),
    /// Fan the tail out to `n` leaf microservices.
    FanOut(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Pattern {
    Chained { length: usize },
    /// Entry microservice calling an aggregator that fans out to leaves.
    Aggregator { fan_out: usize },
    Hybrid { recipe: Vec<Stage> },
    /// One entry microservice shared by several two-member services.
    Candidate { services: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GeneratorSpec {
    pub app_id: String,
    pub pattern: Pattern,
    pub processing_time_ms: (f64, f64),
    pub message_size: (u64, u64),
    pub ref_throughput: (f64, f64),
    pub ref_cpu: (f64, f64),
    pub ref_memory: (u64, u64),
    pub required_throughput: (f64, f64),
    pub latency_budget_ms: f64,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn new(app_id: impl Into<String>, pattern: Pattern, seed: u64) -> Self {
        Self {
            app_id: app_id.into(),
            pattern,
            processing_time_ms: (5.0, 20.0),
            message_size: (256, 4096),
            ref_throughput: (10.0, 50.0),
            ref_cpu: (0.1, 0.5),
            ref_memory: (64 * MIB, 512 * MIB),
            required_throughput: (5.0, 40.0),
            latency_budget_ms: 200.0,
            seed,
        }
    }

    fn check(&self) -> Result<(), WorkloadError> {
        fn range(name: &str, lo: f64, hi: f64) -> Result<(), WorkloadError> {
            if lo > 0.0 && lo <= hi && hi.is_finite() {
                Ok(())
            } else {
                Err(WorkloadError::InvalidSpec(format!("{name} range must be positive and ordered")))
            }
        }
        range("refThroughput", self.ref_throughput.0, self.ref_throughput.1)?;
        range("refCpu", self.ref_cpu.0, self.ref_cpu.1)?;
        range("requiredThroughput", self.required_throughput.0, self.required_throughput.1)?;
        range("refMemory", self.ref_memory.0 as f64, self.ref_memory.1 as f64)?;
        if !(self.processing_time_ms.0 >= 0.0 && self.processing_time_ms.0 <= self.processing_time_ms.1) {
            return Err(WorkloadError::InvalidSpec("processing time range".into()));
        }
        if self.message_size.0 > self.message_size.1 {
            return Err(WorkloadError::InvalidSpec("message size range".into()));
        }
        if !(self.latency_budget_ms > 0.0) {
            return Err(WorkloadError::InvalidSpec("latency budget must be positive".into()));
        }
        let size_ok = match &self.pattern {
            Pattern::Chained { length } => *length >= 1,
            Pattern::Aggregator { fan_out } => *fan_out >= 1,
            Pattern::Hybrid { recipe } => recipe.iter().all(|s| matches!(s, Stage::Chain(n) | Stage::FanOut(n) if *n >= 1)),
            Pattern::Candidate { services } => *services >= 1,
        };
        if !size_ok {
            return Err(WorkloadError::InvalidSpec("pattern sizes must be at least 1".into()));
        }
        Ok(())
    }
}

struct Builder<'a> {
    spec: &'a GeneratorSpec,
    rng: ChaCha8Rng,
    app: Application,
}

impl Builder<'_> {
    fn add_ms(&mut self) -> String {
        let s = self.spec;
        let id = format!("{}-m{}", s.app_id, self.app.microservices.len() + 1);
        let ref_memory = self.rng.gen_range(s.ref_memory.0..=s.ref_memory.1);
        let m = Microservice {
            ms_id: id.clone(),
            ref_cpu: quantize(self.rng.gen_range(s.ref_cpu.0..=s.ref_cpu.1), 0.05),
            ref_memory,
            ref_throughput: quantize(self.rng.gen_range(s.ref_throughput.0..=s.ref_throughput.1), 1.0),
            processing_time_ms: quantize(self.rng.gen_range(s.processing_time_ms.0..=s.processing_time_ms.1), 0.5),
            image_ref: format!("fogmesh/template-ms:{id}"),
        };
        self.app.deployment_resources.insert(id.clone(), default_template_refs(&s.app_id, &id));
        self.app.microservices.push(m);
        id
    }

    fn add_flow(&mut self, source: &str, target: &str) -> EdgeRef {
        let size = self.rng.gen_range(self.spec.message_size.0..=self.spec.message_size.1);
        self.app.dataflows.push(DataFlow {
            source: source.into(),
            target: target.into(),
            message_size: size,
            bidirectional: true,
        });
        EdgeRef::new(source, target)
    }

    fn add_service(&mut self, members: Vec<String>, data_paths: Vec<DataPath>) {
        let s = self.spec;
        let tp = quantize(self.rng.gen_range(s.required_throughput.0..=s.required_throughput.1), 1.0);
        let id = format!("{}-s{}", s.app_id, self.app.services.len() + 1);
        self.app.services.push(CompositeService {
            service_id: id,
            members,
            data_paths,
            qos_parameters: QosRequirement {
                latency_budget_ms: s.latency_budget_ms,
                required_throughput: tp.max(s.required_throughput.0),
                tier_restriction: None,
            },
        });
    }
}

fn quantize(x: f64, step: f64) -> f64 {
    ((x / step).round() * step).max(step)
}

/// Deterministic under `spec.seed`; the result always passes validation.
pub fn generate(spec: &GeneratorSpec) -> Result<Application, WorkloadError> {
    spec.check()?;
    let mut b = Builder {
        spec,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        app: Application {
            app_id: spec.app_id.clone(),
            microservices: Vec::new(),
            dataflows: Vec::new(),
            services: Vec::new(),
            deployment_resources: BTreeMap::new(),
        },
    };
    match &spec.pattern {
        Pattern::Chained { length } => {
            let ids: Vec<String> = (0..*length).map(|_| b.add_ms()).collect();
            let edges = ids.windows(2).map(|w| b.add_flow(&w[0], &w[1])).collect();
            b.add_service(ids, vec![DataPath { edges }]);
        }
        Pattern::Aggregator { fan_out } => {
            let entry = b.add_ms();
            let agg = b.add_ms();
            let first = b.add_flow(&entry, &agg);
            let mut members = vec![entry, agg.clone()];
            let mut paths = Vec::new();
            for _ in 0..*fan_out {
                let leaf = b.add_ms();
                let e = b.add_flow(&agg, &leaf);
                paths.push(DataPath {
                    edges: vec![first.clone(), e],
                });
                members.push(leaf);
            }
            b.add_service(members, paths);
        }
        Pattern::Hybrid { recipe } => {
            let root = b.add_ms();
            let mut members = vec![root.clone()];
            let mut tail = root;
            let mut spine: Vec<EdgeRef> = Vec::new();
            let mut branches: Vec<Vec<EdgeRef>> = Vec::new();
            let mut tail_fanned = false;
            for stage in recipe {
                match *stage {
                    Stage::Chain(n) => {
                        for _ in 0..n {
                            let next = b.add_ms();
                            spine.push(b.add_flow(&tail, &next));
                            members.push(next.clone());
                            tail = next;
                        }
                        tail_fanned = false;
                    }
                    Stage::FanOut(n) => {
                        for _ in 0..n {
                            let leaf = b.add_ms();
                            let mut p = spine.clone();
                            p.push(b.add_flow(&tail, &leaf));
                            branches.push(p);
                            members.push(leaf);
                        }
                        tail_fanned = true;
                    }
                }
            }
            let mut paths: Vec<DataPath> = branches.into_iter().map(|edges| DataPath { edges }).collect();
            // the spine is itself a root-to-leaf path when it grew past the last fan-out
            if !tail_fanned && !spine.is_empty() {
                paths.push(DataPath { edges: spine });
            }
            b.add_service(members, paths);
        }
        Pattern::Candidate { services } => {
            let shared = b.add_ms();
            for _ in 0..*services {
                let leaf = b.add_ms();
                let e = b.add_flow(&shared, &leaf);
                b.add_service(vec![shared.clone(), leaf], vec![DataPath { edges: vec![e] }]);
            }
        }
    }
    Ok(b.app)
}

pub fn default_template_refs(app_id: &str, ms_id: &str) -> Vec<String> {
    ["pod", "service", "route"]
        .iter()
        .map(|k| format!("{app_id}/{ms_id}/{k}"))
        .collect()
}

struct MsDef {
    id: &'static str,
    cpu: f64,
    mem_mib: u64,
    throughput: f64,
    proc_ms: f64,
}

fn canned_app(app_id: &str, defs: &[MsDef], flows: &[(&str, &str, u64)], services: Vec<CompositeService>) -> Application {
    Application {
        app_id: app_id.into(),
        microservices: defs
            .iter()
            .map(|d| Microservice {
                ms_id: d.id.into(),
                ref_cpu: d.cpu,
                ref_memory: d.mem_mib * MIB,
                ref_throughput: d.throughput,
                processing_time_ms: d.proc_ms,
                image_ref: format!("fogmesh/template-ms:{}", d.id),
            })
            .collect(),
        dataflows: flows
            .iter()
            .map(|(s, t, size)| DataFlow {
                source: (*s).into(),
                target: (*t).into(),
                message_size: *size,
                bidirectional: true,
            })
            .collect(),
        services,
        deployment_resources: defs
            .iter()
            .map(|d| (d.id.to_string(), default_template_refs(app_id, d.id)))
            .collect(),
    }
}

fn service(id: &str, members: &[&str], paths: &[&[(&str, &str)]], budget: f64, tp: f64) -> CompositeService {
    CompositeService {
        service_id: id.into(),
        members: members.iter().map(|s| s.to_string()).collect(),
        data_paths: paths
            .iter()
            .map(|p| DataPath {
                edges: p.iter().map(|(s, t)| EdgeRef::new(*s, *t)).collect(),
            })
            .collect(),
        qos_parameters: QosRequirement {
            latency_budget_ms: budget,
            required_throughput: tp,
            tier_restriction: None,
        },
    }
}

/// The two example applications. Resource and throughput figures are
/// calibrated against the reference testbed so that single vertically
/// scaled instances overflow the fog nodes while reference-size replicas
/// fit; see `TABLE3_BACKGROUND` in the simulation presets.
pub fn canned(name: &str) -> Result<Application, WorkloadError> {
    match name {
        "hcapp" => Ok(canned_app(
            "hcapp",
            &[
                MsDef { id: "hcm1", cpu: 0.5, mem_mib: 1024, throughput: 20.0, proc_ms: 5.0 },
                MsDef { id: "hcm2", cpu: 0.25, mem_mib: 256, throughput: 5.0, proc_ms: 10.0 },
                MsDef { id: "hcm3", cpu: 2.0, mem_mib: 8192, throughput: 10.0, proc_ms: 6.0 },
            ],
            &[("hcm1", "hcm2", 2048), ("hcm1", "hcm3", 8192)],
            vec![
                service("S1", &["hcm1", "hcm2"], &[&[("hcm1", "hcm2")]], 100.0, 30.0),
                service("S2", &["hcm1", "hcm3"], &[&[("hcm1", "hcm3")]], 1000.0, 10.0),
            ],
        )),
        "app2" => Ok(canned_app(
            "app2",
            &[
                MsDef { id: "a2m1", cpu: 0.5, mem_mib: 512, throughput: 40.0, proc_ms: 25.0 },
                MsDef { id: "a2m2", cpu: 0.25, mem_mib: 512, throughput: 10.0, proc_ms: 35.0 },
                MsDef { id: "a2m3", cpu: 1.0, mem_mib: 1536, throughput: 40.0, proc_ms: 35.0 },
                MsDef { id: "a2m4", cpu: 0.5, mem_mib: 512, throughput: 40.0, proc_ms: 35.0 },
            ],
            &[("a2m1", "a2m2", 1024), ("a2m2", "a2m3", 1024), ("a2m2", "a2m4", 1024)],
            vec![service(
                "app2-s1",
                &["a2m1", "a2m2", "a2m3", "a2m4"],
                &[&[("a2m1", "a2m2"), ("a2m2", "a2m3")], &[("a2m1", "a2m2"), ("a2m2", "a2m4")]],
                150.0,
                40.0,
            )],
        )),
        other => Err(WorkloadError::UnknownApplication(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::app_model::{service_paths, validate};
    use proptest::prelude::*;

    #[test]
    fn chained_two() {
        let app = generate(&GeneratorSpec::new("c", Pattern::Chained { length: 2 }, 1)).unwrap();
        assert_eq!(app.microservices.len(), 2);
        assert_eq!(app.dataflows.len(), 1);
        assert_eq!(app.services.len(), 1);
        assert_eq!(app.services[0].data_paths.len(), 1);
        assert!(validate(&app).is_valid());
    }

    #[test]
    fn aggregator_two_matches_app2_shape() {
        let app = generate(&GeneratorSpec::new("g", Pattern::Aggregator { fan_out: 2 }, 1)).unwrap();
        let canned = canned("app2").unwrap();
        assert_eq!(app.microservices.len(), canned.microservices.len());
        assert_eq!(app.dataflows.len(), canned.dataflows.len());
        assert_eq!(service_paths(&app, &app.services[0]).len(), 2);
        assert!(validate(&app).is_valid());
    }

    #[test]
    fn same_seed_same_app() {
        let spec = GeneratorSpec::new("x", Pattern::Hybrid { recipe: vec![Stage::Chain(2), Stage::FanOut(3)] }, 42);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = GeneratorSpec { seed: 43, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn canned_apps() {
        let hc = canned("hcapp").unwrap();
        assert_eq!(hc.services.len(), 2);
        assert_eq!(hc.roots(), vec!["hcm1"]);
        assert!(hc.services.iter().all(|s| s.members.contains(&"hcm1".to_string())));
        let a2 = canned("app2").unwrap();
        assert_eq!(a2.services.len(), 1);
        assert_eq!(a2.microservices.len(), 4);
        assert_eq!(canned("x"), Err(WorkloadError::UnknownApplication("x".into())));
    }

    #[test]
    fn bad_spec_rejected() {
        let mut spec = GeneratorSpec::new("x", Pattern::Chained { length: 3 }, 1);
        spec.ref_cpu = (0.0, 1.0);
        assert!(generate(&spec).is_err());
        let spec = GeneratorSpec::new("x", Pattern::Chained { length: 0 }, 1);
        assert!(generate(&spec).is_err());
    }

    pub(crate) fn pattern() -> impl Strategy<Value = Pattern> {
        prop_oneof![
            (1usize..8).prop_map(|length| Pattern::Chained { length }),
            (1usize..5).prop_map(|fan_out| Pattern::Aggregator { fan_out }),
            (1usize..4).prop_map(|services| Pattern::Candidate { services }),
            proptest::collection::vec(
                prop_oneof![(1usize..3).prop_map(Stage::Chain), (1usize..3).prop_map(Stage::FanOut)],
                1..4
            )
            .prop_map(|recipe| Pattern::Hybrid { recipe }),
        ]
    }

    proptest! {
        #[test]
        fn generated_apps_validate(p in pattern(), seed in any::<u64>()) {
            let app = generate(&GeneratorSpec::new("p", p.clone(), seed)).unwrap();
            prop_assert!(validate(&app).is_valid(), "{:?}", validate(&app));
            if let Pattern::Chained { length } = p {
                prop_assert_eq!(app.microservices.len(), length);
                prop_assert_eq!(app.dataflows.len(), length - 1);
            }
            for s in &app.services {
                for path in service_paths(&app, s) {
                    for e in &path.edges {
                        prop_assert!(app.flow(&e.source, &e.target).is_some());
                    }
                }
            }
        }
    }
}
