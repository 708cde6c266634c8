//! Replicated metadata and resource-template stores. Writes go to a master
//! replica and reach the others after a sync delay; reads are served by the
//! nearest healthy replica.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::app_model::Application;
use crate::fabric::Fabric;
use crate::routing::{FailoverPolicy, RoutingError};
use crate::workload::default_template_refs;

#[derive(Debug, Error, PartialEq)]
pub enum StoreError {
    #[error("no record `{0}`")]
    NotFound(String),
    #[error("no healthy replica can serve `{0}`")]
    AllReplicasDown(String),
    #[error("master replica on {0} is down")]
    MasterDown(String),
    #[error("unknown cluster `{0}`")]
    UnknownCluster(String),
    #[error("seed data: {0}")]
    Seed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct StoreConfig {
    pub master: String,
    /// Replica clusters besides the master; empty means every cluster.
    pub replicas: Vec<String>,
    pub sync_delay_ms: f64,
    pub service_time_ms: f64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            master: "cloud1".into(),
            replicas: Vec::new(),
            sync_delay_ms: 10.0,
            service_time_ms: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Read<T> {
    pub value: T,
    pub version: u64,
    pub served_by: String,
    pub latency_ms: f64,
}

#[derive(Debug, Clone)]
struct PendingSync<V> {
    at: f64,
    cluster: String,
    key: String,
    version: u64,
    value: V,
}

#[derive(Debug, Clone)]
pub struct ReplicatedStore<V> {
    name: &'static str,
    master: String,
    replicas: BTreeMap<String, BTreeMap<String, (u64, V)>>,
    pending: Vec<PendingSync<V>>,
    health: FailoverPolicy,
    sync_delay_ms: f64,
    service_time_ms: f64,
}

impl<V: Clone> ReplicatedStore<V> {
    pub fn new(name: &'static str, fabric: &Fabric, cfg: &StoreConfig) -> Result<Self, StoreError> {
        if !fabric.contains(&cfg.master) {
            return Err(StoreError::UnknownCluster(cfg.master.clone()));
        }
        let mut clusters = if cfg.replicas.is_empty() {
            fabric.cluster_names()
        } else {
            cfg.replicas.clone()
        };
        if !clusters.contains(&cfg.master) {
            clusters.push(cfg.master.clone());
        }
        if let Some(c) = clusters.iter().find(|c| !fabric.contains(c)) {
            return Err(StoreError::UnknownCluster(c.clone()));
        }
        Ok(Self {
            name,
            master: cfg.master.clone(),
            replicas: clusters.into_iter().map(|c| (c, BTreeMap::new())).collect(),
            pending: Vec::new(),
            health: FailoverPolicy::default(),
            sync_delay_ms: cfg.sync_delay_ms,
            service_time_ms: cfg.service_time_ms,
        })
    }

    pub fn name(&self) -> &str {
        self.name
    }

    pub fn master(&self) -> &str {
        &self.master
    }

    pub fn replica_clusters(&self) -> Vec<String> {
        self.replicas.keys().cloned().collect()
    }

    pub fn set_health(&mut self, cluster: &str, healthy: bool) {
        if self.replicas.contains_key(cluster) {
            self.health.set_health(cluster, healthy);
        }
    }

    pub fn is_healthy(&self, cluster: &str) -> bool {
        self.replicas.contains_key(cluster) && self.health.is_healthy(cluster)
    }

    /// Writes to the master and schedules replication at `now + sync delay`.
    pub fn put(&mut self, key: &str, value: V, now: f64) -> Result<u64, StoreError> {
        if !self.health.is_healthy(&self.master) {
            return Err(StoreError::MasterDown(self.master.clone()));
        }
        self.sync(now);
        let master = self.replicas.get_mut(&self.master).expect("master is a replica");
        let version = master.get(key).map_or(1, |(v, _)| v + 1);
        master.insert(key.to_string(), (version, value.clone()));
        for c in self.replicas.keys().filter(|c| **c != self.master) {
            self.pending.push(PendingSync {
                at: now + self.sync_delay_ms,
                cluster: c.clone(),
                key: key.to_string(),
                version,
                value: value.clone(),
            });
        }
        Ok(version)
    }

    /// Writes straight into every replica; used for seeding before a run.
    pub fn seed(&mut self, key: &str, value: V) {
        for r in self.replicas.values_mut() {
            let version = r.get(key).map_or(1, |(v, _)| v + 1);
            r.insert(key.to_string(), (version, value.clone()));
        }
    }

    /// Applies replication due by `now`. Down replicas catch up once due;
    /// a version never moves backwards.
    pub fn sync(&mut self, now: f64) {
        let (due, later): (Vec<_>, Vec<_>) = std::mem::take(&mut self.pending)
            .into_iter()
            .partition(|p| p.at <= now && self.health.is_healthy(&p.cluster));
        self.pending = later;
        for p in due {
            let r = self.replicas.get_mut(&p.cluster).expect("pending targets a replica");
            if r.get(&p.key).map_or(true, |(v, _)| *v < p.version) {
                r.insert(p.key, (p.version, p.value));
            }
        }
    }

    pub fn pending_syncs(&self) -> usize {
        self.pending.len()
    }

    /// Picks the serving replica for a read from `from`.
    pub fn serving_replica(&self, fabric: &Fabric, from: &str) -> Result<String, StoreError> {
        let candidates = self.replica_clusters();
        self.health
            .select(fabric, self.name, from, &candidates)
            .map_err(|e| match e {
                RoutingError::UnknownCluster(c) => StoreError::UnknownCluster(c),
                _ => StoreError::AllReplicasDown(self.name.to_string()),
            })
    }

    pub fn access_latency(&self, fabric: &Fabric, from: &str, served_by: &str) -> f64 {
        fabric.path_latency(from, served_by).unwrap_or(f64::INFINITY) + self.service_time_ms
    }

    pub fn get(&mut self, fabric: &Fabric, key: &str, from: &str, now: f64) -> Result<Read<V>, StoreError> {
        self.sync(now);
        let served_by = self.serving_replica(fabric, from)?;
        let (version, value) = self.replicas[&served_by]
            .get(key)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(key.to_string()))?;
        Ok(Read {
            latency_ms: self.access_latency(fabric, from, &served_by),
            value,
            version,
            served_by,
        })
    }

    pub fn version_at(&self, cluster: &str, key: &str) -> Option<u64> {
        self.replicas.get(cluster)?.get(key).map(|(v, _)| *v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Namespace,
    Pod,
    Service,
    Route,
    Gateway,
}

/// A deployment resource document, kept as opaque text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TemplateDocument {
    pub key: String,
    pub kind: TemplateKind,
    pub body: String,
}

pub fn namespace_key(app_id: &str) -> String {
    format!("{app_id}/namespace")
}

pub fn gateway_key(app_id: &str) -> String {
    format!("{app_id}/gateway")
}

fn kind_of(key: &str) -> TemplateKind {
    match key.rsplit('/').next() {
        Some("namespace") => TemplateKind::Namespace,
        Some("service") => TemplateKind::Service,
        Some("route") => TemplateKind::Route,
        Some("gateway") => TemplateKind::Gateway,
        _ => TemplateKind::Pod,
    }
}

pub fn template_for(key: &str) -> TemplateDocument {
    let kind = kind_of(key);
    let mut parts = key.split('/');
    let app = parts.next().unwrap_or_default();
    let ms = parts.next().unwrap_or_default();
    let body = match kind {
        TemplateKind::Namespace => format!("kind: Namespace\nname: {app}\n"),
        TemplateKind::Gateway => format!("kind: Gateway\nnamespace: {app}\nname: {app}-gateway\n"),
        TemplateKind::Pod => format!("kind: Deployment\nnamespace: {app}\nname: {ms}\nimage: fogmesh/template-ms:{ms}\n"),
        TemplateKind::Service => format!("kind: Service\nnamespace: {app}\nname: {ms}\n"),
        TemplateKind::Route => format!("kind: VirtualService\nnamespace: {app}\nname: {ms}\n"),
    };
    TemplateDocument {
        key: key.to_string(),
        kind,
        body,
    }
}

/// Namespace and gateway documents plus one document per referenced template.
pub fn default_templates(app: &Application) -> Vec<TemplateDocument> {
    let mut keys = vec![namespace_key(&app.app_id), gateway_key(&app.app_id)];
    for m in &app.microservices {
        match app.deployment_resources.get(&m.ms_id) {
            Some(refs) => keys.extend(refs.iter().cloned()),
            None => keys.extend(default_template_refs(&app.app_id, &m.ms_id)),
        }
    }
    keys.iter().map(|k| template_for(k)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateBatch {
    pub documents: Vec<(TemplateDocument, String)>,
    pub latency_ms: f64,
}

/// Both stores, sharing replica placement and health.
#[derive(Debug, Clone)]
pub struct Stores {
    pub metadata: ReplicatedStore<Application>,
    pub templates: ReplicatedStore<TemplateDocument>,
}

impl Stores {
    pub fn new(fabric: &Fabric, cfg: &StoreConfig) -> Result<Self, StoreError> {
        Ok(Self {
            metadata: ReplicatedStore::new("metadata", fabric, cfg)?,
            templates: ReplicatedStore::new("templates", fabric, cfg)?,
        })
    }

    pub fn set_replica_health(&mut self, cluster: &str, healthy: bool) {
        self.metadata.set_health(cluster, healthy);
        self.templates.set_health(cluster, healthy);
    }

    /// Seeds an application and any of its templates not already stored.
    pub fn seed_application(&mut self, app: &Application) {
        for doc in default_templates(app) {
            if self.templates.version_at(self.templates.master(), &doc.key).is_none() {
                self.templates.seed(&doc.key.clone(), doc);
            }
        }
        self.metadata.seed(&app.app_id.clone(), app.clone());
    }

    pub fn put_application(&mut self, app: &Application, now: f64) -> Result<u64, StoreError> {
        let v = self.metadata.put(&app.app_id, app.clone(), now)?;
        for doc in default_templates(app) {
            if self.templates.version_at(self.templates.master(), &doc.key).is_none() {
                self.templates.put(&doc.key.clone(), doc, now)?;
            }
        }
        Ok(v)
    }

    pub fn put_template(&mut self, doc: TemplateDocument, now: f64) -> Result<u64, StoreError> {
        self.templates.put(&doc.key.clone(), doc, now)
    }

    pub fn get_application(&mut self, fabric: &Fabric, app_id: &str, from: &str, now: f64) -> Result<Read<Application>, StoreError> {
        self.metadata.get(fabric, app_id, from, now)
    }

    /// Namespace document plus every template referenced by `ms_ids`, and
    /// the gateway document when `entry`. One round trip is charged per
    /// serving replica.
    pub fn get_templates(
        &mut self,
        fabric: &Fabric,
        app: &Application,
        ms_ids: &[String],
        entry: bool,
        from: &str,
        now: f64,
    ) -> Result<TemplateBatch, StoreError> {
        let mut keys = vec![namespace_key(&app.app_id)];
        if entry {
            keys.push(gateway_key(&app.app_id));
        }
        for ms in ms_ids {
            let refs = app
                .deployment_resources
                .get(ms)
                .ok_or_else(|| StoreError::NotFound(format!("{}/{ms}", app.app_id)))?;
            keys.extend(refs.iter().cloned());
        }
        let mut documents = Vec::new();
        let mut replicas: Vec<String> = Vec::new();
        for k in keys {
            let r = self.templates.get(fabric, &k, from, now)?;
            if !replicas.contains(&r.served_by) {
                replicas.push(r.served_by.clone());
            }
            documents.push((r.value, r.served_by));
        }
        let latency_ms = replicas
            .iter()
            .map(|r| self.templates.access_latency(fabric, from, r))
            .sum();
        Ok(TemplateBatch { documents, latency_ms })
    }

    /// Loads `*.json` application definitions from `dir` and, from an
    /// optional `templates/` subdirectory, template documents.
    pub fn seed_from_dir(&mut self, dir: &Path) -> Result<Vec<String>, StoreError> {
        let err = |e: std::io::Error| StoreError::Seed(format!("{}: {e}", dir.display()));
        let mut templates: Vec<TemplateDocument> = Vec::new();
        let tdir = dir.join("templates");
        if tdir.is_dir() {
            let mut paths: Vec<_> = std::fs::read_dir(&tdir).map_err(err)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
            paths.sort();
            for p in paths.iter().filter(|p| p.extension().is_some_and(|x| x == "json")) {
                let text = std::fs::read_to_string(p).map_err(err)?;
                let doc: TemplateDocument = serde_json::from_str(&text)
                    .map_err(|e| StoreError::Seed(format!("{}: {e}", p.display())))?;
                templates.push(doc);
            }
        }
        for doc in templates {
            self.templates.seed(&doc.key.clone(), doc);
        }
        let mut paths: Vec<_> = std::fs::read_dir(dir).map_err(err)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        paths.sort();
        let mut loaded = Vec::new();
        for p in paths.iter().filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json")) {
            let text = std::fs::read_to_string(p).map_err(err)?;
            let app = Application::from_json(&text).map_err(|e| StoreError::Seed(format!("{}: {e}", p.display())))?;
            self.seed_application(&app);
            loaded.push(app.app_id);
        }
        Ok(loaded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::TopologyConfig;
    use crate::workload::canned;

    fn setup() -> (Fabric, Stores) {
        let f = TopologyConfig::testbed().build().unwrap();
        let s = Stores::new(&f, &StoreConfig::default()).unwrap();
        (f, s)
    }

    #[test]
    fn failover_reads() {
        let (f, mut s) = setup();
        s.seed_application(&canned("hcapp").unwrap());
        let a = s.get_application(&f, "hcapp", "fog1", 0.0).unwrap();
        assert_eq!(a.served_by, "fog1");
        s.set_replica_health("fog1", false);
        let b = s.get_application(&f, "hcapp", "fog1", 0.0).unwrap();
        assert_eq!(b.served_by, "fog2");
        s.set_replica_health("fog2", false);
        s.set_replica_health("fog3", false);
        let c = s.get_application(&f, "hcapp", "fog1", 0.0).unwrap();
        assert_eq!(c.served_by, "cloud1");
        assert!(a.latency_ms < b.latency_ms && b.latency_ms < c.latency_ms);
        s.set_replica_health("cloud1", false);
        assert_eq!(
            s.get_application(&f, "hcapp", "fog1", 0.0),
            Err(StoreError::AllReplicasDown("metadata".into()))
        );
    }

    #[test]
    fn put_replicates_after_delay() {
        let (f, mut s) = setup();
        let app = canned("hcapp").unwrap();
        assert_eq!(s.put_application(&app, 0.0).unwrap(), 1);
        assert_eq!(s.metadata.version_at("cloud1", "hcapp"), Some(1));
        assert_eq!(s.metadata.version_at("fog1", "hcapp"), None);
        assert_eq!(
            s.get_application(&f, "hcapp", "fog1", 5.0),
            Err(StoreError::NotFound("hcapp".into()))
        );
        assert_eq!(s.get_application(&f, "hcapp", "fog1", 10.0).unwrap().version, 1);
        assert_eq!(s.put_application(&app, 20.0).unwrap(), 2);
        s.metadata.sync(30.0);
        for c in ["fog1", "fog2", "fog3", "cloud1"] {
            assert_eq!(s.metadata.version_at(c, "hcapp"), Some(2));
        }
    }

    #[test]
    fn master_down_rejects_writes() {
        let (_, mut s) = setup();
        s.set_replica_health("cloud1", false);
        assert_eq!(
            s.put_application(&canned("app2").unwrap(), 0.0),
            Err(StoreError::MasterDown("cloud1".into()))
        );
    }

    #[test]
    fn templates_for_hcapp() {
        let (f, mut s) = setup();
        let app = canned("hcapp").unwrap();
        s.seed_application(&app);
        let ms: Vec<String> = app.microservices.iter().map(|m| m.ms_id.clone()).collect();
        let b = s.get_templates(&f, &app, &ms, false, "fog1", 0.0).unwrap();
        let count = |k: TemplateKind| b.documents.iter().filter(|(d, _)| d.kind == k).count();
        assert_eq!(count(TemplateKind::Namespace), 1);
        assert_eq!(count(TemplateKind::Pod), 3);
        assert_eq!(count(TemplateKind::Service), 3);
        assert_eq!(count(TemplateKind::Route), 3);
        assert_eq!(b.latency_ms, 2.0);
        let local = s.get_templates(&f, &app, &ms, true, "cloud1", 0.0).unwrap();
        assert!(local.documents.iter().all(|(_, r)| r == "cloud1"));
        assert_eq!(local.documents.len(), 11);
    }

    #[test]
    fn dangling_template_ref() {
        let (f, mut s) = setup();
        let mut app = canned("hcapp").unwrap();
        s.seed_application(&app);
        app.deployment_resources.get_mut("hcm1").unwrap().push("hcapp/hcm1/extra".into());
        let err = s.get_templates(&f, &app, &["hcm1".to_string()], false, "fog1", 0.0);
        assert_eq!(err, Err(StoreError::NotFound("hcapp/hcm1/extra".into())));
    }

    #[test]
    fn seed_dir_round_trip() {
        let (_, mut s) = setup();
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("app2.json"), canned("app2").unwrap().to_json()).unwrap();
        std::fs::create_dir(dir.path().join("templates")).unwrap();
        let custom = TemplateDocument {
            key: "app2/a2m1/pod".into(),
            kind: TemplateKind::Pod,
            body: "custom".into(),
        };
        std::fs::write(dir.path().join("templates/a.json"), serde_json::to_string(&custom).unwrap()).unwrap();
        assert_eq!(s.seed_from_dir(dir.path()).unwrap(), vec!["app2"]);
        let f = TopologyConfig::testbed().build().unwrap();
        let doc = s.templates.get(&f, "app2/a2m1/pod", "fog2", 0.0).unwrap();
        assert_eq!(doc.value.body, "custom");
    }
}
