//! Reference placement algorithms.
//!
//! All three start from the entry side of the DAG and walk it with
//! `next_placeable`, so a microservice is only placed once its consumers are.
//! V1 gives every microservice one vertically sized instance, V2 places
//! reference-size replicas and may split a microservice across clusters, and
//! V3 does the same as V2 from a global view without forwarding.

use std::collections::BTreeMap;

use super::{
    placed_units, required_instances, reserve_in_view, select_node, tier_allows, vertical_allocation,
    IngressBinding, InstancePlan, InstanceStatus, PlacementAlgorithm, PlacementError, PlacementInput,
    PlacementOutput, PlacementRequest,
};
use crate::app_model::{next_placeable, Application, Microservice};
use crate::fabric::{ClusterData, Tier};

struct Walk {
    plans: Vec<InstancePlan>,
    request: PlacementRequest,
    complete: bool,
}

fn new_plan(pr: &PlacementRequest, ms: &Microservice, cluster: &str, node: String, cpu: f64, mem: u64, replica_index: u32) -> InstancePlan {
    InstancePlan {
        pr_id: pr.pr_id.clone(),
        application_id: pr.application_id.clone(),
        ms_id: ms.ms_id.clone(),
        cluster: cluster.to_string(),
        node_name: node,
        cpu,
        mem,
        replica_index,
        status: InstanceStatus::Planned,
    }
}

/// Places up to `wanted` reference units of `ms`, trying clusters in order
/// and worst-fit nodes within each. Units sharing a node are merged.
/// Returns the merged plans and how many units found a home.
fn place_units(
    pr: &PlacementRequest,
    ms: &Microservice,
    wanted: u32,
    clusters: &mut [&mut ClusterData],
    replica_base: u32,
) -> (Vec<InstancePlan>, u32) {
    let mut slots: Vec<(String, String, u32)> = Vec::new();
    let mut placed = 0;
    'units: for _ in 0..wanted {
        for view in clusters.iter_mut() {
            if let Some(node) = select_node(view, ms.ref_cpu, ms.ref_memory) {
                reserve_in_view(view, &node, ms.ref_cpu, ms.ref_memory);
                match slots
                    .iter_mut()
                    .find(|(c, n, _)| *c == view.cluster && *n == node)
                {
                    Some(slot) => slot.2 += 1,
                    None => slots.push((view.cluster.clone(), node, 1)),
                }
                placed += 1;
                continue 'units;
            }
        }
        break;
    }
    let plans = slots
        .into_iter()
        .enumerate()
        .map(|(i, (cluster, node, k))| {
            new_plan(
                pr,
                ms,
                &cluster,
                node,
                ms.ref_cpu * k as f64,
                ms.ref_memory * k as u64,
                replica_base + i as u32,
            )
        })
        .collect();
    (plans, placed)
}

fn place_distributed(pr: &PlacementRequest, app: &Application, view: &mut ClusterData, horizontal: bool) -> Walk {
    let mut request = pr.clone();
    let mut plans = Vec::new();
    loop {
        let placed = request.fully_placed(app);
        let next = next_placeable(app, &placed).expect("placed set drawn from the application");
        if next.is_empty() {
            return Walk { plans, request, complete: true };
        }
        for ms_id in next {
            let ms = app.microservice(&ms_id).expect("next_placeable yields known ids");
            if !tier_allows(app, &request, &ms_id, view.tier) {
                return Walk { plans, request, complete: false };
            }
            let demand = request.demand(app, &ms_id);
            let base = request.plans(&ms_id).len() as u32;
            if horizontal {
                let (count, _) = required_instances(ms, demand);
                let missing = count.saturating_sub(placed_units(ms, request.plans(&ms_id)));
                let (new, got) = place_units(&request, ms, missing, &mut [&mut *view], base);
                request.merge_plans(new.iter().cloned());
                plans.extend(new);
                if got < missing {
                    return Walk { plans, request, complete: false };
                }
            } else {
                let (cpu, mem) = vertical_allocation(ms, demand);
                let Some(node) = select_node(view, cpu, mem) else {
                    return Walk { plans, request, complete: false };
                };
                reserve_in_view(view, &node, cpu, mem);
                let plan = new_plan(&request, ms, &view.cluster, node, cpu, mem, base);
                request.merge_plans([plan.clone()]);
                plans.push(plan);
            }
        }
    }
}

fn entry_bindings(pr: &PlacementRequest) -> Vec<IngressBinding> {
    pr.entry_clusters
        .iter()
        .map(|c| IngressBinding {
            application_id: pr.application_id.clone(),
            cluster: c.clone(),
            bound: true,
        })
        .collect()
}

fn run_distributed(pr: &PlacementRequest, app: &Application, view: &mut ClusterData, horizontal: bool) -> PlacementOutput {
    let walk = place_distributed(pr, app, view, horizontal);
    let mut out = PlacementOutput {
        placements: walk.plans,
        ..Default::default()
    };
    if pr.hop_count == 0 {
        out.ingress_bindings = entry_bindings(pr);
    }
    if walk.complete {
        out.completed_prs.push(pr.pr_id.clone());
    } else {
        out.incomplete_prs.push(walk.request);
    }
    out
}

/// Vertically scaled distributed placement of one request on the local
/// cluster. `view` is updated with the reservations made.
pub fn place_v1(pr: &PlacementRequest, app: &Application, view: &mut ClusterData) -> PlacementOutput {
    run_distributed(pr, app, view, false)
}

/// Horizontally scaled distributed placement of one request.
pub fn place_v2(pr: &PlacementRequest, app: &Application, view: &mut ClusterData) -> PlacementOutput {
    run_distributed(pr, app, view, true)
}

fn candidate_clusters(entry: &ClusterData, view: &BTreeMap<String, ClusterData>) -> Vec<String> {
    let mut order = vec![entry.cluster.clone()];
    let mut push = |c: &String| {
        if view.contains_key(c) && !order.contains(c) {
            order.push(c.clone());
        }
    };
    entry.adjacent_fog_clusters.iter().for_each(&mut push);
    entry.adjacent_cloud_clusters.iter().for_each(&mut push);
    view.values()
        .filter(|c| c.tier == Tier::Cloud)
        .for_each(|c| push(&c.cluster));
    order
}

/// Centralised placement over a global view. Requests are handled in order
/// against one shared view; a request that cannot be fully hosted leaves the
/// view untouched and is reported in `rejected_prs`.
pub fn place_v3(
    prs: &[PlacementRequest],
    apps: &BTreeMap<String, Application>,
    view: &mut BTreeMap<String, ClusterData>,
) -> Result<PlacementOutput, PlacementError> {
    let mut out = PlacementOutput::default();
    for pr in prs {
        let app = apps
            .get(&pr.application_id)
            .ok_or_else(|| PlacementError::MetadataMissing(pr.application_id.clone()))?;
        let Some(entry) = pr
            .entry_clusters
            .iter()
            .filter_map(|c| view.get(c))
            .find(|c| c.has_free_capacity())
        else {
            out.rejected_prs.push(pr.pr_id.clone());
            continue;
        };
        let order = candidate_clusters(entry, view);
        let before = view.clone();

        let mut request = pr.clone();
        let mut plans = Vec::new();
        let mut ok = true;
        'walk: loop {
            let placed = request.fully_placed(app);
            let next = next_placeable(app, &placed)?;
            if next.is_empty() {
                break;
            }
            for ms_id in next {
                let ms = app.microservice(&ms_id).expect("known id");
                let demand = request.demand(app, &ms_id);
                let (count, _) = required_instances(ms, demand);
                let missing = count.saturating_sub(placed_units(ms, request.plans(&ms_id)));
                let allowed: Vec<&String> = order
                    .iter()
                    .filter(|c| tier_allows(app, &request, &ms_id, view[*c].tier))
                    .collect();
                let mut targets: Vec<&mut ClusterData> = Vec::new();
                // hand out disjoint &mut borrows in candidate order
                let mut rest: Vec<(&String, &mut ClusterData)> = view.iter_mut().collect();
                for name in &allowed {
                    if let Some(i) = rest.iter().position(|(k, _)| k == name) {
                        targets.push(rest.swap_remove(i).1);
                    }
                }
                let base = request.plans(&ms_id).len() as u32;
                let (new, got) = place_units(&request, ms, missing, &mut targets, base);
                request.merge_plans(new.iter().cloned());
                plans.extend(new);
                if got < missing {
                    ok = false;
                    break 'walk;
                }
            }
        }
        if ok {
            out.placements.extend(plans);
            out.completed_prs.push(pr.pr_id.clone());
            out.ingress_bindings.extend(entry_bindings(pr));
        } else {
            *view = before;
            out.rejected_prs.push(pr.pr_id.clone());
        }
    }
    Ok(out)
}

fn distributed_invocation(input: &PlacementInput, horizontal: bool) -> Result<PlacementOutput, PlacementError> {
    let mut view = input
        .cluster_data
        .get(&input.local_cluster)
        .cloned()
        .ok_or_else(|| PlacementError::MalformedResponse(format!("no data for local cluster {}", input.local_cluster)))?;
    let mut out = PlacementOutput::default();
    for pr in &input.prs {
        let app = input
            .app_info
            .get(&pr.application_id)
            .ok_or_else(|| PlacementError::MetadataMissing(pr.application_id.clone()))?;
        let o = run_distributed(pr, app, &mut view, horizontal);
        out.placements.extend(o.placements);
        out.completed_prs.extend(o.completed_prs);
        out.incomplete_prs.extend(o.incomplete_prs);
        out.ingress_bindings.extend(o.ingress_bindings);
    }
    Ok(out)
}

/// V1: one vertically scaled instance per microservice.
#[derive(Debug, Default)]
pub struct VerticalDistributed;

impl PlacementAlgorithm for VerticalDistributed {
    fn name(&self) -> &str {
        "v1"
    }

    fn generate_placement(&mut self, input: &PlacementInput) -> Result<PlacementOutput, PlacementError> {
        distributed_invocation(input, false)
    }
}

/// V2: throughput-sized replica sets, possibly split across clusters.
#[derive(Debug, Default)]
pub struct HorizontalDistributed;

impl PlacementAlgorithm for HorizontalDistributed {
    fn name(&self) -> &str {
        "v2"
    }

    fn generate_placement(&mut self, input: &PlacementInput) -> Result<PlacementOutput, PlacementError> {
        distributed_invocation(input, true)
    }
}

/// V3: global view, no forwarding.
#[derive(Debug, Default)]
pub struct Centralised;

impl PlacementAlgorithm for Centralised {
    fn name(&self) -> &str {
        "v3"
    }

    fn generate_placement(&mut self, input: &PlacementInput) -> Result<PlacementOutput, PlacementError> {
        let mut view = input.cluster_data.clone();
        place_v3(&input.prs, &input.app_info, &mut view)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::{TopologyConfig, GIB};
    use crate::placement::{covers, validate_output};
    use crate::workload::canned;

    fn fabric_views() -> BTreeMap<String, ClusterData> {
        let f = TopologyConfig::testbed().build().unwrap();
        f.cluster_names()
            .into_iter()
            .map(|c| (c.clone(), f.cluster_snapshot(&c).unwrap()))
            .collect()
    }

    fn roomy(name: &str) -> ClusterData {
        let mut f = TopologyConfig::testbed();
        for c in &mut f.clusters {
            for n in &mut c.nodes {
                n.cpu = 64.0;
                n.memory = 256 * GIB;
            }
        }
        f.build().unwrap().cluster_snapshot(name).unwrap()
    }

    #[test]
    fn v1_fits_in_roomy_cluster() {
        let app = canned("hcapp").unwrap();
        let pr = PlacementRequest::new("pr1", "hcapp", &["fog1"]);
        let mut view = roomy("fog1");
        let out = place_v1(&pr, &app, &mut view);
        assert_eq!(out.completed_prs, vec!["pr1"]);
        assert_eq!(out.placements.len(), 3);
        assert!(out.placements.iter().all(|p| p.cluster == "fog1"));
        assert_eq!(out.ingress_bindings.len(), 1);
    }

    #[test]
    fn empty_capacity_cluster_places_nothing() {
        let app = canned("hcapp").unwrap();
        let pr = PlacementRequest::new("pr1", "hcapp", &["fog1"]);
        let mut view = fabric_views().remove("fog1").unwrap();
        for n in &mut view.nodes {
            n.allocated_cpu = n.total_cpu;
        }
        for out in [place_v1(&pr, &app, &mut view.clone()), place_v2(&pr, &app, &mut view)] {
            assert!(out.placements.is_empty());
            assert_eq!(out.incomplete_prs.len(), 1);
            assert!(out.completed_prs.is_empty());
        }
    }

    #[test]
    fn v2_single_replica_matches_v1() {
        let mut app = canned("hcapp").unwrap();
        for m in &mut app.microservices {
            m.ref_throughput = 1000.0;
        }
        let pr = PlacementRequest::new("pr1", "hcapp", &["fog1"]);
        let a = place_v1(&pr, &app, &mut roomy("fog1"));
        let b = place_v2(&pr, &app, &mut roomy("fog1"));
        assert_eq!(a, b);
    }

    #[test]
    fn v2_carries_residual_replicas() {
        let app = canned("app2").unwrap();
        let pr = PlacementRequest::new("pr1", "app2", &["fog1"]);
        let mut view = fabric_views().remove("fog3").unwrap();
        for n in &mut view.nodes {
            n.allocated_cpu = n.total_cpu - 1.2;
        }
        let out = place_v2(&pr, &app, &mut view);
        assert!(!out.placements.is_empty());
        assert_eq!(out.incomplete_prs.len(), 1);
        let fwd = &out.incomplete_prs[0];
        // whatever landed is recorded in the forwarded request
        let recorded: usize = fwd.placed_microservices.values().map(Vec::len).sum();
        assert_eq!(recorded, out.placements.len());
        assert!(!fwd.is_complete(&app));
    }

    #[test]
    fn v3_with_ample_entry_matches_v2() {
        let app = canned("app2").unwrap();
        let pr = PlacementRequest::new("pr1", "app2", &["fog1"]);
        let mut apps = BTreeMap::new();
        apps.insert("app2".to_string(), app.clone());
        let mut global = BTreeMap::new();
        global.insert("fog1".to_string(), roomy("fog1"));
        global.insert("cloud1".to_string(), roomy("cloud1"));
        let v3 = place_v3(&[pr.clone()], &apps, &mut global).unwrap();
        let v2 = place_v2(&pr, &app, &mut roomy("fog1"));
        assert_eq!(v3.placements, v2.placements);
        assert_eq!(v3.completed_prs, v2.completed_prs);
    }

    #[test]
    fn v3_spills_to_cloud_when_fog_full() {
        let app = canned("hcapp").unwrap();
        let pr = PlacementRequest::new("pr1", "hcapp", &["fog1"]);
        let mut view = fabric_views();
        for (name, c) in view.iter_mut() {
            if name.starts_with("fog") {
                for n in &mut c.nodes {
                    n.allocated_cpu = n.total_cpu - 0.01;
                }
            }
        }
        let apps = BTreeMap::from([("hcapp".to_string(), app.clone())]);
        let out = place_v3(&[pr], &apps, &mut view).unwrap();
        assert_eq!(out.completed_prs, vec!["pr1"]);
        assert!(out.placements.iter().all(|p| p.cluster == "cloud1"));
    }

    #[test]
    fn v3_rejects_when_everything_is_full() {
        let app = canned("hcapp").unwrap();
        let mut view = fabric_views();
        for c in view.values_mut() {
            for n in &mut c.nodes {
                n.allocated_cpu = n.total_cpu - 0.01;
            }
        }
        let before = view.clone();
        let apps = BTreeMap::from([("hcapp".to_string(), app)]);
        let out = place_v3(&[PlacementRequest::new("pr1", "hcapp", &["fog1"])], &apps, &mut view).unwrap();
        assert_eq!(out.rejected_prs, vec!["pr1"]);
        assert!(out.placements.is_empty());
        assert_eq!(view, before);
    }

    #[test]
    fn v3_zero_requests() {
        let mut view = fabric_views();
        let out = place_v3(&[], &BTreeMap::new(), &mut view).unwrap();
        assert_eq!(out, PlacementOutput::default());
    }

    #[test]
    fn unknown_app_is_metadata_missing() {
        let input = PlacementInput {
            local_cluster: "fog1".into(),
            prs: vec![PlacementRequest::new("p", "ghost", &["fog1"])],
            app_info: BTreeMap::new(),
            cluster_data: fabric_views(),
        };
        assert!(matches!(
            VerticalDistributed.generate_placement(&input),
            Err(PlacementError::MetadataMissing(_))
        ));
    }

    #[test]
    fn completed_outputs_are_sound() {
        for app_id in ["hcapp", "app2"] {
            let app = canned(app_id).unwrap();
            let input = PlacementInput {
                local_cluster: "cloud1".into(),
                prs: vec![PlacementRequest::new("p", app_id, &["cloud1"])],
                app_info: BTreeMap::from([(app_id.to_string(), app.clone())]),
                cluster_data: fabric_views(),
            };
            for alg in [&mut VerticalDistributed as &mut dyn PlacementAlgorithm, &mut HorizontalDistributed, &mut Centralised] {
                let out = alg.generate_placement(&input).unwrap();
                validate_output(&input, &out).unwrap();
                let mut pr = input.prs[0].clone();
                pr.merge_plans(out.placements.iter().cloned());
                for m in &app.microservices {
                    assert!(covers(m, pr.demand(&app, &m.ms_id), pr.plans(&m.ms_id)));
                }
            }
        }
    }
}
