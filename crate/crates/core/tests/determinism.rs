//! Same seed, same results.

use std::path::PathBuf;

use fogmesh_core::placement::AlgorithmRegistry;
use fogmesh_core::scenario::run_file;

#[test]
fn scenario_runs_repeat_exactly() {
    let registry = AlgorithmRegistry::with_defaults();
    for name in ["example_apps.toml", "forwarding.toml", "placement_modes.toml"] {
        let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
        let a = run_file(&path, &registry, None).unwrap();
        let b = run_file(&path, &registry, None).unwrap();
        assert_eq!(
            serde_json::to_string(&a.scenarios.iter().map(|s| &s.summary).collect::<Vec<_>>()).unwrap(),
            serde_json::to_string(&b.scenarios.iter().map(|s| &s.summary).collect::<Vec<_>>()).unwrap(),
            "{name}"
        );
        assert_eq!(a.scenarios.len(), b.scenarios.len());
        for (x, y) in a.scenarios.iter().zip(&b.scenarios) {
            assert_eq!(x.placements, y.placements, "{name}/{}", x.id);
        }
    }
}
