//! Keeps docs/openapi.json in step with the router.

use std::collections::BTreeSet;

use serde_json::Value;

fn routes() -> BTreeSet<(String, String)> {
    let src = include_str!("../src/api.rs");
    let mut out = BTreeSet::new();
    for line in src.lines().map(str::trim) {
        let Some(rest) = line.strip_prefix(".route(\"") else { continue };
        let (path, handlers) = rest.split_once('"').unwrap();
        let full = if path.starts_with("/v1") {
            path.to_string()
        } else {
            let p = format!("/v1/projects/{{project}}{path}");
            p.trim_end_matches('/').to_string()
        };
        for method in ["get", "post", "put", "patch", "delete"] {
            if handlers.contains(&format!(" {method}(")) || handlers.contains(&format!(".{method}(")) {
                out.insert((full.clone(), method.to_string()));
            }
        }
    }
    out
}

#[test]
fn every_route_is_documented_and_nothing_else() {
    let doc: Value = serde_json::from_str(include_str!("../../../docs/openapi.json")).unwrap();
    let documented: BTreeSet<(String, String)> = doc["paths"]
        .as_object()
        .unwrap()
        .iter()
        .flat_map(|(p, ops)| ops.as_object().unwrap().keys().map(move |m| (p.clone(), m.clone())))
        .collect();
    let served = routes();
    assert!(served.len() > 40, "parsed only {} routes", served.len());
    let missing: Vec<_> = served.difference(&documented).collect();
    let stale: Vec<_> = documented.difference(&served).collect();
    assert!(missing.is_empty() && stale.is_empty(), "missing {missing:?}\nstale {stale:?}");
}
