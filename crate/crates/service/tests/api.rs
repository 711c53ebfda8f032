use std::path::Path;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use qcode_core::fixtures;
use qcode_service::{router, Store};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Client {
    app: Router,
    token: String,
}

async fn call(app: &Router, method: Method, uri: &str, token: Option<&str>, rid: Option<&str>, body: Body, ctype: &str) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri).header("content-type", ctype);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    if let Some(r) = rid {
        req = req.header("x-request-id", r);
    }
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

impl Client {
    async fn get(&self, uri: &str) -> (StatusCode, Value) {
        call(&self.app, Method::GET, uri, Some(&self.token), None, Body::empty(), "application/json").await
    }

    async fn send(&self, method: Method, uri: &str, rid: &str, body: Value) -> (StatusCode, Value) {
        call(&self.app, method, uri, Some(&self.token), Some(rid), Body::from(body.to_string()), "application/json").await
    }

    async fn raw(&self, method: Method, uri: &str, rid: &str, body: String, ctype: &str) -> (StatusCode, Value) {
        call(&self.app, method, uri, Some(&self.token), Some(rid), Body::from(body), ctype).await
    }

    async fn wait_run(&self, run: &str) -> Value {
        for _ in 0..600 {
            let (_, v) = self.get(&format!("/v1/projects/p1/runs/{run}")).await;
            if v["status"] == "done" || v["status"] == "failed" {
                return v;
            }
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
        panic!("run {run} did not finish");
    }
}

async fn project(root: &Path) -> Client {
    let app = router(Store::open(root).unwrap());
    let (status, v) =
        call(&app, Method::POST, "/v1/projects", None, Some("create"), Body::from(r#"{"id":"p1","name":"demo"}"#), "application/json").await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    Client { app, token: v["token"].as_str().unwrap().to_string() }
}

/// Project with a codebook, the demo corpus and its human codes.
async fn seeded(root: &Path) -> (Client, fixtures::DemoFixture) {
    let c = project(root).await;
    let demo = fixtures::demo_fixture(7);
    let cb: Value = serde_json::from_str(fixtures::ATTRIBUTION_CODEBOOK_JSON).unwrap();
    let (s, v) = c.send(Method::POST, "/v1/projects/p1/codebooks", "cb", cb).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    let (s, v) = c.raw(Method::POST, "/v1/projects/p1/corpus", "corpus", demo.jsonl.clone(), "application/x-ndjson").await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    let (s, v) = c.send(Method::PUT, "/v1/projects/p1/human-codes", "human", serde_json::to_value(&demo.human).unwrap()).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    (c, demo)
}

async fn full_run(c: &Client, demo: &fixtures::DemoFixture, rid: &str) -> String {
    let body = json!({"codebook_version": 1, "variants": ["all"], "backend": {"kind": "mock", "spec": demo.coding_mock}});
    let (s, v) = c.send(Method::POST, "/v1/projects/p1/runs", rid, body).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    let run = v["run_id"].as_str().unwrap().to_string();
    let done = c.wait_run(&run).await;
    assert_eq!(done["status"], "done", "{done}");
    run
}

#[tokio::test(flavor = "multi_thread")]
async fn auth_is_required_and_checked() {
    let dir = tempfile::tempdir().unwrap();
    let c = project(dir.path()).await;
    let (s, _) = call(&c.app, Method::GET, "/v1/projects/p1", None, None, Body::empty(), "application/json").await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, _) = call(&c.app, Method::GET, "/v1/projects/p1", Some("nope"), None, Body::empty(), "application/json").await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    let (s, v) = c.get("/v1/projects/p1").await;
    assert_eq!(s, StatusCode::OK);
    assert!(v.get("token_sha256").is_none());
}

#[tokio::test(flavor = "multi_thread")]
async fn mutations_need_request_id() {
    let dir = tempfile::tempdir().unwrap();
    let c = project(dir.path()).await;
    let (s, v) = call(&c.app, Method::POST, "/v1/projects/p1/codebooks", Some(&c.token), None, Body::from("{}"), "application/json").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], "missing-request-id");
}

#[tokio::test(flavor = "multi_thread")]
async fn invalid_codebook_is_rejected_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let c = project(dir.path()).await;
    let mut cb: Value = serde_json::from_str(fixtures::ATTRIBUTION_CODEBOOK_JSON).unwrap();
    let first = cb["codes"][0].clone();
    cb["codes"].as_array_mut().unwrap().push(first);
    let (s, v) = c.send(Method::POST, "/v1/projects/p1/codebooks", "bad-cb", cb).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    assert_eq!(v["error"]["code"], "invalid-codebook");
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_codebook_version_is_a_client_error() {
    let dir = tempfile::tempdir().unwrap();
    let (c, demo) = seeded(dir.path()).await;
    let body = json!({"codebook_version": 9, "backend": {"kind": "mock", "spec": demo.coding_mock}});
    let (s, v) = c.send(Method::POST, "/v1/projects/p1/runs", "run-9", body).await;
    assert!(s.is_client_error(), "{s} {v}");
    assert_eq!(v["error"]["code"], "unknown-codebook-version");
    let (s, _) = c.get("/v1/projects/p1/codebooks/9").await;
    assert!(s.is_client_error());
}

#[tokio::test(flavor = "multi_thread")]
async fn full_grid_run_gives_variant_by_attribution_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let (c, demo) = seeded(dir.path()).await;
    let run = full_run(&c, &demo, "run-all").await;

    let (s, v) = c.get(&format!("/v1/projects/p1/runs/{run}/agreement")).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["variants"].as_array().unwrap().len(), 23);
    assert_eq!(v["rows"].as_array().unwrap().len(), 8);
    assert_eq!(v["cells"].as_array().unwrap().len(), 23 * 8);

    let (s, v) = c.get(&format!("/v1/projects/p1/runs/{run}/agreement?ci=true&resamples=50&seed=3")).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert!(v["cells"].as_array().unwrap().iter().any(|cell| cell.get("ci").is_some()));

    let (s, v) = c.get(&format!("/v1/projects/p1/runs/{run}/primacy")).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let (s, v) = c.get(&format!("/v1/projects/p1/runs/{run}/variants/L5")).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let (s, _) = c.get(&format!("/v1/projects/p1/runs/{run}/variants/L99")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn repeated_vote_with_same_request_id_is_recorded_once() {
    let dir = tempfile::tempdir().unwrap();
    let (c, demo) = seeded(dir.path()).await;
    let run = full_run(&c, &demo, "run-all").await;
    let (s, v) = c
        .send(Method::POST, "/v1/projects/p1/disagreements", "set", json!({"run_id": run, "coders": ["ann", "bo"]}))
        .await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    let set = v["set_id"].as_str().unwrap().to_string();
    assert!(v["records"].as_u64().unwrap() > 0);

    let (_, q) = c.get(&format!("/v1/projects/p1/disagreements/{set}?pending_for=ann&limit=1")).await;
    let mid = q["records"][0]["message_id"].as_str().unwrap().to_string();
    let uri = format!("/v1/projects/p1/disagreements/{set}/records/{mid}/votes");
    let vote = json!({"coder": "ann", "category": "new-code"});
    let (s1, _) = c.send(Method::POST, &uri, "vote-1", vote.clone()).await;
    let (s2, _) = c.send(Method::POST, &uri, "vote-1", vote.clone()).await;
    assert_eq!(s1, StatusCode::OK);
    assert_eq!(s2, StatusCode::OK);

    let (_, rec) = c.get(&format!("/v1/projects/p1/disagreements/{set}/records/{mid}")).await;
    assert_eq!(rec["votes"].as_object().unwrap().len(), 1, "{rec}");
    let (_, ev) = c.get("/v1/projects/p1/events").await;
    let votes = ev["events"].as_array().unwrap().iter().filter(|e| e["action"] == "triage-vote").count();
    assert_eq!(votes, 1);

    // same id, different body
    let (s, v) = c.send(Method::POST, &uri, "vote-1", json!({"coder": "bo", "category": "new-code"})).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"]["code"], "request-id-reused");

    let (_, q) = c.get(&format!("/v1/projects/p1/disagreements/{set}?pending_for=ann")).await;
    assert_eq!(q["total"].as_u64().unwrap() + 1, q_total_all(&c, &set).await);
    let (s, v) = c.get(&format!("/v1/projects/p1/disagreements/{set}/summary")).await;
    assert_eq!(s, StatusCode::OK, "{v}");
}

async fn q_total_all(c: &Client, set: &str) -> u64 {
    c.get(&format!("/v1/projects/p1/disagreements/{set}")).await.1["total"].as_u64().unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn interrupted_run_leaves_no_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let (c, demo) = seeded(dir.path()).await;
    let body = json!({"codebook_version": 1, "variants": ["L1", "L2"], "backend": {"kind": "mock", "spec": demo.coding_mock}});

    // Register the job, then simulate a crash by never executing it and leaving staged files.
    let store = Store::open(dir.path()).unwrap();
    let reply = store
        .mutate("p1", "crash-run", "launch-run", body.to_string().as_bytes(), |tx| {
            let job = json!({"run_id": "run-1", "status": "running", "request": body, "variants": ["L1", "L2"], "completed": ["L1"], "error": null});
            tx.write("jobs/run-1.json", &job)?;
            tx.project.next_id("run");
            Ok(qcode_service::store::Reply::accepted(json!({"run_id": "run-1"})))
        })
        .unwrap();
    assert_eq!(reply.status, 202);
    let staging = dir.path().join(".staging").join("p1--run-1").join("variants");
    std::fs::create_dir_all(&staging).unwrap();
    std::fs::write(staging.join("L1.json"), "{}").unwrap();
    drop(store);
    drop(c);

    Store::open(dir.path()).unwrap();
    assert!(!dir.path().join(".staging").join("p1--run-1").exists());
    assert!(!dir.path().join("projects/p1/runs/run-1").exists());
    let job: Value = serde_json::from_slice(&std::fs::read(dir.path().join("projects/p1/jobs/run-1.json")).unwrap()).unwrap();
    assert_eq!(job["status"], "failed");
}

#[tokio::test(flavor = "multi_thread")]
async fn archived_project_rejects_writes() {
    let dir = tempfile::tempdir().unwrap();
    let c = project(dir.path()).await;
    let (s, _) = c.send(Method::DELETE, "/v1/projects/p1", "archive", json!(null)).await;
    assert_eq!(s, StatusCode::OK);
    let cb: Value = serde_json::from_str(fixtures::ATTRIBUTION_CODEBOOK_JSON).unwrap();
    let (s, v) = c.send(Method::POST, "/v1/projects/p1/codebooks", "cb", cb).await;
    assert_eq!(s, StatusCode::CONFLICT, "{v}");
}
