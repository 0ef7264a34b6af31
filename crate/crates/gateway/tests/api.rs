use std::time::{Duration, Instant};

use aibomgen_core::report::{MatchResult, MatchStatus, StorageReport, VerificationReport};
use aibomgen_core::{ArtifactRef, JobRecord, JobState};
use aibomgen_gateway::api::ArtifactGrant;
use aibomgen_gateway::{openapi, GatewayConfig, Platform, TokenTable};
use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

const ALICE: &str = "alice-token";
const BOB: &str = "bob-token";
const BOUNDARY: &str = "XtestboundaryX";

struct Fx {
    _dir: tempfile::TempDir,
    platform: Platform,
}

impl Fx {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let tokens = TokenTable::new([(ALICE.into(), "alice".into()), (BOB.into(), "bob".into())]);
        let mut config = GatewayConfig::new(dir.path(), tokens);
        config.sync_writes = false;
        let platform = Platform::start(&config).unwrap();
        Self { _dir: dir, platform }
    }

    fn app(&self) -> Router {
        self.platform.router()
    }

    async fn send(&self, req: Request<Body>) -> (StatusCode, Vec<u8>) {
        let resp = self.app().oneshot(req).await.unwrap();
        let status = resp.status();
        let body = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
        (status, body.to_vec())
    }

    async fn get(&self, uri: &str, token: Option<&str>) -> (StatusCode, Vec<u8>) {
        let mut b = Request::get(uri);
        if let Some(t) = token {
            b = b.header(header::AUTHORIZATION, format!("Bearer {t}"));
        }
        self.send(b.body(Body::empty()).unwrap()).await
    }

    async fn post(&self, uri: &str, token: Option<&str>, body: Vec<u8>) -> (StatusCode, Vec<u8>) {
        let mut b = Request::post(uri).header(header::CONTENT_TYPE, "application/json");
        if let Some(t) = token {
            b = b.header(header::AUTHORIZATION, format!("Bearer {t}"));
        }
        self.send(b.body(Body::from(body)).unwrap()).await
    }

    async fn multipart(&self, uri: &str, token: Option<&str>, parts: &[(&str, Option<&str>, &[u8])]) -> (StatusCode, Vec<u8>) {
        let mut b = Request::post(uri).header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={BOUNDARY}"));
        if let Some(t) = token {
            b = b.header(header::AUTHORIZATION, format!("Bearer {t}"));
        }
        self.send(b.body(Body::from(multipart_body(parts))).unwrap()).await
    }

    async fn upload(&self, token: &str, name: &str, bytes: &[u8]) -> ArtifactRef {
        let (status, body) = self.multipart("/v1/artifacts", Some(token), &[("file", Some(name), bytes)]).await;
        assert_eq!(status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&body));
        serde_json::from_slice(&body).unwrap()
    }

    async fn submit(&self, token: &str, request: Value) -> (StatusCode, Vec<u8>) {
        self.post("/v1/jobs", Some(token), serde_json::to_vec(&request).unwrap()).await
    }

    async fn wait_terminal(&self, job_id: &str) -> JobRecord {
        let deadline = Instant::now() + Duration::from_secs(30);
        loop {
            let (status, body) = self.get(&format!("/v1/jobs/{job_id}"), Some(ALICE)).await;
            assert_eq!(status, StatusCode::OK);
            let job: JobRecord = serde_json::from_slice(&body).unwrap();
            if matches!(job.state, JobState::Completed | JobState::Failed) {
                return job;
            }
            assert!(Instant::now() < deadline, "job did not finish");
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    }
}

fn multipart_body(parts: &[(&str, Option<&str>, &[u8])]) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, filename, bytes) in parts {
        out.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        match filename {
            Some(f) => out.extend_from_slice(
                format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"{f}\"\r\nContent-Type: application/octet-stream\r\n\r\n").as_bytes(),
            ),
            None => out.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n").as_bytes()),
        }
        out.extend_from_slice(bytes);
        out.extend_from_slice(b"\r\n");
    }
    out.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    out
}

fn request_for(dataset: &ArtifactRef) -> Value {
    json!({
        "dataset": { "namespace": dataset.namespace, "name": dataset.name, "digest": dataset.digest },
        "config": { "epochs": 5, "batch_size": 4, "learning_rate": 0.05, "task": "regression" }
    })
}

const CSV: &[u8] = b"x1,x2,y\n0.1,1.0,1.2\n0.4,0.2,0.9\n0.9,0.5,2.0\n0.3,0.7,1.1\n0.8,0.1,1.6\n";

async fn completed_job(f: &Fx) -> JobRecord {
    let dataset = f.upload(ALICE, "train.csv", CSV).await;
    let (status, body) = f.submit(ALICE, request_for(&dataset)).await;
    assert_eq!(status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&body));
    let job: JobRecord = serde_json::from_slice(&body).unwrap();
    let done = f.wait_terminal(&job.job_id).await;
    assert_eq!(done.state, JobState::Completed, "{:?}", done.failure_reason);
    done
}

async fn download(f: &Fx, job_id: &str, name: &str) -> Vec<u8> {
    let (_, body) = f.get(&format!("/v1/jobs/{job_id}/artifacts"), Some(ALICE)).await;
    let grants: Vec<ArtifactGrant> = serde_json::from_slice(&body).unwrap();
    let grant = grants.iter().find(|g| g.artifact.name == name).unwrap();
    let (status, bytes) = f.get(&grant.url, None).await;
    assert_eq!(status, StatusCode::OK);
    bytes
}

#[tokio::test(flavor = "multi_thread")]
async fn happy_path_and_all_verifications() {
    let f = Fx::new();
    let job = completed_job(&f).await;
    assert!(job.has_attestations());
    let link_name = format!("{}.link.json", job.job_id);
    let aibom_name = format!("{}.aibom.json", job.job_id);

    let (_, body) = f.get(&format!("/v1/jobs/{}/artifacts", job.job_id), Some(ALICE)).await;
    let grants: Vec<ArtifactGrant> = serde_json::from_slice(&body).unwrap();
    let mut names: Vec<_> = grants.iter().map(|g| g.artifact.name.as_str()).collect();
    names.sort();
    let mut expected = vec!["dataset.csv", "metrics.json", "model.bin", link_name.as_str(), aibom_name.as_str()];
    expected.sort();
    assert_eq!(names, expected);

    let link = download(&f, &job.job_id, &link_name).await;
    let aibom = download(&f, &job.job_id, &aibom_name).await;
    let model = download(&f, &job.job_id, "model.bin").await;

    let (status, body) = f.post("/v1/verify/aibom", None, aibom).await;
    assert_eq!(status, StatusCode::OK);
    let report: VerificationReport = serde_json::from_slice(&body).unwrap();
    assert!(report.passed, "{report:?}");

    let (_, body) = f.post("/v1/verify/link", None, link.clone()).await;
    let report: VerificationReport = serde_json::from_slice(&body).unwrap();
    assert!(report.passed, "{report:?}");

    let (status, body) = f
        .multipart("/v1/verify/hash", None, &[("link", Some("l.json"), &link), ("artifact", Some("model.bin"), &model)])
        .await;
    assert_eq!(status, StatusCode::OK);
    let m: MatchResult = serde_json::from_slice(&body).unwrap();
    assert_eq!(m.status, MatchStatus::Match);

    let mut mutated = model.clone();
    mutated[10] ^= 0x01;
    let (_, body) = f
        .multipart("/v1/verify/hash", None, &[("link", Some("l.json"), &link), ("artifact", Some("model.bin"), &mutated)])
        .await;
    let m: MatchResult = serde_json::from_slice(&body).unwrap();
    assert_eq!(m.status, MatchStatus::Mismatch);
    assert_ne!(m.expected, m.actual);

    let (_, body) = f.post("/v1/verify/storage", None, link).await;
    let report: StorageReport = serde_json::from_slice(&body).unwrap();
    assert!(report.passed, "{report:?}");
    assert_eq!(report.results.len(), 3);

    let (status, body) = f.get("/v1/keys/public", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(String::from_utf8(body).unwrap().contains("BEGIN PUBLIC KEY"));
}

#[tokio::test(flavor = "multi_thread")]
async fn access_control_and_validation() {
    let f = Fx::new();
    let dataset = f.upload(ALICE, "train.csv", CSV).await;

    let (status, _) = f.post("/v1/jobs", None, serde_json::to_vec(&request_for(&dataset)).unwrap()).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _) = f.submit("nope", request_for(&dataset)).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);

    let mut bad = request_for(&dataset);
    bad["config"]["epochs"] = json!(-1);
    let (status, body) = f.submit(ALICE, bad).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let err: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(err["fields"], json!(["epochs"]));

    let (status, _) = f.submit(BOB, request_for(&dataset)).await;
    assert_eq!(status, StatusCode::FORBIDDEN);

    let (status, body) = f.submit(ALICE, request_for(&dataset)).await;
    assert_eq!(status, StatusCode::CREATED);
    let job: JobRecord = serde_json::from_slice(&body).unwrap();
    let (status, _) = f.get(&format!("/v1/jobs/{}", job.job_id), Some(BOB)).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    let (status, _) = f.get(&format!("/v1/jobs/{}/artifacts", job.job_id), Some(BOB)).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    let (status, _) = f.get("/v1/jobs/00000000-0000-0000-0000-000000000000", Some(ALICE)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, _) = f.post("/v1/verify/link", None, b"not json".to_vec()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn grants_are_checked() {
    let f = Fx::new();
    let dataset = f.upload(ALICE, "train.csv", CSV).await;
    let ns = dataset.namespace.clone().unwrap();
    let far = chrono::Utc::now().timestamp() + 600;
    let (status, _) = f.get(&format!("/v1/objects/{ns}/train.csv?expires={far}&token=AAAAAAAAAAAAAAAAAAAAAA"), None).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    let (status, _) = f.get(&format!("/v1/objects/{ns}/train.csv"), None).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
}

#[tokio::test(flavor = "multi_thread")]
async fn job_api_accepts_no_code() {
    let f = Fx::new();
    let dataset = f.upload(ALICE, "train.csv", CSV).await;
    for (path, value) in [
        ("command", json!(["sh", "-c", "id"])),
        ("script", json!("import os")),
        ("entrypoint", json!("/bin/sh")),
    ] {
        let mut req = request_for(&dataset);
        req[path] = value.clone();
        let (status, _) = f.submit(ALICE, req).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "top-level {path}");
        let mut req = request_for(&dataset);
        req["config"][path] = value;
        let (status, _) = f.submit(ALICE, req).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "config.{path}");
    }

    // no schema property anywhere in the API is interpreted as code
    let doc = openapi::generate();
    let mut names = Vec::new();
    collect_property_names(&doc, &mut names);
    for forbidden in ["command", "script", "code", "exec", "shell", "entrypoint", "args", "cmd"] {
        assert!(!names.iter().any(|n| n == forbidden), "schema exposes {forbidden}");
    }
}

fn collect_property_names(v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            if let Some(Value::Object(props)) = map.get("properties") {
                out.extend(props.keys().cloned());
            }
            map.values().for_each(|c| collect_property_names(c, out));
        }
        Value::Array(items) => items.iter().for_each(|c| collect_property_names(c, out)),
        _ => {}
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn every_documented_route_is_served() {
    let f = Fx::new();
    for (doc, _) in aibomgen_gateway::api::routes() {
        let path = doc
            .path
            .replace("{id}", "00000000-0000-0000-0000-000000000000")
            .replace("{namespace}", "nsx")
            .replace("{*name}", "a/b.bin");
        let req = match doc.method {
            openapi::Method::Get => Request::get(&path).body(Body::empty()).unwrap(),
            openapi::Method::Post => Request::post(&path).body(Body::from("{}")).unwrap(),
        };
        let resp = f.app().oneshot(req).await.unwrap();
        assert_ne!(resp.status(), StatusCode::METHOD_NOT_ALLOWED, "{}", doc.path);
        if !doc.path.contains('{') {
            assert_ne!(resp.status(), StatusCode::NOT_FOUND, "{}", doc.path);
        }
    }
}

#[test]
fn shipped_openapi_matches_routes() {
    let shipped = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/openapi.json")).unwrap();
    assert_eq!(shipped, openapi::render(), "regenerate with `aibomgen-gateway openapi --out docs/openapi.json`");
}
