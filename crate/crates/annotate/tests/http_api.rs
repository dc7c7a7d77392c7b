mod common;

use std::collections::HashSet;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use common::{campaign, PROVENANCE_TOKENS};
use cxrinf_annotate::http::router;
use cxrinf_annotate::{ManualClock, Progress, TaskPayload, DEFAULT_LOCK_TTL};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>, Option<String>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&b).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_string());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes, ctype)
}

fn app(n1: usize, n2: usize) -> (tempfile::TempDir, Arc<ManualClock>, Router) {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::new(1_700_000_000_000));
    let c = campaign(dir.path(), clock.clone(), n1, n2);
    (dir, clock, router(Arc::new(Mutex::new(c))))
}

#[tokio::test]
async fn task_payload_shape_and_blinding() {
    let (_dir, _clock, app) = app(3, 3);
    let mut stages = Vec::new();
    for r in 0..6 {
        let (status, bytes, _) = call(&app, "GET", &format!("/api/tasks/next?reviewer=r{r}"), None).await;
        assert_eq!(status, StatusCode::OK);
        let text = String::from_utf8(bytes.clone()).unwrap().to_lowercase();
        for tok in PROVENANCE_TOKENS {
            assert!(!text.contains(tok), "payload leaks `{tok}`: {text}");
        }
        let v: Value = serde_json::from_slice(&bytes).unwrap();
        let keys: HashSet<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        assert_eq!(keys, HashSet::from(["task_id", "image_url", "candidates", "stage", "allow_reject_all"]));
        let p: TaskPayload = serde_json::from_value(v).unwrap();
        let labels: Vec<_> = p.candidates.iter().map(|c| c.label.as_str()).collect();
        match p.stage {
            cxrinf_annotate::Stage::Stage1 => {
                assert_eq!(labels, ["A", "B", "C", "D"]);
                assert!(!p.allow_reject_all);
            }
            cxrinf_annotate::Stage::Stage2 => {
                assert_eq!(labels, ["A", "B", "C", "D", "E"]);
                assert!(p.allow_reject_all);
            }
        }
        stages.push(p.stage);
        let (status, png, ctype) = call(&app, "GET", &p.image_url, None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(ctype.as_deref(), Some("image/png"));
        let img = image_crate_decode(&png);
        assert_eq!(img, (16, 16, 8));
        for c in &p.candidates {
            let (status, png, _) = call(&app, "GET", &c.mask_url, None).await;
            assert_eq!(status, StatusCode::OK);
            assert_eq!(image_crate_decode(&png), (16, 16, 8));
        }
    }
    assert_eq!(stages.iter().filter(|s| **s == cxrinf_annotate::Stage::Stage1).count(), 3);
    let (status, _, _) = call(&app, "GET", "/api/tasks/next?reviewer=r9", None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
}

/// Width, height and bit depth of a PNG, read from its IHDR chunk.
fn image_crate_decode(png: &[u8]) -> (u32, u32, u8) {
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
    let w = u32::from_be_bytes(png[16..20].try_into().unwrap());
    let h = u32::from_be_bytes(png[20..24].try_into().unwrap());
    (w, h, png[24])
}

#[tokio::test]
async fn selection_status_codes() {
    let (_dir, _clock, app) = app(1, 1);
    let (_, bytes, _) = call(&app, "GET", "/api/tasks/next?reviewer=ana", None).await;
    let s1: TaskPayload = serde_json::from_slice(&bytes).unwrap();
    let sel = |id: &str| format!("/api/tasks/{id}/selection");

    let (st, _, _) = call(&app, "POST", &sel(&s1.task_id), Some(json!({"reviewer": "ana", "choice": "REJECT_ALL"}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _, _) = call(&app, "POST", &sel(&s1.task_id), Some(json!({"reviewer": "ana", "choice": "lol"}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _, _) = call(&app, "POST", &sel(&s1.task_id), Some(json!({"reviewer": "ana"}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _, _) = call(&app, "POST", &sel(&s1.task_id), Some(json!({"reviewer": "bo", "choice": "B"}))).await;
    assert_eq!(st, StatusCode::CONFLICT);
    let (st, _, _) = call(&app, "POST", &sel("nope"), Some(json!({"reviewer": "ana", "choice": "B"}))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);

    let (st, body, _) = call(&app, "POST", &sel(&s1.task_id), Some(json!({"reviewer": "ana", "choice": "B"}))).await;
    assert_eq!(st, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["status"], "completed");
    let (st, _, _) = call(&app, "POST", &sel(&s1.task_id), Some(json!({"reviewer": "ana", "choice": "B"}))).await;
    assert_eq!(st, StatusCode::CONFLICT, "double submission");

    let (_, bytes, _) = call(&app, "GET", "/api/tasks/next?reviewer=ana", None).await;
    let s2: TaskPayload = serde_json::from_slice(&bytes).unwrap();
    let (st, body, _) = call(&app, "POST", &sel(&s2.task_id), Some(json!({"reviewer": "ana", "choice": "REJECT_ALL"}))).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["status"], "rejected_all");

    let (st, body, _) = call(&app, "GET", "/api/progress", None).await;
    assert_eq!(st, StatusCode::OK);
    let p: Progress = serde_json::from_slice(&body).unwrap();
    assert_eq!(
        p,
        Progress {
            open: 0,
            locked: 0,
            completed: 1,
            rejected_all: 1,
            fallback_pending: 1
        }
    );
}

#[tokio::test]
async fn missing_reviewer_and_unknown_blobs() {
    let (_dir, _clock, app) = app(1, 0);
    let (st, _, _) = call(&app, "GET", "/api/tasks/next", None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _, _) = call(&app, "GET", "/api/tasks/next?reviewer=", None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _, _) = call(&app, "GET", &format!("/api/masks/{}", "0".repeat(64)), None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _, _) = call(&app, "GET", "/api/images/..%2Fevents.jsonl", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn expired_lock_reappears_and_stale_submit_conflicts() {
    let (_dir, clock, app) = app(1, 0);
    let (_, bytes, _) = call(&app, "GET", "/api/tasks/next?reviewer=ana", None).await;
    let t: TaskPayload = serde_json::from_slice(&bytes).unwrap();
    let (st, _, _) = call(&app, "GET", "/api/tasks/next?reviewer=bo", None).await;
    assert_eq!(st, StatusCode::NO_CONTENT);
    let (st, _, _) = call(&app, "GET", "/api/progress", None).await;
    assert_eq!(st, StatusCode::OK);

    clock.advance(DEFAULT_LOCK_TTL / 2);
    let (st, _, _) = call(&app, "POST", &format!("/api/tasks/{}/renew", t.task_id), Some(json!({"reviewer": "ana"}))).await;
    assert_eq!(st, StatusCode::OK);
    clock.advance(DEFAULT_LOCK_TTL / 2 + Duration::from_secs(1));
    let (st, _, _) = call(&app, "GET", "/api/tasks/next?reviewer=bo", None).await;
    assert_eq!(st, StatusCode::NO_CONTENT, "renewed lock still live");

    clock.advance(DEFAULT_LOCK_TTL);
    let (st, bytes, _) = call(&app, "GET", "/api/tasks/next?reviewer=bo", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<TaskPayload>(&bytes).unwrap().task_id, t.task_id);
    let (st, _, _) = call(
        &app,
        "POST",
        &format!("/api/tasks/{}/selection", t.task_id),
        Some(json!({"reviewer": "ana", "choice": "A"})),
    )
    .await;
    assert_eq!(st, StatusCode::CONFLICT);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_reviewers_never_share_a_task() {
    let (_dir, _clock, app) = app(10, 10);
    let mut handles = Vec::new();
    for r in 0..8 {
        let app = app.clone();
        handles.push(tokio::spawn(async move {
            let mut got = Vec::new();
            loop {
                let uri = format!("/api/tasks/next?reviewer=r{r}");
                let (st, bytes, _) = call(&app, "GET", &uri, None).await;
                if st == StatusCode::NO_CONTENT {
                    break;
                }
                let t: TaskPayload = serde_json::from_slice(&bytes).unwrap();
                let (st, _, _) = call(
                    &app,
                    "POST",
                    &format!("/api/tasks/{}/selection", t.task_id),
                    Some(json!({"reviewer": format!("r{r}"), "choice": "A"})),
                )
                .await;
                assert_eq!(st, StatusCode::OK);
                got.push(t.task_id);
            }
            got
        }));
    }
    let mut all = Vec::new();
    for h in handles {
        all.extend(h.await.unwrap());
    }
    let unique: HashSet<_> = all.iter().collect();
    assert_eq!(all.len(), 20);
    assert_eq!(unique.len(), 20);
}

#[tokio::test]
async fn serves_over_a_real_socket() {
    let dir = tempfile::tempdir().unwrap();
    let c = campaign(dir.path(), Arc::new(ManualClock::new(0)), 0, 0);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(Arc::new(Mutex::new(c)))).await });
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    stream
        .write_all(b"GET /api/progress HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut buf = Vec::new();
    stream.read_to_end(&mut buf).await.unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("HTTP/1.1 200"), "{text}");
    assert!(text.contains("\"fallback_pending\":0"), "{text}");
}
