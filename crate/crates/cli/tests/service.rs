mod common;

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use common::{fit_inputs, fixture, ok, s};
use head360::checkpoint::Checkpoint;
use head360_cli::api::{sha256_hex, unzip_files, ModelInfo};
use head360_cli::server::{router, AppState, JobRecord, JobState, ServerConfig};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

fn state(queue: usize) -> Arc<AppState> {
    let ck = Checkpoint::load(&fixture().checkpoint).unwrap();
    AppState::new(ck, ServerConfig { max_size: 64, queue })
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, String, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_string())
        .unwrap_or_default();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, ctype, body)
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post_json(uri: &str, body: &str) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

const BOUNDARY: &str = "head360-test-boundary";

fn multipart(parts: &[(&str, &[u8])]) -> Request<Body> {
    let mut body = Vec::new();
    for (name, bytes) in parts {
        body.extend_from_slice(format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{name}\"\r\n\r\n").as_bytes());
        body.extend_from_slice(bytes);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    Request::post("/fit")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

fn fit_parts(config: &str) -> Vec<(&'static str, Vec<u8>)> {
    let (image, mask, landmarks) = fit_inputs(fixture(), 1, 0);
    vec![
        ("image", std::fs::read(image).unwrap()),
        ("mask", std::fs::read(mask).unwrap()),
        ("landmarks", landmarks),
        ("camera_id", b"0".to_vec()),
        ("config", config.as_bytes().to_vec()),
    ]
}

fn fit_request(config: &str) -> Request<Body> {
    let parts = fit_parts(config);
    let refs: Vec<(&str, &[u8])> = parts.iter().map(|(n, b)| (*n, b.as_slice())).collect();
    multipart(&refs)
}

#[tokio::test]
async fn healthz_and_model() {
    let app = router(state(2));
    let (status, _, body) = send(&app, get("/healthz")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"ok");
    let (status, ctype, body) = send(&app, get("/model")).await;
    assert_eq!(status, StatusCode::OK);
    assert!(ctype.starts_with("application/json"));
    let info: ModelInfo = serde_json::from_slice(&body).unwrap();
    assert_eq!((info.r, info.E, info.H), (2, 2, 2));
    assert_eq!(info.texture_ids, vec![0, 1]);
    assert_eq!(info.rig.cameras, 4);
    assert_eq!(info.max_size, 64);
}

#[tokio::test]
async fn render_is_deterministic_png() {
    let app = router(state(2));
    let body = r#"{"texture":1,"hairstyle":1,"camera_id":2,"activations":[0.4]}"#;
    let (status, ctype, a) = send(&app, post_json("/render", body)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype, "image/png");
    let (_, _, b) = send(&app, post_json("/render", body)).await;
    assert_eq!(a, b);
    assert_eq!(&a[1..4], b"PNG");
}

#[tokio::test]
async fn render_error_statuses() {
    let app = router(state(2));
    let cases = [
        (r#"{"activations":[0.1,0.2]}"#, StatusCode::UNPROCESSABLE_ENTITY),
        (r#"{"s":[1.0]}"#, StatusCode::UNPROCESSABLE_ENTITY),
        (r#"{"size":65}"#, StatusCode::UNPROCESSABLE_ENTITY),
        (r#"{"samples":1}"#, StatusCode::UNPROCESSABLE_ENTITY),
        (r#"{"texture":9}"#, StatusCode::NOT_FOUND),
        (r#"{"hairstyle":"mohawk"}"#, StatusCode::NOT_FOUND),
        (r#"{"camera_id":99}"#, StatusCode::NOT_FOUND),
        (r#"{"texture":{"job":"nope"}}"#, StatusCode::NOT_FOUND),
        (r#"{"activations":[0.1"#, StatusCode::BAD_REQUEST),
        (r#"{"zoom":3}"#, StatusCode::BAD_REQUEST),
        (r#"{"camera_id":0,"camera":{"id":0,"width":8,"height":8,"fx":10,"fy":10,"cx":4,"cy":4,"R":[1,0,0,0,1,0,0,0,1],"t":[0,0,3]}}"#, StatusCode::BAD_REQUEST),
    ];
    for (body, want) in cases {
        let (status, ctype, bytes) = send(&app, post_json("/render", body)).await;
        assert_eq!(status, want, "{body}");
        assert!(ctype.starts_with("application/json"));
        let err: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        assert!(err["error"].is_string());
    }
}

#[tokio::test]
async fn animate_returns_zip_of_frames() {
    let app = router(state(2));
    let stream = r#"[{"activations":[0],"camera_id":0},{"activations":[1],"camera_id":0}]"#;
    let (status, ctype, zip) = send(&app, post_json("/animate", stream)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype, "application/zip");
    let files = unzip_files(&zip).unwrap();
    let names: Vec<&str> = files.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["frame_0000.png", "frame_0001.png"]);
    let (_, _, still) = send(&app, post_json("/render", r#"{"camera_id":0,"activations":[0]}"#)).await;
    assert_eq!(files[0].1, still);
    assert_ne!(files[0].1, files[1].1);

    let full = r#"{"frames":[{"activations":[0],"camera_id":1}],"texture":1,"hairstyle":0}"#;
    let (status, _, zip) = send(&app, post_json("/animate", full)).await;
    assert_eq!(status, StatusCode::OK);
    let (_, _, still) = send(&app, post_json("/render", r#"{"camera_id":1,"texture":1,"hairstyle":0}"#)).await;
    assert_eq!(unzip_files(&zip).unwrap()[0].1, still);

    let (status, _, _) = send(&app, post_json("/animate", r#"[{"activations":[0,1],"camera_id":0}]"#)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _, _) = send(&app, post_json("/animate", "[")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

async fn job(app: &Router, id: &str) -> JobRecord {
    let (status, _, body) = send(app, get(&format!("/jobs/{id}"))).await;
    assert_eq!(status, StatusCode::OK);
    serde_json::from_slice(&body).unwrap()
}

#[tokio::test]
async fn fit_job_lifecycle() {
    let app = router(state(2));
    let (status, _, body) = send(&app, fit_request(r#"{"texture_steps":30,"rays_per_step":64}"#)).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let rec: JobRecord = serde_json::from_slice(&body).unwrap();
    assert_eq!(rec.kind, "fit");
    assert_eq!(rec.state, JobState::Queued);
    assert_eq!(rec.id.len(), 26);

    let (mut last_state, mut last_progress) = (rec.state, 0.0);
    let done = loop {
        let r = job(&app, &rec.id).await;
        assert!(r.state >= last_state, "{:?} after {:?}", r.state, last_state);
        assert!(r.progress >= last_progress);
        (last_state, last_progress) = (r.state, r.progress);
        match r.state {
            JobState::Done => break r,
            JobState::Failed => panic!("fit failed: {:?}", r.error),
            _ => tokio::time::sleep(Duration::from_millis(20)).await,
        }
    };
    assert_eq!(done.progress, 1.0);
    assert_eq!(done.result.as_deref(), Some(format!("/jobs/{}/result", rec.id).as_str()));

    let mut digests = Vec::new();
    for _ in 0..3 {
        let (status, ctype, zip) = send(&app, get(&format!("/jobs/{}/result", rec.id))).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(ctype, "application/zip");
        digests.push(sha256_hex(&zip));
        let names: Vec<String> = unzip_files(&zip).unwrap().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["shape.json", "texture.bin", "head.json", "report.json"]);
    }
    assert!(digests.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(job(&app, &rec.id).await, done);

    let req = format!(r#"{{"texture":{{"job":"{}"}},"hairstyle":0}}"#, rec.id);
    let (status, ctype, _) = send(&app, post_json("/render", &req)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype, "image/png");
}

#[tokio::test]
async fn fit_results_match_between_jobs() {
    let app = router(state(2));
    let mut digests = Vec::new();
    for _ in 0..2 {
        let (_, _, body) = send(&app, fit_request(r#"{"texture_steps":5,"rays_per_step":32}"#)).await;
        let rec: JobRecord = serde_json::from_slice(&body).unwrap();
        while job(&app, &rec.id).await.state != JobState::Done {
            assert_ne!(job(&app, &rec.id).await.state, JobState::Failed);
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
        let (_, _, zip) = send(&app, get(&format!("/jobs/{}/result", rec.id))).await;
        digests.push(sha256_hex(&zip));
    }
    assert_eq!(digests[0], digests[1]);
}

#[tokio::test]
async fn fit_rejects_bad_uploads() {
    let app = router(state(2));
    let parts = fit_parts("{}");
    let without_mask: Vec<(&str, &[u8])> = parts.iter().filter(|(n, _)| *n != "mask").map(|(n, b)| (*n, b.as_slice())).collect();
    assert_eq!(send(&app, multipart(&without_mask)).await.0, StatusCode::BAD_REQUEST);

    let mut bad_lm: Vec<(&str, &[u8])> = parts.iter().map(|(n, b)| (*n, b.as_slice())).collect();
    bad_lm[2].1 = br#"[{"vertex": 999999, "pixel": [1, 1]}]"#;
    assert_eq!(send(&app, multipart(&bad_lm)).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let mut bad_act: Vec<(&str, &[u8])> = parts.iter().map(|(n, b)| (*n, b.as_slice())).collect();
    bad_act.push(("activations", b"[0.5, 0.5]"));
    assert_eq!(send(&app, multipart(&bad_act)).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let mut bad_cfg: Vec<(&str, &[u8])> = parts.iter().map(|(n, b)| (*n, b.as_slice())).collect();
    bad_cfg[4].1 = b"{\"texture_steps\": \"many\"}";
    assert_eq!(send(&app, multipart(&bad_cfg)).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn unknown_and_unfinished_jobs() {
    let app = router(state(1));
    assert_eq!(send(&app, get("/jobs/01ARZ3NDEKTSV4RRFFQ69G5FAV")).await.0, StatusCode::NOT_FOUND);
    assert_eq!(send(&app, get("/jobs/01ARZ3NDEKTSV4RRFFQ69G5FAV/result")).await.0, StatusCode::NOT_FOUND);

    // A long fit occupies the worker; with one queue slot the third submission bounces.
    let slow = r#"{"texture_steps":100000,"rays_per_step":64}"#;
    let mut statuses = Vec::new();
    let mut first = None;
    for _ in 0..3 {
        let (status, _, body) = send(&app, fit_request(slow)).await;
        if first.is_none() {
            first = Some(serde_json::from_slice::<JobRecord>(&body).unwrap().id);
        }
        statuses.push(status);
    }
    assert_eq!(statuses[0], StatusCode::ACCEPTED);
    assert_eq!(statuses[2], StatusCode::SERVICE_UNAVAILABLE);
    let id = first.unwrap();
    let (status, _, _) = send(&app, get(&format!("/jobs/{id}/result"))).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn cli_and_service_render_identical_bytes() {
    let f = fixture();
    let app = router(state(2));
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in 0..5 {
        let req = serde_json::json!({
            "s": [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
            "activations": [rng.random_range(0.0..1.0)],
            "texture": rng.random_range(0..2),
            "hairstyle": rng.random_range(0..2),
            "camera_id": rng.random_range(0..4),
            "size": rng.random_range(12..40),
            "samples": rng.random_range(8..32),
        })
        .to_string();
        let (status, _, body) = send(&app, post_json("/render", &req)).await;
        assert_eq!(status, StatusCode::OK, "{req}");
        let req_path = dir.path().join(format!("req{k}.json"));
        let png = dir.path().join(format!("out{k}.png"));
        std::fs::write(&req_path, &req).unwrap();
        ok(&["render", "--checkpoint", s(&f.checkpoint), "--request", s(&req_path), "--max-size", "64", "--out", s(&png)]);
        assert_eq!(std::fs::read(&png).unwrap(), body, "{req}");
    }
}
