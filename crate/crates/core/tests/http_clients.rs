//! HTTP client behavior against a local test server: success, retry on
//! transient failures, timeout classification, and bad-response handling.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use caps_core::clients::{
    CaptionRequest, Captioner, ClientConfig, ClientError, EncodeKind, EncodeRequest, Encoder,
    GenerateRequest, Generator, HttpClient,
};

/// Serve each incoming request with `handler` on a background thread and
/// return the endpoint URL. The server dies with the returned guard.
fn serve(
    handler: impl Fn(usize, &str, String) -> (u16, String) + Send + Sync + 'static,
) -> (String, Arc<tiny_http::Server>) {
    let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").unwrap());
    let url = format!("http://{}", server.server_addr());
    let worker = Arc::clone(&server);
    let hits = AtomicUsize::new(0);
    std::thread::spawn(move || {
        while let Ok(mut request) = worker.recv() {
            let n = hits.fetch_add(1, Ordering::SeqCst);
            let mut body = String::new();
            let _ = request.as_reader().read_to_string(&mut body);
            let url = request.url().to_string();
            let (status, response_body) = handler(n, &url, body);
            let response = tiny_http::Response::from_string(response_body)
                .with_status_code(status)
                .with_header(
                    tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..])
                        .unwrap(),
                );
            let _ = request.respond(response);
        }
    });
    (url, server)
}

fn quick_config(url: &str) -> ClientConfig {
    let mut cfg = ClientConfig::new(url);
    cfg.timeout_s = 2.0;
    cfg.max_retries = 2;
    cfg.backoff_s = 0.05;
    cfg
}

#[test]
fn caption_round_trip_and_body_shape() {
    let (url, _guard) = serve(|_, path, body| {
        assert_eq!(path, "/caption");
        let req: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert_eq!(req["image_ref"], "img:9");
        assert!(req["instruction"].as_str().unwrap().contains("description"));
        (200, r#"{"caption": "a red bird on a branch"}"#.into())
    });
    let client = HttpClient::new(quick_config(&url));
    let resp = client.caption(&CaptionRequest::new("img:9")).unwrap();
    assert_eq!(resp.caption, "a red bird on a branch");
}

#[test]
fn generate_round_trip() {
    let (url, _guard) = serve(|_, path, body| {
        assert_eq!(path, "/generate");
        let req: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert_eq!(req["seed"], 7);
        (200, r#"{"image_ref": "gen:abc123"}"#.into())
    });
    let client = HttpClient::new(quick_config(&url));
    let resp = client
        .generate(&GenerateRequest {
            prompt: "A photo of dog.".into(),
            seed: 7,
        })
        .unwrap();
    assert_eq!(resp.image_ref, "gen:abc123");
}

#[test]
fn encode_round_trip_checks_row_count() {
    let (url, _guard) = serve(|_, _, body| {
        let req: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert_eq!(req["kind"], "text");
        assert_eq!(req["max_tokens"], 77);
        // One row for two items: malformed.
        (200, r#"{"dim": 2, "rows": [[0.6, 0.8]]}"#.into())
    });
    let client = HttpClient::new(quick_config(&url));
    let err = client
        .encode(&EncodeRequest {
            kind: EncodeKind::Text,
            items: vec!["a".into(), "b".into()],
            max_tokens: 77,
        })
        .unwrap_err();
    assert!(matches!(err, ClientError::BadResponse { .. }), "{err}");
}

#[test]
fn malformed_json_is_bad_response() {
    let (url, _guard) = serve(|_, _, _| (200, "not json at all".into()));
    let client = HttpClient::new(quick_config(&url));
    let err = client.caption(&CaptionRequest::new("img:1")).unwrap_err();
    assert!(matches!(err, ClientError::BadResponse { .. }), "{err}");
}

#[test]
fn non_200_is_bad_response_without_retry() {
    let calls = Arc::new(AtomicUsize::new(0));
    let seen = Arc::clone(&calls);
    let (url, _guard) = serve(move |_, _, _| {
        seen.fetch_add(1, Ordering::SeqCst);
        (404, r#"{"error": "no such model"}"#.into())
    });
    let client = HttpClient::new(quick_config(&url));
    let err = client.caption(&CaptionRequest::new("img:1")).unwrap_err();
    assert!(matches!(err, ClientError::BadResponse { .. }), "{err}");
    assert_eq!(calls.load(Ordering::SeqCst), 1, "client must not retry 4xx");
}

#[test]
fn transient_500_is_retried_then_succeeds() {
    let (url, _guard) = serve(|n, _, _| {
        if n == 0 {
            (500, r#"{"error": "warming up"}"#.into())
        } else {
            (200, r#"{"caption": "ok after retry"}"#.into())
        }
    });
    let client = HttpClient::new(quick_config(&url));
    let resp = client.caption(&CaptionRequest::new("img:2")).unwrap();
    assert_eq!(resp.caption, "ok after retry");
}

#[test]
fn persistent_500_exhausts_retries() {
    let calls = Arc::new(AtomicUsize::new(0));
    let seen = Arc::clone(&calls);
    let (url, _guard) = serve(move |_, _, _| {
        seen.fetch_add(1, Ordering::SeqCst);
        (500, r#"{"error": "down"}"#.into())
    });
    let client = HttpClient::new(quick_config(&url));
    let err = client.caption(&CaptionRequest::new("img:3")).unwrap_err();
    match err {
        ClientError::Exhausted { attempts, .. } => assert_eq!(attempts, 3),
        other => panic!("expected Exhausted, got {other}"),
    }
    // max_retries = 2 means at most 3 attempts total.
    assert_eq!(calls.load(Ordering::SeqCst), 3);
}

#[test]
fn slow_server_times_out_within_budget() {
    let (url, _guard) = serve(|_, _, _| {
        std::thread::sleep(Duration::from_millis(600));
        (200, r#"{"caption": "too late"}"#.into())
    });
    let mut cfg = ClientConfig::new(&url);
    cfg.timeout_s = 0.15;
    cfg.max_retries = 1;
    cfg.backoff_s = 0.05;
    let client = HttpClient::new(cfg.clone());
    let start = Instant::now();
    let err = client.caption(&CaptionRequest::new("img:4")).unwrap_err();
    let elapsed = start.elapsed().as_secs_f64();
    match err {
        ClientError::Timeout { attempts, .. } => assert_eq!(attempts, 2),
        other => panic!("expected Timeout, got {other}"),
    }
    // retries x (timeout + backoff) + timeout, with slack for scheduling.
    let budget = f64::from(cfg.max_retries) * (cfg.timeout_s + cfg.backoff_s) + cfg.timeout_s;
    assert!(
        elapsed <= budget + 0.5,
        "took {elapsed:.2}s, budget {budget:.2}s"
    );
}

#[test]
fn bearer_token_is_forwarded() {
    let (url, _guard) = serve(|_, _, _| (200, r#"{"caption": "ok"}"#.into()));
    // tiny_http exposes headers through the request; spin a dedicated server
    // to capture them.
    let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").unwrap());
    let token_url = format!("http://{}", server.server_addr());
    let worker = Arc::clone(&server);
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        if let Ok(request) = worker.recv() {
            let auth = request
                .headers()
                .iter()
                .find(|h| h.field.equiv("authorization"))
                .map(|h| h.value.as_str().to_string());
            let _ = tx.send(auth);
            let _ = request.respond(
                tiny_http::Response::from_string(r#"{"caption": "ok"}"#).with_status_code(200),
            );
        }
    });
    let mut cfg = quick_config(&token_url);
    cfg.bearer_token = Some("sekrit".into());
    let client = HttpClient::new(cfg);
    client.caption(&CaptionRequest::new("img:5")).unwrap();
    let auth = rx.recv_timeout(Duration::from_secs(5)).unwrap();
    assert_eq!(auth.as_deref(), Some("Bearer sekrit"));
    drop(url);
}
