use std::sync::Arc;
use std::time::Duration;

use msvc::http::HttpRequestData;
use msvc::mockserver::{fetch_log, reset_remote, serve, Decision, LatencyModel, MockError, RateLimit, ServerConfig};
use msvc::services::{build_service_request, parse_service_response, Params, ServiceKind};
use msvc::table::Value;
use msvc::transport::{HttpTransport, Transport};
use serde_json::json;

fn text_params(texts: &[&str]) -> Vec<Params> {
    texts
        .iter()
        .map(|t| Params::from([("text".to_owned(), Value::from(*t))]))
        .collect()
}

async fn post(transport: &HttpTransport, url: &str, body: serde_json::Value) -> (u16, serde_json::Value, Option<String>) {
    let req = HttpRequestData::post_json(url, &body, vec![]).unwrap();
    let resp = transport.send(&req).await.unwrap();
    use msvc::http::HttpMessage;
    let retry_after = resp.get_header("retry-after").map(str::to_owned);
    let body = resp
        .entity()
        .map(|e| serde_json::from_slice(&e.body).unwrap())
        .unwrap_or(serde_json::Value::Null);
    (resp.status(), body, retry_after)
}

#[tokio::test]
async fn health_and_unknown_routes() {
    let server = serve(ServerConfig::default()).await.unwrap();
    let resp = reqwest::get(format!("{}/health", server.base_url())).await.unwrap();
    assert_eq!(resp.status(), 200);
    assert_eq!(serde_json::from_slice::<serde_json::Value>(&resp.bytes().await.unwrap()).unwrap(), json!({"status": "ok"}));
    let resp = reqwest::get(format!("{}/nope", server.base_url())).await.unwrap();
    assert_eq!(resp.status(), 404);
}

#[tokio::test]
async fn second_serve_on_same_port_is_rejected() {
    let first = serve(ServerConfig::default()).await.unwrap();
    let cfg = ServerConfig {
        port: first.addr().port(),
        ..ServerConfig::default()
    };
    assert!(matches!(serve(cfg).await, Err(MockError::PortInUse(_))));
}

#[tokio::test]
async fn shutdown_refuses_connections() {
    let server = serve(ServerConfig::default()).await.unwrap();
    let url = format!("{}/health", server.base_url());
    assert!(reqwest::get(&url).await.is_ok());
    server.shutdown().await;
    assert!(reqwest::get(&url).await.is_err());
}

#[tokio::test]
async fn invalid_config_is_rejected() {
    let cfg = ServerConfig {
        fail_prob: 1.0,
        ..ServerConfig::default()
    };
    assert!(matches!(serve(cfg).await, Err(MockError::InvalidConfig(_))));
}

#[tokio::test]
async fn every_route_round_trips_through_the_parsers() {
    let server = serve(ServerConfig::default()).await.unwrap();
    let transport = HttpTransport::new();
    let image = json_image("hello world");
    let cases: Vec<(ServiceKind, Vec<Params>)> = vec![
        (ServiceKind::Sentiment, text_params(&["I love this great day", "awful", ""])),
        (ServiceKind::LanguageDetect, text_params(&["안녕하세요", "привет", "hello"])),
        (ServiceKind::KeyPhrase, text_params(&["distributed tables enable scalable services"])),
        (ServiceKind::NamedEntity, text_params(&["Ada Lovelace met Charles Babbage"])),
        (ServiceKind::Ocr, vec![Params::from([("image".to_owned(), Value::Bytes(image.clone()))])]),
        (ServiceKind::TagImage, vec![Params::from([("image".to_owned(), Value::Bytes(image))])]),
        (
            ServiceKind::AnomalyDetect,
            vec![Params::from([(
                "series".to_owned(),
                Value::List([1.0, 1.0, 1.0, 1.0, 100.0, 1.0, 1.0, 1.0, 1.0, 1.0].map(Value::from).to_vec()),
            )])],
        ),
    ];
    for (kind, batch) in cases {
        let req = build_service_request(kind, &batch, &server.base_url(), Some("key")).unwrap();
        let resp = transport.send(&req).await.unwrap();
        assert_eq!(resp.status(), 200, "{kind}");
        let parsed = parse_service_response(kind, &resp).unwrap_or_else(|e| panic!("{kind}: {e}"));
        match kind {
            ServiceKind::Sentiment => {
                let docs = parsed.get("documents").unwrap().as_list().unwrap();
                assert_eq!(docs[0].get("sentiment"), Some(&Value::from("positive")));
                assert_eq!(docs[1].get("sentiment"), Some(&Value::from("negative")));
                assert_eq!(parsed.get("errors").unwrap().as_list().unwrap().len(), 1);
            }
            ServiceKind::LanguageDetect => {
                let langs: Vec<_> = parsed.get("documents").unwrap().as_list().unwrap().iter()
                    .map(|d| d.get("detectedLanguage").unwrap().get("iso6391Name").cloned().unwrap())
                    .collect();
                assert_eq!(langs, vec![Value::from("ko"), Value::from("ru"), Value::from("en")]);
            }
            ServiceKind::Ocr => assert_eq!(parsed.get("text"), Some(&Value::from("hello world"))),
            ServiceKind::AnomalyDetect => {
                let flags = parsed.get("isAnomaly").unwrap().as_list().unwrap();
                let hits: Vec<_> = flags.iter().enumerate().filter(|(_, f)| f.as_bool() == Some(true)).map(|(i, _)| i).collect();
                assert_eq!(hits, vec![4]);
            }
            _ => {}
        }
    }
}

fn json_image(text: &str) -> Vec<u8> {
    serde_json::to_vec(&json!({ "text": text })).unwrap()
}

#[tokio::test]
async fn malformed_and_oversized_bodies() {
    let server = serve(ServerConfig::default()).await.unwrap();
    let transport = HttpTransport::new();
    let url = format!("{}/text/sentiment", server.base_url());
    assert_eq!(post(&transport, &url, json!({"nope": 1})).await.0, 400);
    let docs: Vec<_> = (0..11).map(|i| json!({"id": i.to_string(), "language": "en", "text": "x"})).collect();
    assert_eq!(post(&transport, &url, json!({ "documents": docs })).await.0, 413);
}

async fn run_sequence(cfg: ServerConfig) -> Vec<(u16, serde_json::Value, Decision, f64)> {
    let server = serve(cfg).await.unwrap();
    let transport = HttpTransport::new();
    let url = format!("{}/text/sentiment", server.base_url());
    let mut out = Vec::new();
    for i in 0..40 {
        let body = json!({"documents": [{"id": "0", "language": "en", "text": format!("good {i}")}]});
        let (status, body, _) = post(&transport, &url, body).await;
        out.push((status, body));
    }
    let log = server.log();
    out.into_iter()
        .zip(log)
        .map(|((s, b), e)| (s, b, e.decision, e.service_latency_ms))
        .collect()
}

#[tokio::test]
async fn equal_seeds_behave_identically() {
    let cfg = ServerConfig {
        latency: LatencyModel::Exponential { mean_ms: 1.0 },
        fail_prob: 0.3,
        seed: 42,
        ..ServerConfig::default()
    };
    let a = run_sequence(cfg.clone()).await;
    let b = run_sequence(cfg.clone()).await;
    assert_eq!(a, b);
    assert!(a.iter().any(|r| r.0 == 500) && a.iter().any(|r| r.0 == 200));
    let c = run_sequence(ServerConfig { seed: 43, ..cfg }).await;
    assert_ne!(a.iter().map(|r| r.0).collect::<Vec<_>>(), c.iter().map(|r| r.0).collect::<Vec<_>>());
}

#[tokio::test]
async fn constant_latency_is_honest() {
    let server = serve(ServerConfig::with_latency_ms(30.0)).await.unwrap();
    let transport = HttpTransport::new();
    let url = format!("{}/text/sentiment", server.base_url());
    for _ in 0..20 {
        post(&transport, &url, json!({"documents": [{"id": "0", "language": "en", "text": "ok"}]})).await;
    }
    for e in server.log() {
        let hold = e.hold_ms.unwrap();
        assert!((30.0..=35.0).contains(&hold), "hold {hold} ms");
    }
}

#[tokio::test]
async fn per_endpoint_latency() {
    let routes = [("/text/sentiment".to_owned(), LatencyModel::Constant { ms: 25.0 })].into();
    let server = serve(ServerConfig {
        latency: LatencyModel::PerEndpoint(routes),
        ..ServerConfig::default()
    })
    .await
    .unwrap();
    let transport = HttpTransport::new();
    let doc = json!({"documents": [{"id": "0", "language": "en", "text": "ok"}]});
    post(&transport, &format!("{}/text/sentiment", server.base_url()), doc.clone()).await;
    post(&transport, &format!("{}/text/keyPhrases", server.base_url()), doc).await;
    let log = server.log();
    assert_eq!(log[0].service_latency_ms, 25.0);
    assert_eq!(log[1].service_latency_ms, 0.0);
}

#[tokio::test]
async fn rate_limited_requests_carry_retry_after() {
    let server = serve(ServerConfig {
        rate_limit: Some(RateLimit {
            capacity: 5,
            refill_per_sec: 0.5,
            retry_after_secs: 3,
        }),
        ..ServerConfig::default()
    })
    .await
    .unwrap();
    let transport = HttpTransport::new();
    let url = format!("{}/text/sentiment", server.base_url());
    let doc = json!({"documents": [{"id": "0", "language": "en", "text": "ok"}]});
    let mut statuses = Vec::new();
    for _ in 0..6 {
        let (status, _, retry_after) = post(&transport, &url, doc.clone()).await;
        statuses.push(status);
        if status == 429 {
            assert_eq!(retry_after.as_deref(), Some("3"));
        }
    }
    assert_eq!(statuses, vec![200, 200, 200, 200, 200, 429]);
    assert_eq!(server.log()[5].decision, Decision::RateLimited);
}

#[tokio::test]
async fn served_rate_never_exceeds_ceiling() {
    let limit = RateLimit {
        capacity: 5,
        refill_per_sec: 10.0,
        retry_after_secs: 1,
    };
    let server = serve(ServerConfig {
        rate_limit: Some(limit.clone()),
        ..ServerConfig::default()
    })
    .await
    .unwrap();
    let transport = Arc::new(HttpTransport::new());
    let url = format!("{}/text/sentiment", server.base_url());
    let doc = json!({"documents": [{"id": "0", "language": "en", "text": "ok"}]});
    let deadline = tokio::time::Instant::now() + Duration::from_millis(2500);
    let mut tasks = tokio::task::JoinSet::new();
    for _ in 0..4 {
        let (t, url, doc) = (transport.clone(), url.clone(), doc.clone());
        tasks.spawn(async move {
            while tokio::time::Instant::now() < deadline {
                post(&t, &url, doc.clone()).await;
                tokio::time::sleep(Duration::from_millis(10)).await;
            }
        });
    }
    while tasks.join_next().await.is_some() {}
    let served: Vec<f64> = server
        .log()
        .iter()
        .filter(|e| e.decision != Decision::RateLimited)
        .map(|e| e.arrival_ms)
        .collect();
    let ceiling = f64::from(limit.capacity) + limit.refill_per_sec;
    for &start in &served {
        let in_window = served.iter().filter(|&&t| t >= start && t <= start + 1000.0).count();
        assert!(in_window as f64 <= ceiling, "{in_window} served in window at {start}");
    }
    assert!(server.log().iter().any(|e| e.decision == Decision::RateLimited));
}

#[tokio::test]
async fn remote_log_and_reset() {
    let server = serve(ServerConfig::default()).await.unwrap();
    let transport = HttpTransport::new();
    let url = format!("{}/text/sentiment", server.base_url());
    for _ in 0..3 {
        post(&transport, &url, json!({"documents": [{"id": "0", "language": "en", "text": "ok"}]})).await;
    }
    let log = fetch_log(&server.base_url()).await.unwrap();
    assert_eq!(log.iter().map(|e| e.seq).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert!(log.iter().all(|e| e.path == "/text/sentiment"));
    reset_remote(&server.base_url()).await.unwrap();
    assert!(fetch_log(&server.base_url()).await.unwrap().is_empty());
}
