use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use msvc::engine::{AsyncConfig, FailureKind};
use msvc::http::{Entity, HttpRequestData, HttpResponseData};
use msvc::mockserver::{semantics, serve, MockServer, ServerConfig};
use msvc::reliability::RetryPolicy;
use msvc::services::ServiceKind;
use msvc::table::{DataTable, Kind, Row, Schema, Value};
use msvc::transformer::{ExecContext, ParamBinding, Pipeline, PipelineConfig, ServiceTransformer, TransformError};
use msvc::transport::{HttpTransport, Transport, TransportError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn texts_table(texts: &[String], partitions: usize) -> DataTable {
    let schema = Schema::new([("text", Kind::Text), ("lang", Kind::Text)]).unwrap();
    let rows = texts
        .iter()
        .map(|t| Row::new(vec![t.as_str().into(), "en".into()]))
        .collect();
    DataTable::from_rows(rows, schema, partitions).unwrap()
}

fn sample_texts(n: usize) -> Vec<String> {
    let words = ["good", "bad", "great", "awful", "plain", "love", "poor", "day"];
    (0..n)
        .map(|i| format!("{} {} row{i}", words[i % 8], words[(i * 3 + 1) % 8]))
        .collect()
}

fn sentiment_on(url: &str) -> ServiceTransformer {
    ServiceTransformer::builder(ServiceKind::Sentiment)
        .url(ParamBinding::scalar(url))
        .set_param("text", ParamBinding::column("text"))
        .output_column("sentiment")
        .batch_size(10)
        .retry_policy(RetryPolicy::none())
        .async_config(AsyncConfig::new(4, 2))
        .build()
        .unwrap()
}

fn http_ctx() -> ExecContext {
    ExecContext::new(Arc::new(HttpTransport::new()))
}

async fn server() -> MockServer {
    serve(ServerConfig::default()).await.unwrap()
}

fn label(v: &Value) -> Option<&str> {
    v.get("sentiment").and_then(Value::as_str)
}

#[tokio::test]
async fn request_count_is_ceiling_per_partition() {
    let server = server().await;
    for (rows, parts) in [(100, 1), (100, 3), (37, 4)] {
        server.reset();
        let table = texts_table(&sample_texts(rows), parts);
        let out = sentiment_on(&server.base_url()).transform(&table, &http_ctx()).await.unwrap();
        let expected: usize = table.partition_sizes().iter().map(|n| n.div_ceil(10)).sum();
        assert_eq!(server.log().len(), expected, "{rows} rows / {parts} partitions");
        assert_eq!(out.num_rows(), rows);
    }
}

#[tokio::test]
async fn outputs_match_the_lexicon_rule_row_by_row() {
    let server = server().await;
    let texts = sample_texts(53);
    let table = texts_table(&texts, 3);
    let out = sentiment_on(&server.base_url()).transform(&table, &http_ctx()).await.unwrap();
    assert_eq!(out.column("text").unwrap(), table.column("text").unwrap());
    for row in out.collect() {
        let text = row.values()[0].as_str().unwrap();
        assert_eq!(label(&row.values()[2]), Some(semantics::sentiment(text).0), "{text}");
    }
}

#[tokio::test]
async fn empty_table_gains_column_without_requests() {
    let server = server().await;
    let table = texts_table(&[], 2);
    let out = sentiment_on(&server.base_url()).transform(&table, &http_ctx()).await.unwrap();
    assert_eq!(out.column_names(), vec!["text", "lang", "sentiment"]);
    assert!(server.log().is_empty());
}

#[tokio::test]
async fn scalar_and_constant_column_send_identical_payloads() {
    let server = server().await;
    let table = texts_table(&sample_texts(25), 2);
    let base = ServiceTransformer::builder(ServiceKind::Sentiment)
        .url(ParamBinding::scalar(server.base_url()))
        .set_param("text", ParamBinding::column("text"))
        .output_column("s")
        .retry_policy(RetryPolicy::none());

    let scalar = base.clone().set_param("language", ParamBinding::scalar("en")).build().unwrap();
    scalar.transform(&table, &http_ctx()).await.unwrap();
    let scalar_bodies: Vec<String> = server.log().into_iter().map(|e| e.body).collect();

    server.reset();
    let column = base.set_param("language", ParamBinding::column("lang")).build().unwrap();
    column.transform(&table, &http_ctx()).await.unwrap();
    let column_bodies: Vec<String> = server.log().into_iter().map(|e| e.body).collect();

    let (mut a, mut b) = (scalar_bodies, column_bodies);
    a.sort();
    b.sort();
    assert_eq!(a, b);
}

#[tokio::test]
async fn independent_transforms_commute() {
    let server = server().await;
    let table = texts_table(&sample_texts(30), 2);
    let sentiment = sentiment_on(&server.base_url());
    let phrases = ServiceTransformer::builder(ServiceKind::KeyPhrase)
        .url(ParamBinding::scalar(server.base_url()))
        .set_param("text", ParamBinding::column("text"))
        .output_column("phrases")
        .build()
        .unwrap();
    let ctx = http_ctx();
    let ab = phrases.transform(&sentiment.transform(&table, &ctx).await.unwrap(), &ctx).await.unwrap();
    let ba = sentiment.transform(&phrases.transform(&table, &ctx).await.unwrap(), &ctx).await.unwrap();
    for col in ["text", "sentiment", "phrases"] {
        assert_eq!(ab.column(col), ba.column(col), "{col}");
    }
}

/// Answers text routes with the mock rules, then shuffles the documents.
struct Shuffling {
    seed: u64,
    drop_id: Option<&'static str>,
}

#[async_trait]
impl Transport for Shuffling {
    async fn send(&self, req: &HttpRequestData) -> Result<HttpResponseData, TransportError> {
        let kind = ServiceKind::from_path(req.url().path()).unwrap();
        let body = &req.entity().unwrap().body;
        let mut out = semantics::handle_service(kind, body).unwrap();
        let docs = out["documents"].as_array_mut().unwrap();
        docs.retain(|d| Some(d["id"].as_str().unwrap()) != self.drop_id);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ body.len() as u64);
        docs.shuffle(&mut rng);
        Ok(HttpResponseData::new(200, "OK", vec![], Some(Entity::json(&out)), Duration::ZERO).unwrap())
    }
}

#[tokio::test]
async fn alignment_survives_response_permutations() {
    let texts = sample_texts(40);
    let table = texts_table(&texts, 2);
    let tr = sentiment_on("http://unused:1");
    for seed in 0..20 {
        let ctx = ExecContext::new(Arc::new(Shuffling { seed, drop_id: None }));
        let out = tr.transform(&table, &ctx).await.unwrap();
        for row in out.collect() {
            let text = row.values()[0].as_str().unwrap();
            assert_eq!(label(&row.values()[2]), Some(semantics::sentiment(text).0));
        }
    }
}

#[tokio::test]
async fn missing_documents_fail_only_their_rows() {
    let table = texts_table(&sample_texts(20), 1);
    let ctx = ExecContext::new(Arc::new(Shuffling {
        seed: 1,
        drop_id: Some("3"),
    }));
    let out = sentiment_on("http://unused:1").transform(&table, &ctx).await.unwrap();
    let col = out.column("sentiment").unwrap();
    for (i, v) in col.iter().enumerate() {
        if i % 10 == 3 {
            assert_eq!(v.get("error").and_then(Value::as_str), Some(FailureKind::MissingDocument.as_str()));
        } else {
            assert!(label(v).is_some(), "row {i}");
        }
    }
    assert_eq!(ctx.metrics.failures(), 2);
}

#[tokio::test]
async fn batch_failures_mark_every_row_and_downstream_skips() {
    let table = texts_table(&sample_texts(12), 1);
    // nothing listens on port 9 of the loopback
    let failing = sentiment_on("http://127.0.0.1:9");
    let ctx = http_ctx();
    let out = failing.transform(&table, &ctx).await.unwrap();
    let col = out.column("sentiment").unwrap();
    assert!(col.iter().all(|v| v.get("error").and_then(Value::as_str) == Some(FailureKind::AttemptsExhausted.as_str())), "{:?}", col[0]);
    assert_eq!(ctx.metrics.failures(), 12);

    let server = server().await;
    let downstream = ServiceTransformer::builder(ServiceKind::KeyPhrase)
        .url(ParamBinding::scalar(server.base_url()))
        .set_param("text", ParamBinding::column("sentiment"))
        .output_column("phrases")
        .build()
        .unwrap();
    let out = downstream.transform(&out, &ctx).await.unwrap();
    assert!(out.column("phrases").unwrap().iter().all(Value::is_null));
    assert!(server.log().is_empty());
}

#[tokio::test]
async fn null_required_inputs_are_skipped() {
    let server = server().await;
    let schema = Schema::new([("text", Kind::Text), ("lang", Kind::Text)]).unwrap();
    let rows = vec![
        Row::new(vec!["good".into(), Value::Null]),
        Row::new(vec![Value::Null, "en".into()]),
        Row::new(vec!["bad".into(), "en".into()]),
    ];
    let table = DataTable::from_rows(rows, schema, 1).unwrap();
    let tr = ServiceTransformer::builder(ServiceKind::Sentiment)
        .url(ParamBinding::scalar(server.base_url()))
        .set_param("text", ParamBinding::column("text"))
        .set_param("language", ParamBinding::column("lang"))
        .output_column("s")
        .build()
        .unwrap();
    let out = tr.transform(&table, &http_ctx()).await.unwrap();
    let col = out.column("s").unwrap();
    assert_eq!(label(&col[0]), Some("positive"));
    assert!(col[1].is_null());
    assert_eq!(label(&col[2]), Some("negative"));
    assert_eq!(server.log().len(), 1);
}

#[tokio::test]
async fn configuration_errors_surface_before_any_request() {
    let server = server().await;
    let table = texts_table(&sample_texts(5), 1);
    let bad = ServiceTransformer::builder(ServiceKind::Sentiment)
        .url(ParamBinding::scalar(server.base_url()))
        .set_param("text", ParamBinding::column("missing"))
        .output_column("s")
        .build()
        .unwrap();
    let good = sentiment_on(&server.base_url());
    let pipeline = Pipeline::new(vec![good, bad]).unwrap();
    assert_eq!(
        pipeline.transform(&table, &http_ctx()).await.unwrap_err(),
        TransformError::MissingColumn("missing".into())
    );
    assert!(server.log().is_empty());

    let dup = sentiment_on(&server.base_url())
        .transform(&table, &http_ctx())
        .await
        .unwrap();
    assert_eq!(
        sentiment_on(&server.base_url()).transform(&dup, &http_ctx()).await.unwrap_err(),
        TransformError::DuplicateOutputColumn("sentiment".into())
    );
}

#[tokio::test]
async fn empty_pipeline_is_identity() {
    let table = texts_table(&sample_texts(7), 2);
    let out = Pipeline::default().transform(&table, &http_ctx()).await.unwrap();
    assert_eq!(out, table);
}

#[tokio::test]
async fn language_then_sentiment_pipeline_from_json() {
    let server = server().await;
    let texts: Vec<String> = ["good morning", "привет хорошо", "안녕하세요", "こんにちは", "你好", "bad day"]
        .iter()
        .cycle()
        .take(30)
        .map(|s| s.to_string())
        .collect();
    let table = texts_table(&texts, 2);
    let config = PipelineConfig::from_json(
        r#"{"stages":[
          {"service":"language_detect","inputs":{"text":{"column":"text"}},"output_column":"detected"},
          {"service":"sentiment","inputs":{"text":{"column":"text"},
            "language":{"column":"detected.detectedLanguage.iso6391Name"}},"output_column":"sentiment"}
        ]}"#,
    )
    .unwrap();
    let pipeline = config.build(Some(&server.base_url())).unwrap();
    let out = pipeline.transform(&table, &http_ctx()).await.unwrap();

    let mut sent_lang = std::collections::HashMap::new();
    for entry in server.log().iter().filter(|e| e.path == "/text/sentiment") {
        let body: serde_json::Value = serde_json::from_str(&entry.body).unwrap();
        for doc in body["documents"].as_array().unwrap() {
            sent_lang.insert(doc["text"].as_str().unwrap().to_owned(), doc["language"].as_str().unwrap().to_owned());
        }
    }
    for row in out.collect() {
        let text = row.values()[0].as_str().unwrap();
        let detected = row.values()[2]
            .get("detectedLanguage")
            .and_then(|d| d.get("iso6391Name"))
            .and_then(Value::as_str)
            .unwrap();
        assert_eq!(detected, semantics::detect_language(text));
        assert_eq!(sent_lang[text], detected, "{text}");
    }
}
