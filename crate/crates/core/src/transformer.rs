//! Service transformers: table in, same table plus one enrichment column out.
//!
//! A [`ServiceTransformer`] binds each service parameter either to a scalar
//! shared by every row or to a column read per row, groups rows into
//! batches, sends each batch through the retrying client on the async
//! engine, and fans responses back out to rows by the echoed document id.
//!
//! ```no_run
//! # use msvc::transformer::{ParamBinding, ServiceTransformer};
//! # use msvc::services::ServiceKind;
//! let sentiment = ServiceTransformer::builder(ServiceKind::Sentiment)
//!     .url(ParamBinding::scalar("http://127.0.0.1:8080"))
//!     .set_param("text", ParamBinding::column("text"))
//!     .set_param("language", ParamBinding::scalar("en"))
//!     .output_column("sentiment")
//!     .batch_size(10)
//!     .build()
//!     .unwrap();
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{run_partitions, AsyncConfig, EngineError, Failure, FailureKind};
use crate::metrics::Metrics;
use crate::reliability::{
    send_with_policy, BackpressureGate, Clock, LastError, RetryPolicy, SendContext, SendError, TokioClock,
};
use crate::services::{build_service_request, parse_service_response, series_len, Params, ServiceError, ServiceKind};
use crate::table::{DataTable, Kind, Row, Schema, TableError, Value};
use crate::transport::{Transport, TransportError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransformError {
    #[error("{service} has no parameter `{name}`")]
    UnknownParameter { service: ServiceKind, name: String },
    #[error("missing required parameter `{0}`")]
    MissingRequiredParameter(String),
    #[error("no url bound")]
    MissingUrl,
    #[error("no output column set")]
    MissingOutputColumn,
    #[error("batch size {got} outside 1..={max} for {service}")]
    InvalidBatchSize { service: ServiceKind, max: usize, got: usize },
    #[error("binding refers to missing column `{0}`")]
    MissingColumn(String),
    #[error("output column `{0}` already exists")]
    DuplicateOutputColumn(String),
    #[error("batch response ids do not match the request: {0}")]
    BatchShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Table(#[from] TableError),
}

/// Where a parameter's value comes from.
///
/// A column name may carry a dotted path (`"detected.detectedLanguage.iso6391Name"`)
/// to reach into a map-valued column. An exact column name always wins over
/// path interpretation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamBinding {
    #[serde(rename = "value", with = "json_value")]
    Scalar(Value),
    Column(String),
}

mod json_value {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::table::Value;

    pub fn serialize<S: Serializer>(v: &Value, s: S) -> Result<S::Ok, S::Error> {
        v.to_json().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Value, D::Error> {
        let json = serde_json::Value::deserialize(d)?;
        Value::from_json(&json).map_err(serde::de::Error::custom)
    }
}

impl ParamBinding {
    pub fn scalar(v: impl Into<Value>) -> Self {
        ParamBinding::Scalar(v.into())
    }

    pub fn column(name: impl Into<String>) -> Self {
        ParamBinding::Column(name.into())
    }

    /// The table column this binding reads, if any.
    fn root_column<'a>(&'a self, schema: &Schema) -> Option<&'a str> {
        match self {
            ParamBinding::Scalar(_) => None,
            ParamBinding::Column(name) if schema.contains(name) => Some(name),
            ParamBinding::Column(name) => Some(name.split('.').next().unwrap_or(name)),
        }
    }

    fn check(&self, schema: &Schema) -> Result<(), TransformError> {
        match self.root_column(schema) {
            Some(col) if !schema.contains(col) => {
                let ParamBinding::Column(name) = self else { unreachable!() };
                Err(TransformError::MissingColumn(name.clone()))
            }
            _ => Ok(()),
        }
    }

    /// Reads the bound value for `row`.
    pub fn resolve(&self, schema: &Schema, row: &Row) -> Result<Value, TransformError> {
        match self {
            ParamBinding::Scalar(v) => Ok(v.clone()),
            ParamBinding::Column(name) => {
                if let Some(i) = schema.index_of(name) {
                    return Ok(row.values()[i].clone());
                }
                let mut parts = name.split('.');
                let root = parts.next().unwrap_or(name);
                let i = schema
                    .index_of(root)
                    .ok_or_else(|| TransformError::MissingColumn(name.clone()))?;
                let mut cur = &row.values()[i];
                for key in parts {
                    match cur.get(key) {
                        Some(v) => cur = v,
                        None => return Ok(Value::Null),
                    }
                }
                Ok(cur.clone())
            }
        }
    }
}

/// Shared runtime pieces for executing transformers.
#[derive(Clone)]
pub struct ExecContext {
    pub transport: Arc<dyn Transport>,
    pub gate: Arc<BackpressureGate>,
    pub clock: Arc<dyn Clock>,
    pub metrics: Arc<Metrics>,
}

impl ExecContext {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        ExecContext {
            transport,
            gate: Arc::new(BackpressureGate::new()),
            clock: Arc::new(TokioClock),
            metrics: Arc::new(Metrics::new()),
        }
    }

    /// Same transport and gate, fresh metrics.
    pub fn with_fresh_metrics(&self) -> Self {
        ExecContext {
            metrics: Arc::new(Metrics::new()),
            ..self.clone()
        }
    }
}

/// An immutable, validated enrichment step.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceTransformer {
    service: ServiceKind,
    url: ParamBinding,
    api_key: Option<ParamBinding>,
    inputs: BTreeMap<String, ParamBinding>,
    output_column: String,
    batch_size: usize,
    retry_policy: RetryPolicy,
    async_config: AsyncConfig,
}

#[derive(Debug, Clone)]
pub struct ServiceTransformerBuilder {
    service: ServiceKind,
    url: Option<ParamBinding>,
    api_key: Option<ParamBinding>,
    inputs: BTreeMap<String, ParamBinding>,
    output_column: Option<String>,
    batch_size: Option<usize>,
    retry_policy: RetryPolicy,
    async_config: AsyncConfig,
}

impl ServiceTransformerBuilder {
    pub fn url(mut self, binding: ParamBinding) -> Self {
        self.url = Some(binding);
        self
    }

    pub fn api_key(mut self, binding: ParamBinding) -> Self {
        self.api_key = Some(binding);
        self
    }

    /// Binds a service parameter. A later call for the same name replaces
    /// the earlier binding.
    pub fn set_param(mut self, name: impl Into<String>, binding: ParamBinding) -> Self {
        self.inputs.insert(name.into(), binding);
        self
    }

    pub fn output_column(mut self, name: impl Into<String>) -> Self {
        self.output_column = Some(name.into());
        self
    }

    pub fn batch_size(mut self, n: usize) -> Self {
        self.batch_size = Some(n);
        self
    }

    pub fn retry_policy(mut self, policy: RetryPolicy) -> Self {
        self.retry_policy = policy;
        self
    }

    pub fn async_config(mut self, cfg: AsyncConfig) -> Self {
        self.async_config = cfg;
        self
    }

    pub fn build(self) -> Result<ServiceTransformer, TransformError> {
        let service = self.service;
        if let Some(name) = self.inputs.keys().find(|n| !service.accepts_param(n)) {
            return Err(TransformError::UnknownParameter {
                service,
                name: name.clone(),
            });
        }
        if let Some(missing) = service.spec().required.iter().find(|r| !self.inputs.contains_key(**r)) {
            return Err(TransformError::MissingRequiredParameter((*missing).to_owned()));
        }
        let url = self.url.ok_or(TransformError::MissingUrl)?;
        let output_column = self
            .output_column
            .filter(|c| !c.is_empty())
            .ok_or(TransformError::MissingOutputColumn)?;
        let batch_size = self.batch_size.unwrap_or(service.max_batch());
        if !(1..=service.max_batch()).contains(&batch_size) {
            return Err(TransformError::InvalidBatchSize {
                service,
                max: service.max_batch(),
                got: batch_size,
            });
        }
        self.retry_policy
            .validate()
            .map_err(|e| TransformError::Config(e.to_string()))?;
        self.async_config.validate()?;
        Ok(ServiceTransformer {
            service,
            url,
            api_key: self.api_key,
            inputs: self.inputs,
            output_column,
            batch_size,
            retry_policy: self.retry_policy,
            async_config: self.async_config,
        })
    }
}

/// Consecutive chunks of `size`; only the last may be shorter.
pub fn batch_partition<T>(items: Vec<T>, size: usize) -> Vec<Vec<T>> {
    assert!(size >= 1, "batch size must be positive");
    let mut out = Vec::with_capacity(items.len().div_ceil(size));
    let mut it = items.into_iter().peekable();
    while it.peek().is_some() {
        out.push(it.by_ref().take(size).collect());
    }
    out
}

/// Fans a parsed batch response out to its rows.
///
/// Document responses are matched by id (the decimal batch index). Rows
/// named in `errors` get a service failure; rows absent from both get a
/// missing-document failure. Ids outside the batch are rejected. Non-document
/// responses belong to a single-row batch.
pub fn unbatch_responses(batch_len: usize, parsed: &Value) -> Result<Vec<Result<Value, Failure>>, TransformError> {
    let Some(docs) = parsed.get("documents").and_then(Value::as_list) else {
        if batch_len != 1 {
            return Err(TransformError::BatchShapeMismatch(format!(
                "single result for a batch of {batch_len}"
            )));
        }
        return Ok(vec![Ok(parsed.clone())]);
    };
    let slot = |id: Option<&Value>| -> Result<usize, TransformError> {
        let id = id.and_then(Value::as_str).unwrap_or_default();
        id.parse::<usize>()
            .ok()
            .filter(|i| *i < batch_len && i.to_string() == id)
            .ok_or_else(|| TransformError::BatchShapeMismatch(format!("unexpected id {id:?}")))
    };
    let mut out: Vec<Option<Result<Value, Failure>>> = vec![None; batch_len];
    for doc in docs {
        let i = slot(doc.get("id"))?;
        let mut fields = doc.as_map().cloned().unwrap_or_default();
        fields.remove("id");
        out[i] = Some(Ok(Value::Map(fields)));
    }
    for err in parsed.get("errors").and_then(Value::as_list).unwrap_or_default() {
        let i = slot(err.get("id"))?;
        let message = match err.get("error") {
            Some(Value::Text(s)) => s.clone(),
            Some(other) => format!("{:?}", other.to_json()),
            None => "service error".into(),
        };
        out[i] = Some(Err(Failure::new(FailureKind::ServiceError, message, 1)));
    }
    Ok(out
        .into_iter()
        .map(|o| o.unwrap_or_else(|| Err(Failure::new(FailureKind::MissingDocument, "no result for document", 1))))
        .collect())
}

/// One request's worth of rows.
struct Batch {
    rows: Vec<usize>,
    params: Vec<Params>,
    url: String,
    api_key: Option<String>,
}

fn send_failure(e: SendError) -> Failure {
    let attempts = e.attempts();
    let kind = match &e {
        SendError::AttemptsExhausted {
            last: LastError::Transport(TransportError::Timeout),
            ..
        } => FailureKind::Timeout,
        SendError::AttemptsExhausted { .. } => FailureKind::AttemptsExhausted,
        SendError::ClientError { .. } => FailureKind::ClientError,
        SendError::NonRetryable { .. } => FailureKind::ServerError,
        SendError::Transport {
            error: TransportError::Timeout,
            ..
        } => FailureKind::Timeout,
        SendError::Transport { .. } => FailureKind::Transport,
    };
    Failure::new(kind, e.to_string(), attempts)
}

enum BadResponse {
    Schema(String),
    Shape(String),
}

impl ServiceTransformer {
    pub fn builder(service: ServiceKind) -> ServiceTransformerBuilder {
        ServiceTransformerBuilder {
            service,
            url: None,
            api_key: None,
            inputs: BTreeMap::new(),
            output_column: None,
            batch_size: None,
            retry_policy: RetryPolicy::default(),
            async_config: AsyncConfig::default(),
        }
    }

    pub fn service(&self) -> ServiceKind {
        self.service
    }

    pub fn output_column(&self) -> &str {
        &self.output_column
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn inputs(&self) -> &BTreeMap<String, ParamBinding> {
        &self.inputs
    }

    pub fn async_config(&self) -> &AsyncConfig {
        &self.async_config
    }

    pub fn retry_policy(&self) -> &RetryPolicy {
        &self.retry_policy
    }

    /// Copy with a different engine configuration.
    pub fn with_async_config(&self, cfg: AsyncConfig) -> Result<Self, TransformError> {
        cfg.validate()?;
        Ok(ServiceTransformer {
            async_config: cfg,
            ..self.clone()
        })
    }

    /// Copy with a different base url.
    pub fn with_url(&self, url: ParamBinding) -> Self {
        ServiceTransformer { url, ..self.clone() }
    }

    /// Checks bindings and output column against an input schema.
    pub fn validate(&self, schema: &Schema) -> Result<(), TransformError> {
        if schema.contains(&self.output_column) {
            return Err(TransformError::DuplicateOutputColumn(self.output_column.clone()));
        }
        self.url.check(schema)?;
        if let Some(k) = &self.api_key {
            k.check(schema)?;
        }
        for b in self.inputs.values() {
            b.check(schema)?;
        }
        Ok(())
    }

    /// Parameter values for one row. Scalars are copied; columns are read
    /// from the row, with `Null` passed through.
    pub fn resolve_bindings(&self, schema: &Schema, row: &Row) -> Result<Params, TransformError> {
        self.inputs
            .iter()
            .map(|(name, b)| Ok((name.clone(), b.resolve(schema, row)?)))
            .collect()
    }

    /// Resolves a row into something sendable, or `None` when the row is
    /// skipped because a bound input is `Null` or an upstream failure.
    fn prepare_row(&self, schema: &Schema, row: &Row) -> Result<Option<(Params, String, Option<String>)>, TransformError> {
        let mut params = self.resolve_bindings(schema, row)?;
        let required = self.service.spec().required;
        for (name, value) in &params {
            let is_column = matches!(self.inputs[name], ParamBinding::Column(_));
            if Failure::is_failure_value(value) && is_column {
                return Ok(None);
            }
            if value.is_null() && required.contains(&name.as_str()) {
                return Ok(None);
            }
        }
        params.retain(|_, v| !v.is_null());
        let url = match self.url.resolve(schema, row)? {
            Value::Text(u) => u,
            _ => return Ok(None),
        };
        let api_key = match &self.api_key {
            None => None,
            Some(b) => match b.resolve(schema, row)? {
                Value::Text(k) => Some(k),
                _ => None,
            },
        };
        Ok(Some((params, url, api_key)))
    }

    /// Splits one partition into request batches. Rows that share a target
    /// are grouped `batch_size` at a time; a change of url or key starts a
    /// new batch.
    fn plan_partition(&self, schema: &Schema, rows: &[Row]) -> Result<Vec<Batch>, TransformError> {
        let mut prepared = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            if let Some(p) = self.prepare_row(schema, row)? {
                prepared.push((i, p));
            }
        }
        let mut batches = Vec::new();
        for chunk in batch_partition(prepared, self.batch_size) {
            let mut current: Option<Batch> = None;
            for (i, (params, url, api_key)) in chunk {
                match &mut current {
                    Some(b) if b.url == url && b.api_key == api_key => {
                        b.rows.push(i);
                        b.params.push(params);
                    }
                    _ => {
                        batches.extend(current.take());
                        current = Some(Batch {
                            rows: vec![i],
                            params: vec![params],
                            url,
                            api_key,
                        });
                    }
                }
            }
            batches.extend(current);
        }
        Ok(batches)
    }

    fn check_response(&self, batch: &Batch, resp: &crate::http::HttpResponseData) -> Result<Vec<Result<Value, Failure>>, BadResponse> {
        let parsed = parse_service_response(self.service, resp).map_err(|e| BadResponse::Schema(e.to_string()))?;
        if self.service == ServiceKind::AnomalyDetect {
            let sent = series_len(&batch.params[0]);
            let got = parsed.get("isAnomaly").and_then(Value::as_list).map(<[Value]>::len);
            if sent != got {
                return Err(BadResponse::Schema(format!(
                    "isAnomaly has {got:?} points, sent {sent:?}"
                )));
            }
        }
        unbatch_responses(batch.rows.len(), &parsed).map_err(|e| BadResponse::Shape(e.to_string()))
    }

    async fn run_batch(
        self: Arc<Self>,
        send: Arc<SendContext>,
        batch: Batch,
        seed: u64,
    ) -> Result<Vec<Result<Value, Failure>>, Failure> {
        let req = build_service_request(self.service, &batch.params, &batch.url, batch.api_key.as_deref())
            .map_err(|e: ServiceError| Failure::new(FailureKind::Operation, e.to_string(), 1))?;
        let mut attempts = 0;
        // a malformed payload earns exactly one resend
        for round in 0..2u64 {
            let delivered = send_with_policy(&req, &self.retry_policy, &send, seed.wrapping_add(round))
                .await
                .map_err(|e| {
                    let mut f = send_failure(e);
                    f.attempts += attempts;
                    f
                })?;
            attempts += delivered.attempts;
            match self.check_response(&batch, &delivered.response) {
                Ok(values) => return Ok(values),
                Err(bad) if round == 1 => {
                    let (kind, msg) = match bad {
                        BadResponse::Schema(m) => (FailureKind::MalformedResponse, m),
                        BadResponse::Shape(m) => (FailureKind::BatchShapeMismatch, m),
                    };
                    return Err(Failure::new(kind, msg, attempts));
                }
                Err(_) => continue,
            }
        }
        unreachable!("loop returns on its last round")
    }

    /// Runs the transformer and appends its output column.
    pub async fn transform(&self, table: &DataTable, ctx: &ExecContext) -> Result<DataTable, TransformError> {
        self.validate(table.schema())?;
        self.async_config.validate()?;
        let schema = table.schema().clone();

        let mut plans = Vec::with_capacity(table.num_partitions());
        let mut total_batches = 0;
        for part in table.partitions() {
            let batches = self.plan_partition(&schema, part)?;
            total_batches += batches.len();
            plans.push(batches);
        }
        let row_plans: Vec<Vec<Vec<usize>>> = plans
            .iter()
            .map(|bs| bs.iter().map(|b| b.rows.clone()).collect())
            .collect();

        let send = Arc::new(SendContext {
            transport: ctx.transport.clone(),
            gate: ctx.gate.clone(),
            clock: ctx.clock.clone(),
            metrics: Some(ctx.metrics.clone()),
            timeout: Some(self.async_config.request_timeout()),
        });
        let this = Arc::new(self.clone());
        let outcomes = if total_batches == 0 {
            plans.into_iter().map(|_| Vec::new()).collect()
        } else {
            run_partitions(plans, &self.async_config, ctx.metrics.clone(), move |p, b, batch| {
                let seed = ((p as u64) << 32) ^ b as u64;
                this.clone().run_batch(send.clone(), batch, seed)
            })
            .await?
        };

        ctx.metrics.add_rows(table.num_rows() as u64);
        let mut columns = Vec::with_capacity(table.num_partitions());
        for ((part, batch_rows), outcomes) in table.partitions().iter().zip(row_plans).zip(outcomes) {
            let mut values = vec![Value::Null; part.len()];
            for (rows, outcome) in batch_rows.iter().zip(outcomes) {
                match outcome.result {
                    Ok(per_row) => {
                        for (&i, r) in rows.iter().zip(per_row) {
                            values[i] = match r {
                                Ok(v) => v,
                                Err(f) => {
                                    ctx.metrics.add_failures(1);
                                    f.to_value()
                                }
                            };
                        }
                    }
                    Err(f) => {
                        ctx.metrics.add_failures(rows.len() as u64);
                        for &i in rows {
                            values[i] = f.to_value();
                        }
                    }
                }
            }
            columns.push(values);
        }
        Ok(table.with_partitioned_column(&self.output_column, Kind::Map, columns)?)
    }
}

/// An ordered chain of transformers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Pipeline {
    stages: Vec<ServiceTransformer>,
}

impl Pipeline {
    pub fn new(stages: Vec<ServiceTransformer>) -> Result<Self, TransformError> {
        let mut seen = BTreeSet::new();
        for s in &stages {
            if !seen.insert(s.output_column.clone()) {
                return Err(TransformError::DuplicateOutputColumn(s.output_column.clone()));
            }
        }
        Ok(Pipeline { stages })
    }

    pub fn stages(&self) -> &[ServiceTransformer] {
        &self.stages
    }

    /// Validates every stage against the schema it will see.
    pub fn validate(&self, schema: &Schema) -> Result<(), TransformError> {
        let mut schema = schema.clone();
        for stage in &self.stages {
            stage.validate(&schema)?;
            let mut fields: Vec<(String, Kind)> =
                schema.fields().iter().map(|f| (f.name.clone(), f.kind)).collect();
            fields.push((stage.output_column.clone(), Kind::Map));
            schema = Schema::new(fields)?;
        }
        Ok(())
    }

    /// Applies the stages in order. All stages are validated before any
    /// request is sent.
    pub async fn transform(&self, table: &DataTable, ctx: &ExecContext) -> Result<DataTable, TransformError> {
        self.validate(table.schema())?;
        let mut current = table.clone();
        for stage in &self.stages {
            current = stage.transform(&current, ctx).await?;
        }
        Ok(current)
    }
}

/// JSON form of a transformer, as loaded from a pipeline file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub service: ServiceKind,
    #[serde(default)]
    pub url: Option<UrlConfig>,
    #[serde(default)]
    pub api_key: Option<ParamBinding>,
    pub inputs: HashMap<String, ParamBinding>,
    pub output_column: String,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub retry_policy: RetryPolicy,
    #[serde(default, rename = "async")]
    pub async_config: AsyncConfig,
}

/// A url is either a plain string or a binding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum UrlConfig {
    Plain(String),
    Binding(ParamBinding),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub stages: Vec<TransformerConfig>,
}

impl TransformerConfig {
    /// Builds the transformer; `default_url` fills in a missing url.
    pub fn build(&self, default_url: Option<&str>) -> Result<ServiceTransformer, TransformError> {
        let url = match (&self.url, default_url) {
            (Some(UrlConfig::Plain(u)), _) => ParamBinding::scalar(u.as_str()),
            (Some(UrlConfig::Binding(b)), _) => b.clone(),
            (None, Some(u)) => ParamBinding::scalar(u),
            (None, None) => return Err(TransformError::MissingUrl),
        };
        let mut b = ServiceTransformer::builder(self.service)
            .url(url)
            .output_column(self.output_column.clone())
            .retry_policy(self.retry_policy.clone())
            .async_config(self.async_config.clone());
        if let Some(k) = &self.api_key {
            b = b.api_key(k.clone());
        }
        if let Some(n) = self.batch_size {
            b = b.batch_size(n);
        }
        for (name, binding) in &self.inputs {
            b = b.set_param(name.clone(), binding.clone());
        }
        b.build()
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, TransformError> {
        serde_json::from_str(text).map_err(|e| TransformError::Config(e.to_string()))
    }

    pub fn build(&self, default_url: Option<&str>) -> Result<Pipeline, TransformError> {
        Pipeline::new(
            self.stages
                .iter()
                .map(|s| s.build(default_url))
                .collect::<Result<_, _>>()?,
        )
    }
}
