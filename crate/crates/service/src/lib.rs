//! HTTP API over a [`Platform`]: topic browsing, guideline proposal and
//! rating, chat-testing, retraining and the live constitution, and surveys.
//!
//! All platform access runs on the blocking pool behind one mutex, so writes
//! are serialized and provider calls never stall the async workers. Retrains
//! queue on their own lock and hold the platform only while snapshotting the
//! data and while committing the result.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{FromRequest, Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use concord_core::adapters::{AdapterError, ChatMessage, Providers};
use concord_core::analytics::{AnalyticsError, SurveySubmission};
use concord_core::config::{AuthConfig, ServiceConfig};
use concord_core::consensus::TrainError;
use concord_core::platform::{
    Platform, PlatformError, ProposeOutcome, ProposeRequest, RateRequest, RetrainSummary, SystemClock,
};
use concord_core::store::{ConstitutionSnapshot, StoreError};
use concord_core::{GuidelineId, Participant, SurveyResponse, TopicId, UserId};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tower_http::trace::TraceLayer;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Platform(#[from] PlatformError),
    #[error("provider setup: {0}")]
    Provider(#[from] AdapterError),
    #[error("listen address {0:?} is invalid")]
    Listen(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// JSON error body `{"error": code, "message": ...}` plus any extra fields.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    retry_after: Option<u64>,
    extra: Option<Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
            retry_after: None,
            extra: None,
        }
    }

    fn with(mut self, extra: Value) -> Self {
        self.extra = Some(extra);
        self
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"error": self.code, "message": self.message});
        if let Some(secs) = self.retry_after {
            body["retry_after_secs"] = json!(secs);
        }
        if let (Some(Value::Object(extra)), Value::Object(map)) = (self.extra, &mut body) {
            map.extend(extra);
        }
        let mut response = (self.status, axum::Json(body)).into_response();
        if let Some(secs) = self.retry_after {
            response.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from(secs));
        }
        response
    }
}

impl From<AdapterError> for ApiError {
    fn from(e: AdapterError) -> Self {
        let message = e.to_string();
        let retry_after = e.retry_after_secs();
        let (status, code) = match e {
            AdapterError::Timeout { .. } => (StatusCode::GATEWAY_TIMEOUT, "upstream-timeout"),
            AdapterError::Rejected { .. } => (StatusCode::BAD_GATEWAY, "upstream-rejected"),
            AdapterError::InvalidRequest(_) => (StatusCode::BAD_REQUEST, "invalid-request"),
            AdapterError::Malformed(_) | AdapterError::Unavailable(_) => (StatusCode::BAD_GATEWAY, "upstream-error"),
        };
        ApiError {
            retry_after,
            ..ApiError::new(status, code, message)
        }
    }
}

impl From<PlatformError> for ApiError {
    fn from(e: PlatformError) -> Self {
        let message = e.to_string();
        match e {
            PlatformError::NotFound(_) => ApiError::new(StatusCode::NOT_FOUND, "not-found", message),
            PlatformError::InvalidGuideline(violations) => {
                let codes: Vec<&str> = violations.iter().map(|v| v.code()).collect();
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", message).with(json!({"violations": codes}))
            }
            PlatformError::TagRule(rule) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, rule.code(), message),
            PlatformError::InvalidRequest(_) => ApiError::new(StatusCode::BAD_REQUEST, "invalid-request", message),
            PlatformError::Provider(p) => p.into(),
            PlatformError::Store(StoreError::Invalid(_)) => ApiError::new(StatusCode::CONFLICT, "conflict", message),
            PlatformError::Store(_) | PlatformError::Config(_) | PlatformError::Consensus(_) => {
                ApiError::internal(message)
            }
            PlatformError::NothingToTrain => ApiError::new(StatusCode::CONFLICT, "no-ratings", message),
            PlatformError::Train(TrainError::NonConvergence(fit)) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "non-convergence", message)
                    .with(json!({"report": fit.report}))
            }
            PlatformError::Train(TrainError::Diverged { epoch }) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "diverged", message).with(json!({"epoch": epoch}))
            }
            PlatformError::Train(_) => ApiError::internal(message),
            PlatformError::Analytics(AnalyticsError::NoResponses) => {
                ApiError::new(StatusCode::CONFLICT, "no-responses", message)
            }
            PlatformError::Analytics(AnalyticsError::Invalid(_)) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", message)
            }
        }
    }
}

/// `Json` extractor whose rejections use the API's error body.
pub struct Json<T>(pub T);

impl<S, T> FromRequest<S> for Json<T>
where
    axum::Json<T>: FromRequest<S, Rejection = JsonRejection>,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: axum::extract::Request, state: &S) -> Result<Self, ApiError> {
        axum::Json::<T>::from_request(req, state)
            .await
            .map(|axum::Json(v)| Json(v))
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid-request", e.body_text()))
    }
}

#[derive(Clone)]
pub struct AppState {
    platform: Arc<Mutex<Platform>>,
    retrain_gate: Arc<tokio::sync::Mutex<()>>,
    auth: Arc<AuthConfig>,
}

impl AppState {
    pub fn new(platform: Platform) -> Self {
        let auth = Arc::new(platform.config().auth.clone());
        AppState {
            platform: Arc::new(Mutex::new(platform)),
            retrain_gate: Arc::new(tokio::sync::Mutex::new(())),
            auth,
        }
    }

    pub fn platform(&self) -> MutexGuard<'_, Platform> {
        self.platform.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    /// Runs `f` against the platform on the blocking pool.
    async fn with<T, F>(&self, f: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce(&mut Platform) -> Result<T, PlatformError> + Send + 'static,
    {
        let platform = self.platform.clone();
        tokio::task::spawn_blocking(move || {
            let mut guard = platform.lock().unwrap_or_else(|poisoned| poisoned.into_inner());
            f(&mut guard)
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(ApiError::from)
    }

    /// Retrains unless another retrain is running, in which case this one
    /// waits for it and then runs against whatever data is new.
    pub async fn retrain(&self) -> Result<RetrainSummary, ApiError> {
        let _turn = self.retrain_gate.lock().await;
        let Some(job) = self.with(|p| p.prepare_retrain()).await? else {
            return self.with(|p| Ok(p.noop_summary())).await;
        };
        let job = Arc::new(job);
        let runner = job.clone();
        let (fit, selection) = tokio::task::spawn_blocking(move || runner.run())
            .await
            .map_err(|e| ApiError::internal(e.to_string()))??;
        self.with(move |p| p.commit_retrain(&job, fit, &selection)).await
    }

    fn spawn_retrain(&self) {
        let state = self.clone();
        tokio::spawn(async move {
            match state.retrain().await {
                Ok(summary) => tracing::info!(version = summary.version, noop = summary.noop, "retrain finished"),
                Err(e) => tracing::warn!(error = %e.message, code = e.code, "retrain failed"),
            }
        });
    }
}

enum Caller {
    /// No credentials are configured, so everyone may do everything.
    Open,
    User(UserId),
    Admin,
}

fn caller(auth: &AuthConfig, headers: &HeaderMap) -> Result<Caller, ApiError> {
    if auth.is_open() {
        return Ok(Caller::Open);
    }
    let token = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim)
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "a bearer token is required"))?;
    if auth.admin_token.as_deref() == Some(token) {
        return Ok(Caller::Admin);
    }
    auth.tokens
        .get(token)
        .map(|user| Caller::User(user.clone()))
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "unknown token"))
}

fn require_user(auth: &AuthConfig, headers: &HeaderMap, acting_as: &UserId) -> Result<(), ApiError> {
    match caller(auth, headers)? {
        Caller::User(user) if &user != acting_as => Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "forbidden",
            format!("token belongs to {user}, not {acting_as}"),
        )),
        _ => Ok(()),
    }
}

fn require_admin(auth: &AuthConfig, headers: &HeaderMap) -> Result<(), ApiError> {
    match caller(auth, headers)? {
        Caller::User(_) => Err(ApiError::new(StatusCode::FORBIDDEN, "forbidden", "admin token required")),
        _ => Ok(()),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/topics", get(topics))
        .route("/tags", get(tags))
        .route("/guidelines", get(list_guidelines).post(propose))
        .route("/guidelines/{id}", get(guideline))
        .route("/guidelines/{id}/ratings", post(rate))
        .route("/chat/test", post(chat_test))
        .route("/admin/retrain", post(retrain))
        .route("/constitution/live", get(live_constitution))
        .route("/surveys", post(submit_survey))
        .route("/analytics/survey", get(survey_report))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not-found", "no such route") })
        .layer(TraceLayer::new_for_http())
        .with_state(state)
}

async fn topics(State(state): State<AppState>) -> Result<impl IntoResponse, ApiError> {
    state.with(|p| Ok(axum::Json(p.topics().clone()))).await
}

async fn tags(State(state): State<AppState>) -> Result<impl IntoResponse, ApiError> {
    state.with(|p| Ok(axum::Json(p.tags().clone()))).await
}

#[derive(Debug, Deserialize)]
struct TopicFilter {
    topic: Option<TopicId>,
}

async fn list_guidelines(
    State(state): State<AppState>,
    query: Result<Query<TopicFilter>, QueryRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Query(filter) = query.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid-request", e.body_text()))?;
    state
        .with(move |p| {
            let list: Vec<_> = p.guidelines(filter.topic.as_ref())?.into_iter().cloned().collect();
            Ok(axum::Json(list))
        })
        .await
}

async fn guideline(State(state): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let id = parse_guideline_id(id)?;
    state.with(move |p| Ok(axum::Json(p.guideline(&id)?.clone()))).await
}

fn parse_guideline_id(raw: String) -> Result<GuidelineId, ApiError> {
    GuidelineId::new(raw).map_err(|e| ApiError::new(StatusCode::NOT_FOUND, "not-found", e.to_string()))
}

async fn propose(
    State(state): State<AppState>,
    headers: HeaderMap,
    Json(req): Json<ProposeRequest>,
) -> Result<Response, ApiError> {
    require_user(&state.auth, &headers, &req.author)?;
    let outcome = state.with(move |p| p.propose(req)).await?;
    let status = match outcome {
        ProposeOutcome::Created { .. } => StatusCode::CREATED,
        ProposeOutcome::Duplicate { .. } => StatusCode::CONFLICT,
    };
    Ok((status, axum::Json(outcome)).into_response())
}

async fn rate(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Json(req): Json<RateRequest>,
) -> Result<impl IntoResponse, ApiError> {
    let id = parse_guideline_id(id)?;
    require_user(&state.auth, &headers, &req.user)?;
    let outcome = state.with(move |p| p.rate(&id, req)).await?;
    if outcome.retrain_due {
        state.spawn_retrain();
    }
    Ok((StatusCode::ACCEPTED, axum::Json(outcome)))
}

#[derive(Debug, Deserialize)]
struct ChatTestBody {
    guideline_id: GuidelineId,
    messages: Vec<ChatMessage>,
}

#[derive(Debug, Serialize)]
struct ChatTestReply {
    guideline_id: GuidelineId,
    text: String,
}

async fn chat_test(
    State(state): State<AppState>,
    headers: HeaderMap,
    Json(body): Json<ChatTestBody>,
) -> Result<impl IntoResponse, ApiError> {
    caller(&state.auth, &headers)?;
    let id = body.guideline_id.clone();
    let (request, chat) = state
        .with(move |p| Ok((p.chat_request(&body.guideline_id, body.messages)?, p.providers().chat.clone())))
        .await?;
    let text = tokio::task::spawn_blocking(move || chat.chat(&request))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(axum::Json(ChatTestReply { guideline_id: id, text }))
}

#[derive(Debug, Serialize)]
struct RetrainReply {
    #[serde(flatten)]
    summary: RetrainSummary,
    constitution: ConstitutionSnapshot,
}

async fn retrain(State(state): State<AppState>, headers: HeaderMap) -> Result<impl IntoResponse, ApiError> {
    require_admin(&state.auth, &headers)?;
    let summary = state.retrain().await?;
    let constitution = state.with(|p| Ok(p.live_constitution())).await?;
    Ok(axum::Json(RetrainReply { summary, constitution }))
}

async fn live_constitution(State(state): State<AppState>) -> Result<impl IntoResponse, ApiError> {
    state.with(|p| Ok(axum::Json(p.live_constitution()))).await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Answers {
    q1_support: bool,
    q2_enjoyable: u8,
    q3_trust: u8,
    q4_contribution: u8,
}

#[derive(Debug, Deserialize)]
struct SurveyBody {
    participant: Participant,
    answers: Answers,
}

async fn submit_survey(
    State(state): State<AppState>,
    headers: HeaderMap,
    Json(body): Json<SurveyBody>,
) -> Result<impl IntoResponse, ApiError> {
    require_user(&state.auth, &headers, &body.participant.id)?;
    let submission = SurveySubmission {
        response: SurveyResponse {
            participant: body.participant.id.clone(),
            q1_support: body.answers.q1_support,
            q2_enjoyable: body.answers.q2_enjoyable,
            q3_trust: body.answers.q3_trust,
            q4_contribution: body.answers.q4_contribution,
        },
        participant: body.participant,
    };
    let seq = state.with(move |p| p.submit_survey(submission)).await?;
    Ok((StatusCode::ACCEPTED, axum::Json(json!({"seq": seq}))))
}

async fn survey_report(State(state): State<AppState>) -> Result<impl IntoResponse, ApiError> {
    state.with(|p| Ok(axum::Json(p.survey_report()?))).await
}

/// Opens the platform described by `config` with real providers and the
/// system clock, and serves until interrupted.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let providers = Providers::from_config(&config.provider)?;
    let listen: SocketAddr = config.listen.parse().map_err(|_| ServiceError::Listen(config.listen.clone()))?;
    let interval = config.retrain.interval_secs;
    let (platform, recovery) = Platform::open(config, providers, Arc::new(SystemClock))?;
    if recovery.truncated_bytes > 0 {
        tracing::warn!(bytes = recovery.truncated_bytes, "cut a torn record from the end of the event log");
    }
    tracing::info!(head = platform.store().head(), "event log loaded");
    let state = AppState::new(platform);
    if let Some(secs) = interval {
        let state = state.clone();
        tokio::spawn(async move {
            let mut ticks = tokio::time::interval(Duration::from_secs(secs));
            ticks.tick().await;
            loop {
                ticks.tick().await;
                let due = state.with(|p| Ok(p.ratings_since_fit() > 0)).await.unwrap_or(false);
                if due {
                    state.spawn_retrain();
                }
            }
        });
    }
    let listener = tokio::net::TcpListener::bind(listen).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
