//! Authenticated HTTP/JSON facade over the registry, aggregator and control
//! engine.
//!
//! Every route except `POST /api/login` requires `Authorization: Bearer
//! <token>`. Errors come back as `{"error": "<Kind>", "message": "..."}`
//! with a matching HTTP status. The server speaks plain HTTP and is meant to
//! sit behind a TLS-terminating proxy.

pub mod auth;
pub mod views;

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{ConnectInfo, FromRequestParts, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::aggregator::rack::RackLayout;
use crate::aggregator::{AggregateError, Aggregator, Scope};
use crate::control::{ControlEngine, ControlError, JobRequest, Mode, Palette, Transport};
use crate::registry::{RegistryError, INITIAL};
use auth::{Auth, AuthError};
pub use views::{ClassThresholds, HostStatusView, JobView, Overview, StatusClass};

/// Default series window when `start` is omitted.
pub const DEFAULT_WINDOW: u64 = 3600;

/// Everything the handlers share.
pub struct ApiState {
    pub aggregator: Arc<Aggregator>,
    pub control: Arc<ControlEngine>,
    pub auth: Arc<Auth>,
    pub palette: Palette,
    pub layout: Option<RackLayout>,
    pub transport: Transport,
    /// Permits `all` as a control scope.
    pub allow_all_scope: bool,
    pub thresholds: ClassThresholds,
}

impl ApiState {
    pub fn new(aggregator: Arc<Aggregator>, control: Arc<ControlEngine>, auth: Arc<Auth>) -> Self {
        ApiState {
            aggregator,
            control,
            auth,
            palette: Palette::default(),
            layout: None,
            transport: Transport::Local,
            allow_all_scope: false,
            thresholds: ClassThresholds::default(),
        }
    }

    fn persist_registry(&self) -> Result<(), ApiError> {
        let reg = self.aggregator.registry();
        if let Some(path) = reg.path() {
            reg.persist(path)?;
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum ApiError {
    Auth(AuthError),
    Aggregate(AggregateError),
    Registry(RegistryError),
    Control(ControlError),
    AllScopeDisabled,
    BadRequest(String),
}

impl From<AuthError> for ApiError {
    fn from(e: AuthError) -> Self {
        ApiError::Auth(e)
    }
}

impl From<AggregateError> for ApiError {
    fn from(e: AggregateError) -> Self {
        ApiError::Aggregate(e)
    }
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        ApiError::Registry(e)
    }
}

impl From<ControlError> for ApiError {
    fn from(e: ControlError) -> Self {
        ApiError::Control(e)
    }
}

impl ApiError {
    fn parts(&self) -> (StatusCode, &'static str, String) {
        use StatusCode as S;
        match self {
            ApiError::Auth(e) => {
                let (s, k) = match e {
                    AuthError::InvalidCredentials => (S::UNAUTHORIZED, "InvalidCredentials"),
                    AuthError::Throttled => (S::TOO_MANY_REQUESTS, "Throttled"),
                    AuthError::WeakPassword => (S::BAD_REQUEST, "WeakPassword"),
                    AuthError::Unauthorized => (S::UNAUTHORIZED, "Unauthorized"),
                    AuthError::Store(_) => (S::INTERNAL_SERVER_ERROR, "CredentialStore"),
                };
                (s, k, e.to_string())
            }
            ApiError::Aggregate(e) => {
                let (s, k) = match e {
                    AggregateError::UnknownCloudlet(_) => (S::NOT_FOUND, "UnknownCloudlet"),
                    AggregateError::BadScope(_) => (S::BAD_REQUEST, "BadScope"),
                    AggregateError::BadWindow { .. } => (S::BAD_REQUEST, "BadWindow"),
                    AggregateError::Store(_) => (S::BAD_REQUEST, "BadQuery"),
                };
                (s, k, e.to_string())
            }
            ApiError::Registry(e) => {
                let (s, k) = match e {
                    RegistryError::DuplicateName(_) => (S::CONFLICT, "DuplicateName"),
                    RegistryError::ReservedName => (S::BAD_REQUEST, "ReservedName"),
                    RegistryError::InvalidName(_) => (S::BAD_REQUEST, "InvalidName"),
                    RegistryError::InvalidHost(_) => (S::BAD_REQUEST, "InvalidHost"),
                    RegistryError::UnknownCloudlet(_) => (S::NOT_FOUND, "UnknownCloudlet"),
                    RegistryError::AlreadyMember { .. } => (S::CONFLICT, "AlreadyMember"),
                    RegistryError::NotAMember { .. } => (S::NOT_FOUND, "NotAMember"),
                    RegistryError::UnknownHost(_) => (S::NOT_FOUND, "UnknownHost"),
                    _ => (S::INTERNAL_SERVER_ERROR, "RegistryStore"),
                };
                (s, k, e.to_string())
            }
            ApiError::Control(e) => {
                let (s, k) = match e {
                    ControlError::EmptyTargets => (S::BAD_REQUEST, "EmptyTargets"),
                    ControlError::EmptyCommand => (S::BAD_REQUEST, "EmptyCommand"),
                    ControlError::InvalidTarget(_) => (S::BAD_REQUEST, "InvalidTarget"),
                    ControlError::InvalidFanout => (S::BAD_REQUEST, "InvalidFanout"),
                    ControlError::UnknownJob(_) => (S::NOT_FOUND, "UnknownJob"),
                    ControlError::JobNotDone(_) => (S::CONFLICT, "JobNotDone"),
                    ControlError::MismatchedJobs => (S::BAD_REQUEST, "MismatchedJobs"),
                };
                (s, k, e.to_string())
            }
            ApiError::AllScopeDisabled => {
                (S::FORBIDDEN, "AllScopeDisabled", "scope `all` is disabled for control".into())
            }
            ApiError::BadRequest(m) => (S::BAD_REQUEST, "BadRequest", m.clone()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind, message) = self.parts();
        (status, Json(json!({ "error": kind, "message": message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = State<Arc<ApiState>>;

/// Proof that the request carried a live session token.
pub struct Session(pub String);

impl FromRequestParts<Arc<ApiState>> for Session {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Arc<ApiState>) -> Result<Self, Self::Rejection> {
        let token = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim)
            .ok_or(ApiError::Auth(AuthError::Unauthorized))?;
        state.auth.validate(token)?;
        Ok(Session(token.to_owned()))
    }
}

/// Peer address of the connection; unspecified when the server was not
/// started with connect info.
pub struct ClientIp(pub IpAddr);

impl<S: Send + Sync> FromRequestParts<S> for ClientIp {
    type Rejection = std::convert::Infallible;

    async fn from_request_parts(parts: &mut Parts, _: &S) -> Result<Self, Self::Rejection> {
        let ip = parts.extensions.get::<ConnectInfo<SocketAddr>>().map(|ConnectInfo(a)| a.ip());
        Ok(ClientIp(ip.unwrap_or(Ipv4Addr::UNSPECIFIED.into())))
    }
}

#[derive(Deserialize)]
struct LoginBody {
    username: String,
    password: String,
}

#[derive(Serialize, Deserialize)]
pub struct LoginReply {
    pub token: String,
    pub expires_in: u64,
}

async fn login(State(st): Shared, ClientIp(ip): ClientIp, Json(b): Json<LoginBody>) -> ApiResult<Json<LoginReply>> {
    let st2 = st.clone();
    // Hash verification is deliberately slow; keep it off the reactor.
    let t = tokio::task::spawn_blocking(move || st2.auth.login(&b.username, &b.password, ip))
        .await
        .map_err(|e| ApiError::BadRequest(e.to_string()))??;
    let expires_in = t.expires_at.saturating_duration_since(std::time::Instant::now()).as_secs();
    Ok(Json(LoginReply { token: t.token, expires_in }))
}

#[derive(Deserialize)]
struct PasswordBody {
    old_password: String,
    new_password: String,
}

async fn change_password(
    State(st): Shared,
    Session(token): Session,
    ClientIp(ip): ClientIp,
    Json(b): Json<PasswordBody>,
) -> ApiResult<Json<serde_json::Value>> {
    let st2 = st.clone();
    tokio::task::spawn_blocking(move || st2.auth.change_password(&token, &b.old_password, &b.new_password, ip))
        .await
        .map_err(|e| ApiError::BadRequest(e.to_string()))??;
    Ok(Json(json!({ "ok": true })))
}

async fn overview(State(st): Shared, _s: Session) -> Json<Overview> {
    Json(views::overview(&st.aggregator, &st.thresholds))
}

async fn hosts(State(st): Shared, _s: Session) -> Json<Vec<HostStatusView>> {
    Json(views::overview(&st.aggregator, &st.thresholds).all_hosts())
}

#[derive(Deserialize)]
struct NameBody {
    name: String,
}

async fn create_cloudlet(State(st): Shared, _s: Session, Json(b): Json<NameBody>) -> ApiResult<Response> {
    let snap = st.aggregator.registry().create_cloudlet(&b.name)?;
    st.persist_registry()?;
    Ok((StatusCode::CREATED, Json(json!({ "name": b.name, "revision": snap.revision }))).into_response())
}

async fn delete_cloudlet(
    State(st): Shared,
    _s: Session,
    Path(name): Path<String>,
) -> ApiResult<Json<serde_json::Value>> {
    let snap = st.aggregator.registry().delete_cloudlet(&name)?;
    st.persist_registry()?;
    Ok(Json(json!({ "revision": snap.revision })))
}

#[derive(Deserialize)]
struct HostBody {
    host: String,
}

async fn add_member(
    State(st): Shared,
    _s: Session,
    Path(name): Path<String>,
    Json(b): Json<HostBody>,
) -> ApiResult<Json<serde_json::Value>> {
    let snap = st.aggregator.registry().add_member(&name, &b.host)?;
    st.persist_registry()?;
    Ok(Json(json!({ "revision": snap.revision })))
}

async fn remove_member(
    State(st): Shared,
    _s: Session,
    Path((name, host)): Path<(String, String)>,
) -> ApiResult<Json<serde_json::Value>> {
    let snap = st.aggregator.registry().remove_member(&name, &host)?;
    st.persist_registry()?;
    Ok(Json(json!({ "revision": snap.revision })))
}

#[derive(Deserialize)]
struct MoveBody {
    to: String,
    /// Current cloudlet; checked against the registry when given.
    from: Option<String>,
}

async fn move_member(
    State(st): Shared,
    _s: Session,
    Path(host): Path<String>,
    Json(b): Json<MoveBody>,
) -> ApiResult<Json<serde_json::Value>> {
    let reg = st.aggregator.registry();
    let current = reg.snapshot().cloudlet_of(&host).unwrap_or(INITIAL).to_owned();
    let from = b.from.unwrap_or_else(|| current.clone());
    if from != current {
        return Err(RegistryError::NotAMember { host, cloudlet: from }.into());
    }
    let snap = match (from.as_str(), b.to.as_str()) {
        (f, t) if f == t => return Err(RegistryError::AlreadyMember { host, cloudlet: current }.into()),
        (INITIAL, to) => reg.add_member(to, &host)?,
        (from, INITIAL) => reg.remove_member(from, &host)?,
        (from, to) => reg.move_member(&host, from, to)?,
    };
    st.persist_registry()?;
    Ok(Json(json!({ "revision": snap.revision, "cloudlet": b.to })))
}

#[derive(Deserialize)]
struct SeriesQuery {
    scope: String,
    metric: String,
    start: Option<u64>,
    end: Option<u64>,
}

async fn series(State(st): Shared, _s: Session, Query(q): Query<SeriesQuery>) -> ApiResult<Response> {
    let scope: Scope = q.scope.parse()?;
    let end = q.end.unwrap_or_else(|| st.aggregator.now() + 1);
    let start = q.start.unwrap_or_else(|| end.saturating_sub(DEFAULT_WINDOW));
    let s = st.aggregator.aggregate(&scope, &q.metric, start, end)?;
    Ok(Json(s).into_response())
}

async fn heatmap(State(st): Shared, _s: Session) -> Json<serde_json::Value> {
    let cells = st.layout.as_ref().map(|l| st.aggregator.heatmap(l)).unwrap_or_default();
    Json(json!({ "cells": cells }))
}

async fn commands(State(st): Shared, _s: Session) -> Json<Palette> {
    Json(st.palette.clone())
}

#[derive(Deserialize)]
struct ControlBody {
    scope: String,
    command: String,
    mode: Mode,
}

async fn control(State(st): Shared, _s: Session, Json(b): Json<ControlBody>) -> ApiResult<Json<serde_json::Value>> {
    let scope: Scope = b.scope.parse()?;
    if scope == Scope::All && !st.allow_all_scope {
        return Err(ApiError::AllScopeDisabled);
    }
    let targets = st.aggregator.resolve(&scope)?;
    let job_id =
        st.control.submit(JobRequest::new(targets.clone(), b.command, b.mode).transport(st.transport.clone()))?;
    Ok(Json(json!({ "job_id": job_id, "targets": targets })))
}

async fn control_result(State(st): Shared, _s: Session, Path(job_id): Path<String>) -> ApiResult<Json<JobView>> {
    Ok(Json(JobView::from(&st.control.job(&job_id)?)))
}

pub fn router(state: Arc<ApiState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/login", post(login))
        .route("/api/password", post(change_password))
        .route("/api/overview", get(overview))
        .route("/api/hosts", get(hosts))
        .route("/api/cloudlets", post(create_cloudlet))
        .route("/api/cloudlets/{name}", delete(delete_cloudlet))
        .route("/api/cloudlets/{name}/members", post(add_member))
        .route("/api/cloudlets/{name}/members/{host}", delete(remove_member))
        .route("/api/members/{host}/move", post(move_member))
        .route("/api/series", get(series))
        .route("/api/heatmap", get(heatmap))
        .route("/api/commands", get(commands))
        .route("/api/control", post(control))
        .route("/api/control/{job_id}", get(control_result))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until `shutdown` flips to true.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Router,
    mut shutdown: tokio::sync::watch::Receiver<bool>,
) -> std::io::Result<()> {
    axum::serve(listener, app.into_make_service_with_connect_info::<SocketAddr>())
        .with_graceful_shutdown(async move {
            let _ = shutdown.wait_for(|s| *s).await;
        })
        .await
}
