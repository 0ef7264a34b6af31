//! Route handlers. Job routes need a bearer token; verification routes and
//! key distribution are public and never write.

use std::sync::Arc;

use aibomgen_core::aibom::{match_link_against_storage, verify_aibom, AibomDocument};
use aibomgen_core::attestation::{verify_artifact_against_link, verify_envelope, PublicKey, SignedEnvelope};
use aibomgen_core::canonical;
use aibomgen_core::model::{media_type_for, normalize_name, ArtifactRef};
use aibomgen_core::orchestrator::{JobRequest, Orchestrator, OrchestratorError};
use aibomgen_core::report::StorageReport;
use aibomgen_core::storage::{AccessGrant, ObjectKey, Storage, StorageError};
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequestParts, Multipart, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, MethodRouter};
use axum::Router;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::openapi::{self, RouteDoc};
use crate::TokenTable;

#[derive(Clone)]
pub struct AppState {
    pub orchestrator: Arc<Orchestrator>,
    pub storage: Arc<Storage>,
    pub public_key: PublicKey,
    pub tokens: Arc<TokenTable>,
    pub grant_ttl_seconds: u64,
    pub max_upload_bytes: usize,
}

/// Every route with its documentation. The router and the OpenAPI document
/// are both built from this list.
pub fn routes() -> Vec<(&'static RouteDoc, MethodRouter<AppState>)> {
    use openapi::docs::*;
    vec![
        (&HEALTH, get(health)),
        (&UPLOAD, post(upload)),
        (&SUBMIT, post(submit)),
        (&GET_JOB, get(get_job)),
        (&JOB_ARTIFACTS, get(job_artifacts)),
        (&GET_OBJECT, get(get_object)),
        (&PUBLIC_KEY, get(public_key)),
        (&VERIFY_AIBOM, post(verify_aibom_route)),
        (&VERIFY_LINK, post(verify_link)),
        (&VERIFY_HASH, post(verify_hash)),
        (&VERIFY_STORAGE, post(verify_storage)),
    ]
}

pub fn router(state: AppState) -> Router {
    let limit = state.max_upload_bytes;
    routes()
        .into_iter()
        .fold(Router::new(), |r, (doc, handler)| r.route(doc.path, handler))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// JSON error body: `{"error": code, "message": text, "fields": [...]}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub fields: Vec<String>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    message: &'a str,
    #[serde(skip_serializing_if = "<[String]>::is_empty")]
    fields: &'a [String],
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            fields: Vec::new(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "malformed_request", message)
    }

    fn internal(message: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code,
            message: &self.message,
            fields: &self.fields,
        };
        canonical_json(self.status, &body)
    }
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        let message = e.to_string();
        match e {
            OrchestratorError::ValidationFailed(fields) => ApiError {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                code: "validation_failed",
                message,
                fields: fields.into_iter().map(|f| f.field).collect(),
            },
            OrchestratorError::Unauthorized => ApiError::new(StatusCode::FORBIDDEN, "forbidden", message),
            OrchestratorError::NotFound(_) => ApiError::new(StatusCode::NOT_FOUND, "not_found", message),
            other => ApiError::internal(other),
        }
    }
}

impl From<StorageError> for ApiError {
    fn from(e: StorageError) -> Self {
        let message = e.to_string();
        match e {
            StorageError::NotFound(_) | StorageError::UnknownNamespace(_) => {
                ApiError::new(StatusCode::NOT_FOUND, "not_found", message)
            }
            StorageError::NotOwner(_) | StorageError::NamespaceTaken(_) => {
                ApiError::new(StatusCode::FORBIDDEN, "forbidden", message)
            }
            StorageError::GrantExpired => ApiError::new(StatusCode::FORBIDDEN, "grant_expired", message),
            StorageError::InvalidToken => ApiError::new(StatusCode::FORBIDDEN, "invalid_token", message),
            StorageError::InvalidKey(_) => ApiError::new(StatusCode::BAD_REQUEST, "invalid_key", message),
            StorageError::ImmutabilityViolation(_) => ApiError::new(StatusCode::CONFLICT, "immutable", message),
            StorageError::StorageFull { .. } => ApiError::new(StatusCode::INSUFFICIENT_STORAGE, "storage_full", message),
            StorageError::IntegrityError { .. } => ApiError::new(StatusCode::CONFLICT, "integrity_error", message),
            other => ApiError::internal(other),
        }
    }
}

fn canonical_json<T: Serialize>(status: StatusCode, body: &T) -> Response {
    match canonical::to_canonical_bytes(body) {
        Ok(bytes) => (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

fn ok<T: Serialize>(body: &T) -> Response {
    canonical_json(StatusCode::OK, body)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)
}

/// Authenticated caller, resolved from `Authorization: Bearer <token>`.
pub struct Principal(pub String);

impl FromRequestParts<AppState> for Principal {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let unauthorized = |m: &str| ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", m);
        let value = parts
            .headers
            .get(header::AUTHORIZATION)
            .ok_or_else(|| unauthorized("missing bearer token"))?
            .to_str()
            .map_err(|_| unauthorized("malformed authorization header"))?;
        let token = value
            .strip_prefix("Bearer ")
            .ok_or_else(|| unauthorized("authorization scheme must be Bearer"))?;
        state
            .tokens
            .subject(token.trim())
            .map(|s| Principal(s.to_owned()))
            .ok_or_else(|| unauthorized("unknown token"))
    }
}

async fn health() -> &'static str {
    "ok"
}

async fn upload(
    State(state): State<AppState>,
    Principal(subject): Principal,
    mut multipart: Multipart,
) -> Result<Response, ApiError> {
    let mut file: Option<(Option<String>, Bytes)> = None;
    let mut name: Option<String> = None;
    while let Some(field) = multipart.next_field().await.map_err(|e| ApiError::bad_request(e.to_string()))? {
        match field.name() {
            Some("file") => {
                let filename = field.file_name().map(str::to_owned);
                let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(e.to_string()))?;
                file = Some((filename, bytes));
            }
            Some("name") => name = Some(field.text().await.map_err(|e| ApiError::bad_request(e.to_string()))?),
            _ => {}
        }
    }
    let (filename, bytes) = file.ok_or_else(|| ApiError::bad_request("multipart field \"file\" is required"))?;
    let name = name.or(filename).unwrap_or_else(|| "upload.bin".to_owned());
    let name = normalize_name(&name).map_err(|e| ApiError::bad_request(e.to_string()))?;

    let storage = state.storage.clone();
    let stored = blocking(move || -> Result<ArtifactRef, StorageError> {
        let namespace = format!("up-{}", uuid::Uuid::new_v4().simple());
        storage.create_namespace(&namespace, &subject)?;
        storage.put_object(&ObjectKey::new(&namespace, &name)?, &bytes)
    })
    .await??;
    Ok(canonical_json(StatusCode::CREATED, &stored))
}

async fn submit(State(state): State<AppState>, Principal(subject): Principal, body: Bytes) -> Result<Response, ApiError> {
    let request: JobRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid job request: {e}")))?;
    let orch = state.orchestrator.clone();
    let job = blocking(move || orch.submit_job(&request, &subject)).await??;
    Ok(canonical_json(StatusCode::CREATED, &job))
}

async fn get_job(
    State(state): State<AppState>,
    Principal(subject): Principal,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    Ok(ok(&state.orchestrator.job_status(&id, &subject)?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactGrant {
    pub artifact: ArtifactRef,
    pub url: String,
    pub expires_at: DateTime<Utc>,
}

async fn job_artifacts(
    State(state): State<AppState>,
    Principal(subject): Principal,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let job = state.orchestrator.job_status(&id, &subject)?;
    let mut grants = Vec::new();
    for artifact in state.storage.list(&job.job_id) {
        let grant = state
            .storage
            .issue_grant(&ObjectKey::of(&artifact)?, state.grant_ttl_seconds, &subject)?;
        grants.push(ArtifactGrant {
            url: grant.url_path(),
            expires_at: grant.expires_at,
            artifact,
        });
    }
    Ok(ok(&grants))
}

#[derive(Deserialize)]
struct GrantQuery {
    expires: Option<i64>,
    token: Option<String>,
}

async fn get_object(
    State(state): State<AppState>,
    Path((namespace, name)): Path<(String, String)>,
    Query(q): Query<GrantQuery>,
) -> Result<Response, ApiError> {
    let (Some(expires), Some(token)) = (q.expires, q.token) else {
        return Err(ApiError::new(
            StatusCode::UNAUTHORIZED,
            "unauthorized",
            "expires and token query parameters are required",
        ));
    };
    let grant = AccessGrant::from_parts(&namespace, &name, expires, &token)?;
    let storage = state.storage.clone();
    let bytes = blocking(move || storage.redeem_grant(&grant)).await??;
    Ok(([(header::CONTENT_TYPE, media_type_for(&name))], bytes).into_response())
}

async fn public_key(State(state): State<AppState>) -> Response {
    (
        [(header::CONTENT_TYPE, "application/x-pem-file")],
        state.public_key.to_pem(),
    )
        .into_response()
}

async fn verify_aibom_route(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    canonical::parse(&body).map_err(|e| ApiError::bad_request(format!("AIBOM is not JSON: {e}")))?;
    let storage = state.storage.clone();
    let key = state.public_key.clone();
    let report = blocking(move || {
        // The referenced link is read from storage as-is, unverified bytes
        // included, so tampering there shows up in the report.
        let link_bytes = AibomDocument::from_bytes(&body)
            .ok()
            .and_then(|doc| doc.link_reference().and_then(|r| r.object_key()))
            .and_then(|(ns, name)| ObjectKey::new(&ns, &name).ok())
            .and_then(|k| storage.read_raw(&k).ok().flatten())
            .unwrap_or_default();
        verify_aibom(&body, &key, &link_bytes, Some(&*storage))
    })
    .await?;
    Ok(ok(&report))
}

fn parse_envelope(bytes: &[u8]) -> Result<SignedEnvelope, ApiError> {
    SignedEnvelope::from_bytes(bytes).map_err(|e| ApiError::bad_request(format!("not a link envelope: {e}")))
}

async fn verify_link(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let env = parse_envelope(&body)?;
    Ok(ok(&verify_envelope(&env, &state.public_key)))
}

async fn verify_hash(State(state): State<AppState>, mut multipart: Multipart) -> Result<Response, ApiError> {
    let mut link = None;
    let mut artifact: Option<(Option<String>, Bytes)> = None;
    let mut name = None;
    while let Some(field) = multipart.next_field().await.map_err(|e| ApiError::bad_request(e.to_string()))? {
        match field.name() {
            Some("link") => link = Some(field.bytes().await.map_err(|e| ApiError::bad_request(e.to_string()))?),
            Some("artifact") => {
                let filename = field.file_name().map(str::to_owned);
                let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(e.to_string()))?;
                artifact = Some((filename, bytes));
            }
            Some("name") => name = Some(field.text().await.map_err(|e| ApiError::bad_request(e.to_string()))?),
            _ => {}
        }
    }
    let link = link.ok_or_else(|| ApiError::bad_request("multipart field \"link\" is required"))?;
    let (filename, bytes) = artifact.ok_or_else(|| ApiError::bad_request("multipart field \"artifact\" is required"))?;
    let name = name
        .or(filename)
        .ok_or_else(|| ApiError::bad_request("multipart field \"name\" is required"))?;

    let env = parse_envelope(&link)?;
    let report = verify_envelope(&env, &state.public_key);
    if !report.passed {
        let mut err = ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "link_unverified",
            "the link envelope does not verify under the platform key",
        );
        err.fields = report.failed_checks().map(|c| c.name.clone()).collect();
        return Err(err);
    }
    let link = env.link().map_err(|e| ApiError::bad_request(e.to_string()))?;
    let name = normalize_name(&name).map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(ok(&verify_artifact_against_link(&link, &name, &bytes)))
}

async fn verify_storage(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let env = parse_envelope(&body)?;
    let storage = state.storage.clone();
    let key = state.public_key.clone();
    let report = blocking(move || {
        let envelope = verify_envelope(&env, &key);
        let results = match (envelope.passed, env.link()) {
            (true, Ok(link)) => match_link_against_storage(&link, &*storage),
            _ => Vec::new(),
        };
        StorageReport::new(envelope, results)
    })
    .await?;
    Ok(ok(&report))
}
