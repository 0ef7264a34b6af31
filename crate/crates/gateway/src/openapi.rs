//! OpenAPI 3.1 description generated from the route table in [`crate::api`].

use serde_json::{json, Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Get,
    Post,
}

impl Method {
    fn as_str(self) -> &'static str {
        match self {
            Method::Get => "get",
            Method::Post => "post",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Body {
    None,
    /// JSON body with a named component schema.
    Json(&'static str),
    /// Raw bytes with the given media type and description.
    Raw(&'static str, &'static str),
    /// `(field, is_file, required, description)`.
    Multipart(&'static [(&'static str, bool, bool, &'static str)]),
}

#[derive(Debug, Clone, Copy)]
pub enum Payload {
    Json(&'static str),
    JsonArray(&'static str),
    Bytes(&'static str),
}

#[derive(Debug)]
pub struct RouteDoc {
    pub method: Method,
    /// Router path; `{*name}` is a catch-all segment.
    pub path: &'static str,
    pub operation_id: &'static str,
    pub summary: &'static str,
    pub tag: &'static str,
    pub authenticated: bool,
    pub request: Body,
    pub success: (u16, Payload),
    pub errors: &'static [u16],
}

impl RouteDoc {
    pub fn openapi_path(&self) -> String {
        self.path.replace("{*", "{")
    }

    fn path_params(&self) -> Vec<&'static str> {
        self.path
            .split('/')
            .filter_map(|s| s.strip_prefix('{').and_then(|s| s.strip_suffix('}')))
            .map(|s| s.trim_start_matches('*'))
            .collect()
    }
}

pub mod docs {
    use super::{Body, Method, Payload, RouteDoc};

    pub static HEALTH: RouteDoc = RouteDoc {
        method: Method::Get,
        path: "/healthz",
        operation_id: "health",
        summary: "Liveness probe",
        tag: "meta",
        authenticated: false,
        request: Body::None,
        success: (200, Payload::Bytes("text/plain")),
        errors: &[],
    };
    pub static UPLOAD: RouteDoc = RouteDoc {
        method: Method::Post,
        path: "/v1/artifacts",
        operation_id: "uploadArtifact",
        summary: "Stage a dataset or base model for a later job submission",
        tag: "engineer",
        authenticated: true,
        request: Body::Multipart(&[
            ("file", true, true, "Artifact bytes"),
            ("name", false, false, "Object name; defaults to the file name"),
        ]),
        success: (201, Payload::Json("ArtifactRef")),
        errors: &[400, 401, 413, 507],
    };
    pub static SUBMIT: RouteDoc = RouteDoc {
        method: Method::Post,
        path: "/v1/jobs",
        operation_id: "submitJob",
        summary: "Submit a training job over staged artifacts",
        tag: "engineer",
        authenticated: true,
        request: Body::Json("JobRequest"),
        success: (201, Payload::Json("JobRecord")),
        errors: &[400, 401, 403, 422],
    };
    pub static GET_JOB: RouteDoc = RouteDoc {
        method: Method::Get,
        path: "/v1/jobs/{id}",
        operation_id: "getJob",
        summary: "Job status and outputs (owner only)",
        tag: "engineer",
        authenticated: true,
        request: Body::None,
        success: (200, Payload::Json("JobRecord")),
        errors: &[401, 403, 404],
    };
    pub static JOB_ARTIFACTS: RouteDoc = RouteDoc {
        method: Method::Get,
        path: "/v1/jobs/{id}/artifacts",
        operation_id: "listJobArtifacts",
        summary: "Stored job artifacts with time-limited download URLs (owner only)",
        tag: "engineer",
        authenticated: true,
        request: Body::None,
        success: (200, Payload::JsonArray("ArtifactGrant")),
        errors: &[401, 403, 404],
    };
    pub static GET_OBJECT: RouteDoc = RouteDoc {
        method: Method::Get,
        path: "/v1/objects/{namespace}/{*name}",
        operation_id: "downloadObject",
        summary: "Download an object with a grant (query parameters expires and token)",
        tag: "engineer",
        authenticated: false,
        request: Body::None,
        success: (200, Payload::Bytes("application/octet-stream")),
        errors: &[400, 401, 403, 404, 409],
    };
    pub static PUBLIC_KEY: RouteDoc = RouteDoc {
        method: Method::Get,
        path: "/v1/keys/public",
        operation_id: "getPublicKey",
        summary: "Platform Ed25519 public key (SPKI PEM)",
        tag: "verifier",
        authenticated: false,
        request: Body::None,
        success: (200, Payload::Bytes("application/x-pem-file")),
        errors: &[],
    };
    pub static VERIFY_AIBOM: RouteDoc = RouteDoc {
        method: Method::Post,
        path: "/v1/verify/aibom",
        operation_id: "verifyAibom",
        summary: "Verify an AIBOM, the link it references in storage, and every artifact the link names",
        tag: "verifier",
        authenticated: false,
        request: Body::Raw("application/json", "AIBOM document bytes"),
        success: (200, Payload::Json("VerificationReport")),
        errors: &[400],
    };
    pub static VERIFY_LINK: RouteDoc = RouteDoc {
        method: Method::Post,
        path: "/v1/verify/link",
        operation_id: "verifyLink",
        summary: "Verify a signed link envelope",
        tag: "verifier",
        authenticated: false,
        request: Body::Raw("application/json", "Link envelope bytes"),
        success: (200, Payload::Json("VerificationReport")),
        errors: &[400],
    };
    pub static VERIFY_HASH: RouteDoc = RouteDoc {
        method: Method::Post,
        path: "/v1/verify/hash",
        operation_id: "verifyHash",
        summary: "Check one file against the digest recorded for it in a link",
        tag: "verifier",
        authenticated: false,
        request: Body::Multipart(&[
            ("link", true, true, "Link envelope"),
            ("artifact", true, true, "File to check"),
            ("name", false, false, "Artifact name in the link; defaults to the file name"),
        ]),
        success: (200, Payload::Json("MatchResult")),
        errors: &[400, 422],
    };
    pub static VERIFY_STORAGE: RouteDoc = RouteDoc {
        method: Method::Post,
        path: "/v1/verify/storage",
        operation_id: "verifyStorage",
        summary: "Compare every material and product of a link with what storage holds",
        tag: "verifier",
        authenticated: false,
        request: Body::Raw("application/json", "Link envelope bytes"),
        success: (200, Payload::Json("StorageReport")),
        errors: &[400],
    };
}

fn schema_ref(name: &str) -> Value {
    json!({ "$ref": format!("#/components/schemas/{name}") })
}

fn status_text(code: u16) -> &'static str {
    match code {
        200 => "OK",
        201 => "Created",
        400 => "Malformed request body",
        401 => "Missing or unknown bearer token, or missing grant",
        403 => "Caller does not own the resource, or the grant is invalid or expired",
        404 => "Unknown job or object",
        409 => "Stored object failed its integrity check",
        413 => "Body exceeds the upload limit",
        422 => "Validation failed",
        507 => "Storage capacity exhausted",
        _ => "Error",
    }
}

fn operation(doc: &RouteDoc) -> Value {
    let mut op = Map::new();
    op.insert("operationId".into(), json!(doc.operation_id));
    op.insert("summary".into(), json!(doc.summary));
    op.insert("tags".into(), json!([doc.tag]));
    if doc.authenticated {
        op.insert("security".into(), json!([{ "bearer": [] }]));
    } else {
        op.insert("security".into(), json!([]));
    }

    let mut params: Vec<Value> = doc
        .path_params()
        .into_iter()
        .map(|p| json!({ "name": p, "in": "path", "required": true, "schema": { "type": "string" } }))
        .collect();
    if doc.operation_id == "downloadObject" {
        params.push(json!({ "name": "expires", "in": "query", "required": true, "schema": { "type": "integer" }, "description": "Grant expiry, Unix seconds" }));
        params.push(json!({ "name": "token", "in": "query", "required": true, "schema": { "type": "string" }, "description": "Grant MAC, base64url" }));
    }
    if !params.is_empty() {
        op.insert("parameters".into(), Value::Array(params));
    }

    match doc.request {
        Body::None => {}
        Body::Json(schema) => {
            op.insert(
                "requestBody".into(),
                json!({ "required": true, "content": { "application/json": { "schema": schema_ref(schema) } } }),
            );
        }
        Body::Raw(media, description) => {
            op.insert(
                "requestBody".into(),
                json!({ "required": true, "description": description, "content": { media: { "schema": { "type": "string", "format": "binary" } } } }),
            );
        }
        Body::Multipart(fields) => {
            let mut props = Map::new();
            let mut required = Vec::new();
            for (name, is_file, req, description) in fields {
                let schema = if *is_file {
                    json!({ "type": "string", "format": "binary", "description": description })
                } else {
                    json!({ "type": "string", "description": description })
                };
                props.insert((*name).into(), schema);
                if *req {
                    required.push(json!(name));
                }
            }
            op.insert(
                "requestBody".into(),
                json!({ "required": true, "content": { "multipart/form-data": { "schema": {
                    "type": "object", "properties": props, "required": required
                } } } }),
            );
        }
    }

    let mut responses = Map::new();
    let (code, payload) = doc.success;
    let content = match payload {
        Payload::Json(s) => json!({ "application/json": { "schema": schema_ref(s) } }),
        Payload::JsonArray(s) => json!({ "application/json": { "schema": { "type": "array", "items": schema_ref(s) } } }),
        Payload::Bytes(media) => json!({ media: { "schema": { "type": "string" } } }),
    };
    responses.insert(code.to_string(), json!({ "description": status_text(code), "content": content }));
    for code in doc.errors {
        responses.insert(
            code.to_string(),
            json!({ "description": status_text(*code), "content": { "application/json": { "schema": schema_ref("Error") } } }),
        );
    }
    op.insert("responses".into(), Value::Object(responses));
    Value::Object(op)
}

fn schemas() -> Value {
    let digest = json!({ "type": "object", "required": ["sha256"], "additionalProperties": false,
        "properties": { "sha256": { "type": "string", "pattern": "^[0-9a-f]{64}$" } } });
    json!({
        "Digest": digest,
        "ArtifactRef": { "type": "object", "required": ["name", "digest", "size_bytes", "media_type"], "additionalProperties": false,
            "properties": {
                "name": { "type": "string" },
                "digest": schema_ref("Digest"),
                "size_bytes": { "type": "integer", "minimum": 0 },
                "media_type": { "type": "string" },
                "namespace": { "type": "string" }
            } },
        "ObjectRef": { "type": "object", "required": ["namespace", "name"], "additionalProperties": false,
            "properties": {
                "namespace": { "type": "string" },
                "name": { "type": "string" },
                "digest": schema_ref("Digest")
            } },
        "TrainingConfig": { "type": "object", "required": ["epochs", "batch_size", "learning_rate", "task"], "additionalProperties": false,
            "properties": {
                "epochs": { "type": "integer", "minimum": 0 },
                "batch_size": { "type": "integer", "minimum": 1 },
                "learning_rate": { "type": "number", "exclusiveMinimum": 0 },
                "task": { "type": "string", "enum": ["regression", "classification"] },
                "seed": { "type": "integer", "minimum": 0 },
                "framework_tag": { "type": "string", "const": "reftrainer/1" }
            } },
        "JobRequest": { "type": "object", "required": ["dataset", "config"], "additionalProperties": false,
            "properties": {
                "dataset": schema_ref("ObjectRef"),
                "base_model": schema_ref("ObjectRef"),
                "config": schema_ref("TrainingConfig")
            } },
        "JobRecord": { "type": "object", "required": ["job_id", "spec", "state", "created_at", "outputs"],
            "properties": {
                "job_id": { "type": "string", "format": "uuid" },
                "spec": { "type": "object", "properties": {
                    "dataset": schema_ref("ArtifactRef"),
                    "base_model": schema_ref("ArtifactRef"),
                    "config": schema_ref("TrainingConfig"),
                    "submitter": { "type": "string" }
                } },
                "state": { "type": "string", "enum": ["SUBMITTED", "RUNNING", "COMPLETED", "FAILED"] },
                "created_at": { "type": "string", "format": "date-time" },
                "started_at": { "type": "string", "format": "date-time" },
                "finished_at": { "type": "string", "format": "date-time" },
                "outputs": { "type": "array", "items": schema_ref("ArtifactRef") },
                "failure_reason": { "type": "string" },
                "attempts": { "type": "integer" }
            } },
        "ArtifactGrant": { "type": "object", "required": ["artifact", "url", "expires_at"],
            "properties": {
                "artifact": schema_ref("ArtifactRef"),
                "url": { "type": "string" },
                "expires_at": { "type": "string", "format": "date-time" }
            } },
        "CheckResult": { "type": "object", "required": ["name", "passed"],
            "properties": { "name": { "type": "string" }, "passed": { "type": "boolean" }, "detail": { "type": "string" } } },
        "MatchResult": { "type": "object", "required": ["name", "status"],
            "properties": {
                "name": { "type": "string" },
                "status": { "type": "string", "enum": ["MATCH", "MISMATCH", "UNKNOWN_NAME", "MISSING"] },
                "expected": schema_ref("Digest"),
                "actual": schema_ref("Digest")
            } },
        "VerificationReport": { "type": "object", "required": ["passed", "checks"],
            "properties": {
                "passed": { "type": "boolean" },
                "checks": { "type": "array", "items": schema_ref("CheckResult") },
                "artifacts": { "type": "array", "items": schema_ref("MatchResult") }
            } },
        "StorageReport": { "type": "object", "required": ["passed", "envelope", "results"],
            "properties": {
                "passed": { "type": "boolean" },
                "envelope": schema_ref("VerificationReport"),
                "results": { "type": "array", "items": schema_ref("MatchResult") }
            } },
        "Error": { "type": "object", "required": ["error", "message"],
            "properties": {
                "error": { "type": "string" },
                "message": { "type": "string" },
                "fields": { "type": "array", "items": { "type": "string" } }
            } }
    })
}

/// The full document for the implemented routes.
pub fn generate() -> Value {
    let mut paths = Map::new();
    for (doc, _) in crate::api::routes() {
        let entry = paths
            .entry(doc.openapi_path())
            .or_insert_with(|| Value::Object(Map::new()));
        entry
            .as_object_mut()
            .expect("path items are objects")
            .insert(doc.method.as_str().into(), operation(doc));
    }
    json!({
        "openapi": "3.1.0",
        "info": {
            "title": "aibomgen gateway",
            "version": env!("CARGO_PKG_VERSION"),
            "description": "Job submission for engineers; public verification endpoints and key distribution for verifiers. Every JSON body is canonical: sorted keys, no insignificant whitespace."
        },
        "paths": paths,
        "components": {
            "schemas": schemas(),
            "securitySchemes": { "bearer": { "type": "http", "scheme": "bearer" } }
        }
    })
}

/// Pretty-printed form shipped as `docs/openapi.json`.
pub fn render() -> String {
    let mut text = serde_json::to_string_pretty(&generate()).expect("static document");
    text.push('\n');
    text
}
