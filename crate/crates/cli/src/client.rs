//! Blocking HTTP client for the gateway.

use std::time::{Duration, Instant};

use aibomgen_core::orchestrator::JobRequest;
use aibomgen_core::report::{MatchResult, StorageReport, VerificationReport};
use aibomgen_core::{ArtifactRef, JobRecord};
use reqwest::blocking::multipart::{Form, Part};
use reqwest::blocking::{RequestBuilder, Response};
use serde::de::DeserializeOwned;
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("cannot reach gateway: {0}")]
    Transport(String),
    #[error("gateway answered {status} {code}: {message}")]
    Api {
        status: u16,
        code: String,
        message: String,
        fields: Vec<String>,
    },
    #[error("unexpected response from gateway: {0}")]
    Decode(String),
    #[error("job {0} did not finish within the timeout")]
    Timeout(String),
}

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
    message: String,
    #[serde(default)]
    fields: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ArtifactGrant {
    pub artifact: ArtifactRef,
    pub url: String,
}

pub struct Client {
    base: String,
    token: Option<String>,
    http: reqwest::blocking::Client,
}

impl Client {
    pub fn new(base_url: &str, token: Option<String>) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(600))
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(Self {
            base: base_url.trim_end_matches('/').to_owned(),
            token,
            http,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn authed(&self, req: RequestBuilder) -> RequestBuilder {
        match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        }
    }

    fn send(&self, req: RequestBuilder) -> Result<Response, ClientError> {
        let resp = req.send().map_err(|e| ClientError::Transport(e.to_string()))?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status().as_u16();
        let bytes = resp.bytes().map_err(|e| ClientError::Transport(e.to_string()))?;
        Err(match serde_json::from_slice::<ErrorBody>(&bytes) {
            Ok(b) => ClientError::Api {
                status,
                code: b.error,
                message: b.message,
                fields: b.fields,
            },
            Err(_) => ClientError::Api {
                status,
                code: "http_error".into(),
                message: String::from_utf8_lossy(&bytes).into_owned(),
                fields: Vec::new(),
            },
        })
    }

    fn json<T: DeserializeOwned>(&self, req: RequestBuilder) -> Result<T, ClientError> {
        let bytes = self.send(req)?.bytes().map_err(|e| ClientError::Transport(e.to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub fn upload(&self, name: &str, bytes: Vec<u8>) -> Result<ArtifactRef, ClientError> {
        let form = Form::new()
            .part("file", Part::bytes(bytes).file_name(name.to_owned()))
            .text("name", name.to_owned());
        self.json(self.authed(self.http.post(self.url("/v1/artifacts"))).multipart(form))
    }

    pub fn submit(&self, request: &JobRequest) -> Result<JobRecord, ClientError> {
        let body = serde_json::to_value(request).map_err(|e| ClientError::Decode(e.to_string()))?;
        self.submit_raw(&body)
    }

    /// Submits an arbitrary JSON body, for probing what the API rejects.
    pub fn submit_raw(&self, body: &serde_json::Value) -> Result<JobRecord, ClientError> {
        let body = serde_json::to_vec(body).map_err(|e| ClientError::Decode(e.to_string()))?;
        self.json(
            self.authed(self.http.post(self.url("/v1/jobs")))
                .header("content-type", "application/json")
                .body(body),
        )
    }

    pub fn status(&self, job_id: &str) -> Result<JobRecord, ClientError> {
        self.json(self.authed(self.http.get(self.url(&format!("/v1/jobs/{job_id}")))))
    }

    /// Polls until the job is COMPLETED or FAILED.
    pub fn wait(&self, job_id: &str, timeout: Duration) -> Result<JobRecord, ClientError> {
        let deadline = Instant::now() + timeout;
        let mut delay = Duration::from_millis(25);
        loop {
            let job = self.status(job_id)?;
            if job.state.is_terminal() {
                return Ok(job);
            }
            if Instant::now() >= deadline {
                return Err(ClientError::Timeout(job_id.to_owned()));
            }
            std::thread::sleep(delay);
            delay = (delay * 2).min(Duration::from_millis(500));
        }
    }

    pub fn artifacts(&self, job_id: &str) -> Result<Vec<ArtifactGrant>, ClientError> {
        self.json(self.authed(self.http.get(self.url(&format!("/v1/jobs/{job_id}/artifacts")))))
    }

    /// Fetches a grant URL as returned by [`Client::artifacts`].
    pub fn download(&self, grant_url: &str) -> Result<Vec<u8>, ClientError> {
        let url = if grant_url.starts_with('/') { self.url(grant_url) } else { grant_url.to_owned() };
        let resp = self.send(self.http.get(url))?;
        resp.bytes()
            .map(|b| b.to_vec())
            .map_err(|e| ClientError::Transport(e.to_string()))
    }

    pub fn public_key_pem(&self) -> Result<String, ClientError> {
        self.send(self.http.get(self.url("/v1/keys/public")))?
            .text()
            .map_err(|e| ClientError::Transport(e.to_string()))
    }

    fn post_bytes<T: DeserializeOwned>(&self, path: &str, body: Vec<u8>) -> Result<T, ClientError> {
        self.json(
            self.http
                .post(self.url(path))
                .header("content-type", "application/json")
                .body(body),
        )
    }

    pub fn verify_aibom(&self, aibom: Vec<u8>) -> Result<VerificationReport, ClientError> {
        self.post_bytes("/v1/verify/aibom", aibom)
    }

    pub fn verify_link(&self, envelope: Vec<u8>) -> Result<VerificationReport, ClientError> {
        self.post_bytes("/v1/verify/link", envelope)
    }

    pub fn verify_hash(&self, envelope: Vec<u8>, artifact: Vec<u8>, name: &str) -> Result<MatchResult, ClientError> {
        let form = Form::new()
            .part("link", Part::bytes(envelope).file_name("link.json"))
            .part("artifact", Part::bytes(artifact).file_name(name.to_owned()))
            .text("name", name.to_owned());
        self.json(self.http.post(self.url("/v1/verify/hash")).multipart(form))
    }

    pub fn verify_storage(&self, envelope: Vec<u8>) -> Result<StorageReport, ClientError> {
        self.post_bytes("/v1/verify/storage", envelope)
    }
}
