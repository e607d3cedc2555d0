//! Minimal typed client for the HTTP API.

use std::time::Duration;

use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use thiserror::Error;

use crate::aggregator::StackedSeries;
use crate::api::{JobView, LoginReply, Overview};
use crate::control::{JobState, Mode};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("http: {0}")]
    Http(String),
    #[error("{status} {kind}: {message}")]
    Api { status: u16, kind: String, message: String },
    #[error("unexpected response body: {0}")]
    Decode(String),
}

impl ClientError {
    /// The API's error kind, e.g. `UnknownCloudlet`.
    pub fn kind(&self) -> Option<&str> {
        match self {
            ClientError::Api { kind, .. } => Some(kind),
            _ => None,
        }
    }

    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            _ => None,
        }
    }
}

impl From<reqwest::Error> for ClientError {
    fn from(e: reqwest::Error) -> Self {
        ClientError::Http(e.to_string())
    }
}

#[derive(Clone)]
pub struct ApiClient {
    base: String,
    token: Option<String>,
    http: reqwest::Client,
}

impl std::fmt::Debug for ApiClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ApiClient").field("base", &self.base).field("authenticated", &self.token.is_some()).finish()
    }
}

impl ApiClient {
    /// Client without a session; only `login` will succeed.
    pub fn anonymous(base: impl Into<String>) -> Self {
        ApiClient { base: base.into().trim_end_matches('/').to_owned(), token: None, http: reqwest::Client::new() }
    }

    pub async fn login(base: impl Into<String>, username: &str, password: &str) -> Result<Self, ClientError> {
        let mut c = Self::anonymous(base);
        let reply: LoginReply = c.post("/api/login", json!({ "username": username, "password": password })).await?;
        c.token = Some(reply.token);
        Ok(c)
    }

    pub fn token(&self) -> Option<&str> {
        self.token.as_deref()
    }

    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }

    /// Raw request: status plus parsed JSON body (`null` when empty).
    pub async fn request(
        &self,
        method: Method,
        path: &str,
        body: Option<Value>,
    ) -> Result<(StatusCode, Value), ClientError> {
        let mut rb = self.http.request(method, format!("{}{path}", self.base));
        if let Some(t) = &self.token {
            rb = rb.bearer_auth(t);
        }
        if let Some(b) = body {
            rb = rb.json(&b);
        }
        let resp = rb.send().await?;
        let status = resp.status();
        let bytes = resp.bytes().await?;
        let value = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
        };
        Ok((status, value))
    }

    async fn call<T: DeserializeOwned>(
        &self,
        method: Method,
        path: &str,
        body: Option<Value>,
    ) -> Result<T, ClientError> {
        let (status, value) = self.request(method, path, body).await?;
        if !status.is_success() {
            let field = |k: &str| value.get(k).and_then(Value::as_str).unwrap_or_default().to_owned();
            return Err(ClientError::Api { status: status.as_u16(), kind: field("error"), message: field("message") });
        }
        serde_json::from_value(value).map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        self.call(Method::GET, path, None).await
    }

    pub async fn post<T: DeserializeOwned>(&self, path: &str, body: Value) -> Result<T, ClientError> {
        self.call(Method::POST, path, Some(body)).await
    }

    pub async fn delete<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        self.call(Method::DELETE, path, None).await
    }

    pub async fn overview(&self) -> Result<Overview, ClientError> {
        self.get("/api/overview").await
    }

    pub async fn create_cloudlet(&self, name: &str) -> Result<Value, ClientError> {
        self.post("/api/cloudlets", json!({ "name": name })).await
    }

    pub async fn delete_cloudlet(&self, name: &str) -> Result<Value, ClientError> {
        self.delete(&format!("/api/cloudlets/{name}")).await
    }

    pub async fn add_member(&self, cloudlet: &str, host: &str) -> Result<Value, ClientError> {
        self.post(&format!("/api/cloudlets/{cloudlet}/members"), json!({ "host": host })).await
    }

    pub async fn remove_member(&self, cloudlet: &str, host: &str) -> Result<Value, ClientError> {
        self.delete(&format!("/api/cloudlets/{cloudlet}/members/{host}")).await
    }

    pub async fn move_member(&self, host: &str, to: &str) -> Result<Value, ClientError> {
        self.post(&format!("/api/members/{host}/move"), json!({ "to": to })).await
    }

    pub async fn series(&self, scope: &str, metric: &str, start: u64, end: u64) -> Result<StackedSeries, ClientError> {
        let q = format!("/api/series?scope={}&metric={metric}&start={start}&end={end}", encode_query(scope));
        self.get(&q).await
    }

    /// Submits a control job; returns its id.
    pub async fn control(&self, scope: &str, command: &str, mode: Mode) -> Result<String, ClientError> {
        let v: Value = self.post("/api/control", json!({ "scope": scope, "command": command, "mode": mode })).await?;
        v.get("job_id").and_then(Value::as_str).map(str::to_owned).ok_or_else(|| ClientError::Decode(v.to_string()))
    }

    pub async fn job(&self, job_id: &str) -> Result<JobView, ClientError> {
        self.get(&format!("/api/control/{job_id}")).await
    }

    /// Polls until the job is done.
    pub async fn await_job(&self, job_id: &str, poll: Duration) -> Result<JobView, ClientError> {
        loop {
            let j = self.job(job_id).await?;
            if j.state == JobState::Done {
                return Ok(j);
            }
            tokio::time::sleep(poll).await;
        }
    }
}

/// Percent-encodes everything outside the unreserved set.
fn encode_query(s: &str) -> String {
    s.bytes()
        .map(|b| match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => (b as char).to_string(),
            _ => format!("%{b:02X}"),
        })
        .collect()
}
