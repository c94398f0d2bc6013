//! Blocking client for the HTTP API.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;

use helix_core::isa::ProgramImage;
use helix_core::transforms::PipelineSpec;

use crate::http::AcquireResponse;
use crate::metrics::{ImageMetrics, RegistryMetrics};
use crate::policy::PoolPolicy;
use crate::registry::PutReceipt;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("registry unreachable at {url}: {reason}")]
    Unreachable { url: String, reason: String },
    #[error("registry returned {status} {code}: {error}")]
    Api { status: u16, code: String, error: String },
    #[error("bad response: {0}")]
    Decode(String),
}

impl ClientError {
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api { code, .. } => Some(code),
            _ => None,
        }
    }
}

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
    code: String,
}

pub struct RegistryClient {
    base: String,
    agent: ureq::Agent,
}

impl RegistryClient {
    pub fn new(base_url: &str) -> RegistryClient {
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        RegistryClient { base: base_url.trim_end_matches('/').to_string(), agent }
    }

    fn finish<T: DeserializeOwned>(
        &self,
        url: &str,
        result: Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<T, ClientError> {
        let mut resp =
            result.map_err(|e| ClientError::Unreachable { url: url.to_string(), reason: e.to_string() })?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| ClientError::Decode(e.to_string()))?;
        if !(200..300).contains(&status) {
            let body: ErrorBody = serde_json::from_str(&text)
                .unwrap_or(ErrorBody { error: text.clone(), code: "unknown".to_string() });
            return Err(ClientError::Api { status, code: body.code, error: body.error });
        }
        serde_json::from_str(&text).map_err(|e| ClientError::Decode(e.to_string()))
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        let url = format!("{}{path}", self.base);
        self.finish(&url, self.agent.get(&url).call())
    }

    pub fn health(&self) -> Result<(), ClientError> {
        self.get::<Value>("/healthz").map(|_| ())
    }

    pub fn put_image(
        &self,
        name: &str,
        image: &ProgramImage,
        pipeline: &PipelineSpec,
        policy: Option<&PoolPolicy>,
    ) -> Result<PutReceipt, ClientError> {
        let url = format!("{}/images/{name}", self.base);
        let body = json!({"image": B64.encode(image.to_bytes()), "pipeline": pipeline, "policy": policy});
        self.finish(&url, self.agent.put(&url).send_json(&body))
    }

    pub fn acquire(&self, name: &str) -> Result<AcquireResponse, ClientError> {
        self.get(&format!("/images/{name}/acquire"))
    }

    pub fn expire_sweep(&self, name: &str, now_ms: Option<u64>) -> Result<usize, ClientError> {
        let url = format!("{}/images/{name}/expire-sweep", self.base);
        let v: Value = self.finish(&url, self.agent.post(&url).send_json(json!({ "now_ms": now_ms })))?;
        v["expired"].as_u64().map(|n| n as usize).ok_or_else(|| ClientError::Decode("missing expired".into()))
    }

    pub fn metrics(&self, name: &str) -> Result<ImageMetrics, ClientError> {
        self.get(&format!("/images/{name}/metrics"))
    }

    pub fn metrics_all(&self) -> Result<RegistryMetrics, ClientError> {
        self.get("/metrics")
    }
}
