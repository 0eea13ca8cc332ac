//! Async client for the mini-app service.

use monc_core::api::{ApiError, BenchReport, BenchRequest, RunRequest, RunSummary};
use monc_core::registry::ComponentInfo;
use monc_core::{Error, ErrorCategory, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

fn transport_error(e: reqwest::Error) -> Error {
    Error::Remote {
        category: ErrorCategory::Communication,
        message: format!("service request failed: {e}"),
    }
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Client {
            base: base.into().trim_end_matches('/').to_owned(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T> {
        if resp.status().is_success() {
            return resp.json().await.map_err(transport_error);
        }
        let status = resp.status();
        let body = resp.bytes().await.map_err(transport_error)?;
        match serde_json::from_slice::<ApiError>(&body) {
            Ok(e) => Err(e.into()),
            Err(_) => Err(Error::Remote {
                category: ErrorCategory::Communication,
                message: format!("service replied {status}: {}", String::from_utf8_lossy(&body)),
            }),
        }
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        let resp = self
            .http
            .get(format!("{}{path}", self.base))
            .send()
            .await
            .map_err(transport_error)?;
        Self::decode(resp).await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let resp = self
            .http
            .post(format!("{}{path}", self.base))
            .json(body)
            .send()
            .await
            .map_err(transport_error)?;
        Self::decode(resp).await
    }

    /// Service version, or an error when it is unreachable.
    pub async fn health(&self) -> Result<String> {
        #[derive(serde::Deserialize)]
        struct Health {
            version: String,
        }
        let h: Health = self.get("/v1/health").await?;
        Ok(h.version)
    }

    pub async fn components(&self) -> Result<Vec<ComponentInfo>> {
        self.get("/v1/components").await
    }

    pub async fn run(&self, req: &RunRequest) -> Result<RunSummary> {
        self.post("/v1/runs", req).await
    }

    pub async fn bench(&self, req: &BenchRequest) -> Result<BenchReport> {
        self.post("/v1/bench", req).await
    }
}
