//! Typed client for the bubblerag HTTP service.

use bubblerag_core::api::{
    ApiError, EvalRequest, Health, IndexRequest, OracleRequest, QueryRequest, QueryResponse,
    SynthRequest, SynthResponse,
};
use bubblerag_core::bundle::Manifest;
use bubblerag_core::eval::EvalReport;
use bubblerag_core::oracle::OracleReport;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("cannot reach {url}: {source}")]
    Transport { url: String, source: reqwest::Error },
    /// The service answered with an error body.
    #[error("{error}")]
    Api { status: u16, error: ApiError },
    #[error("{url}: unexpected response ({status}): {message}")]
    Decode {
        url: String,
        status: u16,
        message: String,
    },
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:7878`.
    pub fn new(base: impl Into<String>) -> Self {
        let base = base.into().trim_end_matches('/').to_string();
        Self {
            base,
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn decode<T: DeserializeOwned>(
        url: String,
        resp: reqwest::Response,
    ) -> Result<T, ClientError> {
        let status = resp.status();
        let bytes = resp
            .bytes()
            .await
            .map_err(|source| ClientError::Transport {
                url: url.clone(),
                source,
            })?;
        if status.is_success() {
            return serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode {
                url,
                status: status.as_u16(),
                message: e.to_string(),
            });
        }
        match serde_json::from_slice::<ApiError>(&bytes) {
            Ok(error) => Err(ClientError::Api {
                status: status.as_u16(),
                error,
            }),
            Err(_) => Err(ClientError::Decode {
                url,
                status: status.as_u16(),
                message: String::from_utf8_lossy(&bytes).into_owned(),
            }),
        }
    }

    async fn post<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp, ClientError> {
        let url = format!("{}{path}", self.base);
        let resp = self
            .http
            .post(&url)
            .json(body)
            .send()
            .await
            .map_err(|source| ClientError::Transport {
                url: url.clone(),
                source,
            })?;
        Self::decode(url, resp).await
    }

    pub async fn health(&self) -> Result<Health, ClientError> {
        let url = format!("{}/health", self.base);
        let resp = self
            .http
            .get(&url)
            .send()
            .await
            .map_err(|source| ClientError::Transport {
                url: url.clone(),
                source,
            })?;
        Self::decode(url, resp).await
    }

    pub async fn index(&self, req: &IndexRequest) -> Result<Manifest, ClientError> {
        self.post("/v1/index", req).await
    }

    pub async fn query(&self, req: &QueryRequest) -> Result<QueryResponse, ClientError> {
        self.post("/v1/query", req).await
    }

    pub async fn synth(&self, req: &SynthRequest) -> Result<SynthResponse, ClientError> {
        self.post("/v1/synth", req).await
    }

    pub async fn eval(&self, req: &EvalRequest) -> Result<EvalReport, ClientError> {
        self.post("/v1/eval", req).await
    }

    pub async fn oracle(&self, req: &OracleRequest) -> Result<OracleReport, ClientError> {
        self.post("/v1/oracle", req).await
    }
}
