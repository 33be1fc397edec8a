//! Thin async client for the odometry service.

use klio_core::api::{
    CreateSessionRequest, CreateSessionResponse, ErrorBody, EvalRequest, ImuBatch,
    ImuBatchResponse, SCAN_CONTENT_TYPE,
};
use klio_core::config::Config;
use klio_core::dataset_io::encode_scan;
use klio_core::eval::ApeReport;
use klio_core::pipeline::{OdometryRecord, PipelineOutput, PipelineSnapshot, StampedPose};
use klio_core::pointcloud::ScanCloud;
use klio_core::preintegration::ImuSample;
use reqwest::{RequestBuilder, StatusCode};
use serde::de::DeserializeOwned;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("service answered {status}: {message}")]
    Service { status: StatusCode, message: String },
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_owned(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn send(&self, req: RequestBuilder) -> Result<reqwest::Response> {
        let resp = req.send().await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().await.unwrap_or_default();
        let message = serde_json::from_str::<ErrorBody>(&text)
            .map(|b| b.error)
            .unwrap_or(text);
        Err(ClientError::Service { status, message })
    }

    async fn json<T: DeserializeOwned>(&self, req: RequestBuilder) -> Result<T> {
        Ok(self.send(req).await?.json().await?)
    }

    pub async fn health(&self) -> Result<()> {
        self.send(self.http.get(self.url("/health")))
            .await
            .map(drop)
    }

    pub async fn create_session(&self, config: Option<Config>) -> Result<Session> {
        let body = CreateSessionRequest { config };
        let resp: CreateSessionResponse = self
            .json(self.http.post(self.url("/v1/sessions")).json(&body))
            .await?;
        Ok(Session {
            client: self.clone(),
            id: resp.session_id,
            resolved_config: resp.resolved_config,
        })
    }

    pub async fn evaluate(
        &self,
        estimate: Vec<StampedPose>,
        reference: Vec<StampedPose>,
        max_dt: f64,
    ) -> Result<ApeReport> {
        let body = EvalRequest {
            estimate,
            reference,
            max_dt,
        };
        self.json(self.http.post(self.url("/v1/eval")).json(&body))
            .await
    }
}

/// One pipeline instance on the service.
#[derive(Debug, Clone)]
pub struct Session {
    client: Client,
    id: u64,
    resolved_config: String,
}

impl Session {
    pub fn id(&self) -> u64 {
        self.id
    }

    /// The service's resolved configuration as commented TOML.
    pub fn resolved_config(&self) -> &str {
        &self.resolved_config
    }

    fn url(&self, tail: &str) -> String {
        self.client.url(&format!("/v1/sessions/{}{tail}", self.id))
    }

    pub async fn push_imu(&self, samples: Vec<ImuSample>) -> Result<ImuBatchResponse> {
        let body = ImuBatch { samples };
        let http = &self.client.http;
        self.client
            .json(http.post(self.url("/imu")).json(&body))
            .await
    }

    pub async fn push_scan(&self, cloud: &ScanCloud) -> Result<OdometryRecord> {
        let req = self
            .client
            .http
            .post(self.url("/scan"))
            .header(reqwest::header::CONTENT_TYPE, SCAN_CONTENT_TYPE)
            .body(encode_scan(cloud));
        self.client.json(req).await
    }

    pub async fn snapshot(&self) -> Result<PipelineSnapshot> {
        self.client
            .json(self.client.http.get(self.url("/snapshot")))
            .await
    }

    pub async fn finalize(&self) -> Result<PipelineOutput> {
        self.client
            .json(self.client.http.post(self.url("/finalize")))
            .await
    }

    pub async fn close(self) -> Result<()> {
        self.client
            .send(self.client.http.delete(self.url("")))
            .await
            .map(drop)
    }
}
