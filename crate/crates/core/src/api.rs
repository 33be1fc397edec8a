//! Request and response bodies of the HTTP service.

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::pipeline::StampedPose;
use crate::preintegration::ImuSample;

/// Content type of scan uploads; the body is one encoded scan file.
pub const SCAN_CONTENT_TYPE: &str = "application/octet-stream";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    /// Defaults apply when absent.
    #[serde(default)]
    pub config: Option<Config>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub session_id: u64,
    /// The configuration in effect, as commented TOML.
    pub resolved_config: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImuBatch {
    pub samples: Vec<ImuSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImuBatchResponse {
    pub accepted: usize,
    /// Samples dropped as out of order.
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub estimate: Vec<StampedPose>,
    pub reference: Vec<StampedPose>,
    #[serde(default = "default_max_dt")]
    pub max_dt: f64,
}

fn default_max_dt() -> f64 {
    crate::eval::DEFAULT_MAX_DT
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
